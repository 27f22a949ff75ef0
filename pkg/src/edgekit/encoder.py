"""Patch embedding and pre-norm transformer encoder with block-output taps.

One Encoder instance serves both roles in the detector: the coarse-patch
context encoder and the fine-patch window encoder (the latter shared across
all windows of an image). Position embeddings are built per token grid at
construction time; requesting an unknown grid is a shape error rather than
an interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, PartitionError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int
    depth: int
    embed_dim: int
    heads: int
    head_dim: int
    mlp_ratio: int
    tap_indices: tuple[int, ...]  # four taps when paired with a decoder

    def __post_init__(self):
        taps = self.tap_indices
        if not taps or list(taps) != sorted(set(taps)) or taps[0] < 1:
            raise ConfigError(f"tap_indices must be strictly increasing, got {taps}")
        if taps[-1] != self.depth:
            raise ConfigError(f"last tap {taps[-1]} must equal depth {self.depth}")
        if self.depth < 1 or self.embed_dim < 2 or self.heads < 1 or self.head_dim < 1:
            raise ConfigError("encoder dimensions must be positive")

    @staticmethod
    def coarse_paper() -> "EncoderConfig":
        return EncoderConfig(patch_size=16, depth=24, embed_dim=1024, heads=16,
                             head_dim=64, mlp_ratio=4, tap_indices=(6, 12, 18, 24))

    @staticmethod
    def fine_paper() -> "EncoderConfig":
        return EncoderConfig(patch_size=8, depth=12, embed_dim=1024, heads=16,
                             head_dim=64, mlp_ratio=4, tap_indices=(3, 6, 9, 12))

    @staticmethod
    def coarse_toy() -> "EncoderConfig":
        return EncoderConfig(patch_size=16, depth=8, embed_dim=64, heads=8,
                             head_dim=8, mlp_ratio=4, tap_indices=(2, 4, 6, 8))

    @staticmethod
    def fine_toy() -> "EncoderConfig":
        return EncoderConfig(patch_size=8, depth=4, embed_dim=64, heads=8,
                             head_dim=8, mlp_ratio=4, tap_indices=(1, 2, 3, 4))


class TokenSequence(NamedTuple):
    tokens: Tensor          # (B, N, C)
    grid: tuple[int, int]   # rows x cols, rows * cols == N


def flatten_patches(image: np.ndarray, patch: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Split (B, 3, H, W) into (B, N, patch*patch*3), channel-last per patch."""
    b, c, h, w = image.shape
    if h % patch or w % patch:
        raise PartitionError(
            f"image {h}x{w} not divisible by patch size {patch}"
        )
    gh, gw = h // patch, w // patch
    x = image.reshape(b, c, gh, patch, gw, patch)
    x = x.transpose(0, 2, 4, 3, 5, 1)  # B, gh, gw, py, px, ch
    return x.reshape(b, gh * gw, patch * patch * c), (gh, gw)


def add_position(seq: TokenSequence, pos: Tensor) -> TokenSequence:
    """Add learned position embeddings; no resizing across grids."""
    n, c = seq.tokens.shape[-2], seq.tokens.shape[-1]
    if pos.shape != (n, c):
        raise ShapeError(
            f"position embedding {pos.shape} does not match tokens ({n}, {c})"
        )
    return TokenSequence(T.add(seq.tokens, pos), seq.grid)


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product attention with per-head projection matrices."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        c, u, m = cfg.embed_dim, cfg.head_dim, cfg.heads
        self.heads = m
        self.scale = 1.0 / math.sqrt(u)
        self.w_q = nn.ModuleList(nn.Linear(c, u, rng, bias=False) for _ in range(m))
        self.w_k = nn.ModuleList(nn.Linear(c, u, rng, bias=False) for _ in range(m))
        self.w_v = nn.ModuleList(nn.Linear(c, u, rng, bias=False) for _ in range(m))
        self.w_o = nn.Linear(m * u, c, rng, bias=False)

    def head_weights(self, z: Tensor, m: int) -> Tensor:
        """Attention matrix of head ``m`` (rows sum to 1)."""
        q = self.w_q[m](z)
        k = self.w_k[m](z)
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), self.scale)
        return T.softmax(scores, axis=-1)

    def forward(self, z: Tensor) -> Tensor:
        outs = []
        for m in range(self.heads):
            attn = self.head_weights(z, m)
            outs.append(T.matmul(attn, self.w_v[m](z)))
        return self.w_o(T.concat(outs, axis=-1))


class TransformerBlock(nn.Module):
    """Pre-norm block: z + MSA(LN(z)) followed by z + MLP(LN(z))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        c = cfg.embed_dim
        hidden = cfg.mlp_ratio * c
        self.norm1 = nn.LayerNorm(c)
        self.attn = MultiHeadSelfAttention(cfg, rng)
        self.norm2 = nn.LayerNorm(c)
        self.fc1 = nn.Linear(c, hidden, rng)
        self.fc2 = nn.Linear(hidden, c, rng)

    def forward(self, z: Tensor) -> Tensor:
        z = T.add(z, self.attn(self.norm1(z)))
        return T.add(z, self.fc2(T.gelu(self.fc1(self.norm2(z)))))


class Encoder(nn.Module):
    """Patch projection, position embeddings, and tapped transformer stack.

    ``grids`` lists every token grid the encoder must accept; the first is
    the primary (trained) one, additional grids get fixed random embeddings
    kept as buffers so that scaled inference stays deterministic.
    """

    def __init__(self, cfg: EncoderConfig, grids: list[tuple[int, int]],
                 rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c = cfg.embed_dim
        self.proj = nn.Linear(cfg.patch_size * cfg.patch_size * 3, c, rng)
        primary = grids[0]
        self.pos = Tensor(rng.normal(0.0, 0.02, size=(primary[0] * primary[1], c)),
                          requires_grad=True)
        self._pos_grids: dict[tuple[int, int], Tensor] = {primary: self.pos}
        for g in grids[1:]:
            if g in self._pos_grids:
                continue
            buf = rng.normal(0.0, 0.02, size=(g[0] * g[1], c))
            self.register_buffer(f"pos_{g[0]}x{g[1]}", buf)
            self._pos_grids[g] = Tensor(buf)
        self.blocks = nn.ModuleList(TransformerBlock(cfg, rng)
                                    for _ in range(cfg.depth))

    def embed(self, image: np.ndarray) -> TokenSequence:
        patches, grid = flatten_patches(image, self.cfg.patch_size)
        seq = TokenSequence(self.proj(Tensor(patches)), grid)
        pos = self._pos_grids.get(grid)
        if pos is None:
            raise ShapeError(
                f"no position embedding built for token grid {grid}; "
                f"known grids: {sorted(self._pos_grids)}"
            )
        return add_position(seq, pos)

    def encode(self, seq: TokenSequence) -> list[Tensor]:
        """Run all blocks, returning outputs at the configured tap indices."""
        z = seq.tokens
        taps = []
        want = set(self.cfg.tap_indices)
        for i, block in enumerate(self.blocks, start=1):
            z = block(z)
            if i in want:
                taps.append(z)
        return taps

    def forward(self, image: np.ndarray) -> tuple[list[Tensor], tuple[int, int]]:
        seq = self.embed(image)
        return self.encode(seq), seq.grid
