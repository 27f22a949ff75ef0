"""Decoders that lift four tapped token sets to full-resolution features.

The main decoder runs a top-down and a bottom-up aggregation path over the
four tapped levels, upsamples all eight path outputs with learned strided
transposed convolutions, and smooths the concatenation. The coarse variant
uses 3x3 path/smoothing convolutions and 16x total upsampling; the fine
variant uses 1x1 convolutions (no padding artifacts) and 8x upsampling.
A single-path bilinear decoder is kept as the ablation comparison arm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

VARIANTS = {
    # variant -> ((k1, s1), (k2, s2), path/smoothing conv kernel)
    "global": (((4, 2), (16, 8)), 3),
    "local": (((4, 2), (8, 4)), 1),
}


@dataclass(frozen=True)
class DecoderConfig:
    variant: str                 # "global" (coarse stage) or "local" (fine stage)
    in_channels: int             # embedding width of the paired encoder
    path_channels: int
    smooth_channels: int
    arch: str = "bimla"          # "bimla" or "mla" (bilinear comparison arm)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown decoder variant {self.variant!r}")
        if self.arch not in ("bimla", "mla"):
            raise ConfigError(f"unknown decoder arch {self.arch!r}")

    @property
    def upsample_pairs(self) -> tuple[tuple[int, int], tuple[int, int]]:
        return VARIANTS[self.variant][0]

    @property
    def conv_kernel(self) -> int:
        return VARIANTS[self.variant][1]

    @property
    def total_upsample(self) -> int:
        (_, s1), (_, s2) = self.upsample_pairs
        return s1 * s2


def reshape_tokens(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """(B, N, C) token rows to a (B, C, h, w) map, row-major like patchify."""
    h, w = grid
    b, n, c = tokens.shape
    if n != h * w:
        raise ShapeError(f"{n} tokens cannot fill a {h}x{w} grid")
    return T.transpose(T.reshape(tokens, (b, h, w, c)), (0, 3, 1, 2))


def flatten_map(m: Tensor) -> Tensor:
    """Inverse of :func:`reshape_tokens` (exact round trip)."""
    b, c, h, w = m.shape
    return T.reshape(T.transpose(m, (0, 2, 3, 1)), (b, h * w, c))


def top_down_path(maps: list[Tensor], proj: nn.ModuleList,
                  conv: nn.ModuleList) -> list[Tensor]:
    """1x1-project each level, accumulate from the deepest tap down, smooth."""
    a = [proj[i](m) for i, m in enumerate(maps)]
    acc = [None] * len(a)
    acc[-1] = a[-1]
    for i in range(len(a) - 2, -1, -1):
        acc[i] = T.add(a[i], acc[i + 1])
    return [conv[i](s) for i, s in enumerate(acc)]


def bottom_up_path(maps: list[Tensor], proj: nn.ModuleList,
                   conv: nn.ModuleList) -> list[Tensor]:
    """Mirror of the top-down path, accumulating from the shallowest tap up."""
    p = [proj[i](m) for i, m in enumerate(maps)]
    out: list[Tensor] = [conv[0](p[0])]
    for i in range(1, len(p)):
        out.append(conv[i](T.add(p[i], out[i - 1])))
    return out


def central_crop(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    th, tw = out_hw
    return T.crop2d(x, (h - th) // 2, (w - tw) // 2, th, tw)


class UpsampleBlock(nn.Module):
    """Two strided transposed convolutions, each with BN + ReLU."""

    def __init__(self, channels: int, pairs, rng: np.random.Generator):
        super().__init__()
        (k1, s1), (k2, s2) = pairs
        self.up1 = nn.DeconvBNReLU(channels, channels, k1, s1, rng)
        self.up2 = nn.DeconvBNReLU(channels, channels, k2, s2, rng)

    def forward(self, x: Tensor, out_hw: tuple[int, int]) -> Tensor:
        return central_crop(self.up2(self.up1(x)), out_hw)


class SmoothStack(nn.Module):
    """Three kxk convolutions and one 1x1, each with BN + ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator):
        super().__init__()
        pad = kernel // 2
        self.c1 = nn.ConvBNReLU(in_channels, out_channels, kernel, rng, padding=pad)
        self.c2 = nn.ConvBNReLU(out_channels, out_channels, kernel, rng, padding=pad)
        self.c3 = nn.ConvBNReLU(out_channels, out_channels, kernel, rng, padding=pad)
        self.c4 = nn.ConvBNReLU(out_channels, out_channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.c4(self.c3(self.c2(self.c1(x))))


class BiMLADecoder(nn.Module):
    """Bidirectional multi-level aggregation with learned upsampling."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c, pc = cfg.in_channels, cfg.path_channels
        k = cfg.conv_kernel
        pad = k // 2
        self.td_proj = nn.ModuleList(nn.Conv2d(c, pc, 1, rng) for _ in range(4))
        self.td_conv = nn.ModuleList(nn.Conv2d(pc, pc, k, rng, padding=pad)
                                     for _ in range(4))
        self.bu_proj = nn.ModuleList(nn.Conv2d(c, pc, 1, rng) for _ in range(4))
        self.bu_conv = nn.ModuleList(nn.Conv2d(pc, pc, k, rng, padding=pad)
                                     for _ in range(4))
        self.upsamplers = nn.ModuleList(UpsampleBlock(pc, cfg.upsample_pairs, rng)
                                        for _ in range(8))
        self.smooth = SmoothStack(8 * pc, cfg.smooth_channels, k, rng)

    def paths(self, taps: list[Tensor], grid: tuple[int, int]) -> list[Tensor]:
        """The eight token-resolution path features (top-down then bottom-up)."""
        maps = [reshape_tokens(t, grid) for t in taps]
        td = top_down_path(maps, self.td_proj, self.td_conv)
        bu = bottom_up_path(maps, self.bu_proj, self.bu_conv)
        return td + bu

    def upsample(self, paths: list[Tensor], out_hw: tuple[int, int]) -> list[Tensor]:
        return [self.upsamplers[i](p, out_hw) for i, p in enumerate(paths)]

    def forward(self, taps: list[Tensor], grid: tuple[int, int],
                out_hw: tuple[int, int]) -> tuple[Tensor, list[Tensor]]:
        paths = self.paths(taps, grid)
        ups = self.upsample(paths, out_hw)
        return self.smooth(T.concat(ups, axis=1)), paths


class MLADecoder(nn.Module):
    """Top-down-only comparison arm with fixed bilinear upsampling."""

    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c, pc = cfg.in_channels, cfg.path_channels
        k = cfg.conv_kernel
        pad = k // 2
        self.td_proj = nn.ModuleList(nn.Conv2d(c, pc, 1, rng) for _ in range(4))
        self.td_conv = nn.ModuleList(nn.Conv2d(pc, pc, k, rng, padding=pad)
                                     for _ in range(4))
        self.smooth = SmoothStack(4 * pc, cfg.smooth_channels, k, rng)

    def paths(self, taps: list[Tensor], grid: tuple[int, int]) -> list[Tensor]:
        maps = [reshape_tokens(t, grid) for t in taps]
        return top_down_path(maps, self.td_proj, self.td_conv)

    def upsample(self, paths: list[Tensor], out_hw: tuple[int, int]) -> list[Tensor]:
        return [T.bilinear_resize(p, out_hw) for p in paths]

    def forward(self, taps: list[Tensor], grid: tuple[int, int],
                out_hw: tuple[int, int]) -> tuple[Tensor, list[Tensor]]:
        paths = self.paths(taps, grid)
        ups = self.upsample(paths, out_hw)
        return self.smooth(T.concat(ups, axis=1)), paths


def build_decoder(cfg: DecoderConfig, rng: np.random.Generator) -> nn.Module:
    return BiMLADecoder(cfg, rng) if cfg.arch == "bimla" else MLADecoder(cfg, rng)
