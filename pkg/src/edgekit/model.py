"""Two-stage edge detector: coarse context stage, windowed fine stage, fusion.

Stage one encodes the whole image on coarse patches and decodes pixel-level
context features plus a sigmoid edge head. Stage two splits the image into
non-overlapping windows, runs a shared fine-patch encoder per window,
reassembles the window token grids into whole-image grids, decodes, fuses
with the stage-one features, and predicts the final edge map.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .decoder import DecoderConfig, build_decoder
from .encoder import Encoder, EncoderConfig
from .errors import ConfigError, PartitionError, ShapeError, UsageError
from .tensor import Tensor

STAGE_MODES = ("two_stage", "stage1_only")


def _scaled_extent(extent: int, scale: float, multiple: int) -> int:
    """Scale and round to the nearest positive multiple (at least one unit)."""
    return max(multiple, int(round(extent * scale / multiple)) * multiple)


@dataclass(frozen=True)
class ModelConfig:
    input_hw: tuple[int, int] = (64, 64)
    global_encoder: EncoderConfig = field(default_factory=EncoderConfig.coarse_toy)
    local_encoder: EncoderConfig = field(default_factory=EncoderConfig.fine_toy)
    global_decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(
        variant="global", in_channels=64, path_channels=16, smooth_channels=16))
    local_decoder: DecoderConfig = field(default_factory=lambda: DecoderConfig(
        variant="local", in_channels=64, path_channels=16, smooth_channels=16))
    window_divisor: int = 2
    ffm_enabled: bool = True
    stage_mode: str = "two_stage"
    side_channels: int = 4
    scales: tuple[float, ...] = (0.5, 1.0, 1.5)

    def __post_init__(self):
        h, w = self.input_hw
        gp = self.global_encoder.patch_size
        lp = self.local_encoder.patch_size
        d = self.window_divisor
        if self.stage_mode not in STAGE_MODES:
            raise ConfigError(f"stage_mode must be one of {STAGE_MODES}")
        if len(self.global_encoder.tap_indices) != 4:
            raise ConfigError("coarse encoder must expose exactly 4 taps")
        if len(self.local_encoder.tap_indices) != 4:
            raise ConfigError("fine encoder must expose exactly 4 taps")
        if d < 1:
            raise ConfigError(f"window_divisor must be positive, got {d}")
        if h % gp or w % gp:
            raise ConfigError(f"input {h}x{w} not divisible by coarse patch {gp}")
        if h % (d * lp) or w % (d * lp):
            raise ConfigError(
                f"input {h}x{w} not divisible by window_divisor*fine patch {d * lp}"
            )
        if self.global_decoder.total_upsample != gp:
            raise ConfigError("coarse decoder upsampling must equal coarse patch size")
        if self.local_decoder.total_upsample != lp:
            raise ConfigError("fine decoder upsampling must equal fine patch size")
        if self.global_decoder.in_channels != self.global_encoder.embed_dim:
            raise ConfigError("coarse decoder width must match encoder embed dim")
        if self.local_decoder.in_channels != self.local_encoder.embed_dim:
            raise ConfigError("fine decoder width must match encoder embed dim")
        if not self.scales:
            raise ConfigError("scale set must not be empty")

    @staticmethod
    def toy(**overrides) -> "ModelConfig":
        return replace(ModelConfig(), **overrides) if overrides else ModelConfig()

    def scaled_hw(self, scale: float) -> tuple[int, int]:
        gp = self.global_encoder.patch_size
        mult = max(gp, self.window_divisor * self.local_encoder.patch_size)
        return (_scaled_extent(self.input_hw[0], scale, mult),
                _scaled_extent(self.input_hw[1], scale, mult))

    def canonical_text(self) -> str:
        """Stable key=value rendering used for checkpoint digests."""
        enc = lambda e, p: {f"{p}_patch": e.patch_size, f"{p}_depth": e.depth,
                            f"{p}_dim": e.embed_dim, f"{p}_heads": e.heads,
                            f"{p}_head_dim": e.head_dim, f"{p}_mlp_ratio": e.mlp_ratio,
                            f"{p}_taps": ",".join(map(str, e.tap_indices))}
        dec = lambda d, p: {f"{p}_path_channels": d.path_channels,
                            f"{p}_smooth_channels": d.smooth_channels,
                            f"{p}_arch": d.arch}
        kv: dict[str, object] = {
            "input_hw": f"{self.input_hw[0]}x{self.input_hw[1]}",
            "window_divisor": self.window_divisor,
            "ffm_enabled": int(self.ffm_enabled),
            "stage_mode": self.stage_mode,
            "side_channels": self.side_channels,
            "scales": ",".join(f"{s:g}" for s in self.scales),
        }
        kv.update(enc(self.global_encoder, "global"))
        kv.update(enc(self.local_encoder, "local"))
        kv.update(dec(self.global_decoder, "global"))
        kv.update(dec(self.local_decoder, "local"))
        return "".join(f"{k}={kv[k]}\n" for k in sorted(kv))

    @staticmethod
    def from_canonical_text(text: str) -> "ModelConfig":
        kv = {}
        for line in text.splitlines():
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                kv[key] = value

        def taps(key):
            return tuple(int(v) for v in kv[key].split(","))

        def enc(p):
            return EncoderConfig(
                patch_size=int(kv[f"{p}_patch"]), depth=int(kv[f"{p}_depth"]),
                embed_dim=int(kv[f"{p}_dim"]), heads=int(kv[f"{p}_heads"]),
                head_dim=int(kv[f"{p}_head_dim"]),
                mlp_ratio=int(kv[f"{p}_mlp_ratio"]), tap_indices=taps(f"{p}_taps"))

        def dec(p, variant):
            return DecoderConfig(
                variant=variant, in_channels=int(kv[f"{p}_dim"]),
                path_channels=int(kv[f"{p}_path_channels"]),
                smooth_channels=int(kv[f"{p}_smooth_channels"]),
                arch=kv[f"{p}_arch"])

        h, _, w = kv["input_hw"].partition("x")
        return ModelConfig(
            input_hw=(int(h), int(w)),
            global_encoder=enc("global"),
            local_encoder=enc("local"),
            global_decoder=dec("global", "global"),
            local_decoder=dec("local", "local"),
            window_divisor=int(kv["window_divisor"]),
            ffm_enabled=bool(int(kv["ffm_enabled"])),
            stage_mode=kv["stage_mode"],
            side_channels=int(kv["side_channels"]),
            scales=tuple(float(s) for s in kv["scales"].split(",")),
        )


def partition_windows(image: np.ndarray, divisor: int = 2) -> list[np.ndarray]:
    """Split (B, 3, H, W) into divisor^2 windows, row-major order."""
    h, w = image.shape[-2], image.shape[-1]
    if h % divisor or w % divisor:
        raise PartitionError(
            f"image {h}x{w} not divisible into {divisor}x{divisor} windows"
        )
    wh, ww = h // divisor, w // divisor
    return [image[..., iy * wh:(iy + 1) * wh, ix * ww:(ix + 1) * ww]
            for iy in range(divisor) for ix in range(divisor)]


def reassemble_windows(windows: list[np.ndarray], divisor: int = 2) -> np.ndarray:
    rows = [np.concatenate(windows[iy * divisor:(iy + 1) * divisor], axis=-1)
            for iy in range(divisor)]
    return np.concatenate(rows, axis=-2)


class SideHead(nn.Module):
    """Upsamples one path feature to an auxiliary full-resolution edge map."""

    def __init__(self, path_channels: int, side_channels: int, pairs,
                 rng: np.random.Generator):
        super().__init__()
        (k1, s1), (k2, s2) = pairs
        self.up1 = nn.DeconvBNReLU(path_channels, side_channels, k1, s1, rng)
        self.up2 = nn.DeconvBNReLU(side_channels, side_channels, k2, s2, rng)
        self.out = nn.Conv2d(side_channels, 1, 1, rng)

    def forward(self, path: Tensor, out_hw: tuple[int, int]) -> Tensor:
        from .decoder import central_crop

        up = central_crop(self.up2(self.up1(path)), out_hw)
        return T.sigmoid(self.out(up))


class FeatureFusion(nn.Module):
    """Spatial feature transform: scale/shift the fine features by maps
    generated from the coarse features, then smooth with two 3x3 convs."""

    def __init__(self, global_channels: int, local_channels: int,
                 rng: np.random.Generator):
        super().__init__()
        self.scale_gen = nn.Conv2d(global_channels, local_channels, 1, rng)
        self.shift_gen = nn.Conv2d(global_channels, local_channels, 1, rng)
        # start near the identity modulation: scale about 1, shift about 0
        self.scale_gen.weight.data *= 0.1
        self.scale_gen.bias.data[:] = 1.0
        self.shift_gen.weight.data *= 0.1
        self.smooth1 = nn.ConvBNReLU(local_channels, local_channels, 3, rng, padding=1)
        self.smooth2 = nn.ConvBNReLU(local_channels, local_channels, 3, rng, padding=1)

    def modulate(self, f_g: Tensor, f_r: Tensor) -> Tensor:
        if f_g.shape[2:] != f_r.shape[2:]:
            raise ShapeError(
                f"fusion inputs disagree spatially: {f_g.shape} vs {f_r.shape}"
            )
        return T.add(T.mul(self.scale_gen(f_g), f_r), self.shift_gen(f_g))

    def forward(self, f_g: Tensor, f_r: Tensor) -> Tensor:
        return self.smooth2(self.smooth1(self.modulate(f_g, f_r)))


class GlobalStage(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        gp = cfg.global_encoder.patch_size
        grids = [(hw[0] // gp, hw[1] // gp)
                 for hw in ([cfg.input_hw] + [cfg.scaled_hw(s) for s in cfg.scales])]
        self.encoder = Encoder(cfg.global_encoder, grids, rng)
        self.decoder = build_decoder(cfg.global_decoder, rng)
        self.head = nn.Conv2d(cfg.global_decoder.smooth_channels, 1, 1, rng)
        n_sides = 8 if cfg.global_decoder.arch == "bimla" else 4
        self.sides = nn.ModuleList(
            SideHead(cfg.global_decoder.path_channels, cfg.side_channels,
                     cfg.global_decoder.upsample_pairs, rng)
            for _ in range(n_sides)
        )

    def forward(self, image: np.ndarray):
        out_hw = (image.shape[-2], image.shape[-1])
        taps, grid = self.encoder(image)
        f_g, paths = self.decoder(taps, grid, out_hw)
        e_g = T.sigmoid(self.head(f_g))
        return f_g, e_g, paths


class LocalStage(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        lp = cfg.local_encoder.patch_size
        d = cfg.window_divisor
        grids = [((hw[0] // d) // lp, (hw[1] // d) // lp)
                 for hw in ([cfg.input_hw] + [cfg.scaled_hw(s) for s in cfg.scales])]
        self.encoder = Encoder(cfg.local_encoder, grids, rng)
        self.decoder = build_decoder(cfg.local_decoder, rng)
        g_ch = cfg.global_decoder.smooth_channels
        l_ch = cfg.local_decoder.smooth_channels
        self.fusion = FeatureFusion(g_ch, l_ch, rng)
        self.concat_fuse = nn.Conv2d(g_ch + l_ch, l_ch, 1, rng)
        self.head = nn.Conv2d(l_ch, 1, 1, rng)
        n_sides = 8 if cfg.local_decoder.arch == "bimla" else 4
        self.sides = nn.ModuleList(
            SideHead(cfg.local_decoder.path_channels, cfg.side_channels,
                     cfg.local_decoder.upsample_pairs, rng)
            for _ in range(n_sides)
        )

    def window_taps(self, image: np.ndarray) -> tuple[list[Tensor], tuple[int, int]]:
        """Per-window taps reassembled into whole-image token grids."""
        d = self.cfg.window_divisor
        windows = partition_windows(image, d)
        b = image.shape[0]
        batched = np.concatenate([w[:, None] for w in windows], axis=1)
        batched = batched.reshape(b * d * d, *image.shape[1:-2],
                                  image.shape[-2] // d, image.shape[-1] // d)
        taps, (gh, gw) = self.encoder(batched)
        c = self.cfg.local_encoder.embed_dim
        merged = []
        for tap in taps:
            t = T.reshape(tap, (b, d, d, gh, gw, c))
            t = T.transpose(t, (0, 1, 3, 2, 4, 5))
            merged.append(T.reshape(t, (b, d * gh * d * gw, c)))
        return merged, (d * gh, d * gw)

    def forward(self, image: np.ndarray, f_g: Tensor | None,
                ffm_enabled: bool | None = None):
        if f_g is None:
            raise UsageError("stage two requires the stage-one feature map")
        use_ffm = self.cfg.ffm_enabled if ffm_enabled is None else ffm_enabled
        out_hw = (image.shape[-2], image.shape[-1])
        taps, grid = self.window_taps(image)
        f_r, paths = self.decoder(taps, grid, out_hw)
        if use_ffm:
            fused = self.fusion(f_g, f_r)
        else:
            fused = self.concat_fuse(T.concat([f_g, f_r], axis=1))
        e_r = T.sigmoid(self.head(fused))
        return f_r, e_r, paths, fused


class EdgeDetector(nn.Module):
    """Full pipeline with stage-one context and stage-two refinement."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.global_stage = GlobalStage(cfg, rng)
        self.local_stage = LocalStage(cfg, rng)

    # -- stage drivers -----------------------------------------------------

    def run_stage1(self, image: np.ndarray):
        if image.ndim != 4:
            raise ShapeError(f"expected (B, 3, H, W) input, got {image.shape}")
        return self.global_stage(image)

    def run_stage2(self, image: np.ndarray, f_g: Tensor | None,
                   ffm_enabled: bool | None = None):
        return self.local_stage(image, f_g, ffm_enabled)

    def side_outputs(self, paths: list[Tensor], stage: str,
                     out_hw: tuple[int, int]) -> list[Tensor]:
        heads = self.global_stage.sides if stage == "global" else self.local_stage.sides
        if len(paths) != len(heads):
            raise ShapeError(f"expected {len(heads)} path features, got {len(paths)}")
        return [heads[i](p, out_hw) for i, p in enumerate(paths)]

    # -- parameter groups ---------------------------------------------------

    def stage1_parameters(self) -> list[tuple[str, Tensor]]:
        return [("global_stage." + n, p)
                for n, p in self.global_stage.named_parameters()]

    def stage2_parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable stage-two parameters, excluding the inactive fusion arm."""
        unused = "fusion." if not self.cfg.ffm_enabled else "concat_fuse."
        return [("local_stage." + n, p)
                for n, p in self.local_stage.named_parameters()
                if not n.startswith(unused)]

    def freeze_stage1(self) -> None:
        """Stop gradients and batch-norm statistics updates for stage one."""
        self.global_stage.set_requires_grad(False)
        self.global_stage.eval()

    # -- persistence ---------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        state = {n: p.data for n, p in self.named_parameters()}
        state.update({n: b for n, b in self.named_buffers()})
        return state

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise UsageError(
                f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}"
            )
        for name, p in self.named_parameters():
            if arrays[name].shape != p.data.shape:
                raise ShapeError(f"tensor {name} has shape {arrays[name].shape}, "
                                 f"expected {p.data.shape}")
            p.data = arrays[name].astype(np.float64)
        for name, b in self.named_buffers():
            b[...] = arrays[name].astype(np.float64)

    # -- inference -----------------------------------------------------------

    def infer(self, image: np.ndarray) -> np.ndarray:
        """Edge probabilities (B, 1, H, W) in eval mode, gradient-free."""
        squeeze = image.ndim == 3
        if squeeze:
            image = image[None]
        self.eval()
        with T.no_grad():
            f_g, e_g, _ = self.run_stage1(image)
            if self.cfg.stage_mode == "stage1_only":
                out = e_g.data
            else:
                _, e_r, _, _ = self.run_stage2(image, f_g)
                out = e_r.data
        return out[0] if squeeze else out

    def infer_multiscale(self, image: np.ndarray,
                         scales: tuple[float, ...] | None = None) -> np.ndarray:
        scales = tuple(self.cfg.scales if scales is None else scales)
        if not scales:
            raise ConfigError("multiscale inference needs at least one scale")
        squeeze = image.ndim == 3
        if squeeze:
            image = image[None]
        h, w = image.shape[-2], image.shape[-1]
        acc = np.zeros((image.shape[0], 1, h, w))
        with T.no_grad():
            for s in scales:
                sh, sw = self.cfg.scaled_hw(s)
                scaled = (image if (sh, sw) == (h, w)
                          else T.bilinear_resize(Tensor(image), (sh, sw)).data)
                e = self.infer(scaled)
                if e.shape[-2:] != (h, w):
                    e = T.bilinear_resize(Tensor(e), (h, w)).data
                acc += e
        acc /= len(scales)
        return acc[0] if squeeze else acc
