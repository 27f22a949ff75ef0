"""Line-oriented key=value run configuration with a strict schema.

Every key has a documented default; unknown keys are rejected so typos fail
loudly. `#` starts a comment, blank lines are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(","))


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(","))


# key -> (parser, default, description)
SCHEMA: dict[str, tuple] = {
    "input_size": (int, 64, "square side of model inputs and training crops"),
    "embed_dim": (int, 64, "token embedding width of both encoders"),
    "heads": (int, 8, "attention heads per block"),
    "head_dim": (int, 8, "per-head query/key/value width"),
    "mlp_ratio": (int, 4, "transformer MLP hidden width / embed_dim"),
    "global_depth": (int, 8, "blocks in the coarse-stage encoder"),
    "global_taps": (_parse_ints, (2, 4, 6, 8), "tapped block indices, coarse stage"),
    "local_depth": (int, 4, "blocks in the fine-stage encoder"),
    "local_taps": (_parse_ints, (1, 2, 3, 4), "tapped block indices, fine stage"),
    "path_channels": (int, 16, "decoder aggregation-path width"),
    "smooth_channels": (int, 16, "decoder output feature width"),
    "side_channels": (int, 4, "width inside auxiliary side heads"),
    "decoder_arch": (str, "bimla", "decoder kind: bimla or mla (ablation arm)"),
    "ffm": (_parse_bool, True, "fuse stages with the feature-transform module"),
    "stage_mode": (str, "two_stage", "two_stage or stage1_only"),
    "window_divisor": (int, 2, "fine stage window grid divisor"),
    "scales": (_parse_floats, (0.5, 1.0, 1.5), "multi-scale inference factors"),
    "eta": (float, 0.3, "annotator consensus threshold"),
    "lambda": (float, 0.4, "side-output loss weight"),
    "lr": (float, 5e-4, "base learning rate (polynomial decay)"),
    "lr_power": (float, 0.9, "polynomial decay exponent"),
    "momentum": (float, 0.9, "SGD momentum"),
    "weight_decay": (float, 2e-4, "L2 weight decay folded into the velocity"),
    "iterations": (int, 600, "iterations per training stage"),
    "batch_size": (int, 2, "training batch size"),
    "crop": (int, 64, "random crop side (must equal input_size)"),
    "seed": (int, 0, "seed for weights, batches, and augmentation"),
    "flip": (_parse_bool, True, "random horizontal flips during training"),
    "ignore_band": (_parse_bool, False,
                    "exclude sub-threshold annotator pixels from the loss"),
    "eval_tolerance": (float, 0.0075, "match radius as a diagonal fraction"),
    "data_dir": (str, "data", "dataset directory (images/ + gt/)"),
    "out_dir": (str, "runs", "output directory for checkpoints and CSVs"),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @staticmethod
    def defaults() -> "RunConfig":
        return RunConfig({k: v for k, (_, v, _) in SCHEMA.items()})

    @staticmethod
    def parse(text: str) -> "RunConfig":
        values = {k: v for k, (_, v, _) in SCHEMA.items()}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
            if key not in SCHEMA:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            parser = SCHEMA[key][0]
            try:
                values[key] = parser(value)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
        return RunConfig(values)

    @staticmethod
    def load(path) -> "RunConfig":
        return RunConfig.parse(Path(path).read_text())

    def model_config(self) -> ModelConfig:
        v = self.values
        size = v["input_size"]
        coarse = EncoderConfig(patch_size=16, depth=v["global_depth"],
                               embed_dim=v["embed_dim"], heads=v["heads"],
                               head_dim=v["head_dim"], mlp_ratio=v["mlp_ratio"],
                               tap_indices=tuple(v["global_taps"]))
        fine = EncoderConfig(patch_size=8, depth=v["local_depth"],
                             embed_dim=v["embed_dim"], heads=v["heads"],
                             head_dim=v["head_dim"], mlp_ratio=v["mlp_ratio"],
                             tap_indices=tuple(v["local_taps"]))
        gdec = DecoderConfig(variant="global", in_channels=v["embed_dim"],
                             path_channels=v["path_channels"],
                             smooth_channels=v["smooth_channels"],
                             arch=v["decoder_arch"])
        ldec = DecoderConfig(variant="local", in_channels=v["embed_dim"],
                             path_channels=v["path_channels"],
                             smooth_channels=v["smooth_channels"],
                             arch=v["decoder_arch"])
        return ModelConfig(input_hw=(size, size), global_encoder=coarse,
                           local_encoder=fine, global_decoder=gdec,
                           local_decoder=ldec,
                           window_divisor=v["window_divisor"],
                           ffm_enabled=v["ffm"], stage_mode=v["stage_mode"],
                           side_channels=v["side_channels"],
                           scales=tuple(v["scales"]))

    def train_config(self) -> TrainConfig:
        v = self.values
        if v["crop"] != v["input_size"]:
            raise ConfigError(
                f"crop {v['crop']} must equal input_size {v['input_size']}"
            )
        return TrainConfig(eta=v["eta"], lam=v["lambda"], base_lr=v["lr"],
                           iterations_stage1=v["iterations"],
                           iterations_stage2=v["iterations"],
                           batch_size=v["batch_size"], crop=v["crop"],
                           seed=v["seed"], flip=v["flip"],
                           use_ignore_band=v["ignore_band"],
                           momentum=v["momentum"],
                           weight_decay=v["weight_decay"],
                           lr_power=v["lr_power"])


def default_config_text() -> str:
    """All keys with defaults and help comments, ready to edit."""
    lines = []
    for key, (_, default, help_text) in SCHEMA.items():
        if isinstance(default, tuple):
            default = ",".join(str(x) for x in default)
        elif isinstance(default, bool):
            default = "true" if default else "false"
        lines.append(f"{key}={default}  # {help_text}")
    return "\n".join(lines) + "\n"
