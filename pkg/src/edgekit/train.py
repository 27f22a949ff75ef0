"""Label consensus, class-balanced edge loss, SGD, and two-phase training.

Phase one optimizes the coarse context stage against the consensus labels
(main head plus weighted side outputs). Phase two freezes every stage-one
parameter, including batch-norm running statistics, and optimizes the
windowed refinement stage the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ShapeError, UsageError
from .model import EdgeDetector
from .tensor import Tensor

CLAMP_EPS = 1e-7


@dataclass
class AnnotationStack:
    """Binary maps from several annotators plus the derived consensus."""

    annotator_maps: list[np.ndarray]
    consensus: np.ndarray

    @property
    def probability(self) -> np.ndarray:
        return np.mean([m.astype(np.float64) for m in self.annotator_maps], axis=0)


def consensus_labels(annotator_maps: list[np.ndarray], eta: float) -> np.ndarray:
    """Positive where the mean annotator vote reaches ``eta``, else negative."""
    if not annotator_maps:
        raise InputError("need at least one annotator map")
    if not 0.0 < eta <= 1.0:
        raise ConfigError(f"consensus threshold must lie in (0, 1], got {eta}")
    prob = np.mean([m.astype(np.float64) for m in annotator_maps], axis=0)
    return (prob >= eta).astype(np.float64)


def ignore_band(annotator_maps: list[np.ndarray], eta: float) -> np.ndarray:
    """Pixels with some but sub-threshold votes (optional loss exclusion)."""
    prob = np.mean([m.astype(np.float64) for m in annotator_maps], axis=0)
    return (prob > 0.0) & (prob < eta)


def class_balance(labels: np.ndarray) -> tuple[float, float]:
    """Negative-pixel weight alpha and the positive fraction, complementary
    by construction (the pair sums to 1 exactly)."""
    y = np.asarray(labels, dtype=np.float64)
    pos = float(y.sum())
    total = float(y.size)
    alpha = (total - pos) / total if total else 0.0
    return alpha, 1.0 - alpha


def weighted_bce(edge: Tensor, labels: np.ndarray,
                 ignore: np.ndarray | None = None) -> Tensor:
    """Class-balanced binary cross entropy, summed over pixels.

    Positives are weighted by the negative-pixel fraction and vice versa, so
    the two classes contribute comparably despite edge sparsity. Inputs with
    a leading batch axis are averaged over the batch; the balance weight is
    computed per item. ``ignore`` marks pixels excluded from both the loss
    and the balance weight.
    """
    y = np.asarray(labels, dtype=np.float64)
    if tuple(edge.shape) != y.shape:
        raise ShapeError(f"prediction {tuple(edge.shape)} vs labels {y.shape}")

    batched = y.ndim > 2
    items = y.shape[0] if batched else 1
    valid = np.ones_like(y) if ignore is None else (~np.asarray(ignore, bool)).astype(np.float64)

    axes = tuple(range(1, y.ndim)) if batched else tuple(range(y.ndim))
    pos = (y * valid).sum(axis=axes, keepdims=True)
    neg = ((1.0 - y) * valid).sum(axis=axes, keepdims=True)
    total = pos + neg
    alpha = np.divide(neg, total, out=np.zeros_like(neg), where=total > 0)

    w_pos = alpha * y * valid
    w_neg = (1.0 - alpha) * (1.0 - y) * valid
    e = T.clip(edge, CLAMP_EPS, 1.0 - CLAMP_EPS)
    ll = T.add(T.mul(T.log(e), w_pos), T.mul(T.log(T.sub(1.0, e)), w_neg))
    return T.mul(T.tensor_sum(ll), -1.0 / items)


def stage_loss(edge: Tensor, sides: list[Tensor], labels: np.ndarray,
               lam: float = 0.4, ignore: np.ndarray | None = None) -> Tensor:
    """Main-head loss plus ``lam`` times the summed side-output losses."""
    loss = weighted_bce(edge, labels, ignore)
    for s in sides:
        loss = T.add(loss, T.mul(weighted_bce(s, labels, ignore), lam))
    return loss


class SGD:
    """Momentum SGD with decoupled-from-nothing weight decay folded into the
    velocity, under a polynomial learning-rate schedule."""

    def __init__(self, params: list[tuple[str, Tensor]], base_lr: float,
                 max_iterations: int, momentum: float = 0.9,
                 weight_decay: float = 2e-4, power: float = 0.9):
        self.params = list(params)
        self.base_lr = base_lr
        self.max_iterations = max_iterations
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.power = power
        self.iteration = 0
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def lr(self, iteration: int | None = None) -> float:
        it = self.iteration if iteration is None else iteration
        frac = 1.0 - it / self.max_iterations
        return self.base_lr * max(frac, 0.0) ** self.power

    def step(self) -> None:
        rate = self.lr()
        for name, p in self.params:
            if p.grad is None:
                raise UsageError(f"parameter {name} has no gradient; "
                                 "run backward before stepping")
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad + self.weight_decay * p.data
            p.data -= rate * v
        self.iteration += 1

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    eta: float = 0.3
    lam: float = 0.4
    base_lr: float = 5e-4
    iterations_stage1: int = 600
    iterations_stage2: int = 600
    batch_size: int = 2
    crop: int = 64
    seed: int = 0
    flip: bool = True
    use_ignore_band: bool = False
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_power: float = 0.9


@dataclass
class Scene:
    """One training example: image, annotator stack, consensus labels."""

    image: np.ndarray                 # (3, H, W) in [0, 1]
    annotations: AnnotationStack
    ignore: np.ndarray | None = None  # optional sub-threshold exclusion band

    @property
    def labels(self) -> np.ndarray:
        return self.annotations.consensus


@dataclass
class TrainResult:
    history: list[tuple[int, int, float]] = field(default_factory=list)
    stage1_digest_after_phase1: str = ""
    stage1_digest_final: str = ""

    def stage_losses(self, stage: int) -> list[float]:
        return [l for _, s, l in self.history if s == stage]


def stage1_digest(model: EdgeDetector) -> str:
    """SHA-256 over stage-one parameters and buffers, in name order."""
    import hashlib

    h = hashlib.sha256()
    for name, p in sorted(model.global_stage.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    for name, b in sorted(model.global_stage.named_buffers()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()


def _sample_batch(scenes: list[Scene], cfg: TrainConfig,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    images, labels, ignores = [], [], []
    any_ignore = cfg.use_ignore_band
    for _ in range(cfg.batch_size):
        scene = scenes[int(rng.integers(len(scenes)))]
        h, w = scene.image.shape[1:]
        top = int(rng.integers(h - cfg.crop + 1))
        left = int(rng.integers(w - cfg.crop + 1))
        img = scene.image[:, top:top + cfg.crop, left:left + cfg.crop]
        lab = scene.labels[top:top + cfg.crop, left:left + cfg.crop]
        ign = None
        if any_ignore and scene.ignore is not None:
            ign = scene.ignore[top:top + cfg.crop, left:left + cfg.crop]
        if cfg.flip and rng.random() < 0.5:
            img = img[:, :, ::-1]
            lab = lab[:, ::-1]
            ign = None if ign is None else ign[:, ::-1]
        images.append(img)
        labels.append(lab)
        ignores.append(ign)
    x = np.ascontiguousarray(np.stack(images))
    y = np.stack(labels)[:, None]
    if any_ignore and all(i is not None for i in ignores):
        return x, y, np.stack(ignores)[:, None]
    return x, y, None


def train_two_phase(model: EdgeDetector, scenes: list[Scene],
                    cfg: TrainConfig) -> TrainResult:
    """Optimize stage one, freeze it bit-exactly, then optimize stage two."""
    if not scenes:
        raise InputError("training set is empty")
    for s in scenes:
        if cfg.crop > s.image.shape[1] or cfg.crop > s.image.shape[2]:
            raise ConfigError(
                f"crop {cfg.crop} exceeds image {s.image.shape[1:]}"
            )
    if (cfg.crop, cfg.crop) != model.cfg.input_hw:
        raise ConfigError(
            f"crop {cfg.crop} must match model input {model.cfg.input_hw}"
        )

    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    out_hw = (cfg.crop, cfg.crop)

    model.train()
    opt1 = SGD(model.stage1_parameters(), cfg.base_lr, cfg.iterations_stage1,
               momentum=cfg.momentum, weight_decay=cfg.weight_decay,
               power=cfg.lr_power)
    for it in range(cfg.iterations_stage1):
        x, y, ign = _sample_batch(scenes, cfg, rng)
        with T.fresh_tape():
            f_g, e_g, paths = model.run_stage1(x)
            sides = model.side_outputs(paths, "global", out_hw)
            loss = stage_loss(e_g, sides, y, cfg.lam, ign)
            T.backward(loss)
        opt1.step()
        opt1.zero_grad()
        result.history.append((it, 1, loss.item()))

    model.freeze_stage1()
    result.stage1_digest_after_phase1 = stage1_digest(model)
    if model.cfg.stage_mode == "stage1_only":
        result.stage1_digest_final = result.stage1_digest_after_phase1
        return result

    model.local_stage.train()
    opt2 = SGD(model.stage2_parameters(), cfg.base_lr, cfg.iterations_stage2,
               momentum=cfg.momentum, weight_decay=cfg.weight_decay,
               power=cfg.lr_power)
    for it in range(cfg.iterations_stage2):
        x, y, ign = _sample_batch(scenes, cfg, rng)
        with T.fresh_tape():
            f_g, _, _ = model.run_stage1(x)
            _, e_r, paths, _ = model.run_stage2(x, f_g)
            sides = model.side_outputs(paths, "local", out_hw)
            loss = stage_loss(e_r, sides, y, cfg.lam, ign)
            T.backward(loss)
        opt2.step()
        opt2.zero_grad()
        result.history.append((it, 2, loss.item()))

    result.stage1_digest_final = stage1_digest(model)
    return result


def write_loss_csv(result: TrainResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,stage,loss\n")
        for it, stage, loss in result.history:
            fh.write(f"{it},{stage},{loss:.9g}\n")
