"""Boundary-detection evaluation: thinning, matching, and score aggregation.

The protocol: thin each probability map by non-maximum suppression along the
gradient normal, binarize at 99 thresholds, match predicted pixels one-to-one
against every annotator map within a tolerance radius (a fraction of the
image diagonal), then aggregate dataset-level ODS, per-image OIS, and the
area under the precision-recall curve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

THRESHOLDS = np.arange(1, 100) / 100.0
DEFAULT_TOLERANCE = 0.0075


# ---------------------------------------------------------------------------
# non-maximum suppression


def _gaussian_smooth5(x: np.ndarray) -> np.ndarray:
    """Separable 5x5 Gaussian (sigma 1), reflect-padded."""
    d = np.arange(-2, 3, dtype=np.float64)
    k = np.exp(-0.5 * d * d)
    k /= k.sum()
    p = np.pad(x, ((0, 0), (2, 2)), mode="reflect")
    cols = sum(k[i] * p[:, i:i + x.shape[1]] for i in range(5))
    p = np.pad(cols, ((2, 2), (0, 0)), mode="reflect")
    return sum(k[i] * p[i:i + x.shape[0], :] for i in range(5))


def _central_gradients(s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gy = np.empty_like(s)
    gx = np.empty_like(s)
    gy[1:-1, :] = (s[2:, :] - s[:-2, :]) * 0.5
    gy[0, :] = s[1, :] - s[0, :]
    gy[-1, :] = s[-1, :] - s[-2, :]
    gx[:, 1:-1] = (s[:, 2:] - s[:, :-2]) * 0.5
    gx[:, 0] = s[:, 1] - s[:, 0]
    gx[:, -1] = s[:, -1] - s[:, -2]
    return gy, gx


def _bilinear_sample(img: np.ndarray, ys: np.ndarray,
                     xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample at float coordinates; points outside the grid are invalid."""
    h, w = img.shape
    valid = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    yc = np.clip(ys, 0, h - 1)
    xc = np.clip(xs, 0, w - 1)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yc - y0
    wx = xc - x0
    val = (img[y0, x0] * (1 - wy) * (1 - wx) + img[y0, x1] * (1 - wy) * wx
           + img[y1, x0] * wy * (1 - wx) + img[y1, x1] * wy * wx)
    return val, valid


def nms_thin(edge: np.ndarray) -> np.ndarray:
    """Suppress pixels that are not local maxima along the gradient normal.

    Orientation comes from Gaussian-smoothed central-difference gradients of
    the probability map; a pixel survives iff its value is >= both bilinear
    samples one pixel away along +/- the gradient direction. Samples falling
    outside the image are skipped, zero-gradient plateaus are kept, and
    survivors keep their original probability.
    """
    edge = np.asarray(edge, dtype=np.float64)
    gy, gx = _central_gradients(_gaussian_smooth5(edge))
    mag = np.hypot(gy, gx)
    flat = mag == 0
    safe = np.where(flat, 1.0, mag)
    uy = gy / safe
    ux = gx / safe
    h, w = edge.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    keep = np.ones_like(edge, dtype=bool)
    for sign in (1.0, -1.0):
        val, valid = _bilinear_sample(edge, yy + sign * uy, xx + sign * ux)
        keep &= (edge >= val) | ~valid
    keep |= flat
    return edge * keep


# ---------------------------------------------------------------------------
# correspondence matching


def match_correspondence(pred: np.ndarray, gt: np.ndarray,
                         tol: float = DEFAULT_TOLERANCE
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Greedy one-to-one matching of edge pixels within the tolerance radius.

    The radius is ``tol`` times the image diagonal. Pairs are taken nearest
    first (ties broken by pixel order), each pixel matched at most once.
    Returns boolean masks of matched predicted and matched ground-truth
    pixels.
    """
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    h, w = pred.shape
    radius = tol * math.hypot(h, w)
    matched_pred = np.zeros_like(pred)
    matched_gt = np.zeros_like(gt)
    if not pred.any() or not gt.any():
        return matched_pred, matched_gt
    if radius < 1.0:
        # only coincident pixels can match
        both = pred & gt
        return both.copy(), both.copy()

    ppts = np.argwhere(pred)
    gpts = np.argwhere(gt)
    cell = max(1, int(math.ceil(radius)))
    buckets: dict[tuple[int, int], list[int]] = {}
    for gi, (gy, gx) in enumerate(gpts):
        buckets.setdefault((gy // cell, gx // cell), []).append(gi)

    r2 = radius * radius
    pairs: list[tuple[float, int, int]] = []
    for pi, (py, px) in enumerate(ppts):
        cy, cx = py // cell, px // cell
        for by in (cy - 1, cy, cy + 1):
            for bx in (cx - 1, cx, cx + 1):
                for gi in buckets.get((by, bx), ()):
                    dy = float(py - gpts[gi, 0])
                    dx = float(px - gpts[gi, 1])
                    d2 = dy * dy + dx * dx
                    if d2 <= r2:
                        pairs.append((d2, pi, gi))
    pairs.sort()
    used_p = np.zeros(len(ppts), dtype=bool)
    used_g = np.zeros(len(gpts), dtype=bool)
    for _, pi, gi in pairs:
        if used_p[pi] or used_g[gi]:
            continue
        used_p[pi] = True
        used_g[gi] = True
        matched_pred[ppts[pi, 0], ppts[pi, 1]] = True
        matched_gt[gpts[gi, 0], gpts[gi, 1]] = True
    return matched_pred, matched_gt


# ---------------------------------------------------------------------------
# precision-recall sweep and aggregation


def pr_sweep(thinned: np.ndarray, gts: list[np.ndarray],
             tol: float = DEFAULT_TOLERANCE) -> np.ndarray:
    """Per-threshold counts against a multi-annotator ground truth.

    For each threshold the binarized prediction is matched against every
    annotator map; a predicted pixel counts as true positive if it matches
    in any map, while recall pools matched and total ground-truth pixels
    over all annotators. Returns an array of rows
    (matched_pred, total_pred, matched_gt, total_gt), one per threshold.
    """
    if not gts:
        raise InputError("need at least one ground-truth map")
    gts = [np.asarray(g, dtype=bool) for g in gts]
    total_gt = sum(int(g.sum()) for g in gts)
    counts = np.zeros((len(THRESHOLDS), 4), dtype=np.int64)
    for k, t in enumerate(THRESHOLDS):
        pred_bin = thinned >= t
        total_pred = int(pred_bin.sum())
        matched_any = np.zeros_like(pred_bin)
        matched_gt = 0
        if total_pred:
            for g in gts:
                mp, mg = match_correspondence(pred_bin, g, tol)
                matched_any |= mp
                matched_gt += int(mg.sum())
        counts[k] = (int(matched_any.sum()), total_pred, matched_gt, total_gt)
    return counts


def _prf(mp: float, tp: float, mg: float, tg: float) -> tuple[float, float, float]:
    p = 1.0 if tp == 0 else mp / tp
    r = 1.0 if tg == 0 else mg / tg
    f = 0.0 if p + r == 0 else 2.0 * p * r / (p + r)
    return p, r, f


@dataclass
class EvalReport:
    thresholds: np.ndarray
    per_image_counts: list[np.ndarray]
    totals: np.ndarray
    ods: float
    ois: float
    ap: float
    ods_threshold: float

    def pr_table(self) -> list[tuple[float, float, float, float]]:
        rows = []
        for t, (mp, tp, mg, tg) in zip(self.thresholds, self.totals):
            p, r, f = _prf(mp, tp, mg, tg)
            rows.append((float(t), p, r, f))
        return rows

    def summary(self) -> str:
        return f"ODS={self.ods:.3f} OIS={self.ois:.3f} AP={self.ap:.3f}"


def aggregate_ods_ois_ap(per_image_counts: list[np.ndarray]) -> EvalReport:
    """Reduce per-image threshold counts to the ODS/OIS/AP triple.

    ODS maximizes F over thresholds on dataset-summed counts; OIS sums each
    image's counts at its own best threshold; AP integrates the dataset
    precision-recall curve (trapezoids over recall, after enforcing a
    monotone precision envelope, anchored at the empty-prediction point
    recall 0 / precision 1).
    """
    if not per_image_counts:
        raise InputError("need counts for at least one image")
    totals = np.sum(per_image_counts, axis=0)

    f_per_t = [_prf(*totals[k])[2] for k in range(len(THRESHOLDS))]
    best_k = int(np.argmax(f_per_t))
    ods = f_per_t[best_k]

    ois_counts = np.zeros(4, dtype=np.float64)
    for counts in per_image_counts:
        fs = [_prf(*counts[k])[2] for k in range(len(THRESHOLDS))]
        ois_counts += counts[int(np.argmax(fs))]
    ois = _prf(*ois_counts)[2]

    pts = [(0.0, 1.0)]
    for k in range(len(THRESHOLDS)):
        p, r, _ = _prf(*totals[k])
        pts.append((r, p))
    pts.sort()
    rs = np.array([r for r, _ in pts])
    ps = np.array([p for _, p in pts])
    env = ps.copy()
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    ap = float(np.sum((rs[1:] - rs[:-1]) * (env[1:] + env[:-1]) * 0.5))

    return EvalReport(
        thresholds=THRESHOLDS.copy(),
        per_image_counts=[np.asarray(c) for c in per_image_counts],
        totals=totals,
        ods=float(ods),
        ois=float(ois),
        ap=ap,
        ods_threshold=float(THRESHOLDS[best_k]),
    )


def evaluate_predictions(preds: list[np.ndarray],
                         gt_stacks: list[list[np.ndarray]],
                         tol: float = DEFAULT_TOLERANCE,
                         apply_nms: bool = True) -> EvalReport:
    """Full protocol over a dataset of probability maps and annotator sets."""
    if len(preds) != len(gt_stacks):
        raise InputError(
            f"{len(preds)} predictions vs {len(gt_stacks)} ground-truth sets"
        )
    per_image = []
    for pred, gts in zip(preds, gt_stacks):
        thinned = nms_thin(pred) if apply_nms else np.asarray(pred, dtype=np.float64)
        per_image.append(pr_sweep(thinned, gts, tol))
    return aggregate_ods_ois_ap(per_image)


def write_pr_csv(report: EvalReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("threshold,precision,recall,f\n")
        for t, p, r, f in report.pr_table():
            fh.write(f"{t:.2f},{p:.9g},{r:.9g},{f:.9g}\n")
