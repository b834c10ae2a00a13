"""Weighted soft-Dice training loss and the segmentation metric suite.

The loss uses the squared-denominator soft Dice per class,
D_c = 2*sum(p*g) / (sum(p^2) + sum(g^2) + s), whose gradient has the
closed form implemented in `dice_grad_closed_form`; the evaluation-side
Dice uses the plain confusion-count form 2TP/(FN+FP+2TP). Region masks
follow the nested label alphabet: whole tumor {1,2,4}, tumor core
{1,4}, enhancing tumor {4}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import DTYPE, ShapeError, as_tensor5

SMOOTH = 1e-7
LABEL_VALUES = (0, 1, 2, 4)
REGION_LABELS = {"WT": (1, 2, 4), "TC": (1, 4), "ET": (4,)}
REGION_ORDER = ("WT", "TC", "ET")
METRIC_ORDER = ("dice", "sensitivity", "specificity", "hd95")


@dataclass
class ClassWeights:
    w: tuple[float, float, float, float] = (0.1, 1.0, 1.0, 1.0)

    def __post_init__(self):
        self.w = tuple(float(v) for v in self.w)
        if len(self.w) != 4 or any(v < 0 for v in self.w) or sum(self.w) == 0:
            raise ValueError(f"class weights must be 4 non-negative floats, not all zero: {self.w}")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _check_pair(p: np.ndarray, g: np.ndarray):
    p = as_tensor5(p, "probabilities")
    g = as_tensor5(g, "one-hot truth")
    if p.shape != g.shape:
        raise ShapeError(f"prediction/truth shape mismatch {p.shape} vs {g.shape}")
    if p.shape[4] != 4:
        raise ShapeError(f"expected 4 class channels, got {p.shape[4]}")
    if not np.all((g == 0.0) | (g == 1.0)) or not np.all(g.sum(axis=4) == 1.0):
        raise ValueError("truth tensor is not one-hot over the class channels")
    return p, g


def soft_dice_per_class(p: np.ndarray, g: np.ndarray, smooth: float = SMOOTH) -> np.ndarray:
    """Squared-denominator soft Dice per class, summed over batch and voxels.

    Classes absent from the truth score exactly 0 (documented empty-class
    rule) rather than the near-zero value the raw ratio would give.
    """
    p, g = _check_pair(p, g)
    inter = (p * g).sum(axis=(0, 1, 2, 3))
    pp = (p * p).sum(axis=(0, 1, 2, 3))
    gg = (g * g).sum(axis=(0, 1, 2, 3))
    present = gg > 0.0
    denom = np.where(present, pp + gg + smooth, 1.0)
    return np.where(present, 2.0 * inter / denom, 0.0)


def dice_loss(p: np.ndarray, g: np.ndarray, weights: ClassWeights,
              smooth: float = SMOOTH) -> tuple[float, np.ndarray]:
    """Weighted negative soft Dice and its gradient with respect to p.

    loss = -sum_c w_c D_c / sum_c w_c, so a perfect prediction with all
    classes present scores exactly -1. The gradient composes the
    quotient rule over the three per-class sums; empty classes
    contribute zero loss and zero gradient.
    """
    p, g = _check_pair(p, g)
    w = np.asarray(weights.w, dtype=DTYPE)
    wsum = w.sum()
    inter = (p * g).sum(axis=(0, 1, 2, 3))
    pp = (p * p).sum(axis=(0, 1, 2, 3))
    gg = (g * g).sum(axis=(0, 1, 2, 3))
    present = gg > 0.0
    denom = pp + gg + smooth
    dice = np.where(present, 2.0 * inter / denom, 0.0)
    loss = float(-(w * dice).sum() / wsum)

    # dD/dp = (2/denom) g - (4 inter/denom^2) p, per class channel
    coef_g = np.where(present, 2.0 / denom, 0.0)
    coef_p = np.where(present, 4.0 * inter / (denom * denom), 0.0)
    ddice_dp = coef_g * g - coef_p * p
    grad = -(w / wsum) * ddice_dp
    return loss, grad


def dice_grad_closed_form(p: np.ndarray, g: np.ndarray, smooth: float = SMOOTH) -> np.ndarray:
    """Closed-form per-voxel gradient of the soft Dice score itself:

        dD_c/dp_j = 2 [ g_j (sum p^2 + sum g^2) - 2 p_j (sum p g) ]
                      / (sum p^2 + sum g^2)^2

    evaluated with the same smoothing in the denominator as the loss.
    Kept as an independent code path from `dice_loss` for cross-checks.
    """
    p, g = _check_pair(p, g)
    inter = (p * g).sum(axis=(0, 1, 2, 3))
    pp = (p * p).sum(axis=(0, 1, 2, 3))
    gg = (g * g).sum(axis=(0, 1, 2, 3))
    denom = pp + gg + smooth
    grad = 2.0 * (g * denom - 2.0 * p * inter) / (denom * denom)
    return np.where(gg > 0.0, grad, 0.0)


# ---------------------------------------------------------------------------
# evaluation metrics over binary region masks

def confusion(pred: np.ndarray, truth: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"confusion: shape mismatch {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    return ConfusionCounts(tp, fp, fn, tn)


def metric(kind: str, c: ConfusionCounts) -> Optional[float]:
    """dice, sensitivity, or specificity from counts.

    Undefined denominators return None instead of NaN; the one
    documented convention is dice = 1.0 when both masks are empty.
    """
    if kind == "dice":
        denom = c.fn + c.fp + 2 * c.tp
        if denom == 0:
            return 1.0  # both masks empty: perfect agreement by convention
        return 2.0 * c.tp / denom
    if kind == "sensitivity":
        if c.tp + c.fn == 0:
            return None
        return c.tp / (c.tp + c.fn)
    if kind == "specificity":
        if c.tn + c.fp == 0:
            return None
        return c.tn / (c.tn + c.fp)
    raise ValueError(f"unknown metric kind {kind!r}")


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Boundary voxels under 6-connectivity: positive voxels with a
    negative or out-of-volume face neighbor. Returns an (m, 3) index array.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ShapeError(f"surface_voxels expects a 3-axis mask, got {mask.shape}")
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    boundary = mask & ~interior
    return np.argwhere(boundary)


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Min distance from each src surface voxel to the dst surface."""
    src_mm = src * spacing
    dst_mm = dst * spacing
    out = np.empty(len(src_mm), dtype=DTYPE)
    chunk = max(1, 2_000_000 // max(1, len(dst_mm)))
    for start in range(0, len(src_mm), chunk):
        block = src_mm[start : start + chunk]
        d2 = ((block[:, None, :] - dst_mm[None, :, :]) ** 2).sum(axis=2)
        out[start : start + len(block)] = np.sqrt(d2.min(axis=1))
    return out


def _surface_distance_pool(pred, truth, spacing):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"hausdorff: shape mismatch {pred.shape} vs {truth.shape}")
    if not pred.any() or not truth.any():
        return None
    sp = np.asarray(spacing, dtype=DTYPE)
    ps = surface_voxels(pred)
    ts = surface_voxels(truth)
    return np.concatenate(
        [_directed_distances(ts, ps, sp), _directed_distances(ps, ts, sp)]
    )


def hausdorff95(pred: np.ndarray, truth: np.ndarray,
                spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    """95th percentile (linear interpolation) of the pooled directed
    surface distances. None when either mask is empty.
    """
    pool = _surface_distance_pool(pred, truth, spacing)
    if pool is None:
        return None
    return float(np.percentile(pool, 95.0, method="linear"))


def hausdorff100(pred: np.ndarray, truth: np.ndarray,
                 spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    """Exact max-of-directed-sup surface distance (the classical form)."""
    pool = _surface_distance_pool(pred, truth, spacing)
    if pool is None:
        return None
    return float(pool.max())


# ---------------------------------------------------------------------------
# nested regions

def derive_regions(labels: np.ndarray) -> dict[str, np.ndarray]:
    """WT/TC/ET boolean masks from a {0,1,2,4} label volume."""
    labels = np.asarray(labels)
    bad = ~np.isin(labels, LABEL_VALUES)
    if bad.any():
        loc = tuple(int(v) for v in np.argwhere(bad)[0])
        raise ValueError(
            f"unknown label value {int(labels[loc])} at index {loc} (alphabet is {LABEL_VALUES})"
        )
    return {name: np.isin(labels, vals) for name, vals in REGION_LABELS.items()}


# ---------------------------------------------------------------------------
# evaluation report

def _fmt(value: Optional[float]) -> str:
    return "undefined" if value is None else f"{value:.6f}"


def case_region_row(case_id: str, region: str, pred_mask, truth_mask, spacing) -> dict:
    c = confusion(pred_mask, truth_mask)
    return {
        "case_id": case_id,
        "region": region,
        "dice": metric("dice", c),
        "sensitivity": metric("sensitivity", c),
        "specificity": metric("specificity", c),
        "hd95": hausdorff95(pred_mask, truth_mask, spacing),
    }


def format_report(rows: list[dict]) -> str:
    """Comma-separated per-case table plus a mean/median summary block.

    Rows are emitted sorted by (case_id, region order); summary
    statistics skip undefined entries and are themselves 'undefined'
    when no row defines the metric.
    """
    region_rank = {r: k for k, r in enumerate(REGION_ORDER)}
    rows = sorted(rows, key=lambda r: (r["case_id"], region_rank[r["region"]]))
    lines = ["case_id,region,dice,sensitivity,specificity,hd95"]
    for r in rows:
        lines.append(
            ",".join(
                [r["case_id"], r["region"]]
                + [_fmt(r[m]) for m in METRIC_ORDER]
            )
        )
    lines.append("")
    lines.append("summary,region,dice,sensitivity,specificity,hd95")
    for stat, fn in (("mean", np.mean), ("median", np.median)):
        for region in REGION_ORDER:
            cells = []
            for m in METRIC_ORDER:
                vals = [r[m] for r in rows if r["region"] == region and r[m] is not None]
                cells.append(_fmt(float(fn(vals)) if vals else None))
            lines.append(",".join([stat, region] + cells))
    return "\n".join(lines) + "\n"
