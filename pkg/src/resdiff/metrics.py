"""Image-quality metrics and instance-matching segmentation scores.

Image metrics operate on [0, 255]-mapped arrays.  Instance matching builds
the full IoU matrix between predicted and ground-truth labels and solves
the optimal one-to-one assignment subject to IoU >= tau, mirroring the
behavior of the usual star-convex segmentation evaluation tooling; greedy
matching is deliberately avoided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, optimize


def mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """10 log10(peak^2 / mse); identical images give the +inf sentinel."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / m)


def _gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    r = (window - 1) / 2.0
    x = np.arange(window, dtype=np.float64) - r
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 255.0,
) -> float:
    """Mean local structural similarity with Gaussian weighting.

    Local statistics come from a separable normalized Gaussian window and
    only fully-supported (valid) positions contribute to the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise ValueError(f"images must be 2D and at least {window}x{window}, got {a.shape}")
    kern = _gaussian_kernel(window, sigma)
    half = window // 2

    def smooth(x):
        out = ndimage.correlate1d(x, kern, axis=0, mode="constant")
        out = ndimage.correlate1d(out, kern, axis=1, mode="constant")
        return out[half:-half, half:-half]

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MatchReport:
    tau: float
    n_true: int
    n_pred: int
    tp: int
    fp: int
    fn: int
    sum_iou_matched: float
    precision: float
    recall: float
    f1: float
    mean_true_score: float
    mean_matched_score: float
    panoptic_quality: float

    @classmethod
    def from_counts(cls, tau: float, n_true: int, n_pred: int, tp: int, sum_iou: float) -> "MatchReport":
        fp = n_pred - tp
        fn = n_true - tp
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        denom = tp + fp / 2 + fn / 2
        return cls(
            tau=tau,
            n_true=n_true,
            n_pred=n_pred,
            tp=tp,
            fp=fp,
            fn=fn,
            sum_iou_matched=sum_iou,
            precision=precision,
            recall=recall,
            f1=f1,
            mean_true_score=sum_iou / n_true if n_true else 0.0,
            mean_matched_score=sum_iou / tp if tp else 0.0,
            panoptic_quality=sum_iou / denom if denom else 0.0,
        )

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _relabel(m: np.ndarray) -> tuple[np.ndarray, int]:
    labels = np.unique(m)
    fg = labels[labels > 0]
    remap = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int64)
    remap[fg] = np.arange(1, len(fg) + 1)
    return remap[m], len(fg)


def iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(n_pred, n_true) IoU between foreground labels of two instance maps."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p, n_p = _relabel(np.asarray(pred))
    g, n_g = _relabel(np.asarray(gt))
    pairs = p.astype(np.int64) * (n_g + 1) + g
    inter = np.bincount(pairs.ravel(), minlength=(n_p + 1) * (n_g + 1)).reshape(n_p + 1, n_g + 1)
    area_p = inter.sum(axis=1)
    area_g = inter.sum(axis=0)
    union = area_p[:, None] + area_g[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou[1:, 1:]


def match_instances(pred: np.ndarray, gt: np.ndarray, tau: float = 0.5) -> MatchReport:
    """Optimal one-to-one matching maximizing total IoU subject to IoU >= tau."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    iou = iou_matrix(pred, gt)
    n_pred, n_true = iou.shape
    tp, sum_iou = 0, 0.0
    if n_pred and n_true:
        eligible = np.where(iou >= tau, iou, 0.0)
        rows, cols = optimize.linear_sum_assignment(eligible, maximize=True)
        chosen = iou[rows, cols]
        ok = chosen >= tau
        tp = int(ok.sum())
        sum_iou = float(chosen[ok].sum())
    return MatchReport.from_counts(tau, n_true, n_pred, tp, sum_iou)


def count_correlation(preds: list[np.ndarray], gts: list[np.ndarray]) -> float:
    """Pearson correlation of per-image object counts; nan when degenerate."""
    if len(preds) != len(gts):
        raise ValueError("need equally many predicted and ground-truth maps")
    if len(preds) < 3:
        raise ValueError(f"need at least 3 paired images, got {len(preds)}")
    x = np.array([len(np.unique(m[m > 0])) for m in preds], dtype=np.float64)
    y = np.array([len(np.unique(m[m > 0])) for m in gts], dtype=np.float64)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        return math.nan
    return float(dx @ dy) / (sx * sy)
