"""Measurements on heatmaps and binary masks.

Most functions accept either a single ``Heatmap``/``BinaryMask`` or a list of
them (one per image); lists are concatenated voxelwise after checking that
each pair shares a grid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .core import BinaryMask, CalensError, GridMismatch, validate_pair

EVAL_POINTS = 101
VALID_FLOOR = 1e-3
DEFAULT_BANDWIDTH = 0.05
DEFAULT_BINS = 10
_CHUNK = 1 << 16


class EmptyReference(CalensError, ValueError):
    """Metric undefined because its denominator set is empty."""


class InvalidBandwidth(CalensError, ValueError):
    pass


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64).reshape(-1)


def _paired(a, b) -> Tuple[np.ndarray, np.ndarray]:
    """Concatenate per-image arrays after grid checks."""
    if isinstance(a, (list, tuple)) or isinstance(b, (list, tuple)):
        a, b = list(a), list(b)
        if len(a) != len(b):
            raise GridMismatch(f"{len(a)} images vs {len(b)} images")
        if not a:
            return np.empty(0), np.empty(0)
        pairs = [_paired(x, y) for x, y in zip(a, b)]
        return np.concatenate([p[0] for p in pairs]), np.concatenate([p[1] for p in pairs])
    if hasattr(a, "grid") and hasattr(b, "grid"):
        validate_pair(a, b)
    va, vb = _values(a), _values(b)
    if va.size != vb.size:
        raise GridMismatch(f"{va.size} voxels vs {vb.size} voxels")
    return va, vb


def _dsc_from_counts(tp: float, fp: float, fn: float) -> float:
    den = 2.0 * tp + fp + fn
    if den == 0:
        return 100.0
    return 100.0 * 2.0 * tp / den


def dsc(s, p) -> float:
    """Dice similarity coefficient in percent; two empty masks score 100."""
    s, p = _paired(s, p)
    return _dsc_from_counts(float(s @ p), float((1 - s) @ p), float(s @ (1 - p)))


def estimated_dsc(h, p) -> float:
    """DSC of prediction ``p`` with the ground truth replaced by heatmap ``h``.

    Expected TP, FP and FN under the heatmap's per-voxel probabilities; no
    ground truth needed.
    """
    h, p = _paired(h, p)
    return _dsc_from_counts(float(h @ p), float((1 - h) @ p), float(h @ (1 - p)))


def sensitivity(mask, gt) -> float:
    m, g = _paired(mask, gt)
    if g.sum() == 0:
        raise EmptyReference("ground truth is empty")
    return 100.0 * float(m @ g) / float(g.sum())


def precision(mask, gt) -> float:
    m, g = _paired(mask, gt)
    if m.sum() == 0:
        raise EmptyReference("mask is empty")
    return 100.0 * float(m @ g) / float(m.sum())


def mask_union(masks: Sequence[BinaryMask]) -> BinaryMask:
    if not masks:
        raise ValueError("need at least one mask")
    for m in masks[1:]:
        validate_pair(masks[0], m)
    return BinaryMask(masks[0].grid, np.bitwise_or.reduce([m.values for m in masks]))


def mask_intersection(masks: Sequence[BinaryMask]) -> BinaryMask:
    if not masks:
        raise ValueError("need at least one mask")
    for m in masks[1:]:
        validate_pair(masks[0], m)
    return BinaryMask(masks[0].grid, np.bitwise_and.reduce([m.values for m in masks]))


def union_sensitivity(masks: Sequence[BinaryMask], gt: BinaryMask) -> float:
    """Sensitivity (percent) of the union of all masks."""
    return sensitivity(mask_union(list(masks)), gt)


def intersection_precision(masks: Sequence[BinaryMask], gt: BinaryMask) -> float:
    """Precision (percent) of the intersection of all masks."""
    inter = mask_intersection(list(masks))
    validate_pair(inter, gt)
    if inter.values.sum() == 0:
        raise EmptyReference("intersection is empty")
    return precision(inter, gt)


def pooled_union_sensitivity(mask_sets, gts) -> float:
    """Union sensitivity with TP and |gt| summed over images."""
    unions = [mask_union(list(ms)) for ms in mask_sets]
    return sensitivity(unions, list(gts))


def pooled_intersection_precision(mask_sets, gts) -> float:
    inters = [mask_intersection(list(ms)) for ms in mask_sets]
    return precision(inters, list(gts))


@dataclass(eq=False)
class CalibrationCurve:
    """Kernel-smoothed foreground rate as a function of predicted probability.

    ``observed_fg_rate`` is NaN where ``valid`` is False.
    """

    eval_points: np.ndarray
    observed_fg_rate: np.ndarray
    effective_weight: np.ndarray
    valid: np.ndarray
    bandwidth: float

    def max_deviation(self) -> float:
        v = self.valid
        if not v.any():
            return float("nan")
        return float(np.max(np.abs(self.observed_fg_rate[v] - self.eval_points[v])))


def triangular_kernel(u):
    return np.maximum(0.0, 1.0 - np.abs(u))


def _kernel_sums(h: np.ndarray, targets, bandwidth: float, points: np.ndarray):
    weight = np.zeros(points.size)
    sums = [np.zeros(points.size) for _ in targets]
    for start in range(0, h.size, _CHUNK):
        k = triangular_kernel((h[None, start : start + _CHUNK] - points[:, None]) / bandwidth)
        weight += k.sum(axis=1)
        for acc, t in zip(sums, targets):
            acc += k @ t[start : start + _CHUNK]
    return weight, sums


def _check_bandwidth(bandwidth: float):
    if not 0 < bandwidth <= 0.5:
        raise InvalidBandwidth(f"bandwidth must lie in (0, 0.5], got {bandwidth}")


def calibration_curve(h, gt, bandwidth: float = DEFAULT_BANDWIDTH) -> CalibrationCurve:
    """Nadaraya-Watson estimate of P(gt = 1 | h = t) with a triangular kernel.

    Evaluated at 101 points t = 0, 0.01, ..., 1. A point is valid when its
    summed kernel weight reaches ``1e-3`` of the voxel count.
    """
    _check_bandwidth(bandwidth)
    hv, gv = _paired(h, gt)
    points = np.linspace(0.0, 1.0, EVAL_POINTS)
    weight, (fg,) = _kernel_sums(hv, [gv], bandwidth, points)
    valid = weight >= VALID_FLOOR * max(hv.size, 1)
    valid &= weight > 0
    rate = np.full(points.size, np.nan)
    rate[valid] = fg[valid] / weight[valid]
    return CalibrationCurve(points, rate, weight, valid, float(bandwidth))


def expected_calibration_error(h, gt, bins: int = DEFAULT_BINS) -> float:
    """Bin-weighted mean |mean h - foreground rate| over equal-width bins.

    ``gt`` may be binary labels or reference probabilities in [0, 1]; in the
    latter case the bin's foreground rate is the mean reference probability.
    """
    if bins < 2:
        raise ValueError("bins must be >= 2")
    hv, gv = _paired(h, gt)
    n = hv.size
    if n == 0:
        return 0.0
    idx = np.minimum((hv * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    h_sum = np.bincount(idx, weights=hv, minlength=bins)
    g_sum = np.bincount(idx, weights=gv, minlength=bins)
    occupied = counts > 0
    gap = np.abs(h_sum[occupied] - g_sum[occupied]) / counts[occupied]
    return float(np.sum(counts[occupied] / n * gap))


@dataclass(eq=False)
class PrevalenceCurves:
    eval_points: np.ndarray
    gt_rate: np.ndarray
    pred_rate: np.ndarray
    effective_weight: np.ndarray
    valid: np.ndarray
    bandwidth: float


def prevalence_consistency(h, pred, gt, bandwidth: float = DEFAULT_BANDWIDTH) -> PrevalenceCurves:
    """Ground-truth and predicted foreground rates, both conditioned on ``h``.

    For a calibrated ``h`` the ground-truth curve sits near the diagonal; a
    prediction whose curve strays from it cannot be optimal.
    """
    _check_bandwidth(bandwidth)
    hv, pv = _paired(h, pred)
    _, gv = _paired(h, gt)
    points = np.linspace(0.0, 1.0, EVAL_POINTS)
    weight, (g_sum, p_sum) = _kernel_sums(hv, [gv, pv], bandwidth, points)
    valid = (weight >= VALID_FLOOR * max(hv.size, 1)) & (weight > 0)
    gt_rate = np.full(points.size, np.nan)
    pred_rate = np.full(points.size, np.nan)
    gt_rate[valid] = g_sum[valid] / weight[valid]
    pred_rate[valid] = p_sum[valid] / weight[valid]
    return PrevalenceCurves(points, gt_rate, pred_rate, weight, valid, float(bandwidth))


@dataclass(eq=False)
class FlagReport:
    fp_probabilities: np.ndarray
    fn_probabilities: np.ndarray
    fp_quartiles: Optional[Tuple[float, float, float]]
    fn_quartiles: Optional[Tuple[float, float, float]]


def quartiles(values) -> Optional[Tuple[float, float, float]]:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return None
    q = np.quantile(values, [0.25, 0.5, 0.75], method="linear")
    return float(q[0]), float(q[1]), float(q[2])


def flag_disagreements(h, annotation, gt) -> FlagReport:
    """Heatmap values where an annotator disagrees with the ground truth."""
    hv, av = _paired(h, annotation)
    _, gv = _paired(h, gt)
    fp = hv[(av == 1) & (gv == 0)]
    fn = hv[(av == 0) & (gv == 1)]
    return FlagReport(fp, fn, quartiles(fp), quartiles(fn))
