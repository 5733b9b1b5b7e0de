"""Fitting ensemble coefficients from binary decision patterns.

Each voxel gets a pattern ``b`` in {0,1}^n: the decisions of the n ensemble
members. Over a training set we count, per pattern, how many voxels carry it
and how many of those are ground-truth foreground. Coefficients ``a`` are then
chosen so that ``a . b`` matches the foreground rate of ``b``, in the
count-weighted least-squares sense; the heatmap of a new image is
``sum_k a_k * mask_k``.

The all-zero pattern always maps to 0 and is left out of the fit; its
foreground rate is kept as a diagnostic (foreground that no member finds).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy.optimize import nnls

from .core import BinaryMask, CalensError, GridMismatch, Heatmap, LengthMismatch, validate_all, validate_pair

logger = logging.getLogger(__name__)

MAX_MODELS = 20
RANK_TOL = 1e-12


class TooManyModels(CalensError, ValueError):
    pass


class DegenerateSystem(CalensError, ArithmeticError):
    pass


@dataclass
class PatternHistogram:
    """Voxel and foreground counts per observed decision pattern.

    Patterns are tuples of 0/1 of length ``n_models``; unobserved patterns
    are absent.
    """

    n_models: int
    entries: Dict[Tuple[int, ...], Tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.n_models <= MAX_MODELS:
            raise TooManyModels(f"n_models must be in [1, {MAX_MODELS}], got {self.n_models}")
        for b, (count, fg) in self.entries.items():
            if len(b) != self.n_models:
                raise LengthMismatch(f"pattern {b} has wrong length")
            if not 0 <= fg <= count:
                raise ValueError(f"pattern {b}: foreground count {fg} outside [0, {count}]")

    @property
    def total_voxels(self) -> int:
        return sum(c for c, _ in self.entries.values())

    def merge(self, other: "PatternHistogram") -> "PatternHistogram":
        if other.n_models != self.n_models:
            raise LengthMismatch("histograms over different ensemble sizes")
        out = dict(self.entries)
        for b, (c, f) in other.entries.items():
            c0, f0 = out.get(b, (0, 0))
            out[b] = (c0 + c, f0 + f)
        return PatternHistogram(self.n_models, out)

    def scaled(self, factor: int) -> "PatternHistogram":
        return PatternHistogram(self.n_models, {b: (c * factor, f * factor) for b, (c, f) in self.entries.items()})

    def as_arrays(self):
        """Sorted patterns (m, n), counts (m,), foreground counts (m,)."""
        keys = sorted(self.entries)
        patterns = np.array(keys, dtype=np.float64).reshape(len(keys), self.n_models)
        counts = np.array([self.entries[k][0] for k in keys], dtype=np.float64)
        fg = np.array([self.entries[k][1] for k in keys], dtype=np.float64)
        return patterns, counts, fg


def _mask_values(masks) -> np.ndarray:
    if isinstance(masks, np.ndarray):
        arr = np.asarray(masks)
        if arr.ndim == 1:
            arr = arr[None, :]
        return arr.reshape(arr.shape[0], -1).astype(np.uint8)
    masks = list(masks)
    validate_all(masks)
    return np.stack([m.values for m in masks])


def count_patterns(masks, gt) -> PatternHistogram:
    """Histogram of member decision patterns for one image.

    ``masks`` is a sequence of n BinaryMasks (or an (n, voxels) array) and
    ``gt`` the ground truth on the same grid.
    """
    if not isinstance(masks, np.ndarray):
        masks = list(masks)
        if not 1 <= len(masks) <= MAX_MODELS:
            raise TooManyModels(f"need 1..{MAX_MODELS} models, got {len(masks)}")
        if isinstance(gt, BinaryMask):
            for m in masks:
                validate_pair(gt, m)
    values = _mask_values(masks)
    n, voxels = values.shape
    if not 1 <= n <= MAX_MODELS:
        raise TooManyModels(f"need 1..{MAX_MODELS} models, got {n}")
    g = np.asarray(getattr(gt, "values", gt)).reshape(-1).astype(np.int64)
    if g.size != voxels:
        raise GridMismatch(f"{voxels} mask voxels vs {g.size} ground-truth voxels")
    # pack each pattern into an integer code, first model in the highest bit
    codes = (values.astype(np.int64) << np.arange(n - 1, -1, -1, dtype=np.int64)[:, None]).sum(axis=0)
    totals = np.bincount(codes, minlength=1 << n)
    fgs = np.bincount(codes, weights=g, minlength=1 << n).astype(np.int64)
    entries = {}
    for code in np.flatnonzero(totals):
        b = tuple(int(code >> (n - 1 - k)) & 1 for k in range(n))
        entries[b] = (int(totals[code]), int(fgs[code]))
    return PatternHistogram(n, entries)


def count_patterns_many(pairs: Iterable) -> PatternHistogram:
    """Merge per-image histograms of ``(masks, gt)`` pairs."""
    hist = None
    for masks, gt in pairs:
        h = count_patterns(masks, gt)
        hist = h if hist is None else hist.merge(h)
    if hist is None:
        raise ValueError("no images given")
    return hist


@dataclass
class CalibrationCoefficients:
    a: np.ndarray
    residual_norm: float
    dropped_patterns: List[Tuple[int, ...]]
    zero_pattern_fg_rate: float
    degenerate: bool = False
    weighting: str = "count"

    @property
    def n_models(self) -> int:
        return self.a.size


def solve_coefficients(
    hist: PatternHistogram,
    weighting: str = "count",
    nonnegative: bool = False,
    strict: bool = False,
) -> CalibrationCoefficients:
    """Least-squares coefficients matching ``a . b`` to the foreground rate of ``b``.

    Parameters
    ----------
    hist : PatternHistogram
        Pattern counts over the training set.
    weighting : {"count", "pattern"}
        Weight each pattern row by its voxel count (equivalent to voxelwise
        least squares of the heatmap against ground truth) or equally.
    nonnegative : bool
        Constrain ``a >= 0`` (solved with NNLS).
    strict : bool
        Raise DegenerateSystem on a singular normal matrix instead of
        returning the minimum-norm solution flagged ``degenerate``.
    """
    if weighting not in ("count", "pattern"):
        raise ValueError(f"unknown weighting {weighting!r}")
    n = hist.n_models
    zero = (0,) * n
    zc, zf = hist.entries.get(zero, (0, 0))
    zero_rate = zf / zc if zc else 0.0
    dropped = [zero] if zc else []

    patterns, counts, fg = hist.as_arrays()
    keep = (patterns.sum(axis=1) > 0) & (counts > 0)
    B, counts, fg = patterns[keep], counts[keep], fg[keep]
    if B.shape[0] == 0:
        raise DegenerateSystem("no nonzero pattern observed")
    rate = fg / counts
    if weighting == "count":
        # normalised so that scaling every count leaves the system bit-identical
        total = counts.sum()
        wts, target = counts / total, fg / total
    else:
        wts, target = np.ones_like(counts), rate

    A = B.T @ (wts[:, None] * B)
    rhs = B.T @ target
    eig = np.linalg.eigvalsh(A)
    degenerate = bool(eig[0] <= RANK_TOL * max(eig[-1], 1.0))
    if nonnegative:
        sw = np.sqrt(wts)
        a, _ = nnls(sw[:, None] * B, sw * rate)
    elif degenerate:
        if strict:
            raise DegenerateSystem("normal matrix is singular; members are linearly dependent")
        logger.warning("degenerate calibration system; using minimum-norm solution")
        a = np.linalg.pinv(A, rcond=1e-12, hermitian=True) @ rhs
    else:
        L = np.linalg.cholesky(A)
        a = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    resid = B @ a - rate
    return CalibrationCoefficients(
        a=a,
        residual_norm=float(np.sqrt(np.sum(wts * resid**2))),
        dropped_patterns=dropped,
        zero_pattern_fg_rate=float(zero_rate),
        degenerate=degenerate,
        weighting=weighting,
    )


@dataclass(eq=False)
class ComposedHeatmap:
    heatmap: Heatmap
    clipped: int


def compose_heatmap(masks: Sequence[BinaryMask], coefficients) -> ComposedHeatmap:
    """Per-voxel ``sum_k a_k * mask_k``, clipped to [0, 1]."""
    masks = list(masks)
    grid = validate_all(masks)
    a = np.asarray(getattr(coefficients, "a", coefficients), dtype=np.float64).reshape(-1)
    if a.size != len(masks):
        raise LengthMismatch(f"{a.size} coefficients for {len(masks)} masks")
    raw = a @ np.stack([m.values for m in masks]).astype(np.float64)
    clipped = int(np.count_nonzero((raw < 0.0) | (raw > 1.0)))
    return ComposedHeatmap(Heatmap(grid, np.clip(raw, 0.0, 1.0)), clipped)


def mean_heatmap(masks: Sequence[BinaryMask]) -> Heatmap:
    masks = list(masks)
    grid = validate_all(masks)
    return Heatmap(grid, np.stack([m.values for m in masks]).mean(axis=0))
