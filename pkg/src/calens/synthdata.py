"""Synthetic datasets whose per-sample class probability is known in closed form.

All randomness comes from ``numpy.random.Generator(numpy.random.Philox(seed))``.
Philox is a counter-based bit generator, and numpy's normal/uniform/integer
samplers on top of it are implemented in numpy itself, so identical seeds give
byte-identical datasets on every platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.special import expit, logit

from .core import BinaryMask, CalensError, InvalidGrid, SampleGrid

CLASS_MEANS = (-1.0, 1.0)


class InvalidCount(CalensError, ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def analytic_probability(x, prior: float = 0.5):
    """Probability that ``x`` was drawn from N(1, 1) rather than N(-1, 1).

    With equal priors the density ratio p1/(p0+p1) reduces to
    ``1 / (1 + exp(-2x))``. A non-equal ``prior`` shifts the log-odds by
    ``logit(prior)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("x must be finite")
    log_odds = 2.0 * x
    if prior != 0.5:
        log_odds = log_odds + logit(prior)
    out = expit(log_odds)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class Gaussian1DDataset:
    xs: np.ndarray
    labels: np.ndarray
    seed: int

    def __len__(self):
        return self.xs.size

    @property
    def probabilities(self) -> np.ndarray:
        return analytic_probability(self.xs)


def generate_gaussian1d(n: int, seed: int) -> Gaussian1DDataset:
    if n < 2:
        raise InvalidCount(f"need at least 2 samples, got {n}")
    rng = make_rng(seed)
    labels = rng.integers(0, 2, size=n).astype(np.uint8)
    noise = rng.standard_normal(n)
    xs = np.where(labels == 1, CLASS_MEANS[1], CLASS_MEANS[0]) + noise
    return Gaussian1DDataset(xs=xs, labels=labels, seed=int(seed))


@dataclass(frozen=True, eq=False)
class Blob2DDataset:
    """Images with one elliptical foreground blob each.

    ``priors[j]`` is the foreground fraction of image ``j``; the posterior
    foreground probability of a pixel with intensity ``t`` in that image is
    ``analytic_probability(t, priors[j])``.
    """

    grid: SampleGrid
    images: List[np.ndarray]
    ground_truth: List[BinaryMask]
    priors: np.ndarray
    seed: int
    ellipses: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.images)

    def probability_maps(self) -> List[np.ndarray]:
        return [analytic_probability(img, float(p)) for img, p in zip(self.images, self.priors)]


def _ellipse_mask(shape, center, radii) -> np.ndarray:
    rows, cols = np.indices(shape, dtype=np.float64)
    d = ((rows - center[0]) / radii[0]) ** 2 + ((cols - center[1]) / radii[1]) ** 2
    return (d <= 1.0).astype(np.uint8)


def generate_blob2d(num_images: int, grid, seed: int) -> Blob2DDataset:
    grid = grid if isinstance(grid, SampleGrid) else SampleGrid(tuple(grid))
    if grid.ndim != 2 or min(grid.shape) < 8:
        raise InvalidGrid(f"blob2d needs a 2D grid with extents >= 8, got {grid.shape}")
    if num_images < 1:
        raise InvalidCount(f"need at least one image, got {num_images}")
    rng = make_rng(seed)
    ext = np.asarray(grid.shape, dtype=np.float64)
    images, masks, priors, ellipses = [], [], [], []
    for _ in range(num_images):
        center = rng.uniform(ext / 4.0, 3.0 * ext / 4.0)
        radii = rng.uniform(ext / 8.0, ext / 4.0)
        gt = _ellipse_mask(grid.shape, center, radii)
        noise = rng.standard_normal(grid.shape)
        images.append(np.where(gt == 1, CLASS_MEANS[1], CLASS_MEANS[0]) + noise)
        masks.append(BinaryMask(grid, gt.reshape(-1)))
        priors.append(gt.mean())
        ellipses.append(np.concatenate([center, radii]))
    return Blob2DDataset(
        grid=grid,
        images=images,
        ground_truth=masks,
        priors=np.asarray(priors),
        seed=int(seed),
        ellipses=np.asarray(ellipses),
    )


def simulate_annotation(dataset: Blob2DDataset, seed: int, jitter: float = 1.5, scale=(0.8, 1.2)) -> List[BinaryMask]:
    """Imperfect human outlines: each true ellipse with its centre shifted by
    up to ``jitter`` pixels and radii rescaled by a factor drawn from ``scale``."""
    rng = make_rng(seed)
    out = []
    for ell in dataset.ellipses:
        center = ell[:2] + rng.uniform(-jitter, jitter, size=2)
        radii = ell[2:] * rng.uniform(scale[0], scale[1], size=2)
        out.append(BinaryMask(dataset.grid, _ellipse_mask(dataset.grid.shape, center, radii).reshape(-1)))
    return out
