"""Shared domain types for masks, heatmaps and per-class label arrays.

Voxel arrays are stored flat in row-major order. Masks and labels are uint8,
probabilities are float64. All containers are frozen and their arrays are
marked read-only, so they can be shared freely.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np


class CalensError(Exception):
    """Base class for all package errors."""


class GridMismatch(CalensError, ValueError):
    pass


class ClassCountMismatch(CalensError, ValueError):
    pass


class InvalidGrid(CalensError, ValueError):
    pass


class InvalidValues(CalensError, ValueError):
    pass


class LengthMismatch(CalensError, ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SampleGrid:
    """Extents of a 1D, 2D or 3D sample grid."""

    shape: tuple

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if not 1 <= len(shape) <= 3:
            raise InvalidGrid(f"grid must have 1-3 dimensions, got {len(shape)}")
        if any(s < 1 for s in shape):
            raise InvalidGrid(f"grid extents must be positive, got {shape}")
        object.__setattr__(self, "shape", shape)

    @property
    def voxel_count(self) -> int:
        return int(np.prod(self.shape))

    @property
    def ndim(self) -> int:
        return len(self.shape)


def _as_grid(grid) -> SampleGrid:
    return grid if isinstance(grid, SampleGrid) else SampleGrid(tuple(grid))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    grid: SampleGrid
    values: np.ndarray

    def __post_init__(self):
        grid = _as_grid(self.grid)
        values = np.asarray(self.values).reshape(-1)
        if values.size != grid.voxel_count:
            raise GridMismatch(f"{values.size} values for grid {grid.shape}")
        if values.size and not np.isin(values, (0, 1)).all():
            raise InvalidValues("mask values must be 0 or 1")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", _frozen(values.astype(np.uint8)))

    @classmethod
    def from_array(cls, arr) -> "BinaryMask":
        arr = np.asarray(arr)
        return cls(SampleGrid(arr.shape), arr.reshape(-1))

    def to_heatmap(self) -> "Heatmap":
        return Heatmap(self.grid, self.values.astype(np.float64))

    def to_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)


@dataclass(frozen=True, eq=False)
class Heatmap:
    grid: SampleGrid
    values: np.ndarray

    def __post_init__(self):
        grid = _as_grid(self.grid)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size != grid.voxel_count:
            raise GridMismatch(f"{values.size} values for grid {grid.shape}")
        if values.size and (not np.isfinite(values).all() or values.min() < 0.0 or values.max() > 1.0):
            raise InvalidValues("heatmap values must lie in [0, 1]")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def from_array(cls, arr) -> "Heatmap":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(SampleGrid(arr.shape), arr.reshape(-1))

    def is_binary(self) -> bool:
        return bool(np.isin(self.values, (0.0, 1.0)).all())

    def to_mask(self) -> BinaryMask:
        if not self.is_binary():
            raise InvalidValues("heatmap is not binary")
        return BinaryMask(self.grid, self.values.astype(np.uint8))

    def to_array(self) -> np.ndarray:
        return self.values.reshape(self.grid.shape)


@dataclass(frozen=True, eq=False)
class OneHotLabel:
    """One-hot ground truth, shape (voxels, C + 1); channel 0 is background."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[1] < 2:
            raise ClassCountMismatch("one-hot labels need shape (voxels, C+1) with C >= 1")
        if not np.isin(values, (0, 1)).all() or not (values.sum(axis=1) == 1).all():
            raise InvalidValues("each voxel must carry exactly one class")
        object.__setattr__(self, "values", _frozen(values.astype(np.uint8)))

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    @property
    def voxel_count(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_indices(cls, labels, num_classes: int) -> "OneHotLabel":
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise InvalidValues("class index out of range")
        return cls(np.eye(num_classes, dtype=np.uint8)[labels])

    @classmethod
    def from_mask(cls, mask: BinaryMask) -> "OneHotLabel":
        return cls.from_indices(mask.values, 2)

    def to_mask(self, grid=None) -> BinaryMask:
        if self.num_classes != 2:
            raise ClassCountMismatch("only C=1 labels convert to a binary mask")
        grid = grid if grid is not None else SampleGrid((self.voxel_count,))
        return BinaryMask(grid, self.values[:, 1])


@dataclass(frozen=True, eq=False)
class SoftPrediction:
    """Per-voxel class probabilities, shape (voxels, C + 1)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] < 2:
            raise ClassCountMismatch("predictions need shape (voxels, C+1) with C >= 1")
        if values.size:
            if values.min() < 0.0 or values.max() > 1.0:
                raise InvalidValues("probabilities must lie in [0, 1]")
            if np.abs(values.sum(axis=1) - 1.0).max() > 1e-6:
                raise InvalidValues("probability vectors must sum to 1")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    @property
    def voxel_count(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_foreground(cls, p1) -> "SoftPrediction":
        p1 = np.asarray(p1, dtype=np.float64).reshape(-1)
        return cls(np.stack([1.0 - p1, p1], axis=1))


def validate_pair(mask: BinaryMask, other: Union[BinaryMask, Heatmap]) -> None:
    """Raise GridMismatch unless both arrays live on the same grid."""
    if mask.grid.shape != other.grid.shape:
        raise GridMismatch(f"grid {mask.grid.shape} does not match {other.grid.shape}")


def validate_all(items: Sequence[Union[BinaryMask, Heatmap]]) -> SampleGrid:
    if not items:
        raise ValueError("need at least one array")
    for item in items[1:]:
        validate_pair(items[0], item)
    return items[0].grid


def check_labels(y: OneHotLabel, p: SoftPrediction) -> None:
    if y.voxel_count != p.voxel_count:
        raise GridMismatch(f"{y.voxel_count} label voxels vs {p.voxel_count} predicted")
    if y.num_classes != p.num_classes:
        raise ClassCountMismatch(f"{y.num_classes} label classes vs {p.num_classes} predicted")
