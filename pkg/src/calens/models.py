"""Desk-scale binary classifiers trained under the weighted loss family.

Every model maps a scalar per-voxel feature to a foreground probability
``p1``; the two-class softmax output is ``(1 - p1, p1)``. Three kinds exist:

``threshold1d``
    hard step at a learned threshold, fitted by exhaustive scan.
``logistic``
    ``p1 = sigmoid(b + a*x)``.
``mlp``
    one tanh hidden layer, optional inverted dropout on the hidden units.

Gradient-trained kinds use full-batch gradient descent with Nesterov momentum.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Sequence

import numpy as np
from scipy.special import expit

from .core import BinaryMask, CalensError, GridMismatch, Heatmap, SampleGrid
from .losses import DEFAULT_EPS, PROB_CLAMP, binary_combined_loss
from .synthdata import make_rng

logger = logging.getLogger(__name__)

KINDS = ("threshold1d", "logistic", "mlp")
_BIG = float(np.finfo(np.float64).max)


class DivergedTraining(CalensError, RuntimeError):
    pass


class EmptyDataset(CalensError, ValueError):
    pass


class TooFewSamples(CalensError, ValueError):
    pass


class UnsupportedModelKind(CalensError, ValueError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 500
    learning_rate: float = 0.1
    momentum: float = 0.9
    hidden: int = 16
    eps: float = DEFAULT_EPS
    kind: str = "logistic"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedModelKind(self.kind)
        if self.epochs < 0 or self.learning_rate <= 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"invalid trainer settings: {self}")
        if self.hidden < 1 or self.eps <= 0:
            raise ValueError(f"invalid trainer settings: {self}")


@dataclass(frozen=True)
class DropoutSpec:
    drop_probability: float = 0.1
    passes: int = 7

    def __post_init__(self):
        if not 0 < self.drop_probability < 1:
            raise ValueError("drop_probability must lie in (0, 1)")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")


@dataclass(frozen=True)
class EnsembleSpec:
    w_dsc: float = 0.0
    offsets: tuple = (-3, -2, -1, 0, 1, 2, 3)
    folds: int = 5
    seed: int = 0
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(int(k) for k in self.offsets))
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.offsets:
            raise ValueError("need at least one offset")
        d = np.diff(self.weights)
        if d.size and not ((d > 0).all() or (d < 0).all()):
            raise ValueError("loss weights must be strictly monotone")

    @property
    def weights(self) -> List[float]:
        return [float(self.w_dsc - k) for k in self.offsets]


@dataclass(eq=False)
class ToyModel:
    kind: str
    parameters: np.ndarray
    loss_weight: float
    seed: int
    hidden: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UnsupportedModelKind(self.kind)
        self.parameters = np.asarray(self.parameters, dtype=np.float64)

    def _forward(self, x, drop_probability=0.0, rng=None):
        if self.kind == "threshold1d":
            return (x > self.parameters[0]).astype(np.float64), None
        if self.kind == "logistic":
            b, a = self.parameters
            return expit(b + a * x), None
        h = self.hidden
        w1, b1, w2, b2 = (
            self.parameters[:h],
            self.parameters[h : 2 * h],
            self.parameters[2 * h : 3 * h],
            self.parameters[3 * h],
        )
        act = np.tanh(np.outer(x, w1) + b1)
        keep = None
        if drop_probability > 0:
            keep = (rng.random(act.shape) >= drop_probability) / (1.0 - drop_probability)
            act = act * keep
        return expit(act @ w2 + b2), (act, keep)

    def foreground_probability(self, inputs, drop_probability=0.0, rng=None) -> np.ndarray:
        x = np.asarray(inputs, dtype=np.float64).reshape(-1)
        return self._forward(x, drop_probability, rng)[0]

    def decision_threshold(self) -> float:
        """Feature value where the prediction flips to foreground."""
        if self.kind == "threshold1d":
            return float(self.parameters[0])
        if self.kind == "logistic":
            b, a = self.parameters
            return float(-b / a) if a != 0 else float("nan")
        grid = np.linspace(-10, 10, 20001)
        fg = self.foreground_probability(grid) > 0.5
        idx = np.flatnonzero(fg[1:] != fg[:-1])
        return float(grid[idx[0] + 1]) if idx.size else float("nan")


def _as_features(data) -> np.ndarray:
    x = np.asarray(data, dtype=np.float64).reshape(-1)
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    return x


def _init_parameters(kind: str, hidden: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "logistic":
        return 0.1 * rng.standard_normal(2)
    w1 = rng.standard_normal(hidden)
    b1 = 0.5 * rng.standard_normal(hidden)
    w2 = rng.standard_normal(hidden) / np.sqrt(hidden)
    return np.concatenate([w1, b1, w2, [0.0]])


def _loss_and_grad(model: ToyModel, x, y1, w, eps, drop_probability, rng):
    p1, cache = model._forward(x, drop_probability, rng)
    loss, g0, g1 = binary_combined_loss(y1, p1, w, eps)
    # chain rule through the two-class softmax p1 = sigmoid(z)
    dz = (g1 - g0) * p1 * (1.0 - p1)
    if model.kind == "logistic":
        return loss, np.array([dz.sum(), dz @ x])
    act, keep = cache
    h = model.hidden
    w1, w2 = model.parameters[:h], model.parameters[2 * h : 3 * h]
    g_w2 = act.T @ dz
    g_b2 = dz.sum()
    dact = np.outer(dz, w2)
    if keep is not None:
        dact = dact * keep
        pre = np.tanh(np.outer(x, w1) + model.parameters[h : 2 * h])
    else:
        pre = act
    dpre = dact * (1.0 - pre**2)
    return loss, np.concatenate([dpre.T @ x, dpre.sum(axis=0), g_w2, [g_b2]])


def _fit_threshold(x, y1, w, eps) -> float:
    """Exhaustive scan of hard thresholds under the combined loss."""
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y1[order].astype(np.float64)
    n = xs.size
    # candidate k: samples [k:] predicted foreground
    fg_total = ys.sum()
    fg_below = np.concatenate([[0.0], np.cumsum(ys)])
    bg_below = np.arange(n + 1) - fg_below
    fn = fg_below
    tp = fg_total - fg_below
    fp = (n - fg_total) - bg_below
    penalty = -np.log(PROB_CLAMP)
    ce = penalty * (np.exp(-w) * fn + fp) / n
    tv = 1.0 - (tp + eps) / (tp + expit(w) * fp + expit(-w) * fn + eps)
    loss = ce + tv
    # only positions between distinct feature values are realisable
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = xs[1:] > xs[:-1]
    k = int(np.flatnonzero(valid)[np.argmin(loss[valid])])
    # all-foreground / all-background fits must not depend on the data range
    if k == 0:
        return -_BIG
    if k == n:
        return _BIG
    return float(0.5 * (xs[k - 1] + xs[k]))


def train_member(
    data,
    labels,
    w: float,
    seed: int,
    hp: TrainerConfig = TrainerConfig(),
    drop_probability: float = 0.0,
) -> ToyModel:
    """Fit one ensemble member by minimising the combined loss at weight ``w``."""
    x = _as_features(data)
    y1 = np.asarray(labels).reshape(-1).astype(np.uint8)
    if x.size == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    if y1.size != x.size:
        raise GridMismatch(f"{x.size} features vs {y1.size} labels")
    if hp.kind == "threshold1d":
        t = _fit_threshold(x, y1, float(w), hp.eps)
        return ToyModel("threshold1d", np.array([t]), float(w), int(seed))

    rng = make_rng(seed)
    hidden = hp.hidden if hp.kind == "mlp" else 0
    model = ToyModel(hp.kind, _init_parameters(hp.kind, hidden, rng), float(w), int(seed), hidden)
    y1f = y1.astype(np.float64)
    theta = model.parameters.copy()
    velocity = np.zeros_like(theta)
    for epoch in range(hp.epochs):
        model.parameters = theta + hp.momentum * velocity
        loss, grad = _loss_and_grad(model, x, y1f, w, hp.eps, drop_probability, rng)
        if not np.isfinite(loss) or not np.isfinite(grad).all():
            raise DivergedTraining(f"non-finite loss at epoch {epoch} (w={w}, seed={seed})")
        velocity = hp.momentum * velocity - hp.learning_rate * grad
        theta = theta + velocity
    if not np.isfinite(theta).all():
        raise DivergedTraining(f"non-finite parameters (w={w}, seed={seed})")
    model.parameters = theta
    return model


def _grid_for(inputs, grid) -> SampleGrid:
    arr = np.asarray(inputs)
    if grid is None:
        return SampleGrid(arr.shape if arr.ndim else (1,))
    grid = grid if isinstance(grid, SampleGrid) else SampleGrid(tuple(grid))
    if grid.voxel_count != arr.size:
        raise GridMismatch(f"{arr.size} inputs for grid {grid.shape}")
    return grid


def predict_mask(m: ToyModel, inputs, grid=None) -> BinaryMask:
    """Foreground where probability exceeds 0.5; exact ties go to background."""
    g = _grid_for(inputs, grid)
    return BinaryMask(g, (m.foreground_probability(inputs) > 0.5).astype(np.uint8))


def ensemble_mask(models: Sequence[ToyModel], inputs, grid=None) -> BinaryMask:
    """Average member probabilities, then threshold at 0.5."""
    g = _grid_for(inputs, grid)
    prob = np.mean([m.foreground_probability(inputs) for m in models], axis=0)
    return BinaryMask(g, (prob > 0.5).astype(np.uint8))


def fold_assignment(n_units: int, folds: int, seed: int) -> np.ndarray:
    """Fold index per unit: shuffle by seed, then split into contiguous blocks."""
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n_units < folds:
        raise TooFewSamples(f"{n_units} units cannot fill {folds} folds")
    perm = make_rng(seed).permutation(n_units)
    out = np.empty(n_units, dtype=np.int64)
    for f, block in enumerate(np.array_split(perm, folds)):
        out[block] = f
    return out


def _unit_folds(n: int, folds: int, seed: int, groups) -> np.ndarray:
    if groups is None:
        return fold_assignment(n, folds, seed)
    groups = np.asarray(groups).reshape(-1)
    if groups.size != n:
        raise GridMismatch(f"{groups.size} group ids for {n} samples")
    uniq, inverse = np.unique(groups, return_inverse=True)
    return fold_assignment(uniq.size, folds, seed)[inverse]


def _member_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


@dataclass(eq=False)
class CrossValResult:
    masks: np.ndarray
    fold_of: np.ndarray
    models: List[ToyModel]


def _run(jobs, threads: int):
    if threads <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: job(), jobs))


def cross_val_predict(
    data,
    labels,
    w: float,
    folds: int,
    seed: int,
    hp: TrainerConfig = TrainerConfig(),
    groups=None,
    threads: int = 1,
    _fold_of=None,
    _seed_key: int = 0,
) -> CrossValResult:
    """Out-of-fold hard predictions: each sample is predicted by the model
    whose training folds excluded it.

    ``groups`` keeps samples sharing a group id (e.g. all pixels of one
    image) in the same fold.
    """
    x = _as_features(data)
    y1 = np.asarray(labels).reshape(-1).astype(np.uint8)
    if y1.size != x.size:
        raise GridMismatch(f"{x.size} features vs {y1.size} labels")
    fold_of = _fold_of if _fold_of is not None else _unit_folds(x.size, folds, seed, groups)

    def job(f):
        train = fold_of != f
        return lambda: train_member(x[train], y1[train], w, _member_seed(seed, _seed_key, f), hp)

    models = _run([job(f) for f in range(folds)], threads)
    masks = np.zeros(x.size, dtype=np.uint8)
    for f, m in enumerate(models):
        held = fold_of == f
        masks[held] = m.foreground_probability(x[held]) > 0.5
    return CrossValResult(masks=masks, fold_of=fold_of, models=models)


@dataclass(eq=False)
class CalibratedEnsemble:
    weights: List[float]
    members: List[List[ToyModel]]
    cv_masks: np.ndarray
    fold_of: np.ndarray

    def predict_masks(self, inputs) -> np.ndarray:
        """(n_weights, n_voxels) masks; fold models are averaged per weight."""
        return np.stack([ensemble_mask(fold_models, inputs).values for fold_models in self.members])

    @property
    def n_models(self) -> int:
        return sum(len(m) for m in self.members)


def train_calibrated_ensemble(data, labels, spec: EnsembleSpec, groups=None, threads: int = 1) -> CalibratedEnsemble:
    """A full cross-validation per loss weight, sharing one fold partition."""
    x = _as_features(data)
    fold_of = _unit_folds(x.size, spec.folds, spec.seed, groups)
    results = [
        cross_val_predict(
            x, labels, w, spec.folds, spec.seed, spec.trainer, threads=threads, _fold_of=fold_of, _seed_key=k
        )
        for k, w in enumerate(spec.weights)
    ]
    logger.info("trained %d members", len(results) * spec.folds)
    return CalibratedEnsemble(
        weights=spec.weights,
        members=[r.models for r in results],
        cv_masks=np.stack([r.masks for r in results]),
        fold_of=fold_of,
    )


def uncalibrated_ensemble(
    data, labels, w: float, seeds: Sequence[int], hp: TrainerConfig = TrainerConfig(), threads: int = 1
) -> List[ToyModel]:
    x = _as_features(data)
    return _run([lambda s=s: train_member(x, labels, w, s, hp) for s in seeds], threads)


def train_dropout_model(
    data, labels, w: float, seed: int, spec: DropoutSpec = DropoutSpec(), hp: TrainerConfig = TrainerConfig()
) -> ToyModel:
    """MLP trained with dropout active on its hidden layer."""
    return train_member(data, labels, w, seed, replace(hp, kind="mlp"), drop_probability=spec.drop_probability)


def dropout_masks(m: ToyModel, inputs, spec: DropoutSpec = DropoutSpec(), seed: int = 0, grid=None) -> List[BinaryMask]:
    """``spec.passes`` hard predictions with dropout left on."""
    if m.kind != "mlp":
        raise UnsupportedModelKind(f"dropout inference needs an mlp, got {m.kind}")
    g = _grid_for(inputs, grid)
    rng = make_rng(seed)
    return [
        BinaryMask(g, (m.foreground_probability(inputs, spec.drop_probability, rng) > 0.5).astype(np.uint8))
        for _ in range(spec.passes)
    ]


def dropout_heatmap(m: ToyModel, inputs, spec: DropoutSpec = DropoutSpec(), seed: int = 0, grid=None) -> Heatmap:
    """Pixelwise mean of the dropout passes; values lie on the grid k/passes."""
    masks = dropout_masks(m, inputs, spec, seed, grid)
    votes = np.sum([mk.values for mk in masks], axis=0, dtype=np.float64)
    return Heatmap(masks[0].grid, votes / spec.passes)


def majority_vote(masks: Sequence[BinaryMask]) -> BinaryMask:
    """Foreground where more than half of the masks agree."""
    stacked = np.stack([m.values for m in masks])
    return BinaryMask(masks[0].grid, (2 * stacked.sum(axis=0) > len(masks)).astype(np.uint8))
