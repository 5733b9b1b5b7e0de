"""Weighted cross-entropy + weighted Tversky loss family.

A per-class weight ``w_c`` trades sensitivity against precision: negative
weights up-weight foreground cross-entropy and penalise false negatives more
in the overlap term; positive weights do the opposite. ``w = 0`` gives the
usual cross-entropy + soft-Dice loss.

Gradients are returned with respect to every entry of the probability array,
treating entries as independent variables (the softmax Jacobian is applied by
the caller).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import expit

from .core import ClassCountMismatch, OneHotLabel, SoftPrediction, check_labels

PROB_CLAMP = 1e-7
DEFAULT_EPS = 1.0


@dataclass(frozen=True)
class ConfusionTotals:
    tp: float
    fp: float
    fn: float
    tn: float


def as_weights(w, num_foreground: int) -> np.ndarray:
    w = np.atleast_1d(np.asarray(w, dtype=np.float64))
    if w.size == 1 and num_foreground > 1:
        w = np.full(num_foreground, w[0])
    if w.size != num_foreground:
        raise ClassCountMismatch(f"{w.size} loss weights for {num_foreground} foreground classes")
    if not np.isfinite(w).all():
        raise ValueError("loss weights must be finite")
    return w


def _arrays(y, p):
    if isinstance(y, OneHotLabel) and isinstance(p, SoftPrediction):
        check_labels(y, p)
        return y.values.astype(np.float64), p.values
    y = np.asarray(getattr(y, "values", y), dtype=np.float64)
    p = np.asarray(getattr(p, "values", p), dtype=np.float64)
    if y.shape != p.shape:
        raise ClassCountMismatch(f"label shape {y.shape} vs prediction shape {p.shape}")
    return y, p


def confusion_totals(y, p, c: int = 1) -> ConfusionTotals:
    """Soft confusion counts of class ``c`` against the rest."""
    y, p = _arrays(y, p)
    yc, pc = y[:, c], p[:, c]
    return ConfusionTotals(
        tp=float(np.sum(pc * yc)),
        fp=float(np.sum(pc * (1.0 - yc))),
        fn=float(np.sum((1.0 - pc) * yc)),
        tn=float(np.sum((1.0 - pc) * (1.0 - yc))),
    )


def weighted_cross_entropy(y, p, w) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy with foreground class ``c`` scaled by ``exp(-w_c)``.

    Returns ``(loss, grad)`` where ``grad`` has the shape of ``p``.
    """
    y, p = _arrays(y, p)
    n, k = p.shape
    w = as_weights(w, k - 1)
    scale = np.concatenate([[1.0], np.exp(-w)])
    pc = np.clip(p, PROB_CLAMP, 1.0)
    loss = -float(np.sum(scale * y * np.log(pc))) / n
    inside = (p >= PROB_CLAMP) & (p <= 1.0)
    grad = np.where(inside, -scale * y / (pc * n), 0.0)
    return loss, grad


def weighted_tversky_loss(y, p, w, eps: float = DEFAULT_EPS) -> Tuple[float, np.ndarray]:
    """One minus the Tversky index, averaged over foreground classes.

    The index is ``(TP + eps) / (TP + s(w)FP + s(-w)FN + eps)`` with ``s``
    the logistic sigmoid, so ``w = 0`` gives the smoothed soft Dice score.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    y, p = _arrays(y, p)
    k = p.shape[1]
    n_fg = k - 1
    w = as_weights(w, n_fg)
    alpha, beta = expit(w), expit(-w)

    yf, pf = y[:, 1:], p[:, 1:]
    tp = np.sum(pf * yf, axis=0)
    fp = np.sum(pf * (1.0 - yf), axis=0)
    fn = np.sum((1.0 - pf) * yf, axis=0)
    num = tp + eps
    den = tp + alpha * fp + beta * fn + eps
    loss = float(np.mean(1.0 - num / den))

    # d(num/den)/dp = (y*den - num*(y + alpha*(1-y) - beta*y)) / den^2
    dden = yf + alpha * (1.0 - yf) - beta * yf
    dindex = (yf * den - num * dden) / den**2
    grad = np.zeros_like(p)
    grad[:, 1:] = -dindex / n_fg
    return loss, grad


def combined_loss(y, p, w, eps: float = DEFAULT_EPS) -> Tuple[float, np.ndarray]:
    ce, g_ce = weighted_cross_entropy(y, p, w)
    tv, g_tv = weighted_tversky_loss(y, p, w, eps)
    return ce + tv, g_ce + g_tv


def binary_combined_loss(y1, p1, w: float, eps: float = DEFAULT_EPS):
    """Single-foreground-class ``combined_loss`` on flat arrays.

    Returns ``(loss, grad_background, grad_foreground)``; numerically the same
    as ``combined_loss`` on the stacked two-channel arrays, without building
    them. Used in training loops.
    """
    y1 = np.asarray(y1, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    n = p1.size
    p0 = 1.0 - p1
    scale = np.exp(-w)
    c1 = np.maximum(p1, PROB_CLAMP)
    c0 = np.maximum(p0, PROB_CLAMP)
    y0 = 1.0 - y1
    ce = -(y0 @ np.log(c0) + scale * (y1 @ np.log(c1))) / n
    g0 = np.where(p0 >= PROB_CLAMP, -y0 / (c0 * n), 0.0)
    g1 = np.where(p1 >= PROB_CLAMP, -scale * y1 / (c1 * n), 0.0)

    alpha, beta = expit(w), expit(-w)
    tp = p1 @ y1
    fp = p1.sum() - tp
    fn = y1.sum() - tp
    num = tp + eps
    den = tp + alpha * fp + beta * fn + eps
    dden = y1 + alpha * y0 - beta * y1
    g1 = g1 - (y1 * den - num * dden) / den**2
    return ce + 1.0 - num / den, g0, g1
