"""Cross-entropy, soft Dice and their weighted sum.

``probs`` has the class axis at position 1: (N, C) for classification or
(N, C, H, W) for segmentation. ``labels`` are integer class indices with the
class axis removed. Gradients are with respect to ``probs``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from trainvar.mca import Arithmetic

log = logging.getLogger(__name__)

EPS = 1e-12
EXACT = Arithmetic()


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    dice: float = 1.0

    def __post_init__(self):
        if self.ce < 0 or self.dice < 0 or self.ce + self.dice <= 0:
            raise ValueError(f"loss weights must be non-negative with a positive sum, got {self}")


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError(f"labels outside [0, {n_classes})")
    return np.moveaxis(np.eye(n_classes)[labels], -1, 1)


def _check(probs, labels):
    if probs.ndim != labels.ndim + 1 or probs.shape[:1] + probs.shape[2:] != labels.shape:
        raise ValueError(f"probs {probs.shape} and labels {labels.shape} are incompatible")


def _picked(probs, labels, counters):
    p = np.take_along_axis(probs, labels[:, None].astype(np.intp), axis=1)[:, 0]
    small = p < EPS
    if small.any():
        n = int(small.sum())
        if counters is not None:
            counters["ce_clamped"] += n
        log.debug("cross-entropy: clamped %d probabilities below %g", n, EPS)
        p = np.maximum(p, EPS)
    return p, small


def cross_entropy_loss(probs, labels, ar: Arithmetic = EXACT, counters: Counter | None = None) -> float:
    """Mean over positions of ``-log p(true class)``."""
    labels = np.asarray(labels)
    _check(probs, labels)
    p, _ = _picked(probs, labels, counters)
    return float(-ar.mean(ar.log(p)))


def cross_entropy_grad(probs, labels, ar: Arithmetic = EXACT) -> np.ndarray:
    labels = np.asarray(labels)
    p, small = _picked(probs, labels, None)
    g = np.zeros_like(probs)
    val = ar.div(-1.0, ar.mul(p, float(p.size)))
    val = np.where(small, 0.0, val)
    np.put_along_axis(g, labels[:, None].astype(np.intp), val[:, None], axis=1)
    return g


def _dice_terms(probs, labels, ar):
    y = one_hot(labels, probs.shape[1])
    axes = (0,) + tuple(range(2, probs.ndim))
    inter = ar.sum(ar.mul(probs, y), axis=axes)
    denom = ar.add(ar.sum(probs, axis=axes), y.sum(axis=axes))
    return y, axes, inter, denom


def dice_loss(probs, labels, ar: Arithmetic = EXACT) -> float:
    """``1 - mean_c 2 I_c / (P_c + Y_c)``; classes with ``P_c + Y_c = 0`` score 1."""
    labels = np.asarray(labels)
    _check(probs, labels)
    _, _, inter, denom = _dice_terms(probs, labels, ar)
    empty = denom == 0
    coef = np.where(empty, 1.0, ar.div(ar.mul(2.0, inter), np.where(empty, 1.0, denom)))
    return float(ar.sub(1.0, ar.mean(coef)))


def dice_grad(probs, labels, ar: Arithmetic = EXACT) -> np.ndarray:
    y, axes, inter, denom = _dice_terms(probs, labels, ar)
    n_classes = probs.shape[1]
    empty = denom == 0
    safe = np.where(empty, 1.0, denom)
    shape = [1] * probs.ndim
    shape[1] = n_classes
    # d/dp [2I/(P+Y)] = 2y/(P+Y) - 2I/(P+Y)^2
    a = ar.div(2.0, safe).reshape(shape)
    b = ar.div(ar.mul(2.0, inter), ar.mul(safe, safe)).reshape(shape)
    g = ar.sub(ar.mul(y, a), b)
    g = np.where(empty.reshape(shape), 0.0, g)
    return ar.mul(g, -1.0 / n_classes)


def total_loss(probs, labels, weights: LossWeights, ar: Arithmetic = EXACT) -> float:
    """``w_ce * cross_entropy + w_dice * dice``."""
    ce = cross_entropy_loss(probs, labels, ar)
    dl = dice_loss(probs, labels, ar)
    return float(ar.add(ar.mul(weights.ce, ce), ar.mul(weights.dice, dl)))


def loss_terms(probs, labels, weights: LossWeights, ar: Arithmetic = EXACT,
               counters: Counter | None = None) -> tuple[float, float, float]:
    """Return ``(ce, dice, total)`` from one evaluation of each component."""
    ce = cross_entropy_loss(probs, labels, ar, counters)
    dl = dice_loss(probs, labels, ar)
    return ce, dl, float(ar.add(ar.mul(weights.ce, ce), ar.mul(weights.dice, dl)))


def loss_grad(probs, labels, weights: LossWeights, ar: Arithmetic = EXACT) -> np.ndarray:
    """Gradient of the weighted loss with respect to ``probs``."""
    labels = np.asarray(labels)
    parts = []
    if weights.ce:
        parts.append(ar.mul(weights.ce, cross_entropy_grad(probs, labels, ar)))
    if weights.dice:
        parts.append(ar.mul(weights.dice, dice_grad(probs, labels, ar)))
    return parts[0] if len(parts) == 1 else ar.add(parts[0], parts[1])
