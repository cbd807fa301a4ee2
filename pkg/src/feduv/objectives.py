"""Local-training losses and their analytic gradients.

Every loss returns ``(value, gradient)``; nothing here touches model
parameters except ``fedprox_penalty``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .model import ForwardCache, Gradients, ModelParams
from .numerics import (
    EPS_VAR,
    NumericsError,
    as_matrix,
    check_finite,
    column_std,
    median,
    pairwise_sq_dists,
    row_softmax,
)

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    mu: float = 0.5  # uniformity
    lam: float = 2.5  # variance

    def __post_init__(self):
        if self.mu < 0 or self.lam < 0:
            raise ValueError(f"loss weights must be non-negative, got mu={self.mu}, lam={self.lam}")

    @classmethod
    def default_for(cls, num_classes: int) -> "LossWeights":
        return cls(mu=0.5, lam=num_classes / 4.0)


@dataclass
class LossBreakdown:
    ce: float = 0.0
    l_v: float = 0.0
    l_u: float = 0.0
    prox: float = 0.0
    total: float = 0.0

    FIELDS = ("ce", "l_v", "l_u", "prox", "total")

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, f) for f in self.FIELDS)

    @classmethod
    def mean(cls, items: list["LossBreakdown"]) -> "LossBreakdown":
        if not items:
            return cls()
        arr = np.array([b.as_tuple() for b in items])
        return cls(*(float(v) for v in arr.mean(axis=0)))


@dataclass(frozen=True)
class VarianceThreshold:
    c: float
    num_classes: int


def _check_labels(labels, n_rows: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n_rows,):
        raise NumericsError(f"expected {n_rows} labels, got shape {y.shape}")
    if n_rows == 0:
        raise NumericsError("empty batch")
    if y.min() < 0 or y.max() >= num_classes:
        raise NumericsError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def _softmax_ce(z: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    check_finite(z, "logits")
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    norm = e.sum(axis=1)
    rows = np.arange(z.shape[0])
    ce = float(np.mean(np.log(norm) - shifted[rows, y]))
    return e / norm[:, None], ce


def _ce_grad(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    g = p.copy()
    g[np.arange(p.shape[0]), y] -= 1.0
    g /= p.shape[0]
    return g


def _softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return p * (grad_p - np.sum(grad_p * p, axis=1, keepdims=True))


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    z = as_matrix(logits, "logits")
    y = _check_labels(labels, *z.shape)
    p, ce = _softmax_ce(z, y)
    return ce, _ce_grad(p, y)


def variance_threshold(num_classes: int) -> VarianceThreshold:
    """Mean column standard deviation of the D x D identity (population variance)."""
    if num_classes < 2:
        raise NumericsError("variance threshold needs at least 2 classes")
    c = float(np.mean(column_std(np.eye(num_classes))))
    return VarianceThreshold(c, num_classes)


def variance_hinge(p, c: float, eps: float = EPS_VAR) -> tuple[float, np.ndarray]:
    """Hinge on per-column std of a probability table; gradient w.r.t. the table."""
    p = as_matrix(p, "p")
    b, d = p.shape
    if b < 2:
        return float(c), np.zeros_like(p)
    std = column_std(p, eps)
    gap = c - std
    active = gap > 0.0
    loss = float(np.sum(np.where(active, gap, 0.0)) / d)
    # d std_j / d p_ij = (p_ij - mean_j) / (b * std_j)
    coef = np.where(active, -1.0 / (d * b * std), 0.0)
    grad = (p - p.mean(axis=0)) * coef
    return loss, grad


def variance_loss(logits, c: float) -> tuple[float, np.ndarray]:
    z = as_matrix(logits, "logits")
    if z.shape[0] < 2:
        return float(c), np.zeros_like(z)
    p = row_softmax(z)
    loss, grad_p = variance_hinge(p, c)
    return loss, _softmax_backward(p, grad_p)


@lru_cache(maxsize=64)
def _upper_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    return np.triu_indices(n, 1)


def rbf_bandwidth(sq_dists: np.ndarray) -> float:
    sigma = median(sq_dists[_upper_pairs(sq_dists.shape[0])])
    return sigma if sigma > 0.0 else SIGMA_FLOOR


def uniformity_loss(reps, sigma: float | None = None) -> tuple[float, np.ndarray]:
    """Mean Gaussian energy over distinct unordered pairs of rows.

    ``sigma`` defaults to the median pairwise squared distance and is held
    constant when differentiating.
    """
    x = as_matrix(reps, "reps")
    n = x.shape[0]
    if n <= 1:
        return 0.0, np.zeros_like(x)
    d2 = pairwise_sq_dists(x)
    if sigma is None:
        sigma = rbf_bandwidth(d2)
    elif sigma <= 0:
        raise NumericsError("sigma must be positive")
    k = np.exp(d2 * (-0.5 / sigma))
    n_pairs = n * (n - 1) / 2
    # Diagonal entries are exp(0) = 1 exactly; drop them from the row sums.
    row = k.sum(axis=1) - 1.0
    loss = float(row.sum() / (2.0 * n_pairs))
    grad = (k @ x - x - row[:, None] * x) / (n_pairs * sigma)
    return loss, grad


def feduv_loss(
    cache: ForwardCache,
    labels,
    weights: LossWeights,
    c: float,
    sigma: float | None = None,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Cross-entropy plus weighted uniformity and variance terms.

    Returns the breakdown, d/dlogits of (CE + lam * L_V) and d/dreps of
    mu * L_U. The CE path into the representations is left to ``backward``.
    """
    z = cache.logits
    y = _check_labels(labels, *z.shape)
    # One softmax serves both the CE and variance terms.
    p, ce = _softmax_ce(z, y)
    g_ce = _ce_grad(p, y)
    if z.shape[0] < 2:
        l_v, g_v = float(c), np.zeros_like(z)
    else:
        l_v, grad_p = variance_hinge(p, c)
        g_v = _softmax_backward(p, grad_p)
    l_u, g_u = uniformity_loss(cache.reps, sigma)
    total = ce + weights.mu * l_u + weights.lam * l_v
    grad_logits = g_ce + weights.lam * g_v
    grad_reps = weights.mu * g_u
    return LossBreakdown(ce=ce, l_v=l_v, l_u=l_u, prox=0.0, total=total), grad_logits, grad_reps


def fedprox_penalty(local: ModelParams, global_: ModelParams, mu_prox: float) -> tuple[float, Gradients]:
    local.check_congruent(global_)
    loss = 0.0
    grads: Gradients = []
    for a, b in zip(local.layers, global_.layers):
        dw = a.weights - b.weights
        db = a.bias - b.bias
        loss += float(np.sum(dw * dw) + np.sum(db * db))
        grads.append((mu_prox * dw, mu_prox * db))
    return 0.5 * mu_prox * loss, grads
