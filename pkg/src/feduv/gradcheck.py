"""Central finite-difference checks for every loss family.

The oracle only evaluates loss values; it never calls the analytic
gradient code it is checking.
"""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from . import model as mdl
from . import objectives as obj
from .numerics import RngStream

STEP = 1e-5
REL_TOL = 1e-4
# |a - n| / max(|a|, |n|, SCALE_FLOOR): makes 1e-6 absolute the pass line for near-zero entries.
SCALE_FLOOR = 1e-2

FAMILIES = ("cross_entropy", "variance_loss", "uniformity_loss", "fedprox_penalty", "feduv_loss")


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), SCALE_FLOOR)
    return float(np.max(np.abs(a - n) / scale))


def _random_logits(gen: np.random.Generator, b: int, d: int) -> np.ndarray:
    # Mixed scales so some variance hinges are inactive.
    return gen.standard_normal((b, d)) * gen.choice([0.5, 2.0, 6.0])


def _check_ce(gen, corrupt):
    b, d = gen.integers(2, 9), gen.integers(2, 7)
    z = _random_logits(gen, b, d)
    y = gen.integers(0, d, size=b)
    _, g = obj.cross_entropy(z, y)
    return g * corrupt, numeric_grad(lambda t: obj.cross_entropy(t, y)[0], z)


def _check_var(gen, corrupt):
    b, d = gen.integers(2, 9), gen.integers(2, 7)
    z = _random_logits(gen, b, d)
    c = obj.variance_threshold(d).c
    _, g = obj.variance_loss(z, c)
    return g * corrupt, numeric_grad(lambda t: obj.variance_loss(t, c)[0], z)


def _check_unif(gen, corrupt):
    n, k = gen.integers(2, 9), gen.integers(1, 6)
    x = gen.standard_normal((n, k))
    sigma = obj.rbf_bandwidth(obj.pairwise_sq_dists(x))
    _, g = obj.uniformity_loss(x)
    return g * corrupt, numeric_grad(lambda t: obj.uniformity_loss(t, sigma)[0], x)


def tiny_config(num_classes: int = 4) -> mdl.MlpConfig:
    return mdl.MlpConfig(input_dim=6, encoder_dims=(8,), projector_dim=8, num_classes=num_classes)


def _check_prox(gen, corrupt, seed):
    cfg = tiny_config()
    local = mdl.init_params(cfg, RngStream(seed, (1,)))
    glob = mdl.init_params(cfg, RngStream(seed, (2,)))
    mu = float(gen.uniform(0.001, 1.0))
    _, grads = obj.fedprox_penalty(local, glob, mu)
    analytic = np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads])
    numeric = numeric_grad(lambda v: obj.fedprox_penalty(local.unflatten(v), glob, mu)[0], local.flatten())
    return analytic * corrupt, numeric


def network_loss_and_grad(params, x, y, weights, c, sigma=None):
    cache = mdl.forward(params, x)
    br, g_logits, g_reps = obj.feduv_loss(cache, y, weights, c, sigma)
    grads = mdl.backward(params, cache, g_logits, g_reps)
    return br, grads, cache


def _check_feduv(gen, corrupt, seed):
    cfg = tiny_config()
    params = mdl.init_params(cfg, RngStream(seed, (3,)))
    # Nonzero biases so every bias gradient is exercised.
    for layer in params.layers:
        layer.bias[:] = gen.standard_normal(layer.bias.shape) * 0.1
    x = gen.standard_normal((5, cfg.input_dim))
    y = gen.integers(0, cfg.num_classes, size=5)
    weights = obj.LossWeights(mu=float(gen.uniform(0.1, 1.0)), lam=float(gen.uniform(0.5, 2.0)))
    c = obj.variance_threshold(cfg.num_classes).c
    _, grads, cache = network_loss_and_grad(params, x, y, weights, c)
    sigma = obj.rbf_bandwidth(obj.pairwise_sq_dists(cache.reps))
    analytic = np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads])

    def total(v):
        cache = mdl.forward(params.unflatten(v), x)
        return obj.feduv_loss(cache, y, weights, c, sigma)[0].total

    return analytic * corrupt, numeric_grad(total, params.flatten())


def run_suite(seed: int = 0, trials: int = 20, corrupt: str | None = None) -> dict[str, float]:
    """Max relative error per loss family over ``trials`` random instances.

    ``corrupt`` names a family whose analytic gradient is scaled by 1.01,
    to confirm the checker notices.
    """
    results = {}
    for fam_idx, name in enumerate(FAMILIES):
        gen = RngStream(seed, (fam_idx,)).generator()
        factor = 1.01 if name == corrupt else 1.0
        worst = 0.0
        for t in range(trials):
            if name == "cross_entropy":
                a, n = _check_ce(gen, factor)
            elif name == "variance_loss":
                a, n = _check_var(gen, factor)
            elif name == "uniformity_loss":
                a, n = _check_unif(gen, factor)
            elif name == "fedprox_penalty":
                a, n = _check_prox(gen, factor, seed * 1000 + t)
            else:
                a, n = _check_feduv(gen, factor, seed * 1000 + t)
            worst = max(worst, rel_error(a, n))
        results[name] = worst
    return results
