"""Dense numerics shared by every other module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The helpers
here validate shapes and finiteness so callers get a ``NumericsError``
instead of silently propagating NaNs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_VAR = 1e-8
SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100
DEGENERATE_NORM = 1e-10


class NumericsError(ValueError):
    pass


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class RngStream:
    """A seed plus a path of integer labels identifying one random stream.

    ``child`` derives independent sub-streams, e.g. ``root.child(round, client)``.
    Backed by numpy's ``SeedSequence``/``PCG64``, which are platform independent.
    """

    seed: int
    path: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.seed < 0 or any(int(p) < 0 for p in self.path):
            raise NumericsError("seed and stream labels must be non-negative")
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))

    def child(self, *labels: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(x) for x in labels))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.PCG64(ss))


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise NumericsError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def row_softmax(logits) -> np.ndarray:
    z = check_finite(as_matrix(logits, "logits"), "logits")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def pairwise_sq_dists(reps) -> np.ndarray:
    x = as_matrix(reps, "reps")
    if x.shape[0] < 1:
        raise NumericsError("reps needs at least one row")
    sq = np.einsum("ij,ij->i", x, x)
    scale = sq[:, None] + sq[None, :]
    d2 = scale - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, np.inf)
    # Near-coincident rows lose everything to cancellation; redo them from differences.
    close = d2 <= 1e-8 * scale
    if close.any():
        i, j = np.nonzero(close)
        diff = x[i] - x[j]
        d2[i, j] = np.einsum("ij,ij->i", diff, diff)
    np.fill_diagonal(d2, 0.0)
    np.maximum(d2, 0.0, out=d2)
    # (a + b) / 2 is commutative, so the result is exactly symmetric.
    return 0.5 * (d2 + d2.T)


def column_std(p, eps: float = EPS_VAR) -> np.ndarray:
    """Per-column population standard deviation, floored by ``eps`` inside the root."""
    p = as_matrix(p, "p")
    if p.shape[0] < 1:
        raise NumericsError("column_std needs at least one row")
    return np.sqrt(p.var(axis=0) + eps)


def median(values) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    n = v.size
    if n == 0:
        raise NumericsError("median of an empty set")
    mid = n // 2
    if n % 2:
        return float(np.partition(v, mid)[mid])
    part = np.partition(v, (mid - 1, mid))
    return float((part[mid - 1] + part[mid]) / 2.0)


def svd_values(w, tol: float = SVD_TOL, max_sweeps: int = SVD_MAX_SWEEPS) -> np.ndarray:
    """Singular values of ``w`` in descending order via one-sided Jacobi.

    Rotations act on the columns of whichever of ``w``/``w.T`` has fewer
    columns, so the implicit Gram matrix is the smaller one.
    """
    w = check_finite(as_matrix(w, "w"), "w")
    if w.size == 0:
        raise NumericsError("svd of an empty matrix")
    a = (w if w.shape[0] >= w.shape[1] else w.T).copy()
    n = a.shape[1]
    # Columns shrunk to roundoff level carry no signal; rotating them only churns noise.
    eps = np.finfo(np.float64).eps
    floor = eps * float(np.sum(a * a))
    coupling_floor = eps * floor
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap, aq = a[:, p], a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if (
                    abs(gamma) <= max(tol * np.sqrt(alpha * beta), coupling_floor)
                    or max(alpha, beta) <= floor
                ):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * ap - s * aq
                new_q = s * ap + c * aq
                a[:, p] = new_p
                a[:, q] = new_q
        if not rotated:
            return np.sort(np.sqrt(np.einsum("ij,ij->j", a, a)))[::-1]
    raise NumericsError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")


def orthonormalize_rows(w, rng: RngStream, max_redraws: int = 100) -> np.ndarray:
    """Modified Gram-Schmidt over the rows of ``w`` (two passes per row).

    A row whose residual norm falls below ``DEGENERATE_NORM`` is replaced by
    a fresh Gaussian draw from ``rng`` and orthogonalized again.
    """
    w = check_finite(as_matrix(w, "w"), "w")
    rows, cols = w.shape
    if rows > cols:
        raise NumericsError(f"cannot orthonormalize {rows} rows in {cols} dims")
    gen = rng.generator()
    out = np.zeros_like(w)
    for i in range(rows):
        v = w[i].copy()
        for _ in range(max_redraws + 1):
            for _pass in range(2):
                for j in range(i):
                    v -= (out[j] @ v) * out[j]
            norm = np.linalg.norm(v)
            if norm >= DEGENERATE_NORM:
                out[i] = v / norm
                break
            v = gen.standard_normal(cols)
        else:
            raise NumericsError(f"row {i} stayed degenerate after {max_redraws} redraws")
    return out
