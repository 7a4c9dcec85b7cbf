"""Dense linear algebra used throughout the package.

Matrices and vectors are plain float64 numpy arrays (row-major, C order).
Every product that the layers execute in a forward pass goes through the
helpers here so that an active :func:`count_macs` context can tally the
scalar multiplies actually performed.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "MacCounter",
    "count_macs",
    "as_matrix",
    "as_vector",
    "matmul",
    "matvec",
    "linear",
    "bmatvec",
    "bmm",
    "reshape",
    "flatten",
    "jacobi_eigh",
    "pca2d",
]


class ShapeError(ValueError):
    """Raised when operand dimensions do not line up."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


@dataclass
class MacCounter:
    macs: int = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "apg_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiplies issued by the helpers in this module.

    The counter lives in a context variable, so concurrent evaluations in
    other threads or contexts are not affected.
    """
    counter = MacCounter()
    token = _COUNTER.set(counter)
    try:
        yield counter
    finally:
        _COUNTER.reset(token)


def _tally(n: int) -> None:
    counter = _COUNTER.get()
    if counter is not None:
        counter.add(n)


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError("as_matrix", a.shape, detail="expected a non-empty 2-D array")
    return a


def as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("as_vector", x.shape, detail="expected a 1-D array")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``c[i, j] = sum_t a[i, t] * b[t, j]``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    _tally(a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ShapeError("matvec", a.shape, x.shape)
    _tally(a.shape[0] * a.shape[1])
    return a @ x


def linear(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Apply ``w`` (out x in) to every row of ``x`` (batch x in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape)
    _tally(x.shape[0] * w.shape[0] * w.shape[1])
    return x @ w.T


def bmatvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Per-instance matrix-vector product: ``(B, n, m) x (B, m) -> (B, n)``."""
    if a.ndim != 3 or x.ndim != 2 or a.shape[0] != x.shape[0] or a.shape[2] != x.shape[1]:
        raise ShapeError("bmatvec", a.shape, x.shape)
    _tally(a.shape[0] * a.shape[1] * a.shape[2])
    return np.matmul(a, x[:, :, None])[:, :, 0]


def bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-instance matrix product: ``(B, n, k) x (B, k, m) -> (B, n, m)``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError("bmm", a.shape, b.shape)
    _tally(a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
    return np.matmul(a, b)


def reshape(v: np.ndarray, n: int, m: int) -> np.ndarray:
    """Row-major fill of an ``n x m`` matrix from a flat vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != n * m:
        raise ShapeError("reshape", v.shape, (n, m), detail=f"need length {n * m}")
    return v.reshape(n, m)


def flatten(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1)


def jacobi_eigh(
    a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` sorted by descending eigenvalue,
    eigenvectors in columns.
    """
    a = np.array(a, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ShapeError("jacobi_eigh", a.shape, detail="expected a square matrix")
    v = np.eye(n)
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J on rows/cols p, q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def _fix_sign(vec: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    nz = np.flatnonzero(np.abs(vec) > eps)
    if nz.size and vec[nz[0]] < 0:
        return -vec
    return vec


def pca2d(
    points: Sequence[np.ndarray] | np.ndarray, return_components: bool = False
):
    """Project points onto the top-2 principal axes of their sample covariance.

    Each axis is sign-normalised so its first nonzero coordinate is positive.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("pca2d", x.shape, detail="points must share one dimension")
    if x.shape[0] < 3:
        raise ValueError(f"pca2d needs at least 3 points, got {x.shape[0]}")
    if x.shape[1] < 2:
        raise ValueError(f"pca2d needs dimension >= 2, got {x.shape[1]}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    if not np.any(np.abs(centered) > 0):
        raise ValueError("pca2d: degenerate covariance (all points identical)")
    _, vecs = jacobi_eigh(cov)
    comps = np.stack([_fix_sign(vecs[:, 0]), _fix_sign(vecs[:, 1])], axis=1)
    proj = centered @ comps
    if return_components:
        return proj, comps
    return proj
