"""Stationary covariance functions and kernel-matrix operators.

Two operator types are provided. :class:`KernelMatrix` represents
``K_hat = k(X, X) + noise * I`` either as a cached dense array or as a
matrix-free operator that evaluates row blocks on the fly.
:class:`DenseOperator` wraps an arbitrary symmetric positive definite array
so the solver can be exercised on systems that do not come from a kernel.
Both expose ``n``, ``matvec``, ``diag`` and ``dense`` and count every
matrix-vector product in ``n_matvecs``.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

FAMILIES = ("rbf", "matern12", "matern32", "matern52")

_ALIASES = {
    "rbf": "rbf",
    "se": "rbf",
    "matern12": "matern12",
    "matern1/2": "matern12",
    "exponential": "matern12",
    "matern32": "matern32",
    "matern3/2": "matern32",
    "matern52": "matern52",
    "matern5/2": "matern52",
}

DENSE_CUTOFF = 10_000
BLOCK_ROWS = 1024


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of an isotropic stationary kernel.

    ``output_scale`` is a variance, i.e. ``k(x, x) == output_scale``.
    """

    family: str = "matern12"
    lengthscale: float = 1.0
    output_scale: float = 1.0

    def __post_init__(self):
        family = _ALIASES.get(str(self.family).lower().replace("_", ""))
        if family is None:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", family)
        if not (np.isfinite(self.lengthscale) and self.lengthscale > 0):
            raise ValueError("lengthscale must be positive and finite")
        if not (np.isfinite(self.output_scale) and self.output_scale > 0):
            raise ValueError("output_scale must be positive and finite")

    def from_sqdist(self, sqdist):
        """Evaluate the kernel on an array of squared distances."""
        ell, o = self.lengthscale, self.output_scale
        sqdist = np.maximum(sqdist, 0.0)
        if self.family == "rbf":
            return o * np.exp(-0.5 * sqdist / ell**2)
        r = np.sqrt(sqdist) / ell
        if self.family == "matern12":
            return o * np.exp(-r)
        if self.family == "matern32":
            t = math.sqrt(3.0) * r
            return o * (1.0 + t) * np.exp(-t)
        t = math.sqrt(5.0) * r
        return o * (1.0 + t + t**2 / 3.0) * np.exp(-t)

    def __call__(self, A, B=None):
        return cross_block(self, A, B if B is not None else A)


def _as_points(A, name="inputs"):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :]
    if A.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array of points")
    return A


def evaluate(kernel: KernelParams, x, x2) -> float:
    """Kernel value k(x, x2) for two single points."""
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.shape != x2.shape:
        raise ValueError("points must have the same dimension")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x2))):
        raise ValueError("kernel inputs must be finite")
    diff = x - x2
    return float(kernel.from_sqdist(np.dot(diff, diff)))


def cross_block(kernel: KernelParams, A, B) -> np.ndarray:
    """Cross-covariance block ``k(A, B)`` of shape (m, p)."""
    A = _as_points(A, "A")
    B = _as_points(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    # direct differences: exact zeros on coincident points, no cancellation
    return kernel.from_sqdist(cdist(A, B, "sqeuclidean"))


def _worker_count():
    try:
        return max(1, int(os.environ.get("ITERGP_THREADS", "1")))
    except ValueError:
        return 1


class KernelMatrix:
    """The regularized kernel matrix ``k(X, X) + noise * I`` as an operator.

    Parameters
    ----------
    kernel : KernelParams
    inputs : (n, d) array
    noise : float
        Observation noise variance ``sigma^2``.
    cache_mode : {"auto", "dense", "blocked"}
        ``auto`` materializes the matrix when ``n <= 10_000`` and uses
        row blocks of ``block_rows`` otherwise.
    """

    def __init__(self, kernel, inputs, noise=0.0, cache_mode="auto", block_rows=BLOCK_ROWS):
        self.kernel = kernel
        self.inputs = _as_points(inputs)
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("kernel inputs must be finite")
        self.noise = float(noise)
        if self.noise < 0 or not np.isfinite(self.noise):
            raise ValueError("noise variance must be nonnegative")
        if cache_mode == "auto":
            cache_mode = "dense" if len(self.inputs) <= DENSE_CUTOFF else "blocked"
        if cache_mode not in ("dense", "blocked"):
            raise ValueError(f"unknown cache_mode {cache_mode!r}")
        self.cache_mode = cache_mode
        self.block_rows = int(block_rows)
        self.n_matvecs = 0
        self._dense = None

    @property
    def n(self):
        return self.inputs.shape[0]

    @property
    def shape(self):
        return (self.n, self.n)

    def dense(self) -> np.ndarray:
        """Materialized K_hat. Cached in dense mode."""
        if self._dense is not None:
            return self._dense
        K = cross_block(self.kernel, self.inputs, self.inputs)
        K[np.diag_indices_from(K)] += self.noise
        if self.cache_mode == "dense":
            self._dense = K
        return K

    def diag(self) -> np.ndarray:
        return np.full(self.n, self.kernel.output_scale + self.noise)

    def column(self, j) -> np.ndarray:
        col = cross_block(self.kernel, self.inputs, self.inputs[j]).ravel()
        col[j] += self.noise
        return col

    def _block(self, start, stop, V):
        rows = cross_block(self.kernel, self.inputs[start:stop], self.inputs)
        out = rows @ V
        out += self.noise * V[start:stop]
        return out

    def matvec(self, v) -> np.ndarray:
        """Return ``K_hat @ v`` for a vector or an (n, k) matrix of vectors."""
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise ValueError(f"length mismatch: expected {self.n}, got {v.shape[0]}")
        self.n_matvecs += 1 if v.ndim == 1 else v.shape[1]
        if self.cache_mode == "dense":
            return self.dense() @ v
        starts = range(0, self.n, self.block_rows)
        workers = _worker_count()
        if workers > 1:
            # each block owns its output rows, so the result is split-independent
            with ThreadPoolExecutor(max_workers=workers) as pool:
                parts = list(pool.map(lambda s: self._block(s, s + self.block_rows, v), starts))
        else:
            parts = [self._block(s, s + self.block_rows, v) for s in starts]
        return np.concatenate(parts, axis=0)

    __matmul__ = matvec


class DenseOperator:
    """Operator protocol around an explicit symmetric positive definite matrix."""

    kernel = None
    inputs = None

    def __init__(self, matrix, noise=0.0):
        A = np.asarray(matrix, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        self._A = A
        self.noise = float(noise)
        self.n_matvecs = 0

    @property
    def n(self):
        return self._A.shape[0]

    @property
    def shape(self):
        return self._A.shape

    def dense(self):
        return self._A

    def diag(self):
        return np.diag(self._A).copy()

    def column(self, j):
        return self._A[:, j].copy()

    def matvec(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise ValueError(f"length mismatch: expected {self.n}, got {v.shape[0]}")
        self.n_matvecs += 1 if v.ndim == 1 else v.shape[1]
        return self._A @ v

    __matmul__ = matvec
