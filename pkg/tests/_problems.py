"""Small random GP regression problems shared by the test modules."""

import numpy as np

from itergp import KernelMatrix, KernelParams


def points(rng, n, d, low=-1.0, high=1.0):
    return rng.uniform(low, high, size=(n, d))


def problem(seed, n=20, d=2, family="rbf", lengthscale=0.5, output_scale=1.0, noise=1e-2):
    """(kernel, X, y, op) with a smooth target plus noise."""
    rng = np.random.default_rng(seed)
    X = points(rng, n, d)
    y = np.sin(3.0 * X.sum(axis=1)) + 0.1 * rng.standard_normal(n)
    kernel = KernelParams(family, lengthscale, output_scale)
    return kernel, X, y, KernelMatrix(kernel, X, noise)


def spd(seed, n, cond=100.0):
    """Random SPD matrix with log-spaced spectrum in [1, cond]."""
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.logspace(0, np.log10(cond), n)
    A = (Q * lam) @ Q.T
    return 0.5 * (A + A.T)


def dense_C(state, upto=None):
    return state.precision(upto).dense()


def dense_Q(state, upto=None):
    C = state.precision(upto)
    return (C.khat_factors / C.weights) @ C.khat_factors.T
