"""The combined GP posterior and the fit driver.

After ``i`` solver steps the posterior is ``GP(mu_i, k_i)`` with

    mu_i(x)     = mu(x) + k(x, X) v_i
    k_i(x, x')  = k(x, x') - k(x, X) C_i k(X, x')

and ``k_i`` splits into the exact posterior covariance (mathematical part)
plus ``k(x, X)(K_hat^{-1} - C_i) k(X, x')`` (computational part). Only the
sum is cheap; the split needs a dense oracle and is test-scale only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import solver as _solver
from .kernels import KernelMatrix, cross_block


def _mean_fn(prior_mean):
    if callable(prior_mean):
        return prior_mean
    c = float(prior_mean)
    return lambda X: np.full(len(X), c)


@dataclass(frozen=True)
class UncertaintyBreakdown:
    mathematical: float | None
    computational: float | None
    combined: float


@dataclass(frozen=True)
class CombinedPosterior:
    kernel: object
    train_inputs: np.ndarray
    noise: float
    weights: np.ndarray
    precision: _solver.LowRankPrecision
    prior_mean: object = 0.0
    targets: np.ndarray | None = None

    @property
    def iteration(self):
        return self.precision.rank

    def _prior_mean(self, X):
        return _mean_fn(self.prior_mean)(X)

    def predict_mean(self, Xq):
        Kq = cross_block(self.kernel, Xq, self.train_inputs)
        return self._prior_mean(np.atleast_2d(Xq)) + Kq @ self.weights

    def predict_cov(self, Xq):
        Kq = cross_block(self.kernel, Xq, self.train_inputs)
        cov = cross_block(self.kernel, Xq, Xq) - self.precision.quad(Kq.T)
        return 0.5 * (cov + cov.T)

    def predict_var(self, Xq, observation=False):
        """Marginal variances; ``observation=True`` adds the noise variance."""
        Kq = cross_block(self.kernel, Xq, self.train_inputs)
        G = Kq @ self.precision.factors
        var = self.kernel.output_scale - np.einsum("ij,ij->i", G, G / self.precision.weights)
        return var + self.noise if observation else var

    def predict(self, Xq, observation=False):
        return self.predict_mean(Xq), self.predict_var(Xq, observation)


def predict_mean(post, Xq):
    return post.predict_mean(Xq)


def predict_cov(post, Xq):
    return post.predict_cov(Xq)


def decompose_variance(post: CombinedPosterior, x, exact_oracle=None) -> UncertaintyBreakdown:
    """Split the combined variance at ``x`` into mathematical + computational.

    Without an :class:`~itergp.oracles.ExactGPOracle` only ``combined`` is
    filled in.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    combined = float(post.predict_var(x)[0])
    if exact_oracle is None:
        return UncertaintyBreakdown(None, None, combined)
    kx = cross_block(post.kernel, post.train_inputs, x).ravel()
    full = float(kx @ exact_oracle.solve(kx))
    mathematical = post.kernel.output_scale - full
    # k^T (K^-1 - C) k written as w^T K w with w = (K^-1 - C) k: same value,
    # but nonnegative in floating point and accurate when the part is tiny
    w = exact_oracle.solve(kx) - post.precision.matvec(kx)
    computational = float(w @ (exact_oracle.Khat @ w))
    return UncertaintyBreakdown(mathematical, computational, combined)


def _cholesky_with_jitter(A, scale, start=1e-10, stop=1e-6):
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        pass
    jitter = start
    eye = np.eye(len(A))
    while jitter <= stop * (1 + 1e-12):
        try:
            return np.linalg.cholesky(A + jitter * scale * eye)
        except np.linalg.LinAlgError:
            jitter *= 10
    raise np.linalg.LinAlgError(
        "prior covariance is not positive definite even with jitter 1e-6 * output_scale"
    )


def sample_paths(post: CombinedPosterior, Xq, count, seed=0):
    """Posterior draws at ``Xq`` by a pathwise (Matheron) update of prior draws.

    Each path is ``f_prior(Xq) + k(Xq, X) C_i (y - y')`` with
    ``y' = f_prior(X) + noise``, so a draw costs O(p n i) beyond the joint
    prior factorization. Returns an array of shape (count, p).
    """
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    X = post.train_inputs
    n, p = len(X), len(Xq)
    if post.targets is None:
        raise ValueError("posterior carries no observed targets to sample against")
    y = np.asarray(post.targets, dtype=float)
    rng = np.random.default_rng(seed)
    joint = np.vstack([X, Xq])
    L = _cholesky_with_jitter(cross_block(post.kernel, joint, joint), post.kernel.output_scale)
    prior = (L @ rng.standard_normal((n + p, count))) + _mean_fn(post.prior_mean)(joint)[:, None]
    y_prime = prior[:n] + np.sqrt(post.noise) * rng.standard_normal((n, count))
    update = post.precision.matvec(y[:, None] - y_prime)
    paths = prior[n:] + cross_block(post.kernel, Xq, X) @ update
    return paths.T


@dataclass
class Fit:
    """Everything needed to continue, snapshot or extend a run."""

    op: object
    targets: np.ndarray
    prior_mean: object
    result: _solver.RunResult

    @property
    def state(self):
        return self.result.state

    @property
    def kernel(self):
        return self.op.kernel

    @property
    def inputs(self):
        return self.op.inputs

    @property
    def residual_target(self):
        return self.targets - _mean_fn(self.prior_mean)(self.op.inputs)

    def posterior(self, upto=None) -> CombinedPosterior:
        st = self.result.state
        i = st.iteration if upto is None else int(upto)
        return CombinedPosterior(
            self.op.kernel, self.op.inputs, self.op.noise, st.weights(i), st.precision(i),
            self.prior_mean, self.targets,
        )


def fit(kernel, X, y, noise, policy, stopping, prior_mean=0.0, cache_mode="auto", **options) -> Fit:
    """Run the solver on ``k(X, X) + noise * I`` and return a :class:`Fit`."""
    op = KernelMatrix(kernel, X, noise, cache_mode=cache_mode)
    y = np.asarray(y, dtype=float)
    target = y - _mean_fn(prior_mean)(op.inputs)
    result = _solver.run(op, target, policy, stopping, **options)
    return Fit(op, y, prior_mean, result)


def resume(f: Fit, policy, stopping, **options) -> Fit:
    """Continue iterating from the current state of ``f``.

    ``stopping.max_iterations`` counts total steps, including earlier ones.
    """
    result = _solver.run(f.op, f.residual_target, policy, stopping, state=f.state, **options)
    trace = f.result.trace + result.trace
    result.trace = trace
    result.n_discarded += f.result.n_discarded
    return Fit(f.op, f.targets, f.prior_mean, result)


def extend_online(f: Fit, X_new, y_new) -> Fit:
    """Append observations without restarting.

    Stored directions are zero-padded, so the posterior is unchanged until
    new steps are taken; subsequent steps act on the enlarged system.
    """
    X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
    y_new = np.asarray(y_new, dtype=float).ravel()
    if len(X_new) != len(y_new):
        raise ValueError("X_new and y_new lengths differ")
    if len(y_new) == 0:
        return f
    X = f.op.inputs
    if X_new.shape[1] != X.shape[1]:
        raise ValueError(f"dimension mismatch: {X_new.shape[1]} vs {X.shape[1]}")
    st = f.state
    K_new_old = cross_block(f.op.kernel, X_new, X)
    target_new = y_new - _mean_fn(f.prior_mean)(X_new)
    kd_rows = K_new_old @ st.D
    r_rows = target_new - K_new_old @ st.v
    new_state = st.extended(kd_rows, r_rows)

    op = KernelMatrix(f.op.kernel, np.vstack([X, X_new]), f.op.noise, cache_mode=f.op.cache_mode)
    op.n_matvecs = f.op.n_matvecs
    result = _solver.RunResult(new_state, new_state.precision(), list(f.result.trace), "extended")
    return Fit(op, np.concatenate([f.targets, y_new]), f.prior_mean, result)
