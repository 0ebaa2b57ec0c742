"""Probabilistic linear solver for the representer weights.

The belief over ``v* = K_hat^{-1} (y - mu)`` is conditioned on one projected
residual ``s_i^T r_{i-1}`` per step. Each step costs exactly one fresh
product ``K_hat s_i``; the products ``K_hat d_j`` of the stored search
directions are cached so that the new direction and its image follow from
inner products alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

BREAKDOWN_TOL = 1e-12
REFRESH_EVERY = 50
REORTH_MAX_ITER = 500


class DegenerateAction(ArithmeticError):
    """The action lies (numerically) in the span of the explored directions."""

    def __init__(self, eta, scale):
        super().__init__(f"degenerate action: eta={eta:.3e} <= tol * s^T K s (={scale:.3e})")
        self.eta = eta
        self.scale = scale


@dataclass(frozen=True)
class StoppingConfig:
    max_iterations: int = 100
    abstol: float = 0.0
    reltol: float = 0.0

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")
        if self.abstol < 0 or self.reltol < 0:
            raise ValueError("tolerances must be nonnegative")

    def tolerance(self, target_norm):
        return max(self.reltol * target_norm, self.abstol)


@dataclass(frozen=True)
class LowRankPrecision:
    """``C = D diag(1/eta) D^T``, a rank-``i`` approximation of ``K_hat^{-1}``.

    ``khat_factors`` (``K_hat D``) is optional; it is needed only for the
    kernel-matrix approximation ``Q = K_hat C K_hat``.
    """

    factors: np.ndarray
    weights: np.ndarray
    khat_factors: np.ndarray | None = None

    @property
    def n(self):
        return self.factors.shape[0]

    @property
    def rank(self):
        return self.factors.shape[1]

    @classmethod
    def zero(cls, n):
        return cls(np.zeros((n, 0)), np.zeros(0), np.zeros((n, 0)))

    def matvec(self, w):
        return precision_matvec(self, w)

    def quad(self, A):
        """``A^T C A`` for an (n, p) matrix ``A``."""
        G = self.factors.T @ A
        return G.T @ (G / self.weights[:, None])

    def kernel_approx_matvec(self, w):
        """``Q w = sum_j (K_hat d_j)(K_hat d_j)^T w / eta_j``."""
        if self.khat_factors is None:
            raise ValueError("khat_factors not stored in this snapshot")
        return self.khat_factors @ ((self.khat_factors.T @ w) / self.weights)

    def truncate(self, rank):
        """Snapshot after the first ``rank`` steps."""
        kd = None if self.khat_factors is None else self.khat_factors[:, :rank]
        return LowRankPrecision(self.factors[:, :rank], self.weights[:rank], kd)

    def pad(self, n_new):
        """Zero-pad the factors to ``n + n_new`` rows (khat_factors are dropped)."""
        D = np.vstack([self.factors, np.zeros((n_new, self.rank))])
        return LowRankPrecision(D, self.weights)

    def dense(self):
        return (self.factors / self.weights) @ self.factors.T


def precision_matvec(C: LowRankPrecision, w) -> np.ndarray:
    """``C w`` in O(n i)."""
    w = np.asarray(w, dtype=float)
    if w.shape[0] != C.n:
        raise ValueError(f"length mismatch: expected {C.n}, got {w.shape[0]}")
    if C.rank == 0:
        return np.zeros_like(w)
    coef = C.factors.T @ w
    coef = coef / (C.weights if w.ndim == 1 else C.weights[:, None])
    return C.factors @ coef


@dataclass
class StepRecord:
    iteration: int
    alpha: float
    eta: float
    residual_norm: float
    n_matvecs: int
    d: np.ndarray | None = None


class SolverState:
    """Current belief: estimate ``v``, residual, and the explored directions.

    Directions, their ``K_hat`` images, the normalizers ``eta`` and the step
    sizes ``alpha / eta`` are kept in column buffers that grow geometrically.
    """

    def __init__(self, target, keep_actions=False):
        target = np.asarray(target, dtype=float)
        n = target.shape[0]
        self.v = np.zeros(n)
        self.residual = target.copy()
        self.iteration = 0
        self.keep_actions = keep_actions
        self.actions = [] if keep_actions else None
        self.last_action = None
        self.last_khat_action = None
        self.steps_since_refresh = 0
        cap = 8
        self._D = np.zeros((n, cap))
        self._KD = np.zeros((n, cap))
        self._eta = np.zeros(cap)
        self._step = np.zeros(cap)

    @property
    def n(self):
        return self.v.shape[0]

    @property
    def D(self):
        return self._D[:, : self.iteration]

    @property
    def KD(self):
        return self._KD[:, : self.iteration]

    @property
    def etas(self):
        return self._eta[: self.iteration]

    @property
    def step_sizes(self):
        return self._step[: self.iteration]

    def _grow(self):
        cap = 2 * self._D.shape[1]
        for name in ("_D", "_KD"):
            old = getattr(self, name)
            new = np.zeros((old.shape[0], cap))
            new[:, : old.shape[1]] = old
            setattr(self, name, new)
        for name in ("_eta", "_step"):
            old = getattr(self, name)
            new = np.zeros(cap)
            new[: old.shape[0]] = old
            setattr(self, name, new)

    def append(self, d, kd, eta, step):
        if self.iteration == self._D.shape[1]:
            self._grow()
        i = self.iteration
        self._D[:, i] = d
        self._KD[:, i] = kd
        self._eta[i] = eta
        self._step[i] = step
        self.iteration += 1

    def precision(self, upto=None) -> LowRankPrecision:
        """Immutable snapshot of ``C_i`` (copies the factors)."""
        i = self.iteration if upto is None else int(upto)
        if not 0 <= i <= self.iteration:
            raise ValueError(f"snapshot index {i} outside [0, {self.iteration}]")
        return LowRankPrecision(
            self._D[:, :i].copy(), self._eta[:i].copy(), self._KD[:, :i].copy()
        )

    def weights(self, upto=None):
        """Representer weights after ``upto`` steps, rebuilt from the stored steps."""
        if upto is None or upto == self.iteration:
            return self.v.copy()
        return self._D[:, :upto] @ self._step[:upto]

    def copy(self):
        other = SolverState.__new__(SolverState)
        other.__dict__.update(self.__dict__)
        for name in ("v", "residual", "_D", "_KD", "_eta", "_step"):
            setattr(other, name, getattr(self, name).copy())
        if self.actions is not None:
            other.actions = list(self.actions)
        return other

    def extended(self, khat_rows, residual_rows):
        """State for a system grown by ``m`` new rows and columns.

        Directions and weights are zero-padded. ``khat_rows`` (m, i) holds
        the new rows of ``K_hat D`` and ``residual_rows`` the new residual
        entries; the caller computes both from the cross-covariances.
        """
        khat_rows = np.asarray(khat_rows, dtype=float).reshape(-1, self.iteration)
        m = khat_rows.shape[0]
        other = self.copy()
        cap = self._D.shape[1]
        other.v = np.concatenate([self.v, np.zeros(m)])
        other.residual = np.concatenate([self.residual, np.asarray(residual_rows, dtype=float)])
        other._D = np.vstack([self._D, np.zeros((m, cap))])
        kd_new = np.zeros((m, cap))
        kd_new[:, : self.iteration] = khat_rows
        other._KD = np.vstack([self._KD, kd_new])
        pad = lambda a: None if a is None else np.concatenate([a, np.zeros(m)])
        other.last_action = pad(self.last_action)
        # the old action's image gains rows that are not tracked; CG-style
        # recursions restart from the next residual
        other.last_khat_action = None
        if other.actions is not None:
            other.actions = [pad(a) for a in self.actions]
        return other


def solver_step(
    state: SolverState,
    op,
    target,
    action,
    *,
    breakdown_tol=BREAKDOWN_TOL,
    reorthogonalize="auto",
    refresh_every=REFRESH_EVERY,
) -> StepRecord:
    """Condition the belief on ``alpha = s^T r`` and update ``state`` in place.

    Raises :class:`DegenerateAction` (leaving ``state`` untouched) when the
    action adds no new direction, ``FloatingPointError`` when ``K_hat s``
    or the curvature is not finite and ``LinAlgError`` when ``s^T K_hat s`` is negative
    beyond rounding, i.e. the operator is not positive semidefinite.

    ``alpha`` and ``eta`` are evaluated as ``d^T r`` and ``d^T K_hat d``. They
    equal ``s^T r`` and ``s^T K_hat d`` because ``D^T r = 0`` and
    ``D^T K_hat d = 0``, but stay accurate once the residual is at rounding
    level, where the ``s`` forms let the iterates drift away again.
    """
    s = np.asarray(action, dtype=float)
    if s.shape != (state.n,):
        raise ValueError(f"action must have shape ({state.n},), got {s.shape}")
    if not np.any(s):
        raise ValueError("action must be nonzero")

    ks = op.matvec(s)
    if not np.all(np.isfinite(ks)):
        raise FloatingPointError("K_hat s is not finite")
    i = state.iteration
    D, KD, eta = state.D, state.KD, state.etas

    d = s.copy()
    kd = ks.copy()
    if i:
        coef = (KD.T @ s) / eta
        d -= D @ coef
        kd -= KD @ coef
        passes = 2 if reorthogonalize is True or (reorthogonalize == "auto" and i <= REORTH_MAX_ITER) else 1
        for _ in range(passes - 1):
            coef = (KD.T @ d) / eta
            d -= D @ coef
            kd -= KD @ coef

    scale = float(s @ ks)
    eta_new = float(d @ kd)
    if not (np.isfinite(scale) and np.isfinite(eta_new)):
        raise FloatingPointError("curvature of the action overflowed")
    if scale < -1e-8 * np.linalg.norm(s) * np.linalg.norm(ks):
        raise np.linalg.LinAlgError(f"operator is not positive definite (s^T K s = {scale:.3e})")
    if not (np.isfinite(eta_new) and scale > 0 and eta_new > breakdown_tol * scale):
        raise DegenerateAction(eta_new, scale)

    alpha = float(d @ state.residual)
    step = alpha / eta_new
    state.v += step * d
    state.residual -= step * kd
    state.append(d, kd, eta_new, step)
    state.last_action = s
    state.last_khat_action = ks
    if state.actions is not None:
        state.actions.append(s.copy())

    state.steps_since_refresh += 1
    if refresh_every and state.steps_since_refresh >= refresh_every:
        state.residual = np.asarray(target, dtype=float) - op.matvec(state.v)
        state.steps_since_refresh = 0

    return StepRecord(i + 1, alpha, eta_new, float(np.linalg.norm(state.residual)), op.n_matvecs, d)


@dataclass
class RunResult:
    state: SolverState
    precision: LowRankPrecision
    trace: list = field(default_factory=list)
    stop_reason: str = ""
    n_discarded: int = 0


def run(
    op,
    target,
    policy,
    stopping: StoppingConfig,
    state: SolverState | None = None,
    *,
    callback=None,
    keep_actions=False,
    **step_options,
) -> RunResult:
    """Iterate :func:`solver_step` with actions from ``policy`` until stopped.

    Stops when ``||r||_2 < max(reltol * ||target||_2, abstol)``, when
    ``max_iterations`` successful steps have been taken, or when the policy
    is exhausted. Degenerate actions are discarded; ``n`` of them in a row
    end the run. ``callback(state, record)`` is called after every step.
    """
    target = np.asarray(target, dtype=float)
    if state is None:
        state = SolverState(target, keep_actions=keep_actions)
    tol = stopping.tolerance(float(np.linalg.norm(target)))
    trace = []
    discarded = 0
    in_a_row = 0
    while True:
        rnorm = float(np.linalg.norm(state.residual))
        if rnorm < tol or rnorm == 0.0:
            reason = "converged"
            break
        if state.iteration >= stopping.max_iterations:
            reason = "max_iterations"
            break
        action = policy.next_action(state, op)
        if action is None:
            reason = "policy_exhausted"
            break
        try:
            record = solver_step(state, op, target, action, **step_options)
        except DegenerateAction:
            discarded += 1
            in_a_row += 1
            policy.discard(action)
            if in_a_row >= state.n:
                reason = "breakdown"
                break
            continue
        in_a_row = 0
        if callback is not None:
            callback(state, record)
        trace.append(replace(record, d=None))
    return RunResult(state, state.precision(), trace, reason, discarded)


def relative_error_bound(C: LowRankPrecision, op, v_star) -> float:
    """``||(I - C K_hat) v_bar||_{K_hat}`` with ``v_bar = v* / ||v*||_{K_hat}``.

    Equals ``(v_bar^T (I - C K_hat) v_bar)^(1/2)`` because ``C K_hat`` is a
    ``K_hat``-orthogonal projector; the norm form avoids the cancellation in
    ``1 - v_bar^T C K_hat v_bar`` near convergence. Lies in ``[0, 1]`` and
    is exact for the estimate ``v_i = C (y - mu)``.
    """
    v_star = np.asarray(v_star, dtype=float)
    kv = op.matvec(v_star)
    norm2 = float(v_star @ kv)
    if not norm2 > 0:
        raise ValueError("v_star must be nonzero")
    if C.rank == 0:
        return 1.0
    e = v_star - C.matvec(kv)
    return float(np.sqrt(max(float(e @ op.matvec(e)), 0.0) / norm2))
