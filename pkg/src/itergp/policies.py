"""Action policies and preconditioners.

A policy is a small state machine queried once per solver step through
``next_action(state, op)``; it returns an n-vector or ``None`` once it has
nothing left to propose. ``discard(action)`` is called when the solver
rejects an action as degenerate.

=======================  ===========================================
policy                   classical counterpart
=======================  ===========================================
``UnitVector``           (pivoted) partial Cholesky
``Residual``             preconditioned CG (gradient form)
``ConjugateResidual``    preconditioned CG (two-term recursion)
``Eigenvector``          truncated eigendecomposition
``PseudoInput``          Nystrom / SoR / SVGP-style inducing points
``Random``               randomized Kaczmarz-type sketching
``Mixed``                deflated CG when followed by ``Residual``
=======================  ===========================================
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .kernels import cross_block

EIGEN_CAP = 2000


class Policy:
    def next_action(self, state, op):
        raise NotImplementedError

    def discard(self, action):
        pass


class ActionSequence(Policy):
    """Replays a fixed list of actions."""

    def __init__(self, actions):
        self.actions = [np.asarray(a, dtype=float) for a in actions]
        self._pos = 0

    def next_action(self, state, op):
        if self._pos >= len(self.actions):
            return None
        a = self.actions[self._pos]
        self._pos += 1
        return a


def residual_diagonal(state, op):
    """``diag(K_hat - Q_i)`` from the cached ``K_hat d_j`` columns, O(n i)."""
    diag = op.diag()
    if state.iteration:
        diag = diag - (state.KD**2) @ (1.0 / state.etas)
    return diag


def max_residual_diag_pivot(state, op, used=None):
    """Index of the largest remaining diagonal entry among unused indices.

    Ties go to the lowest index. Returns ``None`` when every index is used.
    """
    diag = residual_diagonal(state, op)
    if used is not None and np.any(used):
        if np.all(used):
            return None
        diag = np.where(used, -np.inf, diag)
    return int(np.argmax(diag))


class UnitVector(Policy):
    """Standard unit vectors ``e_j``, in natural order or by greedy pivoting."""

    def __init__(self, order="max_residual_diag"):
        if order not in ("natural", "max_residual_diag"):
            raise ValueError(f"unknown ordering {order!r}")
        self.order = order
        self.used = np.zeros(0, dtype=bool)
        self.pivots = []

    def next_action(self, state, op):
        n = state.n
        if self.used.shape[0] < n:
            self.used = np.concatenate([self.used, np.zeros(n - self.used.shape[0], dtype=bool)])
        if self.order == "natural":
            free = np.flatnonzero(~self.used)
            j = int(free[0]) if free.size else None
        else:
            j = max_residual_diag_pivot(state, op, self.used)
        if j is None:
            return None
        self.used[j] = True
        self.pivots.append(j)
        s = np.zeros(n)
        s[j] = 1.0
        return s


class Residual(Policy):
    """Preconditioned residual ``P^{-1} r_{i-1}``."""

    def __init__(self, preconditioner=None):
        self.preconditioner = preconditioner
        self._stalled = False

    def next_action(self, state, op):
        r = state.residual
        if self._stalled or not np.any(r):
            return None
        return r.copy() if self.preconditioner is None else self.preconditioner.apply_inverse(r)

    def discard(self, action):
        # the residual cannot change without a step, so the next proposal would repeat
        self._stalled = True


class ConjugateResidual(Residual):
    """CG search directions built by the two-term recursion.

    ``s_i = z - (z^T K_hat s_{i-1} / s_{i-1}^T K_hat s_{i-1}) s_{i-1}`` with
    ``z = P^{-1} r_{i-1}``. The product ``K_hat s_{i-1}`` is taken from the
    solver's last step, so no extra matrix-vector product is needed.
    """

    def __init__(self, preconditioner=None):
        super().__init__(preconditioner)
        self._emitted = None

    def next_action(self, state, op):
        z = super().next_action(state, op)
        if z is None:
            return None
        prev = state.last_action
        kprev = state.last_khat_action
        if prev is not None and prev is self._emitted and kprev is not None:
            z = z - (z @ kprev) / (prev @ kprev) * prev
        self._emitted = z
        return z


class Eigenvector(Policy):
    """Eigenvectors of ``K_hat`` by descending eigenvalue (dense, test scale)."""

    def __init__(self, order="descending", cap=EIGEN_CAP):
        if order not in ("descending", "ascending"):
            raise ValueError(f"unknown ordering {order!r}")
        self.order = order
        self.cap = cap
        self.eigenvalues = None
        self._vectors = None
        self._pos = 0

    def next_action(self, state, op):
        if self._vectors is None:
            if op.n > self.cap:
                raise ValueError(f"eigenvector policy limited to n <= {self.cap}")
            lam, U = np.linalg.eigh(op.dense())
            if self.order == "descending":
                lam, U = lam[::-1], U[:, ::-1]
            self.eigenvalues, self._vectors = lam, U
        if self._pos >= self._vectors.shape[1]:
            return None
        u = self._vectors[:, self._pos].copy()
        self._pos += 1
        return u


class PseudoInput(Policy):
    """Kernel columns ``k(X, z_j)`` at inducing points ``z_j``."""

    def __init__(self, inducing):
        Z = np.asarray(inducing, dtype=float)
        if Z.ndim == 1:
            Z = Z[:, None]
        if len(np.unique(Z, axis=0)) != len(Z):
            raise ValueError("inducing points must be distinct")
        self.inducing = Z
        self._pos = 0

    @classmethod
    def random_subset(cls, inputs, m, seed=0):
        inputs = np.asarray(inputs, dtype=float)
        if not 1 <= m <= len(inputs):
            raise ValueError(f"number of inducing points must be in [1, {len(inputs)}]")
        idx = np.random.default_rng(seed).choice(len(inputs), size=m, replace=False)
        return cls(inputs[idx])

    def next_action(self, state, op):
        if self._pos >= len(self.inducing):
            return None
        if op.kernel is None:
            raise TypeError("pseudo-input actions need a kernel-backed operator")
        z = self.inducing[self._pos]
        self._pos += 1
        return cross_block(op.kernel, op.inputs, z).ravel()


class Random(Policy):
    """Seeded standard-normal actions."""

    def __init__(self, seed=0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def next_action(self, state, op):
        return self.rng.standard_normal(state.n)


class Mixed(Policy):
    """Actions from ``first`` for the first ``switch_at`` steps, then from ``then``.

    ``then`` may be a policy or a callable ``then(state, op) -> Policy``
    evaluated once at the switch, e.g. to build a preconditioner from the
    steps taken so far.
    """

    def __init__(self, first, switch_at, then):
        if switch_at < 0:
            raise ValueError("switch_at must be nonnegative")
        self.first = first
        self.switch_at = int(switch_at)
        self.then = then
        self._active = None
        self.switched_at = None

    def _second(self, state, op):
        if self._active is None:
            self._active = self.then(state, op) if callable(self.then) and not isinstance(self.then, Policy) else self.then
            self.switched_at = state.iteration
        return self._active

    def next_action(self, state, op):
        if self._active is None and state.iteration < self.switch_at:
            s = self.first.next_action(state, op)
            if s is not None:
                self._last_source = self.first
                return s
        policy = self._second(state, op)
        self._last_source = policy
        return policy.next_action(state, op)

    def discard(self, action):
        getattr(self, "_last_source", self.first).discard(action)


# --- preconditioners ---------------------------------------------------------


class Preconditioner:
    """Symmetric positive definite ``P_hat``; ``apply_inverse`` maps ``v -> P_hat^{-1} v``."""

    rank = 0
    description = "identity"

    def apply_inverse(self, v):
        return np.array(v, dtype=float)

    def apply(self, v):
        return np.array(v, dtype=float)

    def dense(self, n):
        return self.apply(np.eye(n))


class DiagonalPreconditioner(Preconditioner):
    def __init__(self, diag):
        diag = np.asarray(diag, dtype=float)
        if np.any(diag <= 0):
            raise ValueError("diagonal preconditioner needs positive entries")
        self.diag = diag
        self.description = "diagonal"

    def apply_inverse(self, v):
        v = np.asarray(v, dtype=float)
        return v / (self.diag if v.ndim == 1 else self.diag[:, None])

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        return v * (self.diag if v.ndim == 1 else self.diag[:, None])


class LowRankPlusDiagonal(Preconditioner):
    """``P_hat = shift * I + U U^T``, inverted by the Woodbury identity in O(n r)."""

    def __init__(self, U, shift):
        U = np.asarray(U, dtype=float)
        if shift <= 0:
            raise ValueError("low-rank preconditioner needs a positive diagonal shift")
        self.U = U
        self.shift = float(shift)
        self.rank = U.shape[1]
        self.description = f"partial-cholesky(rank={self.rank})"
        inner = self.U.T @ self.U
        inner[np.diag_indices_from(inner)] += self.shift
        self._inner = scipy.linalg.cho_factor(inner, lower=True)

    def apply_inverse(self, v):
        v = np.asarray(v, dtype=float)
        w = scipy.linalg.cho_solve(self._inner, self.U.T @ v)
        return (v - self.U @ w) / self.shift

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        return self.shift * v + self.U @ (self.U.T @ v)


def diagonal_preconditioner(op):
    return DiagonalPreconditioner(op.diag())


def build_partial_cholesky_preconditioner(state, noise, rank=None):
    """``P_hat = Q_l + noise * I`` from the first ``rank`` stored solver steps.

    ``Q_l = U U^T`` with ``U = [K_hat d_j / sqrt(eta_j)]``. Accepts a
    :class:`~itergp.solver.SolverState` or a ``RunResult``. With no steps
    the identity is returned.
    """
    state = getattr(state, "state", state)
    ell = state.iteration if rank is None else min(int(rank), state.iteration)
    if ell == 0:
        return Preconditioner()
    U = state.KD[:, :ell] / np.sqrt(state.etas[:ell])
    return LowRankPlusDiagonal(U, noise)


# --- construction from CLI codes ---------------------------------------------


POLICY_CODES = ("chol", "chol-pivoted", "cg", "cg-conj", "cg-precond", "pseudo-input", "eig", "random")


def make_policy(code, *, inputs=None, seed=0, load_points=None):
    """Build a fresh policy from its command-line code.

    Codes: ``chol``, ``chol-pivoted``, ``cg``, ``cg-conj``, ``cg-precond:<l>``,
    ``pseudo-input:<m|path>``, ``eig``, ``random:<seed>``.
    """
    name, _, arg = str(code).partition(":")
    if name == "chol":
        return UnitVector("natural")
    if name == "chol-pivoted":
        return UnitVector("max_residual_diag")
    if name == "cg":
        return Residual()
    if name == "cg-conj":
        return ConjugateResidual()
    if name == "cg-precond":
        ell = int(arg) if arg else 0
        return Mixed(
            UnitVector("max_residual_diag"),
            ell,
            lambda state, op: Residual(build_partial_cholesky_preconditioner(state, op.noise, ell)),
        )
    if name == "pseudo-input":
        if arg.isdigit():
            if inputs is None:
                raise ValueError("pseudo-input:<m> needs the training inputs")
            return PseudoInput.random_subset(inputs, int(arg), seed)
        if not arg or load_points is None:
            raise ValueError("pseudo-input needs a count or a CSV path")
        return PseudoInput(load_points(arg))
    if name == "eig":
        return Eigenvector()
    if name == "random":
        return Random(int(arg) if arg else seed)
    raise ValueError(f"unknown policy code {code!r}")
