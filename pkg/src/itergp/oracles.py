"""Dense reference implementations used as ground truth.

Nothing here touches :mod:`itergp.solver` or :mod:`itergp.policies`; the
arithmetic is deliberately textbook so that agreement with the iterative
solver is meaningful. Everything is O(n^3) or O(n^2) dense and meant for
tests and acceptance runs only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .kernels import cross_block

DENSE_LIMIT = 5000


def _cholesky_with_jitter(A, start=1e-10, stop=1e-6):
    try:
        return scipy.linalg.cho_factor(A, lower=True), 0.0
    except np.linalg.LinAlgError:
        pass
    scale = max(float(np.mean(np.diag(A))), 1e-300)
    jitter = start
    while jitter <= stop:
        try:
            return scipy.linalg.cho_factor(A + jitter * scale * np.eye(len(A)), lower=True), jitter
        except np.linalg.LinAlgError:
            jitter *= 10
    raise np.linalg.LinAlgError("matrix is not positive definite even with jitter 1e-6")


@dataclass
class ExactGPOracle:
    """Exact GP regression by dense Cholesky of ``K_hat``."""

    kernel: object
    inputs: np.ndarray
    targets: np.ndarray
    noise: float
    prior_mean: float = 0.0

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        if len(X) > DENSE_LIMIT:
            raise ValueError(f"dense oracle limited to n <= {DENSE_LIMIT}")
        self.inputs = X
        self.targets = np.asarray(self.targets, dtype=float)
        self.K = cross_block(self.kernel, X, X)
        self.Khat = self.K + self.noise * np.eye(len(X))
        self.factor, self.jitter = _cholesky_with_jitter(self.Khat)
        self.residual_target = self.targets - self.prior_mean
        self.v_star = scipy.linalg.cho_solve(self.factor, self.residual_target)
        self._eig_K = None
        self._eig_Khat = None

    @property
    def n(self):
        return len(self.inputs)

    def solve(self, B):
        return scipy.linalg.cho_solve(self.factor, B)

    def inverse(self):
        return self.solve(np.eye(self.n))

    @property
    def lambda_min_K(self):
        if self._eig_K is None:
            self._eig_K = np.linalg.eigvalsh(self.K)
        return float(self._eig_K[0])

    @property
    def khat_spectrum(self):
        if self._eig_Khat is None:
            self._eig_Khat = np.linalg.eigvalsh(self.Khat)
        return self._eig_Khat

    @property
    def condition_number(self):
        lam = self.khat_spectrum
        return float(lam[-1] / lam[0])


def exact_posterior(oracle: ExactGPOracle, Xq):
    """Mean and covariance of the exact posterior at ``Xq``."""
    Kq = cross_block(oracle.kernel, Xq, oracle.inputs)
    mean = oracle.prior_mean + Kq @ oracle.v_star
    L = np.tril(oracle.factor[0])
    W = scipy.linalg.solve_triangular(L, Kq.T, lower=True)
    cov = cross_block(oracle.kernel, Xq, Xq) - W.T @ W
    return mean, cov


def classical_partial_cholesky(A, order=None, steps=None):
    """Right-looking (pivoted) partial Cholesky of a dense SPD matrix.

    ``order`` is a sequence of pivot indices, ``"greedy"`` for largest
    remaining diagonal (lowest index on ties), or ``None`` for natural order.
    Returns ``(factors, pivots)`` where ``factors[i]`` is the ``n x (i+1)``
    factor ``L_{i+1}`` in the permuted ordering: ``L L^T ~ P^T A P``.
    """
    A = np.array(A, dtype=float)
    n = len(A)
    steps = n if steps is None else steps
    P = np.arange(n) if order is None or isinstance(order, str) else np.asarray(order)
    greedy = isinstance(order, str) and order == "greedy"
    residual = A.copy()
    pivots = []
    cols = []
    factors = []
    for i in range(steps):
        if greedy:
            d = np.diag(residual).copy()
            d[pivots] = -np.inf
            j = int(np.argmax(d))
        else:
            j = int(P[i])
        pivot = residual[j, j]
        if not pivot > 0:
            raise np.linalg.LinAlgError(f"nonpositive pivot {pivot:.3e} at step {i}")
        col = residual[:, j] / np.sqrt(pivot)
        residual -= np.outer(col, col)
        pivots.append(j)
        cols.append(col)
        L = np.column_stack(cols)
        factors.append(L)
    perm = np.array(pivots + [k for k in range(n) if k not in pivots], dtype=int)
    return [L[perm] for L in factors], pivots


@dataclass
class PCGIterates:
    v: list
    r: list
    s: list


def classical_pcg(matvec, target, precondition=None, iters=None, rtol=0.0, reorthogonalize=False):
    """Textbook preconditioned conjugate gradients from ``v_0 = 0``.

    ``precondition`` maps ``r -> P^{-1} r`` (identity if ``None``). Returns
    the iterates ``v_1..v_k``, residuals ``r_0..r_k`` and directions
    ``s_1..s_k``. Stops early when ``||r|| <= rtol * ||target||`` or on zero
    curvature.

    In double precision the recursion loses orthogonality after a handful
    of steps on kernel systems and its iterates drift away from the exact
    CG iterates. ``reorthogonalize=True`` projects each new residual
    against all earlier ones in the ``P^{-1}`` inner product (two passes),
    the usual full-reorthogonalization remedy, which keeps the iterates at
    their exact-arithmetic values up to rounding.
    """
    b = np.asarray(target, dtype=float)
    n = len(b)
    iters = n if iters is None else iters
    M = (lambda r: r.copy()) if precondition is None else precondition
    v = np.zeros(n)
    r = b.copy()
    z = M(r)
    p = z.copy()
    rz = r @ z
    out = PCGIterates([], [r.copy()], [])
    bnorm = np.linalg.norm(b)
    R, Z, RZ = [r.copy()], [z.copy()], [rz]
    for _ in range(iters):
        if np.linalg.norm(r) <= rtol * bnorm or not np.any(r):
            break
        Ap = matvec(p)
        curv = p @ Ap
        if not curv > 0:
            break
        a = rz / curv
        v = v + a * p
        r = r - a * Ap
        out.v.append(v.copy())
        out.r.append(r.copy())
        out.s.append(p.copy())
        if reorthogonalize:
            Rm, Zm, w = np.column_stack(R), np.column_stack(Z), np.array(RZ)
            for _ in range(2):
                r = r - Rm @ ((Zm.T @ r) / w)
        z = M(r)
        rz_new = r @ z
        if reorthogonalize:
            R.append(r.copy())
            Z.append(z.copy())
            RZ.append(rz_new)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return out


def classical_pcg_extended(A, target, P_inv=None, iters=None, rtol=0.0, dps=50):
    """Textbook PCG carried out in ``dps``-digit arithmetic (mpmath), dense.

    The inputs are read as exact values, so the returned iterates (rounded
    to double) are the exact-arithmetic CG iterates of the given double
    matrices to about 15 significant digits. ``P_inv`` is symmetrized
    first: PCG assumes a symmetric preconditioner, and a rounding-level
    asymmetry alone shifts later iterates far more than rounding does.
    Small ``n`` only.
    """
    import mpmath

    ctx = mpmath.mp.clone()
    ctx.dps = dps
    A = np.asarray(A, dtype=float)
    n = len(A)
    iters = n if iters is None else iters
    Am = ctx.matrix(A.tolist())
    if P_inv is not None:
        P_inv = np.asarray(P_inv, dtype=float)
        P_inv = 0.5 * (P_inv + P_inv.T)
    Pm = None if P_inv is None else ctx.matrix(P_inv.tolist())
    b = ctx.matrix(np.asarray(target, dtype=float).tolist())

    def M(r):
        return r.copy() if Pm is None else Pm * r

    def dot(a, c):
        return ctx.fsum(a[k] * c[k] for k in range(n))

    def to_np(x):
        return np.array([float(x[k]) for k in range(n)])

    v = ctx.matrix(n, 1)
    r = b.copy()
    z = M(r)
    p = z.copy()
    rz = dot(r, z)
    bnorm = ctx.sqrt(dot(b, b))
    out = PCGIterates([], [to_np(r)], [])
    for _ in range(iters):
        if ctx.sqrt(dot(r, r)) <= rtol * bnorm or rz == 0:
            break
        Ap = Am * p
        curv = dot(p, Ap)
        if not curv > 0:
            break
        a = rz / curv
        v = v + a * p
        r = r - a * Ap
        out.v.append(to_np(v))
        out.r.append(to_np(r))
        out.s.append(to_np(p))
        z = M(r)
        rz_new = dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return out


def deflated_pcg(A, target, W, precondition=None, iters=None, rtol=0.0):
    """Preconditioned deflated CG (Saad, Yeung, Erhel, Guyomarc'h 2000, Alg. 3.6).

    Deflation space ``span(W)``. The iterates start at the projected
    solution ``x_0 = W (W^T A W)^{-1} W^T b``. Returns ``PCGIterates`` whose
    ``v[0]`` is ``x_0``.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(target, dtype=float)
    W = np.asarray(W, dtype=float)
    M = (lambda r: r.copy()) if precondition is None else precondition
    AW = A @ W
    G = scipy.linalg.cho_factor(W.T @ AW)
    iters = len(b) - W.shape[1] if iters is None else iters

    def deflate(z):
        return z - W @ scipy.linalg.cho_solve(G, AW.T @ z)

    x = W @ scipy.linalg.cho_solve(G, W.T @ b)
    r = b - A @ x
    z = M(r)
    p = deflate(z)
    rz = r @ z
    out = PCGIterates([x.copy()], [r.copy()], [])
    bnorm = np.linalg.norm(b)
    for _ in range(iters):
        if np.linalg.norm(r) <= rtol * bnorm or not np.any(r):
            break
        Ap = A @ p
        curv = p @ Ap
        if not curv > 0:
            break
        a = rz / curv
        x = x + a * p
        r = r - a * Ap
        out.v.append(x.copy())
        out.r.append(r.copy())
        out.s.append(p.copy())
        z = M(r)
        rz_new = r @ z
        p = (rz_new / rz) * p + deflate(z)
        rz = rz_new
    return out


def deflated_pcg_extended(A, target, W, P_inv=None, iters=None, rtol=0.0, dps=50):
    """:func:`deflated_pcg` carried out in ``dps``-digit arithmetic (mpmath).

    Same conventions: ``v[0]`` is the projected start ``x_0``. ``P_inv`` is
    symmetrized first. Small ``n`` only.
    """
    import mpmath

    ctx = mpmath.mp.clone()
    ctx.dps = dps
    A = np.asarray(A, dtype=float)
    W = np.asarray(W, dtype=float)
    n, k = W.shape
    iters = n - k if iters is None else iters
    Am = ctx.matrix(A.tolist())
    Wm = ctx.matrix(W.tolist())
    if P_inv is not None:
        P_inv = np.asarray(P_inv, dtype=float)
        P_inv = 0.5 * (P_inv + P_inv.T)
    Pm = None if P_inv is None else ctx.matrix(P_inv.tolist())
    b = ctx.matrix(np.asarray(target, dtype=float).tolist())
    AW = Am * Wm
    G = Wm.T * AW

    def M(r):
        return r.copy() if Pm is None else Pm * r

    def deflate(z):
        return z - Wm * ctx.lu_solve(G, AW.T * z)

    def dot(a, c):
        return ctx.fsum(a[j] * c[j] for j in range(n))

    def to_np(x):
        return np.array([float(x[j]) for j in range(n)])

    x = Wm * ctx.lu_solve(G, Wm.T * b)
    r = b - Am * x
    z = M(r)
    p = deflate(z)
    rz = dot(r, z)
    bnorm = ctx.sqrt(dot(b, b))
    out = PCGIterates([to_np(x)], [to_np(r)], [])
    for _ in range(iters):
        if ctx.sqrt(dot(r, r)) <= rtol * bnorm or rz == 0:
            break
        Ap = Am * p
        curv = dot(p, Ap)
        if not curv > 0:
            break
        a = rz / curv
        x = x + a * p
        r = r - a * Ap
        out.v.append(to_np(x))
        out.r.append(to_np(r))
        out.s.append(to_np(p))
        z = M(r)
        rz_new = dot(r, z)
        p = (rz_new / rz) * p + deflate(z)
        rz = rz_new
    return out


def nystrom_sor_mean(kernel, X, y, Z, noise, prior_mean=0.0, check=True):
    """Shared posterior mean of SoR, DTC and SVGP with inducing points ``Z``.

    Evaluates both algebraic forms
    ``k(., Z)(K_ZX K_XZ + s2 K_ZZ)^{-1} K_ZX (y - mu)`` and
    ``q(., X) K_XZ (K_ZX (q(X, X) + s2 I) K_XZ)^{-1} K_ZX (y - mu)``
    and, with ``check``, asserts they agree to 1e-8 (relative) on X.
    Returns a callable ``Xq -> mean``.
    """
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    t = np.asarray(y, dtype=float) - prior_mean
    Kxz = cross_block(kernel, X, Z)
    Kzz = cross_block(kernel, Z, Z)
    A = Kxz.T @ Kxz + noise * Kzz
    rank = np.linalg.matrix_rank(Kxz)
    if rank < Z.shape[0]:
        warnings.warn("K_XZ is rank deficient; using a pseudo-inverse", RuntimeWarning)
        w = np.linalg.pinv(A) @ (Kxz.T @ t)
    else:
        w = np.linalg.solve(A, Kxz.T @ t)

    if check:
        Kzz_inv = np.linalg.pinv(Kzz, hermitian=True)
        Qxx = Kxz @ Kzz_inv @ Kxz.T
        gram = Kxz.T @ (Qxx + noise * np.eye(len(X))) @ Kxz
        u = np.linalg.lstsq(gram, Kxz.T @ t, rcond=None)[0]
        first = Kxz @ w
        second = Qxx @ (Kxz @ u)
        scale = max(np.linalg.norm(first), 1e-300)
        if np.linalg.norm(first - second) > 1e-8 * scale:
            raise AssertionError("the two Nystrom mean forms disagree")

    def mean(Xq):
        return prior_mean + cross_block(kernel, Xq, Z) @ w

    mean.weights = w
    return mean


def pseudo_input_batch_mean(kernel, X, y, Z, noise, prior_mean=0.0):
    """Batch form of the inducing-point-action mean with ``S = K_XZ``.

    ``k(., X) S (S^T K_hat S)^{-1} S^T (y - mu)``.
    """
    X = np.asarray(X, dtype=float)
    S = cross_block(kernel, X, Z)
    Khat = cross_block(kernel, X, X) + noise * np.eye(len(X))
    t = np.asarray(y, dtype=float) - prior_mean
    c = np.linalg.solve(S.T @ Khat @ S, S.T @ t)
    v = S @ c

    def mean(Xq):
        return prior_mean + cross_block(kernel, Xq, X) @ v

    mean.weights = v
    return mean


def rkhs_gram(kernel, points, noise):
    """``K^sigma = k(P, P) + noise * I`` for distinct points ``P``."""
    P = np.asarray(points, dtype=float)
    return cross_block(kernel, P, P) + noise * np.eye(len(P))


def rkhs_norm(coeffs, points, kernel, noise):
    """Norm of ``g = sum_j c_j k^sigma(., x_j)`` in the RKHS of ``k + noise * delta``."""
    c = np.asarray(coeffs, dtype=float)
    val = float(c @ rkhs_gram(kernel, points, noise) @ c)
    return float(np.sqrt(max(val, 0.0)))


def batch_precision(S, Khat):
    """``S (S^T K_hat S)^{-1} S^T`` assembled in one shot."""
    S = np.asarray(S, dtype=float)
    return S @ np.linalg.solve(S.T @ Khat @ S, S.T)


def cg_envelope(kappa, i):
    """``2 ((sqrt(kappa) - 1) / (sqrt(kappa) + 1))^i``."""
    q = (np.sqrt(kappa) - 1.0) / (np.sqrt(kappa) + 1.0)
    return 2.0 * q**i
