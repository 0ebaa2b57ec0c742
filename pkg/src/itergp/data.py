"""Datasets, the synthetic sine generator, metrics and the benchmark harness."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import solver as _solver
from .kernels import KernelMatrix, cross_block


class DataError(ValueError):
    """Malformed or inconsistent data."""


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    standardized: bool = False

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(self.y, dtype=float).ravel()
        if X.ndim != 2 or len(X) != len(y):
            raise DataError(f"X has {len(X)} rows but y has {len(y)} entries")
        if len(y) < 1:
            raise DataError("dataset is empty")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DataError("dataset contains non-finite values")
        self.X, self.y = X, y

    @property
    def n(self):
        return len(self.y)

    @property
    def d(self):
        return self.X.shape[1]

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.standardized)


def synth_sine(n, d, sigma, seed=0) -> Dataset:
    """``y = sin(pi * sum(x)) + eps`` with ``x ~ U[-1, 1]^d`` and ``eps ~ N(0, sigma^2)``."""
    if n < 1 or d < 1 or sigma < 0:
        raise ValueError("need n >= 1, d >= 1 and sigma >= 0")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1.0, 1.0, size=(n, d))
    y = np.sin(np.pi * X.sum(axis=1)) + sigma * rng.standard_normal(n)
    return Dataset(X, y)


def split(ds: Dataset, train_frac=0.9, seed=0):
    """Random disjoint train/test split; ``round(train_frac * n)`` training points."""
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    n_train = int(round(train_frac * ds.n))
    if n_train < 1 or n_train >= ds.n:
        raise DataError(f"split of {ds.n} points at {train_frac} leaves an empty side")
    perm = np.random.default_rng(seed).permutation(ds.n)
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


def feature_stats(train: Dataset):
    """Per-column mean and standard deviation (1 for constant columns)."""
    mu = train.X.mean(axis=0)
    sd = train.X.std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


def standardize(train: Dataset, test: Dataset | None = None):
    """Z-score features with statistics from ``train`` only."""
    mu, sd = feature_stats(train)
    out = [Dataset((train.X - mu) / sd, train.y, True)]
    if test is not None:
        out.append(Dataset((test.X - mu) / sd, test.y, True))
    return tuple(out) if test is not None else out[0]


def rmse(pred, truth) -> float:
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def nll(mean, var, truth) -> float:
    """Average Gaussian negative log-likelihood with observation-space variances."""
    mean, var, truth = (np.asarray(a, dtype=float) for a in (mean, var, truth))
    if not (mean.shape == var.shape == truth.shape):
        raise ValueError("mean, variance and truth lengths differ")
    if np.any(var <= 0):
        raise ValueError("predictive variances must be positive")
    return float(np.mean(0.5 * np.log(2 * np.pi * var) + (truth - mean) ** 2 / (2 * var)))


# --- CSV -----------------------------------------------------------------------


def read_csv(path, require_y=True) -> Dataset:
    """Read ``x1,...,xd[,y]`` with a header row."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    has_y = bool(header) and header[-1] == "y"
    xcols = header[:-1] if has_y else header
    if not xcols or any(c != f"x{k + 1}" for k, c in enumerate(xcols)):
        raise DataError(f"{path}: header must be x1,...,xd[,y], got {','.join(header)}")
    if require_y and not has_y:
        raise DataError(f"{path}: missing y column")
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise DataError(f"{path}: ragged rows or no data")
    X = data[:, : len(xcols)]
    y = data[:, -1] if has_y else np.zeros(len(data))
    return Dataset(X, y)


def read_points(path) -> np.ndarray:
    return read_csv(path, require_y=False).X


def write_csv(ds: Dataset, path, include_y=True):
    header = [f"x{k + 1}" for k in range(ds.d)] + (["y"] if include_y else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(ds.X, ds.y):
            row = [f"{v:.17g}" for v in x]
            if include_y:
                row.append(f"{y:.17g}")
            w.writerow(row)


# --- benchmark -----------------------------------------------------------------


REPORT_COLUMNS = ("seed", "budget", "iterations", "rmse", "nll", "matvec_count", "wall_ns")


@dataclass
class BenchmarkReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def column(self, name):
        return np.array([r[name] for r in self.rows])

    def write_csv(self, path):
        cols = list(self.rows[0].keys()) if self.rows else list(REPORT_COLUMNS)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v) for k, v in r.items()})

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"metadata": self.metadata}, sort_keys=True) + "\n")
            for r in self.rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def merge_reports(reports):
    """Concatenate rows, ordered by (seed, budget)."""
    rows = sorted((r for rep in reports for r in rep.rows), key=lambda r: (r["seed"], r["budget"]))
    meta = dict(reports[0].metadata) if reports else {}
    meta.pop("seed", None)
    return BenchmarkReport(rows, meta)


def run_benchmark(
    train: Dataset,
    test: Dataset,
    kernel,
    noise,
    policy,
    budgets,
    *,
    seed=0,
    policy_name="",
    stopping=None,
    prior_mean=0.0,
    reference_cg=False,
) -> BenchmarkReport:
    """One solver run up to ``max(budgets)`` with a report row per budget.

    Rows are taken from snapshots of that single run; a budget beyond the
    point where the run stopped reports the final state. With
    ``reference_cg`` an extra column ``rmse_cg_reference`` holds the test
    RMSE of the mean from textbook CG iterates (with residual
    reorthogonalization) at the same budget.
    """
    budgets = sorted({int(b) for b in budgets})
    if not budgets or budgets[0] < 0:
        raise ValueError("budgets must be nonnegative iteration counts")
    stopping = stopping or _solver.StoppingConfig(max_iterations=budgets[-1])
    stopping = _solver.StoppingConfig(min(stopping.max_iterations, budgets[-1]), stopping.abstol, stopping.reltol)

    op = KernelMatrix(kernel, train.X, noise)
    target = train.y - prior_mean
    snapshots = {}
    t0 = time.perf_counter_ns()

    def take(state, matvecs, elapsed):
        snapshots[state.iteration] = (state.v.copy(), state.precision(), matvecs, elapsed)

    def callback(state, record):
        if state.iteration in budgets:
            take(state, record.n_matvecs, time.perf_counter_ns() - t0)

    state = _solver.SolverState(target)
    if 0 in budgets:
        take(state, 0, 0)
    result = _solver.run(op, target, policy, stopping, state=state, callback=callback)
    final = (result.state.v.copy(), result.precision, op.n_matvecs, time.perf_counter_ns() - t0)

    Kq = cross_block(kernel, test.X, train.X)
    cg_ref = None
    if reference_cg:
        from .oracles import classical_pcg

        ref_op = KernelMatrix(kernel, train.X, noise)
        cg_ref = classical_pcg(ref_op.matvec, target, iters=budgets[-1], reorthogonalize=True)

    rows = []
    for b in budgets:
        v, C, matvecs, wall = snapshots.get(b, final)
        mean = prior_mean + Kq @ v
        G = Kq @ C.factors
        var = kernel.output_scale - np.einsum("ij,ij->i", G, G / C.weights) + noise
        row = {
            "seed": seed,
            "budget": b,
            "iterations": C.rank,
            "rmse": rmse(mean, test.y),
            "nll": nll(mean, np.maximum(var, 1e-300), test.y),
            "matvec_count": int(matvecs),
            "wall_ns": int(wall),
        }
        if cg_ref is not None:
            k = min(b, len(cg_ref.v))
            v_ref = cg_ref.v[k - 1] if k else np.zeros(train.n)
            row["rmse_cg_reference"] = rmse(prior_mean + Kq @ v_ref, test.y)
        rows.append(row)
    meta = {
        "policy": policy_name,
        "kernel": kernel.family,
        "lengthscale": kernel.lengthscale,
        "output_scale": kernel.output_scale,
        "noise": noise,
        "seed": seed,
        "n_train": train.n,
        "n_test": test.n,
        "stop_reason": result.stop_reason,
    }
    return BenchmarkReport(rows, meta)
