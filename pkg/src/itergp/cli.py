"""``itergp fit|predict|sample|benchmark``.

Configuration comes from a flat ``key=value`` file (``--config``) and from
flags named after the keys (``--max-iterations 64``); flags win. Unknown
keys are rejected before any computation.

Exit codes: 0 success, 1 configuration error, 2 data or file error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import os
import re
import sys
from dataclasses import dataclass

import numpy as np

from . import artifact, data, policies
from .kernels import FAMILIES, KernelParams
from .posterior import decompose_variance, fit, sample_paths
from .solver import DegenerateAction, StoppingConfig

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class ConfigError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def _str_list(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


# key -> (parser, default, help)
KEYS = {
    "kernel": (str, "matern12", f"kernel family, one of {', '.join(FAMILIES)}"),
    "lengthscale": (float, 1.0, "kernel lengthscale"),
    "output_scale": (float, 1.0, "kernel variance k(x, x)"),
    "noise": (float, 0.01, "observation noise variance sigma^2"),
    "prior_mean": (float, 0.0, "constant prior mean"),
    "policy": (str, "cg", "policy code for fit"),
    "policies": (_str_list, ["cg"], "comma-separated policy codes for benchmark"),
    "max_iterations": (int, 100, "solver step budget for fit"),
    "abstol": (float, 0.0, "absolute residual tolerance"),
    "reltol": (float, 0.0, "relative residual tolerance"),
    "seed": (int, 0, "seed for data generation, splitting and random policies"),
    "seeds": (_int_list, None, "comma-separated benchmark seeds (default: seed)"),
    "budgets": (_int_list, [8, 16, 32, 64, 128, 256], "comma-separated benchmark budgets"),
    "train": (str, None, "training CSV (x1..xd,y)"),
    "test": (str, None, "test CSV for benchmark"),
    "synthetic_n": (int, 2048, "points of the synthetic sine data set"),
    "synthetic_d": (int, 4, "input dimension of the synthetic data"),
    "synthetic_sigma": (float, 0.1, "noise std of the synthetic data"),
    "train_frac": (float, 0.9, "train fraction when splitting"),
    "standardize": (_bool, False, "z-score features with training statistics"),
    "cache_mode": (str, "auto", "kernel matrix storage: auto, dense or blocked"),
    "output": (str, None, "model file (fit) or report directory (benchmark)"),
    "reference_cg": (_bool, False, "add a textbook-CG RMSE column to benchmark reports"),
    "timing": (_bool, True, "record wall-clock times in reports"),
}


@dataclass
class Config:
    values: dict

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def kernel_params(self):
        return KernelParams(self.values["kernel"], self.values["lengthscale"], self.values["output_scale"])

    @property
    def stopping(self):
        return StoppingConfig(self.max_iterations, self.abstol, self.reltol)


def parse_config_text(text, source="<config>"):
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        raw[key.strip()] = value.strip()
    return raw


def build_config(raw: dict) -> Config:
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    values = {}
    for key, (conv, default, _) in KEYS.items():
        if key in raw and raw[key] is not None:
            try:
                values[key] = conv(raw[key]) if isinstance(raw[key], str) else raw[key]
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from exc
        else:
            values[key] = default
    cfg = Config(values)
    try:
        cfg.kernel_params
        cfg.stopping
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.noise < 0:
        raise ConfigError("noise must be nonnegative")
    if not 0 < cfg.train_frac < 1:
        raise ConfigError("train_frac must lie strictly between 0 and 1")
    if cfg.cache_mode not in ("auto", "dense", "blocked"):
        raise ConfigError(f"unknown cache_mode {cfg.cache_mode!r}")
    if any(b < 0 for b in cfg.budgets) or not cfg.budgets:
        raise ConfigError("budgets must be nonnegative integers")
    return cfg


def load_config(args) -> Config:
    raw = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw.update(parse_config_text(fh.read(), args.config))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    for key in KEYS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    return build_config(raw)


# --- data --------------------------------------------------------------------


def load_data(cfg: Config, seed, need_test=False):
    """(train, test, shift, scale); ``test`` may be ``None``."""
    if cfg.train:
        train = data.read_csv(cfg.train)
        test = data.read_csv(cfg.test) if cfg.test else None
    else:
        ds = data.synth_sine(cfg.synthetic_n, cfg.synthetic_d, cfg.synthetic_sigma, seed)
        train, test = data.split(ds, cfg.train_frac, seed)
    if need_test and test is None:
        raise ConfigError("benchmark needs test data (test=... or the synthetic generator)")
    if test is not None and test.d != train.d:
        raise data.DataError(f"train has {train.d} features but test has {test.d}")
    shift = scale = None
    if cfg.standardize:
        shift, scale = data.feature_stats(train)
        train = data.Dataset((train.X - shift) / scale, train.y, True)
        if test is not None:
            test = data.Dataset((test.X - shift) / scale, test.y, True)
    return train, test, shift, scale


def make_policy(code, train, seed):
    try:
        return policies.make_policy(code, inputs=train.X, seed=seed, load_points=data.read_points)
    except data.DataError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _write_rows(path, header, rows):
    fh = open(path, "w", newline="", encoding="utf-8") if path else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, float) else v for v in row])
    finally:
        if path:
            fh.close()


# --- commands ------------------------------------------------------------------


def cmd_fit(args):
    cfg = load_config(args)
    if cfg.policy.partition(":")[0] not in policies.POLICY_CODES:
        raise ConfigError(f"unknown policy code {cfg.policy!r}")
    if not cfg.output:
        raise ConfigError("fit needs an output path (--output)")
    train, _, shift, scale = load_data(cfg, cfg.seed)
    policy = make_policy(cfg.policy, train, cfg.seed)
    f = fit(cfg.kernel_params, train.X, train.y, cfg.noise, policy, cfg.stopping,
            prior_mean=cfg.prior_mean, cache_mode=cfg.cache_mode)
    st = f.state
    if f.result.stop_reason == "breakdown":
        raise NumericalError("every proposed action was degenerate; the system looks singular")
    if not all(np.all(np.isfinite(a)) for a in (st.v, st.etas, st.residual)):
        raise NumericalError("solver produced non-finite values")
    model = artifact.Model(
        f.kernel, cfg.noise, cfg.prior_mean, train.X, train.y, st.v.copy(), st.D.copy(),
        st.etas.copy(), shift, scale,
        info={
            "policy": cfg.policy,
            "stop_reason": f.result.stop_reason,
            "matvecs": f.op.n_matvecs,
            "discarded": f.result.n_discarded,
            "residual_norm": repr(float(np.linalg.norm(st.residual))),
        },
    )
    artifact.save(model, cfg.output)
    print(f"fit: {st.iteration} steps ({f.result.stop_reason}), residual norm "
          f"{np.linalg.norm(st.residual):.3e}, wrote {cfg.output}", file=sys.stderr)
    return 0


def cmd_predict(args):
    model = artifact.load(args.model)
    Xq = model.transform(data.read_points(args.query))
    post = model.posterior()
    mean = post.predict_mean(Xq)
    var = post.predict_var(Xq, observation=args.variance == "observation")
    header = ["mean", "variance"]
    rows = [list(r) for r in zip(mean.tolist(), var.tolist())]
    if args.decompose:
        if not args.dense_oracle:
            raise ConfigError("--decompose needs --dense-oracle (O(n^3) dense factorization)")
        from .oracles import ExactGPOracle

        try:
            oracle = ExactGPOracle(model.kernel, model.inputs, model.targets, model.noise, model.prior_mean)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        header += ["mathematical", "computational", "combined"]
        for row, x in zip(rows, Xq):
            b = decompose_variance(post, x, oracle)
            row += [b.mathematical, b.computational, b.combined]
    _write_rows(args.output, header, rows)
    return 0


def cmd_sample(args):
    if args.count < 1:
        raise ConfigError("--count must be positive")
    model = artifact.load(args.model)
    Xq = model.transform(data.read_points(args.query))
    paths = sample_paths(model.posterior(), Xq, args.count, seed=args.seed)
    header = ["sample"] + [f"f{j + 1}" for j in range(Xq.shape[0])]
    _write_rows(args.output, header, ([k] + p for k, p in enumerate(paths.tolist())))
    return 0


def _file_stem(code):
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", code).strip("_") or "policy"


def cmd_benchmark(args):
    cfg = load_config(args)
    if not cfg.output:
        raise ConfigError("benchmark needs an output directory (--output)")
    seeds = cfg.seeds if cfg.seeds is not None else [cfg.seed]
    stems = [_file_stem(c) for c in cfg.policies]
    if len(set(stems)) != len(stems):
        raise ConfigError("policy codes map to the same report file name")
    for code in cfg.policies:
        if code.partition(":")[0] not in policies.POLICY_CODES:
            raise ConfigError(f"unknown policy code {code!r}")
    os.makedirs(cfg.output, exist_ok=True)
    stopping = StoppingConfig(max(cfg.budgets), cfg.abstol, cfg.reltol)
    per_policy = {code: [] for code in cfg.policies}
    for seed in seeds:
        train, test, _, _ = load_data(cfg, seed, need_test=True)
        for code in cfg.policies:
            rep = data.run_benchmark(
                train, test, cfg.kernel_params, cfg.noise, make_policy(code, train, seed), cfg.budgets,
                seed=seed, policy_name=code, stopping=stopping, prior_mean=cfg.prior_mean,
                reference_cg=cfg.reference_cg,
            )
            if not cfg.timing:
                for row in rep.rows:
                    row["wall_ns"] = 0
            per_policy[code].append(rep)
    stamp = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    for code, stem in zip(cfg.policies, stems):
        merged = data.merge_reports(per_policy[code])
        merged.metadata["seeds"] = seeds
        merged.metadata["stop_reasons"] = [r.metadata["stop_reason"] for r in per_policy[code]]
        merged.metadata.pop("stop_reason", None)
        merged.metadata["timestamp"] = stamp
        merged.write_csv(os.path.join(cfg.output, f"{stem}.csv"))
        merged.write_jsonl(os.path.join(cfg.output, f"{stem}.jsonl"))
        print(f"benchmark: {code} -> {os.path.join(cfg.output, stem)}.{{csv,jsonl}}", file=sys.stderr)
    return 0


# --- entry point -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_config_flags(p):
    p.add_argument("--config", help="key=value configuration file")
    for key, (_, default, text) in KEYS.items():
        flags = ["--" + key.replace("_", "-")] + (["-o"] if key == "output" else [])
        p.add_argument(*flags, dest=key, default=None, help=f"{text} (default: {default})")


def build_parser():
    parser = _Parser(prog="itergp", description="Computation-aware Gaussian process regression.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="run the solver and write a model file")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="posterior mean and variance at query points")
    p.add_argument("model")
    p.add_argument("query", help="CSV with header x1..xd (a y column is ignored)")
    p.add_argument("--variance", choices=("latent", "observation"), default="latent")
    p.add_argument("--decompose", action="store_true",
                   help="split the variance into mathematical and computational parts")
    p.add_argument("--dense-oracle", action="store_true",
                   help="allow the dense O(n^3) factorization that --decompose needs")
    p.add_argument("-o", "--output", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sample", help="posterior sample paths at query points")
    p.add_argument("model")
    p.add_argument("query")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("benchmark", help="RMSE/NLL per budget for one or more policies")
    _add_config_flags(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"itergp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataError, artifact.ArtifactError, OSError) as exc:
        print(f"itergp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, DegenerateAction, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"itergp: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # shape and content problems surfacing from the library
        print(f"itergp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
