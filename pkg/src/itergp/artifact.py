"""Binary model files.

Layout::

    ITERGP-MODEL
    schema=1
    key=value            (one per line, plain text)
    ...
    arrays=name:rows,cols;name:rows;...
    END
    <little-endian float64 arrays, in the order listed>

The header is readable with ``head``; the arrays hold the training inputs
and targets, the representer weights, the direction factors ``D`` and the
normalizers ``eta``, plus the feature standardization if one was applied.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelParams
from .posterior import CombinedPosterior
from .solver import LowRankPrecision

MAGIC = b"ITERGP-MODEL\n"
SCHEMA = 1
_ARRAY_ORDER = ("inputs", "targets", "weights", "factors", "etas", "x_shift", "x_scale")


class ArtifactError(ValueError):
    """Unreadable or inconsistent model file."""


@dataclass
class Model:
    kernel: KernelParams
    noise: float
    prior_mean: float
    inputs: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    factors: np.ndarray
    etas: np.ndarray
    x_shift: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def iteration(self):
        return self.factors.shape[1]

    def transform(self, Xq):
        Xq = np.asarray(Xq, dtype=float)
        if Xq.ndim != 2 or Xq.shape[1] != self.inputs.shape[1]:
            raise ArtifactError(
                f"query points have {Xq.shape[-1]} columns, model expects {self.inputs.shape[1]}"
            )
        if self.x_shift is None:
            return Xq
        return (Xq - self.x_shift) / self.x_scale

    def posterior(self) -> CombinedPosterior:
        return CombinedPosterior(
            self.kernel, self.inputs, self.noise, self.weights,
            LowRankPrecision(self.factors, self.etas), self.prior_mean, self.targets,
        )


def save(model: Model, path):
    arrays = {name: getattr(model, name) for name in _ARRAY_ORDER}
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in arrays.items() if v is not None}
    header = {
        "schema": SCHEMA,
        "kernel": model.kernel.family,
        "lengthscale": repr(float(model.kernel.lengthscale)),
        "output_scale": repr(float(model.kernel.output_scale)),
        "noise": repr(float(model.noise)),
        "prior_mean": repr(float(model.prior_mean)),
        "n": model.inputs.shape[0],
        "d": model.inputs.shape[1],
        "iterations": model.iteration,
    }
    for k, v in model.info.items():
        if k in header or k == "arrays":
            raise ValueError(f"info key {k!r} clashes with a header field")
        text = str(v)
        if "\n" in text or "=" in k:
            raise ValueError(f"info entry {k!r} is not a single-line value")
        header[k] = text
    header["arrays"] = ";".join(f"{k}:{','.join(map(str, a.shape))}" for k, a in arrays.items())
    lines = "".join(f"{k}={v}\n" for k, v in header.items()) + "END\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(lines.encode("utf-8"))
        for a in arrays.values():
            fh.write(a.tobytes())


def read_header(fh):
    if fh.readline() != MAGIC:
        raise ArtifactError("not an itergp model file")
    header = {}
    for raw in fh:
        line = raw.decode("utf-8").rstrip("\n")
        if line == "END":
            return header
        key, sep, value = line.partition("=")
        if not sep:
            raise ArtifactError(f"malformed header line {line!r}")
        header[key] = value
    raise ArtifactError("header is not terminated")


def load(path) -> Model:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ArtifactError(f"cannot open model {path}: {exc}") from exc
    with fh:
        header = read_header(fh)
        if header.get("schema") != str(SCHEMA):
            raise ArtifactError(f"unsupported schema {header.get('schema')!r}")
        arrays = {}
        for spec in filter(None, header.get("arrays", "").split(";")):
            name, _, dims = spec.partition(":")
            shape = tuple(int(x) for x in dims.split(",") if x)
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ArtifactError(f"model file truncated while reading {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(float)
        if fh.read(1):
            raise ArtifactError("trailing bytes after the last array")
    try:
        kernel = KernelParams(header["kernel"], float(header["lengthscale"]), float(header["output_scale"]))
        known = {"schema", "kernel", "lengthscale", "output_scale", "noise", "prior_mean",
                 "n", "d", "iterations", "arrays"}
        model = Model(
            kernel, float(header["noise"]), float(header["prior_mean"]),
            arrays["inputs"], arrays["targets"], arrays["weights"], arrays["factors"], arrays["etas"],
            arrays.get("x_shift"), arrays.get("x_scale"),
            {k: v for k, v in header.items() if k not in known},
        )
    except (KeyError, ValueError) as exc:
        raise ArtifactError(f"incomplete model header: {exc}") from exc
    n, d, i = int(header["n"]), int(header["d"]), int(header["iterations"])
    if model.inputs.shape != (n, d) or model.factors.shape != (n, i) or model.etas.shape != (i,):
        raise ArtifactError("array shapes disagree with the header")
    return model
