"""Forward operators F: R^d -> R^n and synthetic measurement generation.

All operators evaluate on a single vector or on a batch of rows, and accept
``diffcore.Tensor`` input so reverse-KL training can differentiate through
them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import textio
from .noise_model import NoiseParams, sample_noisy

SURROGATE_FORMAT = "mixnoise-surrogate/1"
MEASUREMENT_FORMAT = "mixnoise-measurements/1"


class SurrogateFormatError(ValueError):
    pass


def _check_input(x, d):
    shape = np.shape(dc.value(x))
    if len(shape) == 0 or shape[-1] != d:
        raise ValueError(f"expected input of length {d}, got shape {shape}")


class ForwardOperator:
    kind: str
    d: int
    n: int

    def __call__(self, x):
        raise NotImplementedError


def eval_op(op: ForwardOperator, x):
    """F(x) for a vector ``x`` of length d or a batch of shape (B, d)."""
    return op(x)


@dataclass(frozen=True, eq=False)
class LinearOperator(ForwardOperator):
    """F(x) = A x + c."""

    matrix: np.ndarray
    offset: np.ndarray | None = None
    kind: str = field(default="linear", init=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        object.__setattr__(self, "matrix", A)
        c = np.zeros(A.shape[0]) if self.offset is None else np.asarray(self.offset, dtype=np.float64)
        object.__setattr__(self, "offset", c)

    @property
    def d(self):
        return self.matrix.shape[1]

    @property
    def n(self):
        return self.matrix.shape[0]

    def __call__(self, x):
        _check_input(x, self.d)
        return dc.add(dc.matmul(x, self.matrix.T), self.offset)


@dataclass(frozen=True, eq=False)
class AffineSineOperator(ForwardOperator):
    """F(x) = A x + c + amplitude * sin(W x): a smooth nonlinear toy."""

    matrix: np.ndarray
    freq: np.ndarray
    offset: np.ndarray
    amplitude: float = 0.5
    kind: str = field(default="affine-sine", init=False)

    @property
    def d(self):
        return np.shape(self.matrix)[1]

    @property
    def n(self):
        return np.shape(self.matrix)[0]

    @classmethod
    def random(cls, d: int, n: int, seed: int = 0, amplitude: float = 0.5):
        rng = np.random.default_rng(seed)
        return cls(rng.normal(size=(n, d)) / np.sqrt(d), rng.normal(size=(n, d)) * 2.0,
                   rng.normal(size=n) * 0.1, amplitude)

    def __call__(self, x):
        _check_input(x, self.d)
        lin = dc.add(dc.matmul(x, np.asarray(self.matrix).T), self.offset)
        return dc.add(lin, dc.mul(self.amplitude, dc.sin(dc.matmul(x, np.asarray(self.freq).T))))


@dataclass(frozen=True, eq=False)
class QuadraticOperator(ForwardOperator):
    """F(x) = M (x * x) + c; with d = n = 1 and M = 1 this is x^2."""

    matrix: np.ndarray
    offset: np.ndarray | None = None
    kind: str = field(default="quadratic", init=False)

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        object.__setattr__(self, "matrix", M)
        c = np.zeros(M.shape[0]) if self.offset is None else np.asarray(self.offset, dtype=np.float64)
        object.__setattr__(self, "offset", c)

    @property
    def d(self):
        return self.matrix.shape[1]

    @property
    def n(self):
        return self.matrix.shape[0]

    def __call__(self, x):
        _check_input(x, self.d)
        return dc.add(dc.matmul(dc.square(x), self.matrix.T), self.offset)


@dataclass(frozen=True, eq=False)
class SurrogateOperator(ForwardOperator):
    """Dense-network surrogate with a per-coordinate affine output recalibration."""

    net: dc.DenseNet
    params: dc.ParamVector
    out_scale: np.ndarray
    out_shift: np.ndarray
    metadata: dict = field(default_factory=dict)
    kind: str = field(default="surrogate", init=False)

    @property
    def d(self):
        return self.net.widths[0]

    @property
    def n(self):
        return self.net.widths[-1]

    def __call__(self, x):
        _check_input(x, self.d)
        return dc.add(dc.mul(dc.net_eval(self.net, self.params, x), self.out_scale), self.out_shift)

    def to_dict(self) -> dict:
        layers = [
            {"W": self.params.segment(f"W{k}").tolist(), "b": self.params.segment(f"b{k}").tolist()}
            for k in range(self.net.n_layers)
        ]
        body = {
            "layers": layers,
            "output_scale": self.out_scale.tolist(),
            "output_shift": self.out_shift.tolist(),
        }
        return {
            "format": SURROGATE_FORMAT,
            "d": self.d,
            "n": self.n,
            "widths": list(self.net.widths),
            "activation": self.net.activation,
            **body,
            "checksum": textio.sha256_text(textio.dumps(body)),
            "metadata": {k: v for k, v in self.metadata.items() if k != "checksum"},
        }


def save_surrogate(op: SurrogateOperator, path) -> None:
    textio.write_json(path, op.to_dict())


def surrogate_from_dict(doc: dict) -> SurrogateOperator:
    try:
        if doc.get("format") != SURROGATE_FORMAT:
            raise SurrogateFormatError(f"unknown surrogate format {doc.get('format')!r}")
        widths = tuple(int(w) for w in doc["widths"])
        d, n = int(doc["d"]), int(doc["n"])
        if widths[0] != d or widths[-1] != n:
            raise SurrogateFormatError(f"widths {widths} do not match d={d}, n={n}")
        layers = doc["layers"]
        if len(layers) != len(widths) - 1:
            raise SurrogateFormatError(f"{len(layers)} layers for widths {widths}")
        segs = []
        for k, layer in enumerate(layers):
            W = np.asarray(layer["W"], dtype=np.float64)
            b = np.asarray(layer["b"], dtype=np.float64)
            if W.shape != (widths[k], widths[k + 1]) or b.shape != (widths[k + 1],):
                raise SurrogateFormatError(
                    f"layer {k}: weight shape {W.shape} / bias shape {b.shape} "
                    f"do not match widths {widths[k]}->{widths[k + 1]}"
                )
            segs += [(f"W{k}", W), (f"b{k}", b)]
        scale = np.asarray(doc["output_scale"], dtype=np.float64)
        shift = np.asarray(doc["output_shift"], dtype=np.float64)
        if scale.shape != (n,) or shift.shape != (n,):
            raise SurrogateFormatError("output recalibration must have length n")
    except (KeyError, TypeError) as exc:
        raise SurrogateFormatError(f"malformed surrogate document: {exc!r}") from exc
    body = {"layers": layers, "output_scale": doc["output_scale"], "output_shift": doc["output_shift"]}
    checksum = textio.sha256_text(textio.dumps(body))
    if "checksum" in doc and doc["checksum"] != checksum:
        raise SurrogateFormatError("surrogate checksum mismatch")
    meta = dict(doc.get("metadata", {}))
    meta["checksum"] = checksum
    net = dc.DenseNet(widths, doc.get("activation", "tanh"))
    return SurrogateOperator(net, dc.ParamVector.from_segments(segs), scale, shift, meta)


def load_surrogate(path) -> SurrogateOperator:
    path = Path(path)
    try:
        doc = textio.read_json(path)
    except ValueError as exc:
        raise SurrogateFormatError(f"{path}: not a valid JSON document ({exc})") from exc
    try:
        return surrogate_from_dict(doc)
    except SurrogateFormatError as exc:
        raise SurrogateFormatError(f"{path}: {exc}") from exc


def uniform_in_box(lo, hi, m: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    return lo + (hi - lo) * rng.random((m, lo.size))


def make_random_surrogate(
    d: int,
    n: int,
    widths=(64, 64),
    seed: int = 0,
    box=(-1.0, 1.0),
    gain: float = 1.5,
    n_probe: int = 10_000,
) -> SurrogateOperator:
    """Random smooth tanh network recalibrated so outputs span [0, 1] over ``box``.

    ``box`` is a (lo, hi) pair of scalars or length-d vectors.
    """
    widths = tuple(int(w) for w in widths)
    if not widths:
        raise ValueError("widths must be nonempty")
    rng = np.random.default_rng(seed)
    net = dc.DenseNet((d, *widths, n), "tanh")
    params = dc.ParamVector.from_segments(net.init(rng, gain=gain))
    for k in range(net.n_layers - 1):
        # spread the hidden pre-activations so tanh units are not all centred
        b = params.segment(f"b{k}")
        b[...] = rng.normal(0.0, 0.5, size=b.shape)
    lo, hi = _box_arrays(box, d)
    probe = net(params, uniform_in_box(lo, hi, n_probe, rng))
    pmin, pmax = probe.min(axis=0), probe.max(axis=0)
    span = np.where(pmax - pmin > 1e-12, pmax - pmin, 1.0)
    meta = {"seed": seed, "box_lo": lo.tolist(), "box_hi": hi.tolist(), "gain": gain}
    return SurrogateOperator(net, params, 1.0 / span, -pmin / span, meta)


def _box_arrays(box, d):
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (d,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (d,)).copy()
    if np.any(lo >= hi):
        raise ValueError("prior box must satisfy lo < hi")
    return lo, hi


@dataclass
class MeasurementSet:
    ys: np.ndarray
    prior_lo: np.ndarray
    prior_hi: np.ndarray
    xs_true: np.ndarray | None = None
    theta_true: NoiseParams | None = None
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ys = np.atleast_2d(np.asarray(self.ys, dtype=np.float64))
        self.prior_lo = np.asarray(self.prior_lo, dtype=np.float64)
        self.prior_hi = np.asarray(self.prior_hi, dtype=np.float64)
        if len(self.ys) < 1:
            raise ValueError("MeasurementSet needs at least one observation")
        if not np.all(np.isfinite(self.ys)):
            raise ValueError("observations must be finite")
        if self.xs_true is not None:
            self.xs_true = np.atleast_2d(np.asarray(self.xs_true, dtype=np.float64))

    @property
    def N(self) -> int:
        return len(self.ys)

    @property
    def n(self) -> int:
        return self.ys.shape[1]

    @property
    def d(self) -> int:
        return self.prior_lo.size

    def to_dict(self) -> dict:
        doc = {
            "format": MEASUREMENT_FORMAT,
            "d": self.d,
            "n": self.n,
            "N": self.N,
            "seed": self.seed,
            "prior_box": {"lo": self.prior_lo.tolist(), "hi": self.prior_hi.tolist()},
            "ys": self.ys.tolist(),
        }
        truth = {}
        if self.xs_true is not None:
            truth["xs"] = self.xs_true.tolist()
        if self.theta_true is not None:
            truth["a"], truth["b"] = self.theta_true.a, self.theta_true.b
        if truth:
            doc["truth"] = truth
        if self.meta:
            doc["meta"] = self.meta
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "MeasurementSet":
        if doc.get("format") != MEASUREMENT_FORMAT:
            raise ValueError(f"unknown measurement format {doc.get('format')!r}")
        truth = doc.get("truth", {})
        theta = NoiseParams(truth["a"], truth["b"]) if "a" in truth else None
        ms = cls(
            doc["ys"],
            doc["prior_box"]["lo"],
            doc["prior_box"]["hi"],
            truth.get("xs"),
            theta,
            doc.get("seed"),
            doc.get("meta", {}),
        )
        if ms.d != doc["d"] or ms.n != doc["n"]:
            raise ValueError("declared dimensions do not match data")
        return ms

    def save(self, path) -> None:
        textio.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "MeasurementSet":
        return cls.from_dict(textio.read_json(path))


def simulate_measurements(op: ForwardOperator, theta_true: NoiseParams, prior_box, N: int, seed: int) -> MeasurementSet:
    """x_i ~ Uniform(prior_box), y_i ~ p(y | x_i, theta_true)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    lo, hi = _box_arrays(prior_box, op.d)
    rng = np.random.default_rng(seed)
    xs = uniform_in_box(lo, hi, N, rng)
    ys = sample_noisy(op(xs), theta_true, rng)
    return MeasurementSet(ys, lo, hi, xs, theta_true, seed)
