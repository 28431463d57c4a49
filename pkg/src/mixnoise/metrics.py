"""Distance-to-truth, histogram and trace data, plus the CSV/JSON report files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import textio
from .losses import ElboEstimate
from .noise_model import NoiseParams

TRACE_HEADER = ("iter", "a", "b", "elbo")
MARGINAL_HEADER = ("dim", "bin_lo", "bin_hi", "count")
PAIR_HEADER = ("dim_x", "dim_y", "x_lo", "x_hi", "y_lo", "y_hi", "count")


def distance_ab(theta: NoiseParams, theta_true: NoiseParams) -> float:
    """|a - a_true| / a_true + |b - b_true| / b_true."""
    if not (theta_true.a > 0 and theta_true.b > 0):
        raise ValueError("distance_ab needs a strictly positive truth in both coordinates")
    return abs(theta.a - theta_true.a) / theta_true.a + abs(theta.b - theta_true.b) / theta_true.b


@dataclass
class Histogram1D:
    dim: int
    edges: np.ndarray
    counts: np.ndarray
    truth: float | None = None


@dataclass
class Histogram2D:
    dims: tuple[int, int]
    x_edges: np.ndarray
    y_edges: np.ndarray
    counts: np.ndarray
    truth: tuple[float, float] | None = None


@dataclass
class Marginals:
    one_d: list[Histogram1D]
    two_d: list[Histogram2D]


def marginal_histograms(samples, lo, hi, bins: int = 50, bins_2d: int = 40, truth=None) -> Marginals:
    """Corner-plot data over the box [lo, hi]: every 1-D marginal and every pair.

    Samples outside the box are clipped into the edge bins so each histogram
    counts every sample.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("no samples")
    if bins < 2 or bins_2d < 2:
        raise ValueError("bins must be >= 2")
    d = x.shape[1]
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (d,))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (d,))
    xc = np.clip(x, lo, hi)
    t = None if truth is None else np.asarray(truth, dtype=np.float64).ravel()
    one = []
    for j in range(d):
        edges = np.linspace(lo[j], hi[j], bins + 1)
        counts, _ = np.histogram(xc[:, j], bins=edges)
        one.append(Histogram1D(j, edges, counts, None if t is None else float(t[j])))
    two = []
    for i, j in combinations(range(d), 2):
        ex = np.linspace(lo[i], hi[i], bins_2d + 1)
        ey = np.linspace(lo[j], hi[j], bins_2d + 1)
        counts, _, _ = np.histogram2d(xc[:, i], xc[:, j], bins=(ex, ey))
        two.append(Histogram2D((i, j), ex, ey, counts.astype(np.int64),
                               None if t is None else (float(t[i]), float(t[j]))))
    return Marginals(one, two)


def trace_export(trace, thin: int = 20) -> list[tuple[int, float, float, float]]:
    """Rows (iter, a, b, elbo) for every iteration divisible by ``thin``.

    ``trace`` is an EMState or its list of trace dicts.
    """
    rows = getattr(trace, "trace", trace)
    if not rows:
        raise ValueError("empty trace")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    return [(int(r["iter"]), float(r["a"]), float(r["b"]), float(r["elbo"])) for r in rows if r["iter"] % thin == 0]


# ----------------------------------------------------------------------------
# CSV files. First line is a comment carrying provenance, then the header.
# ----------------------------------------------------------------------------


def provenance_line(config_hash: str, seed) -> str:
    return f"# config_hash={config_hash} seed={seed}\n"


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, rows, config_hash, seed) -> None:
    buf = io.StringIO()
    buf.write(provenance_line(config_hash, seed))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    """Returns (provenance dict, header, rows as strings)."""
    lines = Path(path).read_text().splitlines()
    meta = {}
    if lines and lines[0].startswith("#"):
        for tok in lines[0][1:].split():
            k, _, v = tok.partition("=")
            meta[k] = v
        lines = lines[1:]
    reader = list(csv.reader(lines))
    if not reader:
        raise ValueError(f"{path}: no header row")
    return meta, reader[0], reader[1:]


def write_trace_csv(path, rows, config_hash: str, seed) -> None:
    write_csv(path, TRACE_HEADER, rows, config_hash, seed)


def read_trace_csv(path) -> list[tuple[int, float, float, float]]:
    _, header, rows = read_csv(path)
    if tuple(header) != TRACE_HEADER:
        raise ValueError(f"{path}: unexpected header {header}")
    return [(int(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows]


def write_marginals_csv(path, marg: Marginals, config_hash: str, seed) -> None:
    rows = [(h.dim, lo, hi, int(c)) for h in marg.one_d for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts)]
    write_csv(path, MARGINAL_HEADER, rows, config_hash, seed)


def write_pairs_csv(path, marg: Marginals, config_hash: str, seed) -> None:
    rows = []
    for h in marg.two_d:
        for p in range(len(h.x_edges) - 1):
            for q in range(len(h.y_edges) - 1):
                rows.append((h.dims[0], h.dims[1], h.x_edges[p], h.x_edges[p + 1],
                             h.y_edges[q], h.y_edges[q + 1], int(h.counts[p, q])))
    write_csv(path, PAIR_HEADER, rows, config_hash, seed)


def read_marginals_csv(path) -> list[tuple[int, float, float, int]]:
    _, header, rows = read_csv(path)
    if tuple(header) != MARGINAL_HEADER:
        raise ValueError(f"{path}: unexpected header {header}")
    return [(int(r[0]), float(r[1]), float(r[2]), int(r[3])) for r in rows]


# ----------------------------------------------------------------------------
# Per-run report
# ----------------------------------------------------------------------------


@dataclass
class MetricReport:
    method: str
    N: int
    seed: int
    theta: NoiseParams
    theta_true: NoiseParams | None
    elbo: ElboEstimate
    config_hash: str = ""
    best_iter: int | None = None
    extra: dict = field(default_factory=dict)

    @property
    def D(self) -> float | None:
        return None if self.theta_true is None else distance_ab(self.theta, self.theta_true)

    def to_dict(self) -> dict:
        return {
            "format": "mixnoise-report/1",
            "config_hash": self.config_hash,
            "seed": self.seed,
            "method": self.method,
            "N": self.N,
            "a": self.theta.a,
            "b": self.theta.b,
            "a_true": None if self.theta_true is None else self.theta_true.a,
            "b_true": None if self.theta_true is None else self.theta_true.b,
            "D": self.D,
            "elbo": self.elbo.value,
            "elbo_se": self.elbo.std_error,
            "elbo_m": self.elbo.m,
            "best_iter": self.best_iter,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricReport":
        if doc.get("format") != "mixnoise-report/1":
            raise ValueError("not a mixnoise report")
        truth = None if doc.get("a_true") is None else NoiseParams(doc["a_true"], doc["b_true"])
        return cls(doc["method"], int(doc["N"]), int(doc["seed"]), NoiseParams(doc["a"], doc["b"]), truth,
                   ElboEstimate(doc["elbo"], int(doc["elbo_m"]), doc["elbo_se"]), doc.get("config_hash", ""),
                   doc.get("best_iter"), doc.get("extra", {}))

    def save(self, path) -> None:
        textio.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(textio.read_json(path))
