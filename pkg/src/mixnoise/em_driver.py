"""Outer EM loop: flow E-steps alternating with analytic inner-EM M-steps.

Also holds the grid baseline (one flow per fixed (a, b), best ELBO wins)
and an exact-E-step variant used to check EM monotonicity on problems
whose posterior is known in closed form.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import flow as fl
from . import textio
from .forward_op import MeasurementSet
from .losses import ElboEstimate, PriorBox, elbo_set, forward_kl_loss, joint_batch, reverse_kl_loss
from .noise_model import NoiseParams, PairBatch, inner_em

log = logging.getLogger(__name__)

LOSS_KINDS = ("forward", "reverse")


class EMAborted(RuntimeError):
    """Training hit a non-finite loss or parameter; ``state`` holds the last good state."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state


@dataclass
class EMConfig:
    R: int = 5000
    P: int = 10
    L: int = 20
    K: int = 2000
    loss: str = "forward"
    m_elbo: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    clip_norm: float | None = 10.0
    init_factor: float = 5.0
    seed: int = 0

    @classmethod
    def desk(cls, **kw) -> "EMConfig":
        return cls(**{"R": 300, "K": 500, "m_elbo": 500, **kw})

    @classmethod
    def paper(cls, **kw) -> "EMConfig":
        return cls(**kw)

    def check(self, N: int | None = None) -> None:
        if min(self.R, self.P, self.L) < 1:
            raise ValueError("R, P and L must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.m_elbo < 2 or self.batch_size < 1:
            raise ValueError("m_elbo must be >= 2 and batch_size >= 1")
        if N is not None and self.K < N:
            raise ValueError(f"K={self.K} must be >= N={N}")


@dataclass
class GridConfig:
    a_grid: tuple = tuple(np.linspace(0.001, 0.03, 8))
    b_grid: tuple = tuple(np.linspace(0.01, 0.2, 8))
    steps: int = 1200

    def __post_init__(self):
        self.a_grid = tuple(float(v) for v in self.a_grid)
        self.b_grid = tuple(float(v) for v in self.b_grid)
        for name, g in (("a", self.a_grid), ("b", self.b_grid)):
            if not g:
                raise ValueError(f"{name} grid is empty")
            if any(v < 0 for v in g) or any(b <= a for a, b in zip(g, g[1:])):
                raise ValueError(f"{name} grid must be non-negative and strictly increasing")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


@dataclass
class Snapshot:
    r: int
    theta: NoiseParams
    elbo: float
    elbo_se: float
    params: np.ndarray


@dataclass
class EMState:
    flow: fl.ConditionalFlow
    theta: NoiseParams
    r: int
    adam: dc.AdamState
    trace: list = field(default_factory=list)
    best: Snapshot | None = None
    rng_states: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def elbo_trace(self) -> list[float]:
        return [row["elbo"] for row in self.trace]

    @property
    def theta_trace(self) -> list[NoiseParams]:
        return [NoiseParams(row["a"], row["b"]) for row in self.trace]

    def best_flow(self) -> fl.ConditionalFlow:
        return self.flow.with_params(self.flow.params.with_values(self.best.params))

    def to_dict(self) -> dict:
        best = None
        if self.best is not None:
            best = {"r": self.best.r, "a": self.best.theta.a, "b": self.best.theta.b,
                    "elbo": self.best.elbo, "elbo_se": self.best.elbo_se, "params": self.best.params}
        return {
            "format": "mixnoise-emstate/1",
            "r": self.r,
            "theta": {"a": self.theta.a, "b": self.theta.b},
            "config": self.config,
            "trace": self.trace,
            "best": best,
            "adam": {"step": self.adam.step, "lr": self.adam.lr, "beta1": self.adam.beta1,
                     "beta2": self.adam.beta2, "eps": self.adam.eps, "m": self.adam.m, "v": self.adam.v},
            "rng_states": self.rng_states,
            "flow": self.flow.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EMState":
        flow = fl.ConditionalFlow.from_dict(doc["flow"])
        ad = doc["adam"]
        adam = dc.AdamState(np.asarray(ad["m"]), np.asarray(ad["v"]), ad["step"], ad["lr"],
                            ad["beta1"], ad["beta2"], ad["eps"])
        best = None
        if doc.get("best"):
            b = doc["best"]
            best = Snapshot(b["r"], NoiseParams(b["a"], b["b"]), b["elbo"], b["elbo_se"], np.asarray(b["params"]))
        return cls(flow, NoiseParams(**doc["theta"]), doc["r"], adam, list(doc["trace"]), best,
                   doc.get("rng_states", {}), doc.get("config", {}))


def save_state(state: EMState, path) -> None:
    textio.write_json(path, state.to_dict())


def load_state(path) -> EMState:
    return EMState.from_dict(textio.read_json(path))


def init_theta(measurements, mode: str = "from_above", factor: float = 5.0,
               floor: float = 1e-4, ceil: float = 10.0) -> NoiseParams:
    """Deliberately large starting noise so the first posteriors are broad.

    ``a0 = factor * std(all y entries)`` and
    ``b0 = factor * std(all y entries) / mean(|y entries|)``, clamped to
    ``[floor, ceil]``.
    """
    if mode != "from_above":
        raise ValueError(f"unsupported init mode {mode!r}")
    if factor <= 1:
        raise ValueError("factor must be > 1")
    ys = measurements.ys if isinstance(measurements, MeasurementSet) else np.asarray(measurements, dtype=np.float64)
    pooled = np.ravel(ys)
    spread = float(np.std(pooled))
    level = float(np.mean(np.abs(pooled)))
    rel = spread / level if level > 0 else 0.0
    clamp = lambda v: float(min(max(v, floor), ceil))
    return NoiseParams(clamp(factor * spread), clamp(factor * rel))


def repeat_measurements(ys, K: int) -> np.ndarray:
    """Each y_i repeated K // N times, the remainder handed out round-robin."""
    ys = np.atleast_2d(ys)
    N = len(ys)
    if K < N:
        raise ValueError(f"K={K} must be >= N={N}")
    counts = np.full(N, K // N)
    counts[: K % N] += 1
    return np.repeat(ys, counts, axis=0)


def _rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def _estep_closure(kind, flow, theta, prior, forward_op, ys, batch_size, rng):
    if kind == "forward":
        xs, yj = joint_batch(prior, forward_op, theta, batch_size, rng)
        return lambda p: forward_kl_loss(flow.with_params(p), xs, yj)
    m = max(1, math.ceil(batch_size / len(ys)))
    z = rng.standard_normal((len(ys) * m, flow.d))
    return lambda p: reverse_kl_loss(flow.with_params(p), ys, theta, prior, forward_op, m=m, z=z)


def train_steps(flow, adam, steps, kind, theta, prior, forward_op, ys, batch_size, rng, clip_norm=None):
    """``steps`` Adam updates on the chosen E-step loss. Returns (flow, adam, last loss)."""
    params = flow.params
    loss = float("nan")
    for _ in range(steps):
        closure = _estep_closure(kind, flow, theta, prior, forward_op, ys, batch_size, rng)
        loss, g = dc.value_and_grad(closure, params)
        if kind == "reverse" and clip_norm:
            g = dc.clip_by_norm(g, clip_norm)
        adam, params = adam_update(adam, params, g)
    return flow.with_params(params), adam, loss


def adam_update(adam, params, g):
    return dc.adam_step(adam, params, g)


def m_step(flow, ys, theta, forward_op, K, L, rng):
    """Sample K posterior draws over repeated observations, then run the inner EM."""
    y_rep = repeat_measurements(ys, K)
    z = rng.standard_normal((K, flow.d))
    xs, _ = fl.push(flow, y_rep, z)
    batch = PairBatch(xs, y_rep, forward_op(xs))
    return inner_em(batch, theta, L)


def validate(flow, ys, theta, prior, forward_op, m, seed, r) -> ElboEstimate:
    return elbo_set(flow, ys, theta, prior, forward_op, m, _rng(seed, 1, r))


def run_em(
    measurements: MeasurementSet,
    flow: fl.ConditionalFlow,
    config: EMConfig,
    forward_op,
    prior=None,
    theta0: NoiseParams | None = None,
    checkpoint_dir=None,
    resume: EMState | None = None,
    progress: Callable[[EMState], None] | None = None,
) -> EMState:
    """Alternate P flow-training steps at the current theta with an inner-EM update of theta.

    The ELBO of the measurements is validated after every EM step (and once
    before the first) with an independent RNG stream; the best snapshot is
    kept. ``resume`` continues a state produced by an earlier, shorter run.
    """
    ys = measurements.ys
    config.check(len(ys))
    prior = prior if prior is not None else PriorBox(measurements.prior_lo, measurements.prior_hi)
    cfg_dict = asdict(config)

    if resume is not None:
        state = resume
        rng_train, rng_m = _rng(0), _rng(0)
        rng_train.bit_generator.state = state.rng_states["train"]
        rng_m.bit_generator.state = state.rng_states["mstep"]
    else:
        theta = theta0 if theta0 is not None else init_theta(ys, factor=config.init_factor)
        rng_train, rng_m = _rng(config.seed, 0), _rng(config.seed, 2)
        state = EMState(flow, theta, 0, dc.AdamState.init(flow.params, lr=config.lr), config=cfg_dict)
        est = validate(flow, ys, theta, prior, forward_op, config.m_elbo, config.seed, 0)
        if not math.isfinite(est.value):
            _dump(state, checkpoint_dir, "checkpoint_abort.json", rng_train, rng_m)
            raise EMAborted("non-finite ELBO at the initial state", state)
        _record(state, est)

    while state.r < config.R:
        r = state.r + 1
        try:
            new_flow, adam, loss = train_steps(
                state.flow, state.adam, config.P, config.loss, state.theta, prior, forward_op,
                ys, config.batch_size, rng_train, config.clip_norm,
            )
            theta, _ = m_step(new_flow, ys, state.theta, forward_op, config.K, config.L, rng_m)
        except (dc.NonFiniteError, FloatingPointError, ValueError) as exc:
            _dump(state, checkpoint_dir, "checkpoint_abort.json", rng_train, rng_m)
            raise EMAborted(f"EM aborted at iteration {r}: {exc}", state) from exc
        state.flow, state.adam, state.theta, state.r = new_flow, adam, theta, r
        est = validate(new_flow, ys, theta, prior, forward_op, config.m_elbo, config.seed, r)
        if not math.isfinite(est.value):
            _dump(state, checkpoint_dir, "checkpoint_abort.json", rng_train, rng_m)
            raise EMAborted(f"non-finite ELBO at iteration {r}", state)
        _record(state, est)
        if progress is not None:
            progress(state)

    state.rng_states = {"train": rng_train.bit_generator.state, "mstep": rng_m.bit_generator.state}
    if checkpoint_dir is not None:
        _write_checkpoints(state, Path(checkpoint_dir))
    return state


def _record(state: EMState, est: ElboEstimate) -> None:
    state.trace.append({"iter": state.r, "a": state.theta.a, "b": state.theta.b,
                        "elbo": est.value, "elbo_se": est.std_error})
    if state.best is None or est.value > state.best.elbo:
        state.best = Snapshot(state.r, state.theta, est.value, est.std_error, state.flow.params.values.copy())


def _dump(state, checkpoint_dir, name, rng_train, rng_m):
    if checkpoint_dir is None:
        return
    state.rng_states = {"train": rng_train.bit_generator.state, "mstep": rng_m.bit_generator.state}
    save_state(state, Path(checkpoint_dir) / name)


def _write_checkpoints(state: EMState, outdir: Path) -> None:
    save_state(state, outdir / "checkpoint_final.json")
    best = state.best
    textio.write_json(outdir / "checkpoint_best.json", {
        "format": "mixnoise-best/1",
        "r": best.r,
        "theta": {"a": best.theta.a, "b": best.theta.b},
        "elbo": best.elbo,
        "elbo_se": best.elbo_se,
        "trace": state.trace,
        "flow": state.best_flow().to_dict(),
    })


# ----------------------------------------------------------------------------
# Grid baseline
# ----------------------------------------------------------------------------


@dataclass
class GridResult:
    theta: NoiseParams
    flow: fl.ConditionalFlow
    elbo_table: np.ndarray
    se_table: np.ndarray
    a_grid: tuple
    b_grid: tuple

    def rows(self) -> list[dict]:
        return [
            {"a": a, "b": b, "elbo": float(self.elbo_table[i, j]), "elbo_se": float(self.se_table[i, j])}
            for i, a in enumerate(self.a_grid)
            for j, b in enumerate(self.b_grid)
        ]


def run_grid(
    measurements: MeasurementSet,
    grid: GridConfig,
    loss: str,
    forward_op,
    flow_factory: Callable[[], fl.ConditionalFlow],
    config: EMConfig | None = None,
    prior=None,
) -> GridResult:
    """Train a fresh flow at every grid point with theta held fixed; keep the best ELBO."""
    config = config or EMConfig.desk()
    if loss not in LOSS_KINDS:
        raise ValueError(f"loss must be one of {LOSS_KINDS}")
    ys = measurements.ys
    prior = prior if prior is not None else PriorBox(measurements.prior_lo, measurements.prior_hi)
    table = np.full((len(grid.a_grid), len(grid.b_grid)), -np.inf)
    se = np.zeros_like(table)
    best = None
    for i, a in enumerate(grid.a_grid):
        for j, b in enumerate(grid.b_grid):
            theta = NoiseParams(a, b)
            flow = flow_factory()
            adam = dc.AdamState.init(flow.params, lr=config.lr)
            rng = _rng(config.seed, 3, i, j)
            try:
                flow, adam, _ = train_steps(flow, adam, grid.steps, loss, theta, prior, forward_op,
                                            ys, config.batch_size, rng, config.clip_norm)
            except (dc.NonFiniteError, FloatingPointError) as exc:
                log.warning("grid point a=%g b=%g aborted: %s", a, b, exc)
                continue
            est = elbo_set(flow, ys, theta, prior, forward_op, config.m_elbo, _rng(config.seed, 4, i, j))
            table[i, j], se[i, j] = est.value, est.std_error
            if best is None or est.value > best[0]:
                best = (est.value, theta, flow)
    if best is None:
        raise EMAborted("every grid point aborted")
    return GridResult(best[1], best[2], table, se, grid.a_grid, grid.b_grid)


# ----------------------------------------------------------------------------
# Exact E-step variant
# ----------------------------------------------------------------------------


def gauss_hermite_nodes(mean, cov, order: int = 20):
    """Tensor-product Gauss-Hermite nodes and weights for N(mean, cov)."""
    mean = np.atleast_1d(mean)
    cov = np.atleast_2d(cov)
    t, w = np.polynomial.hermite.hermgauss(order)
    d = mean.size
    grids = np.meshgrid(*([t] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1) * np.sqrt(2.0)
    wts = np.prod(np.stack(np.meshgrid(*([w] * d), indexing="ij"), axis=0).reshape(d, -1), axis=0) / np.pi ** (d / 2)
    chol = np.linalg.cholesky(cov) if np.any(cov) else np.zeros_like(cov)
    return mean + pts @ chol.T, wts


def run_exact_em(ys, forward_op, prior, posterior_fn, theta0: NoiseParams, R: int, L: int = 20, order: int = 20):
    """Outer EM with the flow replaced by an exact posterior ``posterior_fn(y, theta) -> (mean, cov)``.

    Expectations use Gauss-Hermite quadrature, so for Gaussian posteriors
    with polynomial integrands both the M-step and the reported ELBO are
    exact. Returns the theta trace and the ELBO trace (one entry per
    iteration, measured after the M-step).
    """
    ys = np.atleast_2d(ys)
    theta = theta0
    thetas, elbos = [theta], []
    for _ in range(R):
        posts = [posterior_fn(y, theta) for y in ys]
        xs, yrep, wts = [], [], []
        for y, (mu, cov) in zip(ys, posts):
            x, w = gauss_hermite_nodes(mu, cov, order)
            xs.append(x)
            yrep.append(np.broadcast_to(y, (len(x), len(y))))
            wts.append(w / len(ys))
        xs, yrep, wts = np.concatenate(xs), np.concatenate(yrep), np.concatenate(wts)
        theta, _ = inner_em(PairBatch(xs, yrep, forward_op(xs), wts), theta, L)
        thetas.append(theta)
        elbos.append(exact_elbo(ys, forward_op, prior, posts, theta, order))
    return thetas, elbos


def exact_elbo(ys, forward_op, prior, posts, theta: NoiseParams, order: int = 20) -> float:
    """Mean over observations of E_q[log p(x, y)] + H(q) for Gaussian q."""
    from .noise_model import loglik

    vals = []
    for y, (mu, cov) in zip(np.atleast_2d(ys), posts):
        x, w = gauss_hermite_nodes(mu, cov, order)
        integrand = loglik(np.broadcast_to(y, (len(x), len(y))), forward_op(x), theta) + prior.logpdf(x)
        cov = np.atleast_2d(cov)
        entropy = 0.5 * np.linalg.slogdet(2 * np.pi * np.e * cov)[1]
        vals.append(float(np.sum(w * integrand)) + entropy)
    return float(np.mean(vals))
