"""E-step training objectives, prior densities and the ELBO estimator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from . import diffcore as dc
from . import flow as fl
from .noise_model import NoiseParams, loglik, sample_noisy


@dataclass(frozen=True)
class PriorBox:
    """Uniform prior on a box with logistic (smoothed) walls.

    ``logpdf`` is finite everywhere so the reverse KL has a gradient even
    for samples the flow pushes outside the box.
    """

    lo: np.ndarray
    hi: np.ndarray
    smoothness: float = 50.0
    log_norm: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo >= hi):
            raise ValueError("PriorBox requires lo < hi componentwise")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")
        object.__setattr__(self, "lo", lo.copy())
        object.__setattr__(self, "hi", hi.copy())
        object.__setattr__(self, "log_norm", np.array([self._log_z(l, h) for l, h in zip(lo, hi)]))

    def _log_z(self, lo, hi):
        lam = self.smoothness
        # the walls decay like exp(-lam * distance); 40/lam leaves < 1e-17 mass outside
        pad = 40.0 / lam
        f = lambda x: np.exp(-np.logaddexp(0, -lam * (x - lo)) - np.logaddexp(0, -lam * (hi - x)))
        pts = [lo, hi]
        val, _ = integrate.quad(f, lo - pad, hi + pad, points=pts, limit=200, epsabs=1e-13, epsrel=1e-12)
        return float(np.log(val))

    @property
    def d(self) -> int:
        return self.lo.size

    def logpdf(self, x):
        """Row-wise log density; ``x`` may be a Tensor."""
        lam = self.smoothness
        inner = dc.add(
            dc.log_sigmoid(dc.mul(lam, dc.sub(x, self.lo))),
            dc.log_sigmoid(dc.mul(lam, dc.sub(self.hi, x))),
        )
        return dc.sub(dc.sum_(inner, axis=-1), float(self.log_norm.sum()))

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((m, self.d))


@dataclass(frozen=True)
class GaussianPrior:
    """N(mean, cov) prior, used by the conjugate linear-Gaussian problems."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        chol = np.linalg.cholesky(cov)
        object.__setattr__(self, "_whiten", np.linalg.inv(chol).T)
        object.__setattr__(self, "_const", -0.5 * mean.size * np.log(2 * np.pi) - np.log(np.diag(chol)).sum())

    @property
    def d(self) -> int:
        return self.mean.size

    def logpdf(self, x):
        u = dc.matmul(dc.sub(x, self.mean), self._whiten)
        return dc.add(dc.mul(-0.5, dc.sum_(dc.square(u), axis=-1)), self._const)

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.cov, size=m, method="cholesky")


def prior_logpdf(box: PriorBox, x):
    return box.logpdf(x)


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    m: int
    std_error: float

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be non-negative")


def joint_batch(prior, forward_op, theta: NoiseParams, m: int, rng: np.random.Generator):
    """Fresh (x, y) pairs from the joint: x ~ prior, y ~ p(y | x, theta)."""
    xs = prior.sample(m, rng)
    ys = sample_noisy(forward_op(xs), theta, rng)
    return xs, ys


def forward_kl_loss(flow: fl.ConditionalFlow, xs, ys):
    """Mean negative conditional log-density of joint samples under the flow."""
    return dc.mul(-1.0, dc.mean(fl.log_density(flow, ys, xs)))


def reverse_kl_loss(
    flow: fl.ConditionalFlow,
    ys,
    theta: NoiseParams,
    prior,
    forward_op,
    m: int = 1,
    rng: np.random.Generator | None = None,
    z: np.ndarray | None = None,
):
    """Negative ELBO summed over observations, up to their log-evidences.

    Uses ``m`` latent draws per observation; pass ``z`` of shape (N*m, d)
    to reuse draws (common random numbers). Rows are observation-major.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    y_rep = np.repeat(ys, m, axis=0)
    if z is None:
        z = rng.standard_normal((len(y_rep), flow.d))
    x, logdet = fl.push(flow, y_rep, z)
    integrand = dc.add(dc.add(loglik(y_rep, forward_op(x), theta), prior.logpdf(x)), logdet)
    return dc.mul(-1.0, dc.mean(integrand))


def elbo_samples(flow, y, theta: NoiseParams, prior, forward_op, m: int, rng: np.random.Generator) -> np.ndarray:
    """Per-sample ELBO integrand log p(x, y) - log q(x), x ~ q = flow(y)."""
    x, logq = fl.sample_with_logq(flow, np.asarray(y, dtype=np.float64), m, rng)
    y_rep = np.broadcast_to(np.asarray(y, dtype=np.float64), (m, flow.cond_dim))
    return loglik(y_rep, forward_op(x), theta) + prior.logpdf(x) - logq


def elbo(flow, y, theta: NoiseParams, prior, forward_op, m: int = 2000, rng: np.random.Generator | None = None) -> ElboEstimate:
    if m < 1:
        raise ValueError("m must be >= 1")
    vals = elbo_samples(flow, y, theta, prior, forward_op, m, rng)
    se = float(np.std(vals, ddof=1) / np.sqrt(m)) if m > 1 else 0.0
    return ElboEstimate(float(np.mean(vals)), m, se)


def elbo_set(flow, ys, theta: NoiseParams, prior, forward_op, m: int, rng: np.random.Generator) -> ElboEstimate:
    """Mean per-observation ELBO over a measurement set."""
    ests = [elbo(flow, y, theta, prior, forward_op, m, rng) for y in np.atleast_2d(ys)]
    value = float(np.mean([e.value for e in ests]))
    se = float(np.sqrt(np.sum([e.std_error**2 for e in ests])) / len(ests))
    return ElboEstimate(value, m * len(ests), se)
