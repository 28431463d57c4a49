"""Mixed additive/multiplicative Gaussian noise and its analytic inner EM.

Observation model: ``y = F(x) + a*xi1 + b*F(x)*xi2`` with independent
standard normal ``xi1, xi2``, i.e. ``y | x ~ N(F(x), diag(a^2 + b^2 F(x)^2))``.

The inner EM treats the additive part ``v = a*xi1`` as hidden. Its
posterior given ``(x, y)`` is Gaussian and the M-step for ``(a, b)`` is
closed form, so every inner iteration is an exact EM step on the
discretised objective :func:`q_objective`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

VAR_FLOOR = 1e-30


class VarianceClampWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class NoiseParams:
    a: float
    b: float

    def __post_init__(self):
        a, b = float(self.a), float(self.b)
        if not (math.isfinite(a) and math.isfinite(b)):
            raise ValueError(f"noise parameters must be finite, got a={a}, b={b}")
        if a < 0 or b < 0:
            raise ValueError(f"noise parameters must be non-negative, got a={a}, b={b}")
        if a + b <= 0:
            raise ValueError("a + b must be positive (zero-noise model)")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    def as_tuple(self) -> tuple[float, float]:
        return (self.a, self.b)


@dataclass(frozen=True)
class InnerPosterior:
    mean: np.ndarray
    var: np.ndarray


@dataclass(frozen=True)
class PairBatch:
    """Posterior samples ``xs`` aligned with repeated observations ``ys``.

    ``weights`` defaults to uniform ``1/K``; non-uniform weights let the same
    code run on quadrature nodes instead of Monte-Carlo samples.
    """

    xs: np.ndarray
    ys: np.ndarray
    f_xs: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        xs, ys, fx = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (self.xs, self.ys, self.f_xs))
        if not (len(xs) == len(ys) == len(fx)):
            raise ValueError(f"PairBatch lengths differ: {len(xs)}, {len(ys)}, {len(fx)}")
        if len(xs) == 0:
            raise ValueError("empty PairBatch")
        if ys.shape != fx.shape:
            raise ValueError(f"ys shape {ys.shape} != f_xs shape {fx.shape}")
        object.__setattr__(self, "xs", xs)
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "f_xs", fx)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (len(xs),) or np.any(w < 0):
                raise ValueError("weights must be non-negative, one per pair")
            object.__setattr__(self, "weights", w / w.sum())

    def __len__(self):
        return len(self.xs)

    @property
    def n(self) -> int:
        return self.ys.shape[1]

    def resolved_weights(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self), 1.0 / len(self))
        return self.weights


def sample_noisy(f_x, theta: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Draw ``y`` given ``F(x)``; works on a single vector or a batch of rows."""
    f_x = np.asarray(f_x, dtype=np.float64)
    xi1 = rng.standard_normal(f_x.shape)
    xi2 = rng.standard_normal(f_x.shape)
    return f_x + theta.a * xi1 + theta.b * f_x * xi2


def total_variance(f_x, theta: NoiseParams):
    return theta.a**2 + theta.b**2 * dc.square(f_x)


def loglik(y, f_x, theta: NoiseParams):
    """log N(y | F(x), diag(a^2 + b^2 F(x)^2)), summed over the last axis.

    ``f_x`` may be a :class:`~mixnoise.diffcore.Tensor` (reverse-KL training).
    """
    var = total_variance(f_x, theta)
    if np.any(dc.value(var) <= 0):
        raise ValueError("zero total noise variance (a = 0 and F_j(x) = 0)")
    resid = dc.sub(y, f_x)
    terms = dc.add(np.log(2 * np.pi), dc.add(dc.log(var), dc.div(dc.square(resid), var)))
    return dc.mul(-0.5, dc.sum_(terms, axis=-1))


def _denominator(f2: np.ndarray, theta: NoiseParams) -> np.ndarray:
    s = theta.a**2 + theta.b**2 * f2
    if np.any(s < VAR_FLOOR):
        warnings.warn(
            f"a^2 + b^2 F^2 below {VAR_FLOOR:g}; clamped", VarianceClampWarning, stacklevel=3
        )
        s = np.maximum(s, VAR_FLOOR)
    return s


def inner_e_step(x, y, theta: NoiseParams, f_x) -> InnerPosterior:
    """Posterior of the additive noise part ``v`` given ``(x, y)``.

    ``x`` enters only through ``f_x = F(x)``; it is kept in the signature
    to mirror the conditional it describes.
    """
    y = np.asarray(y, dtype=np.float64)
    f = np.asarray(f_x, dtype=np.float64)
    a2, b2 = theta.a**2, theta.b**2
    s = _denominator(f * f, theta)
    mean = a2 * (y - f) / s
    var = a2 * b2 * f * f / s
    return InnerPosterior(mean, var)


def compute_c(batch: PairBatch, theta: NoiseParams) -> tuple[float, float]:
    """Sufficient statistics of the inner M-step.

    ``c1 = -E[sum_j (y_j - F_j - v_j)^2 / F_j^2]`` and ``c2 = -E[sum_j v_j^2]``
    under the inner posterior, averaged over the batch. Both are <= 0.
    """
    a2, b2 = theta.a**2, theta.b**2
    r = batch.ys - batch.f_xs
    f2 = batch.f_xs * batch.f_xs
    s = _denominator(f2, theta)
    per_c1 = (r * r * b2 * b2 * f2 / (s * s) + a2 * b2 / s).sum(axis=1)
    per_c2 = ((a2 * r / s) ** 2 + a2 * b2 * f2 / s).sum(axis=1)
    w = batch.resolved_weights()
    c1 = -float(np.sum(w * per_c1))
    c2 = -float(np.sum(w * per_c2))
    if not (math.isfinite(c1) and math.isfinite(c2)):
        raise FloatingPointError(f"non-finite inner M-step statistics c1={c1}, c2={c2}")
    return c1, c2


def inner_m_update(c1: float, c2: float, n: int) -> NoiseParams:
    if n < 1:
        raise ValueError("n must be >= 1")
    if c1 > 0 or c2 > 0:
        raise ValueError(f"inner M-step statistics must be <= 0, got c1={c1}, c2={c2}")
    return NoiseParams(math.sqrt(-c2 / n), math.sqrt(-c1 / n))


def inner_em(batch: PairBatch, theta0: NoiseParams, L: int = 20) -> tuple[NoiseParams, list[NoiseParams]]:
    """Run ``L`` inner EM iterations; the trace starts with ``theta0``."""
    if L < 1:
        raise ValueError("L must be >= 1")
    theta = theta0
    trace = [theta]
    for _ in range(L):
        c1, c2 = compute_c(batch, theta)
        theta = inner_m_update(c1, c2, batch.n)
        trace.append(theta)
    return theta, trace


def q_objective(batch: PairBatch, theta: NoiseParams) -> float:
    """Weighted mean log-likelihood of the batch under ``theta``."""
    ll = loglik(batch.ys, batch.f_xs, theta)
    return float(np.sum(batch.resolved_weights() * ll))
