"""Flow fixtures shared by several test modules."""

import math

import numpy as np

from mixnoise import diffcore as dc
from mixnoise import flow as fl


def small_flow(d, n, seed, scale=0.2):
    f = fl.build_flow(d, n, n_blocks=3, hidden=(6,), seed=seed)
    return fl.perturb(f, np.random.default_rng(seed), scale)


def fd_check(loss, params, rng, n_coords=40, h=1e-5):
    """Max relative error of the analytic gradient against central differences."""
    g = dc.grad(loss, params).values
    v0 = params.values
    worst = 0.0
    for i in rng.choice(len(v0), size=min(n_coords, len(v0)), replace=False):
        e = np.zeros_like(v0)
        e[i] = h
        fd = (float(loss(params.with_values(v0 + e))) - float(loss(params.with_values(v0 - e)))) / (2 * h)
        if abs(fd) > 1e-6 or abs(g[i]) > 1e-6:
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i])))
    return worst


def analytic_flow_1d(ys, A, c, a, m0=0.0, s0=1.0):
    """Single affine block with linear nets, set so T(y, z) = mu(y) + sigma z exactly."""
    f = fl.build_flow(1, 1, n_blocks=1, hidden=(), transform="affine", seed=0)
    var = 1.0 / (1.0 / s0**2 + A[0, 0] ** 2 / a**2)
    slope = var * A[0, 0] / a**2
    icept = var * (m0 / s0**2 - A[0, 0] * c[0] / a**2)
    log_sd = 0.5 * math.log(var)
    raw = 2.0 * math.atanh(log_sd / 2.0)  # undo the tanh soft clamp
    p = f.params.values.copy()
    for name, val in (("c0.s.W0", 0.0), ("c0.s.b0", raw), ("c0.t.W0", slope), ("c0.t.b0", icept)):
        seg = next(s for s in f.params.layout if s.name == name)
        p[seg.offset] = val
    return f.with_params(f.params.with_values(p))
