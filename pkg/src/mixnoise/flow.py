"""Conditional normalizing flow x = T(y, z), invertible in z for every y.

Blocks are coupling layers: the active coordinates are transformed
elementwise with parameters predicted from (passive coordinates, y).
Affine couplings are the default; for d = 1 there is no passive half, so
affine blocks alternate with monotone rational-quadratic spline blocks to
keep the flow able to represent non-Gaussian (e.g. bimodal) posteriors.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffcore as dc
from .diffcore import DenseNet, ParamVector

FLOW_FORMAT = "mixnoise-flow/1"
LOG_2PI = float(np.log(2 * np.pi))


def std_normal_logpdf(z):
    """Row-wise log N(z | 0, I)."""
    z = np.asarray(dc.value(z))
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def _net_input(z, y, passive):
    if not passive:
        return y
    return dc.concat([dc.take_cols(z, passive), y], axis=1)


def _assemble(new_active, z, active, passive, inv_perm):
    if not passive:
        return new_active
    return dc.take_cols(dc.concat([new_active, dc.take_cols(z, passive)], axis=1), inv_perm)


@dataclass(frozen=True)
class AffineCoupling:
    """x_act = z_act * exp(s) + t with s soft-clamped to (-clamp, clamp)."""

    active: tuple[int, ...]
    passive: tuple[int, ...]
    scale_net: DenseNet
    shift_net: DenseNet
    clamp: float = 2.0
    kind = "affine"

    @property
    def inv_perm(self):
        return tuple(int(i) for i in np.argsort(self.active + self.passive))

    def nets(self):
        return (self.scale_net, self.shift_net)

    def _st(self, params, h):
        s_raw = self.scale_net(params, h)
        s = dc.mul(self.clamp, dc.tanh(dc.div(s_raw, self.clamp)))
        return s, self.shift_net(params, h)

    def forward(self, params, y, z):
        s, t = self._st(params, _net_input(z, y, self.passive))
        za = dc.take_cols(z, self.active)
        xa = dc.add(dc.mul(za, dc.exp(s)), t)
        return _assemble(xa, z, self.active, self.passive, self.inv_perm), dc.sum_(s, axis=1)

    def inverse(self, params, y, x):
        s, t = self._st(params, _net_input(x, y, self.passive))
        xa = dc.take_cols(x, self.active)
        za = dc.mul(dc.sub(xa, t), dc.exp(dc.mul(-1.0, s)))
        return _assemble(za, x, self.active, self.passive, self.inv_perm), dc.mul(-1.0, dc.sum_(s, axis=1))


_MIN_BIN = 1e-3
_MIN_DERIV = 1e-3
_DERIV_SHIFT = float(np.log(np.expm1(1.0 - _MIN_DERIV)))  # softplus(0 + shift) + min = 1


def _knots(u, bound, n_rows, n_act, K):
    frac = dc.add(_MIN_BIN, dc.mul(1.0 - _MIN_BIN * K, dc.softmax(u, axis=-1)))
    inner = dc.sub(dc.mul(2 * bound, dc.cumsum(frac, axis=-1)[..., : K - 1]), bound)
    lo = np.full((n_rows, n_act, 1), -bound)
    hi = np.full((n_rows, n_act, 1), bound)
    knots = dc.concat([lo, inner, hi], axis=-1)
    return knots, dc.sub(knots[..., 1:], knots[..., :-1])


def _spline_params(raw, n_act, K, bound):
    B = np.shape(dc.value(raw))[0]
    raw = dc.reshape(raw, (B, n_act, 3 * K - 1))
    cw, w = _knots(raw[..., :K], bound, B, n_act, K)
    ch, h = _knots(raw[..., K : 2 * K], bound, B, n_act, K)
    d_int = dc.add(_MIN_DERIV, dc.softplus(dc.add(raw[..., 2 * K :], _DERIV_SHIFT)))
    ones = np.ones((B, n_act, 1))
    derivs = dc.concat([ones, d_int, ones], axis=-1)
    return cw, w, ch, h, derivs


def _gather(a, idx):
    g = dc.gather_last(a, idx)
    return dc.reshape(g, np.shape(dc.value(g))[:-1])


def rqs_forward(x, raw, K, bound):
    """Monotone rational-quadratic spline on [-bound, bound], identity outside."""
    xv = np.asarray(dc.value(x))
    B, A = xv.shape
    cw, w, ch, h, derivs = _spline_params(raw, A, K, bound)
    inside = (xv > -bound) & (xv < bound)
    x_in = dc.where(inside, x, 0.0)
    idx = np.sum(np.asarray(dc.value(x_in))[..., None] >= np.asarray(dc.value(cw))[..., 1:K], axis=-1)[..., None]
    in_cw, in_w = _gather(cw, idx), _gather(w, idx)
    in_ch, in_h = _gather(ch, idx), _gather(h, idx)
    d0, d1 = _gather(derivs, idx), _gather(derivs, idx + 1)
    delta = dc.div(in_h, in_w)
    theta = dc.div(dc.sub(x_in, in_cw), in_w)
    tt = dc.mul(theta, dc.sub(1.0, theta))
    num = dc.mul(in_h, dc.add(dc.mul(delta, dc.square(theta)), dc.mul(d0, tt)))
    den = dc.add(delta, dc.mul(dc.sub(dc.add(d0, d1), dc.mul(2.0, delta)), tt))
    out = dc.add(in_ch, dc.div(num, den))
    dnum = dc.mul(
        dc.square(delta),
        dc.add(dc.add(dc.mul(d1, dc.square(theta)), dc.mul(dc.mul(2.0, delta), tt)), dc.mul(d0, dc.square(dc.sub(1.0, theta)))),
    )
    lad = dc.sub(dc.log(dnum), dc.mul(2.0, dc.log(den)))
    return dc.where(inside, out, x), dc.sum_(dc.where(inside, lad, 0.0), axis=1)


def rqs_inverse(y, raw, K, bound):
    yv = np.asarray(dc.value(y))
    B, A = yv.shape
    cw, w, ch, h, derivs = _spline_params(raw, A, K, bound)
    inside = (yv > -bound) & (yv < bound)
    y_in = dc.where(inside, y, 0.0)
    idx = np.sum(np.asarray(dc.value(y_in))[..., None] >= np.asarray(dc.value(ch))[..., 1:K], axis=-1)[..., None]
    in_cw, in_w = _gather(cw, idx), _gather(w, idx)
    in_ch, in_h = _gather(ch, idx), _gather(h, idx)
    d0, d1 = _gather(derivs, idx), _gather(derivs, idx + 1)
    delta = dc.div(in_h, in_w)
    dy = dc.sub(y_in, in_ch)
    mix = dc.sub(dc.add(d0, d1), dc.mul(2.0, delta))
    qa = dc.add(dc.mul(dy, mix), dc.mul(in_h, dc.sub(delta, d0)))
    qb = dc.sub(dc.mul(in_h, d0), dc.mul(dy, mix))
    qc = dc.mul(-1.0, dc.mul(delta, dy))
    disc = dc.sub(dc.square(qb), dc.mul(4.0, dc.mul(qa, qc)))
    disc = dc.where(np.asarray(dc.value(disc)) > 0, disc, 0.0)
    root = dc.div(dc.mul(2.0, qc), dc.sub(dc.mul(-1.0, qb), dc.sqrt(dc.add(disc, 0.0))))
    out = dc.add(dc.mul(root, in_w), in_cw)
    tt = dc.mul(root, dc.sub(1.0, root))
    den = dc.add(delta, dc.mul(mix, tt))
    dnum = dc.mul(
        dc.square(delta),
        dc.add(dc.add(dc.mul(d1, dc.square(root)), dc.mul(dc.mul(2.0, delta), tt)), dc.mul(d0, dc.square(dc.sub(1.0, root)))),
    )
    lad = dc.sub(dc.log(dnum), dc.mul(2.0, dc.log(den)))
    return dc.where(inside, out, y), dc.mul(-1.0, dc.sum_(dc.where(inside, lad, 0.0), axis=1))


@dataclass(frozen=True)
class SplineCoupling:
    active: tuple[int, ...]
    passive: tuple[int, ...]
    param_net: DenseNet
    bins: int = 8
    bound: float = 5.0
    kind = "spline"

    @property
    def inv_perm(self):
        return tuple(int(i) for i in np.argsort(self.active + self.passive))

    def nets(self):
        return (self.param_net,)

    def forward(self, params, y, z):
        raw = self.param_net(params, _net_input(z, y, self.passive))
        xa, ld = rqs_forward(dc.take_cols(z, self.active), raw, self.bins, self.bound)
        return _assemble(xa, z, self.active, self.passive, self.inv_perm), ld

    def inverse(self, params, y, x):
        raw = self.param_net(params, _net_input(x, y, self.passive))
        za, ld = rqs_inverse(dc.take_cols(x, self.active), raw, self.bins, self.bound)
        return _assemble(za, x, self.active, self.passive, self.inv_perm), ld


@dataclass(frozen=True)
class ConditionalFlow:
    d: int
    cond_dim: int
    blocks: tuple
    params: ParamVector

    def with_params(self, params: ParamVector) -> "ConditionalFlow":
        return replace(self, params=params)

    def to_dict(self) -> dict:
        blocks = []
        for blk in self.blocks:
            desc = {"kind": blk.kind, "active": list(blk.active), "passive": list(blk.passive)}
            if blk.kind == "affine":
                desc.update(widths=list(blk.scale_net.widths), activation=blk.scale_net.activation, clamp=blk.clamp)
            else:
                desc.update(widths=list(blk.param_net.widths), activation=blk.param_net.activation,
                            bins=blk.bins, bound=blk.bound)
            blocks.append(desc)
        return {
            "format": FLOW_FORMAT,
            "d": self.d,
            "cond_dim": self.cond_dim,
            "blocks": blocks,
            "layout": [[s.name, list(s.shape)] for s in self.params.layout],
            "params": self.params.values.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ConditionalFlow":
        if doc.get("format") != FLOW_FORMAT:
            raise ValueError(f"unknown flow format {doc.get('format')!r}")
        blocks = []
        for k, desc in enumerate(doc["blocks"]):
            act, pas = tuple(desc["active"]), tuple(desc["passive"])
            widths, activation = tuple(desc["widths"]), desc.get("activation", "tanh")
            if desc["kind"] == "affine":
                blocks.append(AffineCoupling(
                    act, pas, DenseNet(widths, activation, f"c{k}.s."), DenseNet(widths, activation, f"c{k}.t."),
                    float(desc["clamp"])))
            elif desc["kind"] == "spline":
                blocks.append(SplineCoupling(
                    act, pas, DenseNet(widths, activation, f"c{k}.p."), int(desc["bins"]), float(desc["bound"])))
            else:
                raise ValueError(f"unknown block kind {desc['kind']!r}")
        layout, off = [], 0
        for name, shape in doc["layout"]:
            seg = dc.Segment(name, off, tuple(shape))
            layout.append(seg)
            off += seg.size
        params = ParamVector(np.asarray(doc["params"], dtype=np.float64), layout)
        flow = cls(int(doc["d"]), int(doc["cond_dim"]), tuple(blocks), params)
        expected = [name for blk in flow.blocks for net in blk.nets() for name, _ in net.shapes()]
        if expected != params.names():
            raise ValueError("flow parameter layout does not match its block descriptors")
        return flow


def _masks(d: int, k: int):
    if d == 1:
        return (0,), ()
    h = (d + 1) // 2
    first, second = tuple(range(h)), tuple(range(h, d))
    return (first, second) if k % 2 == 0 else (second, first)


def build_flow(
    d: int,
    cond_dim: int,
    n_blocks: int = 6,
    hidden=(64, 64),
    clamp: float = 2.0,
    transform: str = "auto",
    bins: int = 8,
    bound: float = 5.0,
    seed: int = 0,
    activation: str = "tanh",
) -> ConditionalFlow:
    """Coupling flow initialised to the identity map (zero output layers).

    ``transform``: "affine", "spline", or "auto" (affine for d >= 2; for
    d = 1 affine and spline blocks alternate).
    """
    if d < 1 or cond_dim < 1 or n_blocks < 1:
        raise ValueError("d, cond_dim and n_blocks must be positive")
    rng = np.random.default_rng(seed)
    blocks, segs = [], []
    hidden = tuple(int(h) for h in hidden)
    for k in range(n_blocks):
        active, passive = _masks(d, k)
        kind = transform
        if transform == "auto":
            kind = "affine" if d >= 2 or k % 2 == 0 else "spline"
        in_w = len(passive) + cond_dim
        if kind == "affine":
            widths = (in_w, *hidden, len(active))
            s_net = DenseNet(widths, activation, f"c{k}.s.")
            t_net = DenseNet(widths, activation, f"c{k}.t.")
            blocks.append(AffineCoupling(active, passive, s_net, t_net, clamp))
            segs += s_net.init(rng, zero_last=True) + t_net.init(rng, zero_last=True)
        elif kind == "spline":
            p_net = DenseNet((in_w, *hidden, len(active) * (3 * bins - 1)), activation, f"c{k}.p.")
            blocks.append(SplineCoupling(active, passive, p_net, bins, bound))
            segs += p_net.init(rng, zero_last=True)
        else:
            raise ValueError(f"unknown transform {transform!r}")
    return ConditionalFlow(d, cond_dim, tuple(blocks), ParamVector.from_segments(segs))


def perturb(flow: ConditionalFlow, rng: np.random.Generator, scale: float = 0.1) -> ConditionalFlow:
    """Flow with Gaussian noise of std ``scale`` added to every parameter."""
    return flow.with_params(flow.params.with_values(flow.params.values + scale * rng.standard_normal(len(flow.params))))


def _as_batch(flow: ConditionalFlow, y, v, width):
    vv = dc.value(v)
    single = np.ndim(vv) == 1
    if single:
        v = dc.reshape(v, (1, width)) if isinstance(v, dc.Tensor) else np.asarray(vv, dtype=np.float64)[None, :]
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = np.broadcast_to(y, (np.shape(dc.value(v))[0], flow.cond_dim))
    if y.shape[-1] != flow.cond_dim or np.shape(dc.value(v))[-1] != width:
        raise ValueError(f"expected condition width {flow.cond_dim} and sample width {width}")
    if y.shape[0] != np.shape(dc.value(v))[0]:
        raise ValueError("condition and sample batch sizes differ")
    return y, v, single


def _finish(out, logdet, single, what):
    if not (np.all(np.isfinite(dc.value(out))) and np.all(np.isfinite(dc.value(logdet)))):
        raise dc.NonFiniteError(f"non-finite output in flow {what}")
    if single:
        return out[0], logdet[0]
    return out, logdet


def push(flow: ConditionalFlow, y, z):
    """x = T(y, z) and log|det dT/dz|."""
    y, z, single = _as_batch(flow, y, z, flow.d)
    x, logdet = z, 0.0
    for blk in flow.blocks:
        x, ld = blk.forward(flow.params, y, x)
        logdet = dc.add(logdet, ld)
    return _finish(x, logdet, single, "push")


def pull(flow: ConditionalFlow, y, x):
    """z = T(y, .)^{-1}(x) and log|det of the inverse Jacobian|."""
    y, x, single = _as_batch(flow, y, x, flow.d)
    z, logdet = x, 0.0
    for blk in reversed(flow.blocks):
        z, ld = blk.inverse(flow.params, y, z)
        logdet = dc.add(logdet, ld)
    return _finish(z, logdet, single, "pull")


def log_density(flow: ConditionalFlow, y, x):
    z, logdet_inv = pull(flow, y, x)
    zv = dc.value(z)
    logpz = dc.sub(dc.mul(-0.5, dc.sum_(dc.square(z), axis=-1)), 0.5 * np.shape(zv)[-1] * LOG_2PI)
    return dc.add(logpz, logdet_inv)


def sample_posterior(flow: ConditionalFlow, y, m: int, rng: np.random.Generator) -> np.ndarray:
    """m draws from T(y, .)_# N(0, I); ``y`` is one condition vector."""
    return sample_with_logq(flow, y, m, rng)[0]


def sample_with_logq(flow: ConditionalFlow, y, m: int, rng: np.random.Generator):
    """Draws and their flow log-density, computed from the forward pass."""
    if m < 1:
        raise ValueError("m must be >= 1")
    z = rng.standard_normal((m, flow.d))
    y = np.asarray(y, dtype=np.float64)
    ys = np.broadcast_to(y, (m, flow.cond_dim)) if y.ndim == 1 else y
    x, logdet = push(flow, ys, z)
    return x, std_normal_logpdf(z) - logdet
