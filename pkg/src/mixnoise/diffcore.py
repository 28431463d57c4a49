"""Minimal reverse-mode autodiff on numpy arrays, dense networks and Adam.

Every op accepts either plain ``numpy`` arrays or :class:`Tensor` objects.
When no input is a ``Tensor`` the op returns a plain array, so inference
paths (sampling, validation, the M-step) run at numpy speed and only
gradient computations pay for the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient contains NaN or inf."""


# ----------------------------------------------------------------------------
# Tape
# ----------------------------------------------------------------------------


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn")
    __array_ufunc__ = None  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, value, parents: tuple = (), backward_fn=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor({self.value!r})"

    def __len__(self):
        return len(self.value)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable node."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if isinstance(p, Tensor) and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for p, g in zip(node.parents, grads):
                if g is None or not isinstance(p, Tensor):
                    continue
                if p.grad is None:
                    p.grad = g
                else:
                    p.grad = p.grad + g


def value(x):
    """Underlying array of a Tensor (or the input itself)."""
    return x.value if isinstance(x, Tensor) else x


def _traced(*xs) -> bool:
    for x in xs:
        if isinstance(x, Tensor):
            return True
    return False


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _shape(x):
    return np.shape(value(x))


# ----------------------------------------------------------------------------
# Ops
# ----------------------------------------------------------------------------


def add(a, b):
    if not _traced(a, b):
        return np.add(a, b)
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return Tensor(av + bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    if not _traced(a, b):
        return np.subtract(a, b)
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return Tensor(av - bv, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    if not _traced(a, b):
        return np.multiply(a, b)
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return Tensor(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)),
    )


def div(a, b):
    if not _traced(a, b):
        return np.divide(a, b)
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return Tensor(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb)),
    )


def power(a, p: float):
    if not _traced(a):
        return np.power(a, p)
    av = a.value
    return Tensor(av**p, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a):
    if not _traced(a):
        return np.square(a)
    av = a.value
    return Tensor(av * av, (a,), lambda g: (2.0 * g * av,))


def matmul(a, b):
    if not _traced(a, b):
        return np.matmul(a, b)
    av, bv = value(a), value(b)

    def backward(g):
        ga = gb = None
        if isinstance(a, Tensor):
            ga = g @ bv.T if bv.ndim == 2 else np.outer(g, bv)
        if isinstance(b, Tensor):
            gb = av.T @ g if av.ndim == 2 else np.outer(av, g)
        return ga, gb

    return Tensor(av @ bv, (a, b), backward)


def linear(x, W, b):
    """x @ W + b as one tape node (x is (B, in) or (in,))."""
    if not _traced(x, W, b):
        return np.matmul(x, W) + b
    xv, Wv, bv = value(x), value(W), value(b)

    def backward(g):
        gx = g @ Wv.T if isinstance(x, Tensor) else None
        gW = (xv.T @ g if xv.ndim == 2 else np.outer(xv, g)) if isinstance(W, Tensor) else None
        gb = (g.sum(axis=0) if g.ndim == 2 else g) if isinstance(b, Tensor) else None
        return gx, gW, gb

    return Tensor(xv @ Wv + bv, (x, W, b), backward)


def exp(a):
    if not _traced(a):
        return np.exp(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a):
    if not _traced(a):
        return np.log(a)
    av = a.value
    return Tensor(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    if not _traced(a):
        return np.sqrt(a)
    out = np.sqrt(a.value)
    return Tensor(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a):
    if not _traced(a):
        return np.tanh(a)
    out = np.tanh(a.value)
    return Tensor(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    if not _traced(a):
        return np.maximum(a, 0.0)
    av = a.value
    return Tensor(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def sin(a):
    if not _traced(a):
        return np.sin(a)
    av = a.value
    return Tensor(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a):
    """log(1 + exp(a)), computed stably."""
    if not _traced(a):
        return np.logaddexp(0.0, a)
    av = a.value
    return Tensor(np.logaddexp(0.0, av), (a,), lambda g: (g * _sigmoid(av),))


def log_sigmoid(a):
    """log(1 / (1 + exp(-a))), computed stably."""
    if not _traced(a):
        return -np.logaddexp(0.0, -np.asarray(a))
    av = a.value
    return Tensor(-np.logaddexp(0.0, -av), (a,), lambda g: (g * _sigmoid(-av),))


def sum_(a, axis=None, keepdims=False):
    if not _traced(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    av = a.value
    shape = av.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(np.sum(av, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None):
    n = np.size(value(a)) if axis is None else np.shape(value(a))[axis]
    return div(sum_(a, axis=axis), float(n))


def cumsum(a, axis=-1):
    if not _traced(a):
        return np.cumsum(a, axis=axis)
    av = a.value

    def backward(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),)

    return Tensor(np.cumsum(av, axis=axis), (a,), backward)


def reshape(a, shape):
    if not _traced(a):
        return np.reshape(a, shape)
    old = a.value.shape
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, key):
    """Basic / column-index slicing. Index arrays must not repeat entries."""
    if not _traced(a):
        return a[key]
    av = a.value

    def backward(g):
        full = np.zeros_like(av)
        full[key] = g
        return (full,)

    return Tensor(av[key], (a,), backward)


def take_cols(a, idx):
    """Columns ``idx`` of a 2-D array (idx without repeats)."""
    return getitem(a, (slice(None), np.asarray(idx, dtype=np.intp)))


def concat(xs: Sequence, axis=-1):
    if not _traced(*xs):
        return np.concatenate(xs, axis=axis)
    vals = [value(x) for x in xs]
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(np.concatenate(vals, axis=axis), tuple(xs), backward)


def where(cond, a, b):
    if not _traced(a, b):
        return np.where(cond, a, b)
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return Tensor(
        np.where(cond, av, bv),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)),
    )


def gather_last(a, idx):
    """``a[..., idx[...]]`` along the last axis; ``idx`` has a trailing axis of size 1."""
    if not _traced(a):
        return np.take_along_axis(a, idx, axis=-1)
    av = a.value

    def backward(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, idx, g, axis=-1)
        return (full,)

    return Tensor(np.take_along_axis(av, idx, axis=-1), (a,), backward)


def softmax(a, axis=-1):
    av = value(a)
    shifted = av - np.max(av, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if not _traced(a):
        return out

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, (a,), backward)


# ----------------------------------------------------------------------------
# Parameters
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple[int, ...]

    size: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "size", int(np.prod(self.shape, dtype=np.int64)))


class ParamVector:
    """Flat float64 parameter vector with named segments.

    ``segment(name)`` returns a reshaped view. Inside :func:`grad` the
    segments are replaced by tape leaves so losses can be written once.
    """

    __slots__ = ("values", "layout", "_index", "_leaves")

    def __init__(self, values, layout: Sequence[Segment]):
        values = np.asarray(values, dtype=np.float64)
        layout = tuple(layout)
        total = sum(s.size for s in layout)
        if values.ndim != 1 or values.size != total:
            raise ValueError(f"ParamVector length {values.size} != sum of segment sizes {total}")
        self.values = values
        self.layout = layout
        _check_finite_segments(self, values, "value")
        self._index = {s.name: s for s in layout}
        self._leaves: dict[str, Tensor] | None = None

    @classmethod
    def from_segments(cls, segments: Iterable[tuple[str, np.ndarray]]) -> "ParamVector":
        layout, chunks, off = [], [], 0
        for name, arr in segments:
            arr = np.asarray(arr, dtype=np.float64)
            layout.append(Segment(name, off, tuple(arr.shape)))
            chunks.append(arr.ravel())
            off += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    @classmethod
    def zeros(cls, shapes: Iterable[tuple[str, tuple[int, ...]]]) -> "ParamVector":
        return cls.from_segments((n, np.zeros(s)) for n, s in shapes)

    def __len__(self):
        return self.values.size

    def names(self) -> list[str]:
        return [s.name for s in self.layout]

    def segment(self, name: str):
        if self._leaves is not None:
            return self._leaves[name]
        s = self._index[name]
        return self.values[s.offset : s.offset + s.size].reshape(s.shape)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def _traced(self) -> "ParamVector":
        pv = ParamVector(self.values, self.layout)
        pv._leaves = {s.name: Tensor(self.segment(s.name).copy()) for s in self.layout}
        return pv

    def _collect(self) -> np.ndarray:
        out = np.zeros_like(self.values)
        for s in self.layout:
            g = self._leaves[s.name].grad
            if g is not None:
                out[s.offset : s.offset + s.size] = np.reshape(g, -1)
        return out


def _check_finite_segments(pv: ParamVector, arr: np.ndarray, what: str) -> None:
    if np.isfinite(arr).all():
        return
    for s in pv.layout:
        chunk = arr[s.offset : s.offset + s.size]
        if not np.all(np.isfinite(chunk)):
            raise NonFiniteError(f"non-finite {what} in parameter segment {s.name!r}")


def value_and_grad(loss: Callable[[ParamVector], object], at: ParamVector) -> tuple[float, ParamVector]:
    """Evaluate ``loss(at)`` and its exact gradient with respect to every segment."""
    _check_finite_segments(at, at.values, "value")
    traced = at._traced()
    out = loss(traced)
    if not isinstance(out, Tensor):
        # loss does not depend on the parameters
        val = float(np.asarray(out))
        if not np.isfinite(val):
            raise NonFiniteError("non-finite loss value")
        return val, at.with_values(np.zeros_like(at.values))
    if out.value.size != 1:
        raise ValueError("loss must be scalar")
    val = float(out.value)
    if not np.isfinite(val):
        # backpropagate anyway to say which segments the blow-up flows into
        with np.errstate(all="ignore"):
            out.backward(np.ones_like(out.value))
            g = traced._collect()
        bad = [s.name for s in at.layout if not np.all(np.isfinite(g[s.offset : s.offset + s.size]))]
        raise NonFiniteError("non-finite loss value" + (f"; non-finite gradient in segments {bad}" if bad else ""))
    out.backward()
    g = traced._collect()
    _check_finite_segments(at, g, "gradient")
    return val, at.with_values(g)


def grad(loss: Callable[[ParamVector], object], at: ParamVector) -> ParamVector:
    return value_and_grad(loss, at)[1]


def clip_by_norm(g: ParamVector, max_norm: float) -> ParamVector:
    norm = float(np.linalg.norm(g.values))
    if norm <= max_norm or norm == 0.0:
        return g
    return g.with_values(g.values * (max_norm / norm))


# ----------------------------------------------------------------------------
# Dense networks
# ----------------------------------------------------------------------------

_ACTIVATIONS = {"tanh": tanh, "relu": relu}


@dataclass(frozen=True)
class DenseNet:
    """Fully connected net; hidden layers use ``activation``, output is linear.

    Weights live in a ParamVector under ``{prefix}W{k}`` (shape in x out)
    and ``{prefix}b{k}``.
    """

    widths: tuple[int, ...]
    activation: str = "tanh"
    prefix: str = ""

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"invalid widths {self.widths}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for k in range(self.n_layers):
            out.append((f"{self.prefix}W{k}", (self.widths[k], self.widths[k + 1])))
            out.append((f"{self.prefix}b{k}", (self.widths[k + 1],)))
        return out

    def init(self, rng: np.random.Generator, gain: float = 1.0, zero_last: bool = False):
        """(name, array) pairs with N(0, gain^2 / fan_in) weights and zero biases."""
        out = []
        for k in range(self.n_layers):
            fan_in, fan_out = self.widths[k], self.widths[k + 1]
            if zero_last and k == self.n_layers - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))
            out.append((f"{self.prefix}W{k}", w))
            out.append((f"{self.prefix}b{k}", np.zeros(fan_out)))
        return out

    def __call__(self, params: ParamVector, x):
        return net_eval(self, params, x)


def net_eval(net: DenseNet, params: ParamVector, x):
    if _shape(x)[-1] != net.widths[0]:
        raise ValueError(f"input width {_shape(x)[-1]} != {net.widths[0]}")
    act = _ACTIVATIONS[net.activation]
    h = x
    last = net.n_layers - 1
    for k in range(net.n_layers):
        h = linear(h, params.segment(f"{net.prefix}W{k}"), params.segment(f"{net.prefix}b{k}"))
        if k < last:
            h = act(h)
    return h


# ----------------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: ParamVector, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), 0, lr, **kw)


def adam_step(state: AdamState, params: ParamVector, gradient: ParamVector) -> tuple[AdamState, ParamVector]:
    """One bias-corrected Adam update. Returns new state and new parameters."""
    g = gradient.values
    if g.shape != params.values.shape or g.shape != state.m.shape:
        raise ValueError("shape mismatch between Adam state, params and gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_state, params.with_values(new)
