"""Reverse-mode automatic differentiation on an explicit tape.

Design
------
A ``Tape`` owns a flat list of value slots.  Every operation appends its
result as a new slot together with a pullback closure mapping the output
cotangent to input cotangents.  ``Tape.backward`` seeds a size-1 output
with 1.0 and sweeps the node list once in reverse, accumulating gradients
by slot.  There is no graph object and no operator overloading: ops are
plain module functions over ``Var`` handles, which keeps the execution
order explicit and bitwise deterministic.

Everything is float64.  Raw numpy arrays or python scalars passed where a
``Var`` is expected are lifted into constant leaves automatically.

The dense-array compute (conv, pooling, RBF grams) is delegated to
``deepcoder.kernels`` so the numba and numpy backends share this engine.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import special as _sp

from . import kernels
from .errors import InvalidArgumentError, ShapeError

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _as_f64(value) -> Array:
    # ascontiguousarray would promote 0-d to 1-d; order="C" keeps shape
    return np.asarray(value, dtype=np.float64, order="C")


class Var:
    """Handle to one tape slot."""

    __slots__ = ("tape", "slot")

    def __init__(self, tape: "Tape", slot: int):
        self.tape = tape
        self.slot = slot

    @property
    def value(self) -> Array:
        return self.tape.values[self.slot]

    @property
    def shape(self) -> tuple:
        return self.tape.values[self.slot].shape

    @property
    def grad(self) -> Array | None:
        if self.tape.grads is None:
            return None
        return self.tape.grads[self.slot]

    def __repr__(self) -> str:
        return f"Var(slot={self.slot}, shape={self.shape})"


class Tape:
    """Record of forward values plus pullbacks, replayed once backward."""

    def __init__(self):
        self.values: list[Array] = []
        # each node: (output slot, input slots, pullback g -> per-input grads)
        self.nodes: list[tuple[int, tuple[int, ...], Callable]] = []
        self.grads: list[Array | None] | None = None

    def leaf(self, value) -> Var:
        """Register an input (parameter or constant) and return its handle."""
        self.values.append(_as_f64(value))
        return Var(self, len(self.values) - 1)

    def _record(self, value: Array, inputs: tuple[int, ...],
                pullback: Callable) -> Var:
        self.values.append(value)
        slot = len(self.values) - 1
        self.nodes.append((slot, inputs, pullback))
        return Var(self, slot)

    def backward(self, out: Var) -> None:
        """Accumulate d(out)/d(slot) for every slot feeding ``out``.

        ``out`` must hold exactly one element.  Results are read back
        through ``Var.grad``; slots that do not influence ``out`` stay None.
        """
        if out.tape is not self:
            raise InvalidArgumentError("output Var belongs to a different tape")
        if self.values[out.slot].size != 1:
            raise InvalidArgumentError(
                f"backward needs a size-1 output, got shape {out.shape}")
        grads: list[Array | None] = [None] * len(self.values)
        grads[out.slot] = np.ones_like(self.values[out.slot])
        for out_slot, in_slots, pullback in reversed(self.nodes):
            g = grads[out_slot]
            if g is None:
                continue
            for slot, gi in zip(in_slots, pullback(g)):
                if gi is None:
                    continue
                if grads[slot] is None:
                    grads[slot] = gi
                else:
                    grads[slot] = grads[slot] + gi
        self.grads = grads


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise InvalidArgumentError("mixing Vars from different tapes")
        return x
    return tape.leaf(x)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise InvalidArgumentError("at least one argument must be a Var")


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Reduce a broadcast cotangent back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape._record(
        av + bv, (a.slot, b.slot),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape._record(
        av - bv, (a.slot, b.slot),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape._record(
        av * bv, (a.slot, b.slot),
        lambda g: (_unbroadcast(g * bv, av.shape),
                   _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape._record(
        av / bv, (a.slot, b.slot),
        lambda g: (_unbroadcast(g / bv, av.shape),
                   _unbroadcast(-g * av / (bv * bv), bv.shape)))


def neg(a: Var) -> Var:
    return a.tape._record(-a.value, (a.slot,), lambda g: (-g,))


# -------------------------------------------------------------- elementwise

def exp(a: Var) -> Var:
    y = np.exp(a.value)
    return a.tape._record(y, (a.slot,), lambda g: (g * y,))


def log(a: Var) -> Var:
    av = a.value
    return a.tape._record(np.log(av), (a.slot,), lambda g: (g / av,))


def sqrt(a: Var) -> Var:
    y = np.sqrt(a.value)
    return a.tape._record(y, (a.slot,), lambda g: (g * (0.5 / y),))


def square(a: Var) -> Var:
    av = a.value
    return a.tape._record(av * av, (a.slot,), lambda g: (g * (2.0 * av),))


def relu(a: Var) -> Var:
    av = a.value
    mask = av > 0.0
    return a.tape._record(np.where(mask, av, 0.0), (a.slot,),
                          lambda g: (np.where(mask, g, 0.0),))


def clamp_min(a: Var, lo: float) -> Var:
    """max(a, lo) elementwise; gradient is zero where the clamp is active."""
    av = a.value
    mask = av > lo
    return a.tape._record(np.where(mask, av, lo), (a.slot,),
                          lambda g: (np.where(mask, g, 0.0),))


def softplus(a: Var) -> Var:
    """log(1 + exp(a)), computed without overflow."""
    av = a.value
    y = np.logaddexp(0.0, av)
    return a.tape._record(y, (a.slot,), lambda g: (g * _sp.expit(av),))


def gauss_cdf(a: Var) -> Var:
    """Standard normal CDF via erfc, accurate deep into both tails."""
    av = a.value
    y = 0.5 * _sp.erfc(-av * _INV_SQRT2)
    pdf = _INV_SQRT2PI * np.exp(-0.5 * av * av)
    return a.tape._record(y, (a.slot,), lambda g: (g * pdf,))


# --------------------------------------------------------------- reductions

def sum(a: Var, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    av = a.value
    y = np.sum(av, axis=axis, keepdims=keepdims)

    def pullback(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, av.shape).copy(),)

    return a.tape._record(np.asarray(y), (a.slot,), pullback)


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    av = a.value
    y = np.mean(av, axis=axis, keepdims=keepdims)
    scale = y.size / av.size if hasattr(y, "size") else 1.0 / av.size

    def pullback(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, av.shape) * scale,)

    return a.tape._record(np.asarray(y), (a.slot,), pullback)


def cumsum(a: Var) -> Var:
    """Cumulative sum of a 1-D vector."""
    av = a.value
    if av.ndim != 1:
        raise ShapeError(f"cumsum expects 1-D, got {av.shape}")
    return a.tape._record(np.cumsum(av), (a.slot,),
                          lambda g: (np.cumsum(g[::-1])[::-1],))


# ------------------------------------------------------------ restructuring

def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return a.tape._record(a.value.reshape(shape), (a.slot,),
                          lambda g: (g.reshape(old),))


def transpose(a: Var) -> Var:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {a.shape}")
    return a.tape._record(np.ascontiguousarray(a.value.T), (a.slot,),
                          lambda g: (np.ascontiguousarray(g.T),))


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    values = [p.value for p in parts]
    y = np.concatenate(values, axis=axis)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum(sizes)[:-1]

    def pullback(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, offsets, axis=axis))

    return tape._record(y, tuple(p.slot for p in parts), pullback)


def take(a: Var, flat_index: Array) -> Var:
    """Gather by flattened index; output has the index array's shape."""
    idx = np.asarray(flat_index, dtype=np.int64)
    av = a.value
    y = av.reshape(-1)[idx]

    def pullback(g):
        buf = np.zeros(av.size)
        np.add.at(buf, idx.reshape(-1), g.reshape(-1))
        return (buf.reshape(av.shape),)

    return a.tape._record(y, (a.slot,), pullback)


# ------------------------------------------------------------ linear algebra

def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul expects matrices, got {av.shape} @ {bv.shape}")
    return tape._record(
        av @ bv, (a.slot, b.slot),
        lambda g: (np.ascontiguousarray(g @ bv.T),
                   np.ascontiguousarray(av.T @ g)))


def dense(x, w, b) -> Var:
    """Affine map x @ w + b with the bias broadcast over rows."""
    tape = _tape_of(x, w, b)
    x, w, b = _lift(tape, x), _lift(tape, w), _lift(tape, b)
    xv, wv, bv = x.value, w.value, b.value
    if (xv.ndim != 2 or wv.ndim != 2 or bv.ndim != 1
            or xv.shape[1] != wv.shape[0] or bv.shape[0] != wv.shape[1]):
        raise ShapeError(
            f"dense expects [n,i] @ [i,o] + [o], got {xv.shape}, "
            f"{wv.shape}, {bv.shape}")
    return tape._record(
        xv @ wv + bv, (x.slot, w.slot, b.slot),
        lambda g: (np.ascontiguousarray(g @ wv.T),
                   np.ascontiguousarray(xv.T @ g),
                   g.sum(axis=0)))


# ------------------------------------------------------------- convolutional

def conv2d(x, w, b, stride: int = 1, padding: int = 0) -> Var:
    """2-D cross-correlation plus per-filter bias, NCHW layout."""
    tape = _tape_of(x, w, b)
    x, w, b = _lift(tape, x), _lift(tape, w), _lift(tape, b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 4 or wv.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {xv.shape}, {wv.shape}")
    if xv.shape[1] != wv.shape[1]:
        raise ShapeError(
            f"channel mismatch: x has {xv.shape[1]}, w expects {wv.shape[1]}")
    if wv.shape[0] != bv.shape[0]:
        raise ShapeError("bias length must match filter count")
    k = wv.shape[2]
    if xv.shape[2] + 2 * padding < k or xv.shape[3] + 2 * padding < k:
        raise ShapeError("kernel larger than padded input")
    y = kernels.conv2d_forward(xv, wv, stride, padding)
    y = y + bv[None, :, None, None]
    h, wd = xv.shape[2], xv.shape[3]

    def pullback(g):
        g = np.ascontiguousarray(g)
        return (kernels.conv2d_backward_input(g, wv, stride, padding, h, wd),
                kernels.conv2d_backward_kernels(g, xv, stride, padding, k),
                g.sum(axis=(0, 2, 3)))

    return tape._record(y, (x.slot, w.slot, b.slot), pullback)


def max_pool2d(x: Var, window: int) -> Var:
    """Non-overlapping max pooling; ties break to the first position."""
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {xv.shape}")
    if xv.shape[2] % window or xv.shape[3] % window:
        raise ShapeError(
            f"spatial dims {xv.shape[2:]} not divisible by window {window}")
    y, idx = kernels.maxpool_forward(xv, window)
    h, wd = xv.shape[2], xv.shape[3]
    return x.tape._record(
        y, (x.slot,),
        lambda g: (kernels.maxpool_backward(
            np.ascontiguousarray(g), idx, window, h, wd),))


def upsample2x(x: Var) -> Var:
    """Nearest-neighbour 2x spatial upsampling."""
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError(f"upsample2x expects 4-D input, got {xv.shape}")
    y = np.repeat(np.repeat(xv, 2, axis=2), 2, axis=3)
    n, c, h, wd = xv.shape
    return x.tape._record(
        y, (x.slot,),
        lambda g: (g.reshape(n, c, h, 2, wd, 2).sum(axis=(3, 5)),))


# ------------------------------------------------------------------ sampling

def reparam_sample(mu, log_var, eps: Array) -> Var:
    """mu + exp(log_var / 2) * eps with eps held fixed.

    The noise draw enters as data, so gradients flow only through the
    location and scale.
    """
    tape = _tape_of(mu, log_var)
    mu, log_var = _lift(tape, mu), _lift(tape, log_var)
    eps = _as_f64(eps)
    std = np.exp(0.5 * log_var.value)
    if std.shape != eps.shape or mu.value.shape != eps.shape:
        raise ShapeError("mu, log_var and eps must share one shape")
    y = mu.value + std * eps
    return tape._record(
        y, (mu.slot, log_var.slot),
        lambda g: (g, g * (0.5 * std * eps)))


def check_finite(a: Var, what: str = "value") -> Var:
    """Pass-through that raises NumericalError on NaN or inf."""
    from .errors import NumericalError
    if not np.all(np.isfinite(a.value)):
        raise NumericalError(f"non-finite {what} in forward pass")
    return a


__all__ = [
    "Tape", "Var",
    "add", "sub", "mul", "div", "neg",
    "exp", "log", "sqrt", "square", "relu", "clamp_min", "softplus",
    "gauss_cdf",
    "sum", "mean", "cumsum",
    "reshape", "transpose", "concat", "take",
    "matmul", "dense",
    "conv2d", "max_pool2d", "upsample2x",
    "reparam_sample", "check_finite",
]
