"""Dense tensors plus a reverse-mode automatic differentiation engine.

The graph is a dynamic tape: every operation computes its value eagerly and
records a closure that pushes adjoints to its parents. A fresh graph is built
on every forward pass, which is exactly what lets dropout draw a new mask per
pass during Monte Carlo sampling.

Numeric precision is float32 by default; tests switch to float64 via
``using_dtype`` so finite-difference gradient checks are meaningful.
"""
from __future__ import annotations

import itertools
import math
from contextlib import contextmanager

import numpy as np

from .errors import (
    GraphCorruptionError,
    InvalidArgumentError,
    NumericError,
    ShapeError,
)
from .rng import Rng

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_default_dtype = np.dtype(np.float32)
_ids = itertools.count()


def default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in _FLOAT_DTYPES:
        raise InvalidArgumentError(f"default dtype must be float32 or float64, got {dt}")
    _default_dtype = dt


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default floating dtype (used by gradient tests)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    """A dense rank-N array that doubles as a node in the autodiff tape.

    ``data`` is the value, ``grad`` the accumulated adjoint (materialized
    lazily as zeros). Node ids increase with creation order, so sorting by id
    yields a topological order of any graph.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward_fn",
                 "_needs_grad", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(np.dtype(dtype), copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = ()
        self._backward_fn = None
        self._needs_grad = self.requires_grad
        self._id = next(_ids)

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def from_op(data: np.ndarray, parents: tuple) -> Tensor:
    """Create a graph node for an operation result (internal use by layers)."""
    out = Tensor(data)
    out._parents = tuple(p for p in parents if p is not None)
    out._needs_grad = any(p._needs_grad for p in out._parents)
    return out


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add a contribution to a node's adjoint (no-op for dead branches)."""
    if t._needs_grad:
        if t._grad is None:
            t._grad = np.zeros_like(t.data)
        t._grad += g


# -- guided-backpropagation hook ------------------------------------------


class _GuidedState:
    __slots__ = ("active", "collector")

    def __init__(self):
        self.active = False
        self.collector = None


_guided = _GuidedState()


class GuidedStats:
    """Instrumentation collector for values leaving guided ReLU rewrites."""

    def __init__(self):
        self.values_seen = 0
        self.negative_values = 0
        self.min_value = math.inf

    def observe(self, rewritten: np.ndarray):
        self.values_seen += rewritten.size
        self.negative_values += int(np.count_nonzero(rewritten < 0))
        if rewritten.size:
            self.min_value = min(self.min_value, float(rewritten.min()))


@contextmanager
def guided_relu_mode(collector: GuidedStats | None = None):
    """While active, every ReLU backward keeps only positive incoming
    gradients (on top of the usual active-input gate)."""
    prev_active, prev_collector = _guided.active, _guided.collector
    _guided.active, _guided.collector = True, collector
    try:
        yield
    finally:
        _guided.active, _guided.collector = prev_active, prev_collector


# -- graph evaluation and traversal -----------------------------------------


def _reachable(root: Tensor) -> list[Tensor]:
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen[node._id] = node
        for parent in node._parents:
            if not isinstance(parent, Tensor) or parent.data is None:
                raise GraphCorruptionError("node references a dangling parent")
            if parent._id >= node._id:
                raise GraphCorruptionError("parent created after child; graph is corrupt")
            stack.append(parent)
    return [seen[i] for i in sorted(seen)]


def forward_eval(output: Tensor) -> np.ndarray:
    """Validate the graph below ``output`` and return its (eager) value."""
    for node in _reachable(output):
        if not np.all(np.isfinite(node.data)):
            raise NumericError("graph contains non-finite values")
    return output.data


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` over the reachable graph.

    Interior-node adjoints are reset at the start of each call; leaf grads
    accumulate across calls (so gradients of summed losses add up).
    """
    if loss.data.size != 1:
        raise InvalidArgumentError(
            f"backward needs a scalar loss, got shape {list(loss.shape)}")
    order = _reachable(loss)
    for node in order:
        if node._backward_fn is not None:
            node._grad = None
    if loss._grad is None:
        loss._grad = np.ones_like(loss.data)
    else:
        loss._grad = loss._grad + np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node._needs_grad and node._grad is not None:
            node._backward_fn()


# -- broadcasting helper -----------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and reduction operations -----------------------------------


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise InvalidArgumentError("add needs at least one Tensor operand")
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        out = from_op(a.data + np.asarray(b, dtype=a.dtype), (a,))

        def _bw():
            accumulate_grad(a, _unbroadcast(out._grad, a.shape))

        out._backward_fn = _bw
        return out
    if not isinstance(a, Tensor):
        return add(b, a)
    out = from_op(a.data + b.data, (a, b))

    def _bw():
        accumulate_grad(a, _unbroadcast(out._grad, a.shape))
        accumulate_grad(b, _unbroadcast(out._grad, b.shape))

    out._backward_fn = _bw
    return out


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return add(mul(b, -1.0), a)
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b))
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and not isinstance(a, Tensor):
        raise InvalidArgumentError("mul needs at least one Tensor operand")
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        const = np.asarray(b, dtype=a.dtype)
        out = from_op(a.data * const, (a,))

        def _bw():
            accumulate_grad(a, _unbroadcast(out._grad * const, a.shape))

        out._backward_fn = _bw
        return out
    if not isinstance(a, Tensor):
        return mul(b, a)
    out = from_op(a.data * b.data, (a, b))

    def _bw():
        accumulate_grad(a, _unbroadcast(out._grad * b.data, a.shape))
        accumulate_grad(b, _unbroadcast(out._grad * a.data, b.shape))

    out._backward_fn = _bw
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise InvalidArgumentError("only scalar exponents are supported")
    p = float(exponent)
    out = from_op(a.data ** p, (a,))

    def _bw():
        accumulate_grad(a, out._grad * p * a.data ** (p - 1.0))

    out._backward_fn = _bw
    return out


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = from_op(np.exp(a.data), (a,))

    def _bw():
        accumulate_grad(a, out._grad * out.data)

    out._backward_fn = _bw
    return out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = from_op(np.log(a.data), (a,))

    def _bw():
        accumulate_grad(a, out._grad / a.data)

    out._backward_fn = _bw
    return out


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = from_op(np.maximum(a.data, 0), (a,))

    def _bw():
        g = out._grad
        if _guided.active:
            # Guided rule: gate on active inputs AND positive upstream grads.
            rewritten = np.where(g > 0, g, 0) * mask
            if _guided.collector is not None:
                _guided.collector.observe(rewritten)
            accumulate_grad(a, rewritten)
        else:
            accumulate_grad(a, g * mask)

    out._backward_fn = _bw
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def _bw():
        g = out._grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate_grad(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))

    out._backward_fn = _bw
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = from_op(a.data.reshape(shape), (a,))

    def _bw():
        accumulate_grad(a, out._grad.reshape(a.shape))

    out._backward_fn = _bw
    return out


def take(a: Tensor, key) -> Tensor:
    """Basic (slice/index) selection with scatter-back gradient."""
    a = as_tensor(a)
    out = from_op(np.ascontiguousarray(a.data[key]), (a,))

    def _bw():
        g = np.zeros_like(a.data)
        g[key] += out._grad
        accumulate_grad(a, g)

    out._backward_fn = _bw
    return out


# -- initialization ----------------------------------------------------------


def he_normal_init(shape, fan_in: int, rng: Rng) -> Tensor:
    """Zero-mean normal draw with std sqrt(2 / fan_in), suited to ReLU nets."""
    shape = tuple(shape)
    if not shape:
        raise InvalidArgumentError("he_normal_init needs a non-empty shape")
    if fan_in <= 0:
        raise InvalidArgumentError(f"fan_in must be positive, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    data = rng.normal(shape, dtype=_default_dtype) * _default_dtype.type(std)
    return Tensor(data.astype(_default_dtype), requires_grad=True)


# -- finite-difference oracle -------------------------------------------------


def finite_difference_check(f, x, step: float = 1e-3, indices=None) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must be a pure tensor->scalar function (rebuildable per call).
    Returns the max over checked elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    ``indices`` restricts the check to a subset of flat coordinates
    (spot-checking large inputs).
    """
    if step <= 0:
        raise InvalidArgumentError("step must be positive")
    base_data = np.array(x.data if isinstance(x, Tensor) else x, copy=True)

    probe = Tensor(base_data.copy(), requires_grad=True)
    out = f(probe)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise InvalidArgumentError("f must return a scalar Tensor")
    if not np.isfinite(out.data).all():
        raise NumericError("f produced a non-finite value")
    backward(out)
    analytic = probe.grad.reshape(-1).astype(np.float64)

    flat = base_data.reshape(-1)
    checked = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in checked:
        bump = flat.copy()
        bump[i] = flat[i] + step
        f_plus = f(Tensor(bump.reshape(base_data.shape))).item()
        bump[i] = flat[i] - step
        f_minus = f(Tensor(bump.reshape(base_data.shape))).item()
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError("f produced a non-finite value during differencing")
        numeric = (f_plus - f_minus) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
