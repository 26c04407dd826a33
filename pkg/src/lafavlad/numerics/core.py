"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every differentiable operation executed while gradients are enabled appends a
node to the active :class:`Tape`.  ``backward`` replays those nodes in reverse
execution order, so the gradient of a scalar root reaches every array that
contributed to it.  Tapes are thread-local: independent graphs may be built on
separate threads without sharing state.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import DimensionError, UsageError

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = [Tape()]
        _local.grad_enabled = True
    return _local.tapes


def current_tape() -> "Tape":
    return _stack()[-1]


def grad_enabled() -> bool:
    _stack()
    return _local.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable recording; results never require gradients."""
    _stack()
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class _Node:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager to scope a graph::

        with Tape() as tape:
            loss = model(batch)
            tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack[-1] is not self:
            raise UsageError("tape stack corrupted: exiting a tape that is not innermost")
        stack.pop()
        self.clear()

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes = []

    def backward(self, root: "DiffArray", retain: bool = False,
                 on_visit: Optional[Callable[[str], None]] = None) -> None:
        if root.data.size != 1:
            raise UsageError(f"backward requires a scalar root, got shape {root.shape}")
        if not root.requires_grad:
            raise UsageError("backward root does not require grad")
        root._accumulate(np.ones_like(root.data))
        for node in reversed(self.nodes):
            if on_visit is not None:
                on_visit(node.op)
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is not None and parent.requires_grad:
                    parent._accumulate(pg)
        for node in self.nodes:
            for parent in node.parents:
                if parent.requires_grad and parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
        if not retain:
            self.clear()


def backward(root: "DiffArray", retain: bool = False) -> None:
    """Backpropagate from a scalar ``root`` through the current thread's tape."""
    current_tape().backward(root, retain=retain)


class DiffArray:
    """A float64 array that can participate in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        # never updated in place, so sharing g with other consumers is safe
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64).reshape(self.data.shape)
        else:
            self.grad = self.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_array(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else DiffArray(x)


def _result(op: str, data: np.ndarray, parents: Sequence[DiffArray], fn) -> DiffArray:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out = DiffArray(data, requires_grad=needs)
    if needs:
        current_tape().record(_Node(op, out, tuple(parents), fn))
    return out


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def _sum(x: np.ndarray, axes, keepdims: bool = False) -> np.ndarray:
    """``x.sum(axes)`` through einsum, which is much faster for narrow channels."""
    axes = {axes} if isinstance(axes, int) else set(axes)
    src = _LETTERS[: x.ndim]
    dst = "".join(ch for i, ch in enumerate(src) if i not in axes)
    out = np.einsum(f"{src}->{dst}", x)
    if keepdims:
        out = out.reshape([1 if i in axes else n for i, n in enumerate(x.shape)])
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = _sum(g, tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = _sum(g, axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: DiffArray, b: DiffArray, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


def _norm_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------- elementwise

def add(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "add")
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "subtract")
    return _result("subtract", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "multiply")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("multiply", a.data * b.data, (a, b), bw)


def divide(a, b) -> DiffArray:
    a, b = as_array(a), as_array(b)
    _check_broadcast(a, b, "divide")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("divide", out, (a, b), bw)


def exp(x) -> DiffArray:
    x = as_array(x)
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x) -> DiffArray:
    x = as_array(x)
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x) -> DiffArray:
    x = as_array(x)
    out = np.sqrt(x.data)
    return _result("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def absolute(x) -> DiffArray:
    x = as_array(x)
    return _result("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def leaky_relu(x, slope: float = 0.2) -> DiffArray:
    x = as_array(x)
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return _result("leaky_relu", out, (x,), lambda g: (np.where(pos, g, slope * g),))


# ------------------------------------------------------------------ linear algebra

def matmul(a, b) -> DiffArray:
    """Batched matrix product with broadcasting over leading extents."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ") from None
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result("matmul", out, (a, b), bw)


# ------------------------------------------------------------------ reductions

def reduce(x, axis=None, mode: str = "sum", keepdims: bool = False) -> DiffArray:
    """Sum, mean or max along ``axis`` (all axes when ``None``).

    Max routes the gradient to the first maximal element only.
    """
    x = as_array(x)
    if axis is None:
        flat = reshape(x, (x.size,))
        out = reduce(flat, 0, mode, keepdims=False)
        return reshape(out, (1,) * x.ndim) if keepdims else out
    ax = _norm_axis(axis, x.ndim, "reduce")
    n = x.shape[ax]
    if n == 0:
        raise DimensionError(f"reduce: axis {axis} of shape {x.shape} is empty")
    if mode == "sum":
        out = _sum(x.data, ax, keepdims)

        def bw(g):
            g = g if keepdims else np.expand_dims(g, ax)
            return (np.broadcast_to(g, x.shape),)
    elif mode == "mean":
        out = _sum(x.data, ax, keepdims) / n

        def bw(g):
            g = g if keepdims else np.expand_dims(g, ax)
            return (np.broadcast_to(g / n, x.shape),)
    elif mode == "max":
        arg = np.expand_dims(np.argmax(x.data, axis=ax), ax)
        out = np.take_along_axis(x.data, arg, axis=ax)
        if not keepdims:
            out = np.squeeze(out, ax)

        def bw(g):
            g = g if keepdims else np.expand_dims(g, ax)
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, arg, g, axis=ax)
            return (gx,)
    else:
        raise UsageError(f"reduce: unknown mode {mode!r}")
    return _result(f"reduce_{mode}", out, (x,), bw)


def softmax(x, axis: int = -1) -> DiffArray:
    x = as_array(x)
    ax = _norm_axis(axis, x.ndim, "softmax")
    if x.shape[ax] == 0:
        raise DimensionError(f"softmax: axis {axis} of shape {x.shape} is empty")
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / _sum(e, ax, keepdims=True)

    def bw(g):
        return (out * (g - _sum(g * out, ax, keepdims=True)),)

    return _result("softmax", out, (x,), bw)


def log_softmax(x, axis: int = -1) -> DiffArray:
    x = as_array(x)
    ax = _norm_axis(axis, x.ndim, "log_softmax")
    if x.shape[ax] == 0:
        raise DimensionError(f"log_softmax: axis {axis} of shape {x.shape} is empty")
    z = x.data - x.data.max(axis=ax, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=ax, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=ax, keepdims=True),)

    return _result("log_softmax", out, (x,), bw)


# ------------------------------------------------------------------ shape ops

def reshape(x, shape) -> DiffArray:
    x = as_array(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _result("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> DiffArray:
    x = as_array(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(x.data, axes), (x,),
                   lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> DiffArray:
    x = as_array(x)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _result("broadcast_to", np.array(out), (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence, axis: int = -1) -> DiffArray:
    xs = [as_array(x) for x in xs]
    if not xs:
        raise DimensionError("concat: empty input list")
    ax = _norm_axis(axis, xs[0].ndim, "concat")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(xs)))

    return _result("concat", out, xs, bw)


def gather_rows(x, idx) -> DiffArray:
    """Row gather: ``out[..., :] = x[idx[...], :]`` for a 2-D ``x``.

    ``idx`` may have any integer shape; the result has shape ``idx.shape + (C,)``.
    The backward pass scatter-adds into ``x``.
    """
    x = as_array(x)
    if x.ndim != 2:
        raise DimensionError(f"gather_rows: expected a 2-D source, got shape {x.shape}")
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise DimensionError(f"gather_rows: index dtype must be integer, got {idx.dtype}")
    n, c = x.shape
    bad = (idx < 0) | (idx >= n)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise IndexError(f"gather_rows: index {int(idx[where])} at position {where} "
                         f"out of range for {n} rows")
    out = x.data[idx]

    def bw(g):
        flat = idx.reshape(-1).astype(np.int64)
        g2 = g.reshape(-1, c)
        slots = (flat[:, None] * c + np.arange(c)).reshape(-1)
        return (np.bincount(slots, weights=g2.reshape(-1), minlength=n * c).reshape(n, c),)

    return _result("gather_rows", out, (x,), bw)


# ------------------------------------------------------------------ normalization

def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.99, eps: float = 1e-6) -> DiffArray:
    """Per-channel normalization over every axis but the last.

    In training mode batch statistics are used and the running buffers are
    updated in place; otherwise the running statistics are used.
    """
    x, gamma, beta = as_array(x), as_array(gamma), as_array(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} "
                             f"do not match channels of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    m = x.size // c
    if train:
        mu = _sum(x.data, axes) / m
        var = _sum(np.square(x.data - mu), axes) / m
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        g_xhat = _sum(g * xhat, axes)
        g_sum = _sum(g, axes)
        gg = g_xhat if gamma.requires_grad else None
        gb = g_sum if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if train:
                # sums of dxhat are gamma times the sums of g
                gx = (inv / m) * (m * dxhat - gamma.data * g_sum - xhat * (gamma.data * g_xhat))
            else:
                gx = dxhat * inv
        return gx, gg, gb

    return _result("batch_norm", out, (x, gamma, beta), bw)


def dropout(x, rate: float, rng: Optional[np.random.Generator], train: bool) -> DiffArray:
    """Inverted dropout; identity outside training or when ``rate`` is 0."""
    x = as_array(x)
    if not train or rate <= 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return multiply(x, DiffArray(keep))


def finite_check(named: dict) -> Optional[str]:
    """Name of the first entry in ``named`` holding a non-finite value, if any."""
    for name, arr in named.items():
        data = arr.data if isinstance(arr, DiffArray) else np.asarray(arr)
        if not np.all(np.isfinite(data)):
            return name
    return None
