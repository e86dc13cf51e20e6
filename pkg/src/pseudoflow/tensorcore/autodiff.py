"""Minimal dense tensor with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. While a ``Tape`` is active, every
operation whose inputs require gradients records a backward rule onto the
tape; ``Tape.backward(loss)`` replays the rules in reverse order and
accumulates ``.grad`` on the participating tensors. Without an active tape
operations run plain numpy (inference mode).

Broadcasting is restricted to singleton axes: two operand shapes are
compatible iff, after left-padding the shorter one with 1s, every axis pair
is equal or one of them is 1. Python scalars are treated as constants and
are always allowed.

All op outputs are checked for NaN/Inf; a non-finite value raises
``NonFiniteError`` at the op that produced it.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op precondition."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse (reuse after backward, backward without recording)."""


def _check_finite(data: np.ndarray, opname: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values in output of '{opname}'")


def _broadcast_shape(sa: tuple, sb: tuple) -> tuple:
    """Broadcast shape under the singleton-axes-only rule."""
    n = max(len(sa), len(sb))
    a = (1,) * (n - len(sa)) + tuple(sa)
    b = (1,) * (n - len(sb)) + tuple(sb)
    out = []
    for da, db in zip(a, b):
        if da == db or da == 1 or db == 1:
            out.append(max(da, db))
        else:
            raise ShapeError(f"shapes {sa} and {sb} are not singleton-broadcastable")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of singleton broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


Scalar = Union[int, float]
TensorLike = Union["Tensor", np.ndarray, Scalar, Sequence]


class Tensor:
    """Dense multi-dimensional array of real numbers, row-major."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    # ---- introspection ----
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.shape}, dtype={self.data.dtype}"
        if self.name:
            head += f", name={self.name!r}"
        return head + (", requires_grad=True)" if self.requires_grad else ")")

    # ---- operator sugar ----
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def as_tensor(x: TensorLike, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _Entry:
    __slots__ = ("out", "inputs", "back")

    def __init__(self, out, inputs, back):
        self.out = out
        self.inputs = inputs
        self.back = back


_TAPE_STACK: list = []


class Tape:
    """Ordered record of operations for one forward pass.

    Single use: after ``backward`` the tape refuses further recording or a
    second backward. Intended pattern is one tape per optimization step,
    with parameter updates applied out-of-tape.
    """

    def __init__(self):
        self.entries: list = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, inputs: Sequence[Tensor], back: Callable) -> None:
        if self._consumed:
            raise TapeError("tape already consumed by backward(); build a new tape")
        self.entries.append(_Entry(out, inputs, back))

    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Replay recorded ops in reverse, accumulating ``.grad`` on inputs.

        ``root`` is normally a scalar loss; a non-scalar root needs an
        explicit ``seed`` of the same shape.
        """
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        self._consumed = True
        if seed is None:
            if root.size != 1:
                raise ShapeError("backward() on non-scalar root requires a seed")
            seed = np.ones_like(root.data)
        grads: dict = {id(root): np.asarray(seed, dtype=root.data.dtype)}
        for entry in reversed(self.entries):
            g_out = grads.pop(id(entry.out), None)
            if g_out is None:
                continue
            for t, g in zip(entry.inputs, entry.back(g_out)):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                # id() keys are only unique while the object is alive; the
                # entry keeps each input tensor alive until the tape dies.
        touched = {}
        for entry in self.entries:
            for t in entry.inputs:
                touched[id(t)] = t
        touched[id(root)] = root
        for key, g in grads.items():
            t = touched.get(key)
            if t is None or not t.requires_grad:
                continue
            t.grad = g if t.grad is None else t.grad + g


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: Sequence[Tensor], back: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, back)
    return out


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def _binary(opname, fwd, back_builder, a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        _broadcast_shape(a.shape, b.shape)
        out_data = fwd(a.data, b.data)
        _check_finite(out_data, opname)
        out = Tensor(out_data)
        sa, sb = a.shape, b.shape
        ga, gb = back_builder(a.data, b.data, out_data)
        return _record(
            out, (a, b),
            lambda g: (_unbroadcast(ga(g), sa), _unbroadcast(gb(g), sb)),
        )
    # one side is a plain python/numpy constant
    if isinstance(a, Tensor):
        const = np.asarray(b, dtype=a.dtype)
        _broadcast_shape(a.shape, const.shape)
        out_data = fwd(a.data, const)
        _check_finite(out_data, opname)
        out = Tensor(out_data)
        sa = a.shape
        ga, _ = back_builder(a.data, const, out_data)
        return _record(out, (a,), lambda g: (_unbroadcast(ga(g), sa),))
    if isinstance(b, Tensor):
        const = np.asarray(a, dtype=b.dtype)
        _broadcast_shape(const.shape, b.shape)
        out_data = fwd(const, b.data)
        _check_finite(out_data, opname)
        out = Tensor(out_data)
        sb = b.shape
        _, gb = back_builder(const, b.data, out_data)
        return _record(out, (b,), lambda g: (_unbroadcast(gb(g), sb),))
    raise TypeError(f"{opname}: at least one operand must be a Tensor")


def add(a, b):
    return _binary("add", lambda x, y: x + y,
                   lambda x, y, o: (lambda g: g, lambda g: g), a, b)


def sub(a, b):
    return _binary("sub", lambda x, y: x - y,
                   lambda x, y, o: (lambda g: g, lambda g: -g), a, b)


def mul(a, b):
    return _binary("mul", lambda x, y: x * y,
                   lambda x, y, o: (lambda g: g * y, lambda g: g * x), a, b)


def div(a, b):
    return _binary("div", lambda x, y: x / y,
                   lambda x, y, o: (lambda g: g / y, lambda g: -g * x / (y * y)), a, b)


def _unary(opname, a: Tensor, out_data: np.ndarray, back: Callable) -> Tensor:
    _check_finite(out_data, opname)
    return _record(Tensor(out_data), (a,), back)


def neg(a: Tensor) -> Tensor:
    return _unary("neg", a, -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _unary("exp", a, out_data, lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _unary("log", a, np.log(x), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _unary("sqrt", a, out_data, lambda g: (g * 0.5 / out_data,))


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _unary("tanh", a, out_data, lambda g: (g * (1.0 - out_data * out_data),))


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return _unary("sigmoid", a, out_data, lambda g: (g * out_data * (1.0 - out_data),))


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)
    pos = a.data > 0
    return _unary("relu", a, out_data, lambda g: (g * pos,))


def abs_(a: Tensor) -> Tensor:
    # subgradient 0 at the kink
    s = np.sign(a.data)
    return _unary("abs", a, np.abs(a.data), lambda g: (g * s,))


def pow_const(a: Tensor, p: Scalar) -> Tensor:
    x = a.data
    out_data = x ** p
    return _unary("pow", a, out_data, lambda g: (g * p * x ** (p - 1),))


# ---------------------------------------------------------------------------
# Reductions, shape ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    shape, adata = a.shape, a.data

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(adata.dtype, copy=False),)
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        ax = tuple(i % len(shape) for i in ax)
        if not keepdims:
            for i in sorted(ax):
                g = np.expand_dims(g, i)
        return (np.broadcast_to(g, shape),)

    return _unary("sum", a, np.asarray(out_data), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for i in ax:
            n *= a.shape[i % a.ndim]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out_data = a.data.reshape(shape)
    return _unary("reshape", a, out_data, lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return _unary("transpose", a, out_data, lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]
    shape, dtype = a.shape, a.dtype

    def back(g):
        da = np.zeros(shape, dtype=dtype)
        da[idx] = g
        return (da,)

    return _unary("getitem", a, np.ascontiguousarray(out_data), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    _check_finite(out_data, "concat")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(sizes))
        )

    return _record(Tensor(out_data), tuple(tensors), back)


# ---------------------------------------------------------------------------
# Matrix multiplication
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2D matrix product; dA = dC @ B^T, dB = A^T @ dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data
    _check_finite(out_data, "matmul")
    ad, bd = a.data, b.data
    return _record(Tensor(out_data), (a, b),
                   lambda g: (g @ bd.T, ad.T @ g))


__all__ = [
    "Tensor", "Tape", "active_tape", "as_tensor",
    "ShapeError", "NonFiniteError", "TapeError",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "tanh",
    "sigmoid", "relu", "abs_", "pow_const",
    "sum_", "mean", "reshape", "transpose", "getitem", "concat", "matmul",
]
