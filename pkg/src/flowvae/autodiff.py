"""Minimal tape-based reverse-mode automatic differentiation on numpy arrays.

Tensors hold float32 data by default; float64 is supported so the
finite-difference checker can run in double precision. Operations record
themselves on the innermost active ``Tape``; ``backward`` replays the tape
in exact reverse execution order.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense multi-dimensional array of reals with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise ValueError(
                f"tensor of shape {tuple(arr.shape)} contains non-finite entries"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        # Internal fast path for op outputs: skips the finiteness check.
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Convenience arithmetic; every dunder routes through the recorded ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class TapeEntry:
    """One executed differentiable operation and its adjoint."""

    __slots__ = ("name", "inputs", "output", "grad_fn")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor,
                 grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.name = name
        self.inputs = tuple(inputs)
        self.output = output
        self.grad_fn = grad_fn


class Tape:
    """Ordered record of executed operations, used as a context manager."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


def record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape.entries.append(TapeEntry(name, inputs, out, grad_fn))
    return out


def backward(tape: Tape, loss: Tensor, parameters: Optional[Iterable] = None) -> None:
    """Accumulate d(loss)/d(input) into ``.grad`` of every tensor on the tape.

    ``loss`` must be a scalar produced on ``tape``. When ``parameters`` is
    given, any parameter the loss does not depend on ends up with an
    all-zero gradient instead of ``None``.
    """
    if loss.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape.entries):
        gout = grads.pop(id(entry.output), None)
        holders.pop(id(entry.output), None)
        if gout is None:
            continue
        gins = entry.grad_fn(gout)
        for t, g in zip(entry.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = t
    for key, g in grads.items():
        t = holders[key]
        t.grad = g if t.grad is None else t.grad + g
    if parameters is not None:
        for p in parameters:
            tens = p.tensor if hasattr(p, "tensor") else p
            if tens.grad is None:
                tens.grad = np.zeros_like(tens.data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record("add", (a, b), out, lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record("sub", (a, b), out, lambda g: (
        _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return record("mul", (a, b), out, lambda g: (
        _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), -a.data, lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.data.dtype.type(s)
    return record("scale", (a,), a.data * s, lambda g: (g * s,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)
    return record("log", (a,), out, lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # adjoint at the kink is defined as 0
    return record("relu", (a,), np.where(mask, a.data, a.data.dtype.type(0)),
                  lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record("tanh", (a,), out, lambda g: (g * (1 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the adjoint is zero outside the open interval."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    mask = (a.data > lo) & (a.data < hi)
    return record("clip", (a,), out, lambda g: (g * mask,))


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            ax = tuple(x % a.data.ndim for x in ax)
            for x in sorted(ax):
                gg = np.expand_dims(gg, x)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return record("sum", (a,), np.asarray(out), grad_fn)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for x in ax:
            n *= a.data.shape[x]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                  lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    out = np.concatenate([t.data for t in ts], axis=axis)

    def grad_fn(g):
        splits = np.cumsum(sizes[:-1])
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", ts, out, grad_fn)


def crop_hw(a, y0: int, y1: int, x0: int, x1: int) -> Tensor:
    """Differentiable crop of the trailing two axes; adjoint zero-pads."""
    a = as_tensor(a)
    out = np.ascontiguousarray(a.data[..., y0:y1, x0:x1])

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[..., y0:y1, x0:x1] = g
        return (full,)

    return record("crop_hw", (a,), out, grad_fn)


def upsample_nearest(a, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of an NCHW tensor by an integer factor."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise ValueError(f"upsample_nearest expects NCHW, got shape {tuple(a.shape)}")
    f = int(factor)
    out = a.data.repeat(f, axis=2).repeat(f, axis=3)

    def grad_fn(g):
        n, c, h, w = a.data.shape
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return record("upsample_nearest", (a,), out, grad_fn)
