"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the encoder and the classification heads need are
provided. An operation is recorded when a :class:`Tape` is active, gradient
recording is enabled, and at least one input has ``requires_grad`` set.
Outside a tape every operation is a plain numpy computation.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    w.grad  # populated
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Misuse of the differentiation tape."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.grad_enabled = True
        _state.counters = []
    return _state.tapes


def _active_tape():
    stack = _tape_stack()
    if not stack or not _state.grad_enabled:
        return None
    return stack[-1]


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block (the tape stays active)."""
    _tape_stack()
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of matmul calls."""

    def __init__(self):
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


@contextlib.contextmanager
def count_macs():
    _tape_stack()
    counter = MacCounter()
    _state.counters.append(counter)
    try:
        yield counter
    finally:
        _state.counters.remove(counter)


def _record_macs(n: int) -> None:
    for c in getattr(_state, "counters", ()):
        c.add(n)


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swap_last(self)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _not_scalar(t):
    raise TapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class _Op:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations for one backward pass."""

    def __init__(self):
        self.ops: list[_Op] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - out-of-order exits are a programming error
            stack.remove(self)
        return False

    def __len__(self):
        return len(self.ops)

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self.ops.append(_Op(out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(x) to every recorded tensor with requires_grad."""
        if self.consumed:
            raise TapeError("backward() called twice on the same tape")
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise TapeError("loss does not depend on any requires_grad tensor")
        self.consumed = True
        pending: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
        for op in reversed(self.ops):
            entry = pending.pop(id(op.out), None)
            if entry is None:
                continue
            g = entry[1]
            op.out.grad = g
            in_grads = op.backward(g)
            for inp, gi in zip(op.inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                slot = pending.get(id(inp))
                if slot is None:
                    pending[id(inp)] = [inp, gi]
                else:
                    slot[1] = slot[1] + gi
        # whatever remains belongs to leaves
        for leaf, g in pending.values():
            if leaf.grad is None:
                leaf.grad = np.array(g, dtype=leaf.dtype, copy=True).reshape(leaf.shape)
            else:
                leaf.grad = leaf.grad + g
        self.ops.clear()


def _make(data: np.ndarray, inputs: Sequence, backward: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _is_suffix(small: tuple, big: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else g


def _check_broadcast(op: str, a: tuple, b: tuple) -> None:
    if not (_is_suffix(a, b) or _is_suffix(b, a)):
        raise ShapeError(f"{op}: shapes {a} and {b} only broadcast over leading dimensions")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data + c, (a,), lambda g: (g,))
    a = as_tensor(a, dtype=b.dtype)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise product; either operand may be a python scalar or constant array."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if np.broadcast_shapes(c.shape, a.shape) != a.shape:
            raise ShapeError(f"mul: constant of shape {c.shape} does not broadcast to {a.shape}")
        return _make(a.data * c, (a,), lambda g: (g * c,))
    _check_broadcast("mul", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    da, db = a.data, b.data
    return _make(da * db, (a, b), lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb)))


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    out = _kernels.gelu_fwd(_rows(xd)).reshape(xd.shape)
    return _make(out, (x,), lambda g: (_kernels.gelu_bwd(_rows(xd), _rows(g)).reshape(xd.shape),))


# --------------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, index) -> Tensor:
    src_shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate(datas, axis=axis), tuple(tensors), back)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    _check_broadcast("broadcast_to", x.shape, shape)
    src = x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, src),))


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    src, dtype = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,), lambda g: (np.full(src, g, dtype=dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return mul(sum_all(x), 1.0 / n)


# -------------------------------------------------------------------- linalg


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; ``b`` may be 2-D (shared) or carry the same batch dims as ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} differ")
    da, db = a.data, b.data
    out = np.matmul(da, db)
    m, k = da.shape[-2:]
    n = db.shape[-1]
    _record_macs(int(np.prod(out.shape[:-2], dtype=np.int64)) * m * k * n)
    sa, sb = a.shape, b.shape

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(db, -1, -2)), sa)
        if b.requires_grad:
            if db.ndim == 2 and da.ndim > 2:
                gb = da.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(da, -1, -2), g), sb)
        return ga, gb

    return _make(out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# ---------------------------------------------------------- normalization


def softmax(x: Tensor, axis: int = -1, bias: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; ``bias`` is a constant added to the logits first.

    ``bias`` may broadcast in any numpy-compatible way; it receives no gradient.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    logits = x.data if bias is None else x.data + np.asarray(bias, dtype=x.dtype)
    moved = np.moveaxis(logits, axis, -1)
    y = _kernels.softmax_fwd(_rows(moved)).reshape(moved.shape)

    def back(g):
        gm = np.moveaxis(g, axis, -1)
        gx = _kernels.softmax_bwd(_rows(y), _rows(gm)).reshape(y.shape)
        return (np.moveaxis(gx, -1, axis),)

    return _make(np.moveaxis(y, -1, axis), (x,), back)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise ShapeError(f"layernorm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    src = x.shape
    out, xhat, rstd = _kernels.layernorm_fwd(_rows(x.data), gain.data, bias.data, float(eps))
    gd = gain.data

    def back(g):
        gx, gg, gb = _kernels.layernorm_bwd(_rows(g), xhat, rstd, gd)
        return gx.reshape(src), gg, gb

    return _make(out.reshape(src), (x, gain, bias), back)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch.

    ``logits`` is (G,) with an integer label or (B, G) with B labels.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    lab = np.atleast_1d(np.asarray(labels))
    if lab.dtype.kind not in "iu":
        raise TypeError(f"labels must be integers, got {lab.dtype}")
    g_count = z.shape[-1]
    if lab.shape[0] != z.shape[0]:
        raise ShapeError(f"cross_entropy: {z.shape[0]} rows but {lab.shape[0]} labels")
    if np.any(lab < 0) or np.any(lab >= g_count):
        raise IndexError(f"label out of range [0, {g_count}): {lab.tolist()}")
    rows = np.arange(z.shape[0])
    probs = _kernels.softmax_fwd(np.ascontiguousarray(z))
    # -log p[label], with log p from the max-shifted logits
    lsm = log_softmax_np(z)
    loss = -lsm[rows, lab].mean()
    bsz = z.shape[0]

    def back(g):
        d = probs.copy()
        d[rows, lab] -= 1.0
        d *= g / bsz
        return (d[0] if single else d,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back)


def parameters_finite(tensors: Sequence[Tensor]) -> str | None:
    """Name of the first tensor holding a non-finite value, or None."""
    for i, t in enumerate(tensors):
        if not np.all(np.isfinite(t.data)):
            return t.name or f"tensor[{i}]"
    return None
