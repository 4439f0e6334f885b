"""Dense numpy-backed tensors with a per-pass reverse-mode gradient tape.

Usage::

    with GradientTape() as tape:
        loss = (w * x).sum()
    grads = backward(loss, tape)
    grads[tape.id_of(w)]          # or tape.gradient(w)

Operations only record nodes while a tape is active and at least one input
has ``requires_grad``. Outside a tape every op is a plain forward kernel,
which is what evaluation and benchmarking use.

Elementwise ops broadcast with numpy's trailing-axis rules; their backward
sums the gradient over broadcast axes. ``matmul`` broadcasts leading batch
dimensions of size 1. Nothing else broadcasts.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class TapeError(RuntimeError):
    """Raised on misuse of a gradient tape."""


class Tensor:
    """Immutable dense array that may participate in a gradient tape.

    ``data`` is a read-only numpy array. Ops never mutate their inputs; the
    optimizer produces replacement tensors.
    """

    __slots__ = ("data", "requires_grad", "tape_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.tape_id: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.tape_id = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class _Node:
    out_id: int
    parent_ids: tuple[int | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "GradientTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class GradientTape:
    """Append-only record of differentiable ops for one forward pass.

    Confined to the thread that opened it. Discarded after ``backward``.
    """

    nodes: list[_Node] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)
    _leaf_ids: dict[int, int] = field(default_factory=dict)
    _refs: list[Tensor] = field(default_factory=list)
    _next_id: int = 0
    _done: bool = False

    def __enter__(self) -> "GradientTape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def _new_id(self, t: Tensor) -> int:
        tid = self._next_id
        self._next_id += 1
        self._refs.append(t)
        return tid

    def id_of(self, t: Tensor) -> int | None:
        """Tape id of ``t`` on this tape, or None if it never appeared."""
        if t.tape_id is not None and t.tape_id < len(self._refs) and self._refs[t.tape_id] is t:
            return t.tape_id
        return self._leaf_ids.get(id(t))

    def _register_input(self, t: Tensor) -> int | None:
        if not t.requires_grad:
            return None
        tid = self.id_of(t)
        if tid is None:
            tid = self._new_id(t)
            self._leaf_ids[id(t)] = tid
        return tid

    def record(self, out: Tensor, parents: Sequence[Tensor], fn) -> None:
        pids = tuple(self._register_input(p) for p in parents)
        out.tape_id = self._new_id(out)
        self.nodes.append(_Node(out.tape_id, pids, fn))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        return backward(loss, self)

    def gradient(self, t: Tensor) -> np.ndarray | None:
        """Gradient of the last backward target w.r.t. ``t`` (None if unreachable)."""
        tid = self.id_of(t)
        return None if tid is None else self.gradients.get(tid)


def backward(loss: Tensor, tape: GradientTape) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(.) through ``tape``; returns tape_id -> gradient."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._done:
        raise TapeError("tape already consumed by a previous backward")
    lid = tape.id_of(loss)
    if lid is None:
        raise TapeError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {lid: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for pid, pg in zip(node.parent_ids, node.backward(g)):
            if pid is None or pg is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    tape.gradients = grads
    tape._done = True
    return grads


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _finish(out_arr: np.ndarray, parents: Sequence[Tensor], fn) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    out = Tensor._wrap(out_arr, requires_grad=rg)
    if rg:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _finish(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _finish(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish(ad * bd, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    n = max(len(ba), len(bb))
    for x, y in zip((1,) * (n - len(ba)) + ba, (1,) * (n - len(bb)) + bb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"matmul: batch dimensions differ for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _finish(ad @ bd, (a, b), bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from None
    src = x.shape
    return _finish(out, (x,), lambda g: (g.reshape(src),))


def vectorize(x: Tensor, start_axis: int = 0) -> Tensor:
    """Row-major flattening of every axis from ``start_axis`` on."""
    if x.ndim < 1:
        raise ShapeError("vectorize needs rank >= 1")
    start_axis = start_axis % x.ndim
    return reshape(x, x.shape[:start_axis] + (-1,))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _finish(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from None
    src = x.shape
    return _finish(out, (x,), lambda g: (_unbroadcast(g, src),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    src, dt = x.shape, x.dtype

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(src, dtype=dt)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _finish(out, (x,), bw)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _finish(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _finish(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _finish(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis (population variance), then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gamma.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        dbeta = g.sum(axis=lead) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxhat = g * gd
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return dx, dgamma, dbeta

    return _finish(xhat * gd + beta.data, (x, gamma, beta), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _finish((xd * cdf).astype(xd.dtype, copy=False), (x,), bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    first = parts[0]
    axis = _check_axis(first, axis)
    for p in parts[1:]:
        if p.ndim != first.ndim or any(
            i != axis and p.shape[i] != first.shape[i] for i in range(first.ndim)
        ):
            raise ShapeError(
                f"concat: {p.shape} does not match {first.shape} off axis {axis}"
            )
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _finish(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    """Inverse of ``concat``: consecutive pieces of the given lengths."""
    axis = _check_axis(x, axis)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(x, tuple(idx)))
        start += s
    return out


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    ``x`` is promoted to float64.
    """
    base = np.array(x.data, dtype=np.float64)
    xt = Tensor(base, requires_grad=True, dtype=np.float64)
    with GradientTape() as tape:
        y = f(xt)
    if y.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {y.shape}")
    backward(y, tape)
    analytic = tape.gradient(xt)
    if analytic is None:
        analytic = np.zeros_like(base)
    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        probe = base.copy().reshape(-1)
        probe[i] += h
        fp = f(Tensor(probe.reshape(base.shape), dtype=np.float64)).item()
        probe[i] -= 2 * h
        fm = f(Tensor(probe.reshape(base.shape), dtype=np.float64)).item()
        flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
