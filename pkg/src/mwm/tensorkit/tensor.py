"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every op builds a new node; nothing is mutated in place during forward.
Backward walks the reachable subgraph once, in reverse creation order
(creation order is a topological order because the graph is built forward),
so gradients are deterministic and accumulated exactly once per use.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError

_node_ids = itertools.count()

# Forward-mode graph construction can be switched off wholesale (inference,
# rollout loops) so no closures or parent references are retained.
_grad_enabled = [True]

_numeric_warnings = {"div_by_zero": 0}


class no_grad:
    """Context manager: ops executed inside build no tape."""

    def __enter__(self):
        _grad_enabled.append(False)
        return self

    def __exit__(self, *exc):
        _grad_enabled.pop()
        return False


def grad_enabled() -> bool:
    return _grad_enabled[-1]


def numeric_warning_count(kind: str = "div_by_zero") -> int:
    return _numeric_warnings[kind]


def reset_numeric_warnings() -> None:
    for k in _numeric_warnings:
        _numeric_warnings[k] = 0


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------

    def detach(self) -> "Tensor":
        """Stop-gradient marker: same values, severed from the tape."""
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(out_data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` under trailing-dimension broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary ops ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if np.any(b.data == 0.0):
        _numeric_warnings["div_by_zero"] += 1
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

        def backward(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return _make(-a.data, (a,), backward)


# -- elementwise unary ops ----------------------------------------------------


def texp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out)

    return _make(out, (a,), backward)


def ttanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out * out))

    return _make(out, (a,), backward)


def silu(a) -> Tensor:
    a = _lift(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (sig + a.data * sig * (1.0 - sig)))

    return _make(out, (a,), backward)


def square(a) -> Tensor:
    a = _lift(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), backward)


def tsqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out)

    return _make(out, (a,), backward)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": texp,
    "tanh": ttanh,
    "silu": silu,
    "square": square,
    "sqrt": tsqrt,
}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name; `kind` is one of add/mul/sub/div/exp/tanh/silu/square/sqrt."""
    try:
        op = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return op(*args)


# -- contractions and reductions ------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make(out, (a, b), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) == 0
                          else np.full(a.shape, g))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(out, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def softmax_lastdim(x) -> Tensor:
    """Row-stabilized softmax over the last axis; rows sum to one."""
    x = _lift(x)
    if x.shape[-1] < 1:
        raise ContractError("softmax_lastdim needs a non-empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * out).sum(axis=-1, keepdims=True)
            x._accumulate(out * (g - dot))

    return _make(out, (x,), backward)


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, then elementwise gain."""
    x, gain = _lift(x), _lift(gain)
    n = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    y0 = x.data * r
    out = y0 * gain.data

    def backward(g):
        gh = g * gain.data
        if x.requires_grad:
            inner = (gh * x.data).mean(axis=-1, keepdims=True)
            x._accumulate(gh * r - x.data * inner * r ** 3)
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * y0, gain.shape))

    return _make(out, (x, gain), backward)


# -- shape ops -----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inv))

    return _make(out, (a,), backward)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _lift(a)
    out = np.swapaxes(a.data, ax1, ax2)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, ax1, ax2))

    return _make(out, (a,), backward)


def take(a, key) -> Tensor:
    """Basic and integer-array indexing; backward scatter-adds into the source."""
    a = _lift(a)
    out = a.data[key]

    def backward(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, key, g)
            a._accumulate(buf)

    return _make(np.array(out, copy=True), (a,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ContractError("concat of an empty sequence")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _make(out, tuple(parts), backward)


def embedding(table, idx: np.ndarray) -> Tensor:
    """Row gather: table (V, E) indexed by an integer array -> (..., E)."""
    table = _lift(table)
    idx = np.asarray(idx)
    out = table.data[idx]

    def backward(g):
        if table.requires_grad:
            buf = np.zeros_like(table.data)
            np.add.at(buf, idx, g)
            table._accumulate(buf)

    return _make(out, (table,), backward)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where `mask` is True by a constant; their gradient is zero."""
    x = _lift(x)
    out = np.where(mask, value, x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.where(mask, 0.0, g))

    return _make(out, (x,), backward)


# -- backward pass ----------------------------------------------------------------


def backward(root: Tensor) -> None:
    """Populate .grad on every tracked ancestor of a scalar root."""
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

    # Reverse creation order over the reachable set is a reverse-topological order.
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node_id in seen:
            continue
        seen[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    root.grad = np.ones_like(root.data)
    for t in sorted(seen.values(), key=lambda t: t.node_id, reverse=True):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)
