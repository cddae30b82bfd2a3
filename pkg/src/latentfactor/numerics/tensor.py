"""Dense float64 tensors with define-by-run reverse-mode differentiation.

A :class:`Tape` is opened as a context manager; every primitive evaluated while
it is active and touching a tensor with ``requires_grad`` is appended to it.
:func:`backward` replays the tape in reverse and returns gradients for leaves.

Broadcasting is deliberately narrow: operands must have equal shapes, or one of
them is a 0-d scalar, or the shorter shape is a trailing suffix of the longer.
Anything else needs an explicit reshape.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .special import DomainError, digamma, lgamma as _lgamma_np

__all__ = [
    "Tensor", "Tape", "ShapeError", "DomainError", "backward", "grad_enabled",
    "as_tensor", "add", "sub", "mul", "div", "neg", "power", "matmul",
    "transpose", "swapaxes", "reshape", "exp", "log", "sqrt", "softplus",
    "sigmoid", "tanh", "gelu", "lgamma", "sum", "mean", "concat", "stack",
    "getitem", "masked_select", "softmax", "logsumexp", "layer_norm", "diag",
    "diagonal", "custom_op", "unbroadcast",
]


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class Tensor:
    """Immutable wrapper around a contiguous float64 array."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn: Callable):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications; single-threaded."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor, leaves: Sequence[Tensor] | None = None):
        return backward(self, root, leaves)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def grad_enabled() -> bool:
    return bool(_stack())


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    stack = _stack()
    needs = bool(stack) and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        stack[-1].nodes.append(_Node(out, parents, backward_fn))
    return out


def custom_op(out_data, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Register a fused primitive.

    ``backward_fn(g)`` receives the upstream gradient (same shape as the output)
    and returns one gradient per parent, each either ``None`` or an array that
    is broadcast-compatible with the parent under the suffix rule.
    """
    return _record(np.asarray(out_data, dtype=np.float64), tuple(parents), backward_fn)


def backward(tape: Tape, root: Tensor, leaves: Sequence[Tensor] | None = None):
    """Reverse sweep over ``tape`` from the scalar ``root``.

    Returns a list of gradient arrays aligned with ``leaves`` when given (leaves
    never reached get zeros), otherwise a dict mapping each reached leaf tensor
    to its gradient.
    """
    if root.size != 1 or root.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    leaf_objs: dict[int, Tensor] = {}
    produced = {id(node.out) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = unbroadcast(np.asarray(pg, dtype=np.float64), parent.shape)
            key = id(parent)
            if key in produced:
                target = grads
            else:
                target = leaf_grads
                leaf_objs[key] = parent
            if key in target:
                target[key] = target[key] + pg
            else:
                target[key] = pg
    if root.requires_grad and id(root) not in produced:
        leaf_grads[id(root)] = np.ones_like(root.data)
        leaf_objs[id(root)] = root
    if leaves is not None:
        return [leaf_grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in leaves]
    return {leaf_objs[k]: v for k, v in leaf_grads.items()}


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if a == b:
        return a
    if a == ():
        return b
    if b == ():
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: shapes {a} and {b} do not conform (equal, scalar or trailing-suffix only)")


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` over the leading axes that broadcasting added to ``shape``."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    if g.shape != shape:
        # size-1 axes from explicit keepdims reductions
        axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        raise ShapeError(f"cannot reduce gradient of shape {g.shape} to {shape}")
    return g


# ----------------------------------------------------------------------------
# elementwise binary


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        gb = g / bd
        return gb, -gb * out

    return _record(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    return _record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


# ----------------------------------------------------------------------------
# elementwise unary


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(~(a.data > 0)):
        raise DomainError("log of a non-positive argument")
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative argument")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (0.5 * g / out,))


def softplus(a) -> Tensor:
    """``log(1 + exp(x))``, evaluated without overflow."""
    a = as_tensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return _record(out, (a,), lambda g: (g * _sigmoid_np(ad),))


def _sigmoid_np(x):
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU; smooth, so finite-difference checks stay clean."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _record(out, (a,), bw)


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    out = np.asarray(_lgamma_np(ad), dtype=np.float64)
    return _record(out, (a,), lambda g: (g * digamma(ad),))


# ----------------------------------------------------------------------------
# linear algebra / shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul operands must be at least 1-d")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data
    if ad.ndim > 2 and bd.ndim == 2:
        # batched activations times a weight matrix: one flattened GEMM each way
        a2 = ad.reshape(-1, ka)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def bw_flat(g):
            g2 = g.reshape(-1, bd.shape[1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _record(out, (a, b), bw_flat)
    out = np.matmul(ad, bd)

    def bw(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ad.ndim == 1:
            ga = ga[..., 0, :]
        if bd.ndim == 1:
            gb = gb[..., 0]
        return _sum_to(ga, ad.shape), _sum_to(gb, bd.shape)

    return _record(out, (a, b), bw)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # batch-broadcast reduction for matmul
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Reverse the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            return a
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(ts), bw)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _record(out, tuple(ts), bw)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(out, dtype=np.float64), (a,), bw)


def masked_select(a, mask) -> Tensor:
    """Flattened elements of ``a`` where the boolean ``mask`` (same shape) is set."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"masked_select: mask {mask.shape} vs tensor {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[mask] = g
        return (full,)

    return _record(a.data[mask], (a,), bw)


def diag(v) -> Tensor:
    """Square matrix with ``v`` on its diagonal."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError("diag expects a vector")
    return _record(np.diag(v.data), (v,), lambda g: (np.diagonal(g).copy(),))


def diagonal(m) -> Tensor:
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError("diagonal expects a square matrix")
    return _record(np.diagonal(m.data).copy(), (m,), lambda g: (np.diag(g),))


# ----------------------------------------------------------------------------
# fused reductions used by the network and the IWAE bound


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), bw)


def logsumexp(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out_k = m + np.log(tot)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    weights = s / tot

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis) if axis is not None else np.reshape(g, (1,) * a.ndim)
        return (g * weights,)

    return _record(out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm: gamma/beta must match the last axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), bw)
