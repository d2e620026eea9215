"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op returns a new :class:`Tensor` that remembers its parents
and a closure mapping the output gradient to parent gradients. ``backward`` orders
the reachable graph topologically (the tape), replays it once in reverse, sums
gradients at fan-out, and then releases the graph.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        if any(d <= 0 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._released = False

    @classmethod
    def _wrap(cls, data: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = data
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._op = ""
        t._released = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op!r})"

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def tanh(self) -> Tensor:
        return tanh(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor._wrap(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * x ** (exponent - 1.0),)

    return _make(x**exponent, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data

    def backward(g):
        return (g / x,)

    return _make(np.log(x), (a,), backward, "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), backward, "tanh")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), backward, "gelu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp is active."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)

    def backward(g):
        return (g * inside,)

    return _make(np.clip(x, lo, hi), (a,), backward, "clip")


def minimum(a, b) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data

    def backward(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(np.where(take_a, a.data, b.data), (a, b), backward, "minimum")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    keep = ~mask

    def backward(g):
        return (_unbroadcast(g * keep, a.shape),)

    return _make(np.where(mask, value, a.data), (a,), backward, "masked_fill")


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in parts)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            # basic indexing never repeats an element
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward, "concat")


# ---------------------------------------------------------------------------
# linear algebra and NN primitives
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """numpy.matmul semantics for operands of rank >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # fold batch dims into rows: one GEMM instead of a batched product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]``; gradients scatter-add back into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding index out of range [0, {weight.shape[0]})")

    def backward(g):
        full = np.zeros(weight.shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make(weight.data[ids], (weight,), backward, "embedding")


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    n = xd.shape[-1]

    def backward(g):
        gg = g * gamma.data
        gx = rstd * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).sum(axis=-1, keepdims=True) / n)
        ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        gbeta = g.reshape(-1, n).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax(logits, axis: int = -1):
    """Max-shifted softmax.

    Accepts a Tensor (differentiable) or anything array-like (returns ndarray).
    """
    if isinstance(logits, Tensor):
        if logits.shape[axis] == 0:
            raise ValueError("empty logits")
        out = _softmax_np(logits.data, axis)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return _make(out, (logits,), backward, "softmax")
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty logits")
    return _softmax_np(arr, axis)


def log_softmax(logits, axis: int = -1):
    if isinstance(logits, Tensor):
        out = _log_softmax_np(logits.data, axis)
        p = np.exp(out)

        def backward(g):
            return (g - p * g.sum(axis=axis, keepdims=True),)

        return _make(out, (logits,), backward, "log_softmax")
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty logits")
    return _log_softmax_np(arr, axis)


def gather_last(a, index: np.ndarray) -> Tensor:
    """``out[..., ] = a[..., index[...]]`` along the last axis."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)[..., None]
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _make(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), backward, "gather")


def cross_entropy(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``weights`` (same shape as targets) masks or reweights positions; the mean is
    taken over the weight total.
    """
    logp = gather_last(log_softmax(as_tensor(logits)), targets)
    if weights is None:
        return -mean(logp)
    w = np.asarray(weights, dtype=np.float64)
    return -tsum(logp * w) / float(w.sum())


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


class GradTape:
    """Reverse-topological record of the ops reachable from one loss."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def release(self) -> None:
        for node in self.nodes:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node._released = True
        self.nodes = []


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

    The graph is released afterwards; calling again on the same loss raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise RuntimeError("graph already released by a previous backward; re-run the forward pass")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = GradTape(loss)
    tape.replay(loss)
    tape.release()
    loss._released = True


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
