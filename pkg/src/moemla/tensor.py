"""
Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array. Operations on tensors that
require gradients record a graph edge (the parents and a closure computing
the parents' gradient contributions); ``backward`` walks that graph in
reverse topological order.

Only the operations the language model needs are provided. Matrix products
are instrumented: every forward ``matmul`` adds ``2*m*n*k`` to the active
FLOP counter, which the analysis code reconciles against closed forms.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .exceptions import DimensionError

_GRAD_ENABLED = True

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


@dataclass(frozen=True)
class Precision:
    """Compute width plus the element width used for byte accounting."""

    compute: str = "single"
    accounting_bytes: int = 4

    def __post_init__(self):
        if self.compute not in ("single", "double"):
            raise ValueError(f"compute must be 'single' or 'double', got {self.compute!r}")
        if self.accounting_bytes not in (1, 2, 4, 8):
            raise ValueError(f"accounting_bytes must be one of 1, 2, 4, 8, got {self.accounting_bytes}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.compute == "single" else np.float64)


class FlopCounter:
    """Counts matmul FLOPs (2 per multiply-accumulate), optionally per scope."""

    def __init__(self):
        self.total = 0
        self.by_scope: dict[str, int] = {}
        self._scopes: list[str] = []

    def add(self, flops: int) -> None:
        self.total += flops
        if self._scopes:
            key = self._scopes[-1]
            self.by_scope[key] = self.by_scope.get(key, 0) + flops

    def reset(self) -> None:
        self.total = 0
        self.by_scope.clear()

    @contextlib.contextmanager
    def scope(self, name: str) -> Iterator[None]:
        self._scopes.append(name)
        try:
            yield
        finally:
            self._scopes.pop()


flop_counter = FlopCounter()


@contextlib.contextmanager
def counting_flops() -> Iterator[FlopCounter]:
    """Install a fresh global counter for the duration of the block."""
    global flop_counter
    previous = flop_counter
    flop_counter = FlopCounter()
    try:
        yield flop_counter
    finally:
        flop_counter = previous


@contextlib.contextmanager
def flop_scope(name: str) -> Iterator[None]:
    with flop_counter.scope(name):
        yield


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

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

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every leaf that requires it."""
    if loss.data.size != 1 and grad is None:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    }
    for node in reversed(order):
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


# elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _lift(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        s = b
        return _make(a.data * a.dtype.type(s), (a,), lambda g: (g * a.dtype.type(s),), "scale")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def gelu(x: Tensor) -> Tensor:
    """Tanh-form Gaussian error linear unit."""
    v = x.data
    t = np.tanh(_GELU_C * (v + _GELU_A * v**3))
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _make(out, (x,), bw, "gelu")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.broadcast_to(mask, x.shape)
    out = np.where(mask, x.dtype.type(value), x.data)
    return _make(out, (x,), lambda g: (np.where(mask, 0, g),), "masked_fill")


# reductions & shape --------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return _make(out, tuple(tensors), bw, "concat")


def getitem(x: Tensor, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back into place."""
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), bw, "getitem")


def scatter_rows(src: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Result ``out`` of shape [n_rows, ...] with ``out[rows[i]] += src[i]``."""
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, rows, src.data)
    return _make(out, (src,), lambda g: (g[rows],), "scatter_rows")


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[..., j] = x[..., idx[..., j]]``; indices must be distinct per row."""
    out = np.take_along_axis(x.data, idx, axis=-1)

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g, axis=-1)
        return (full,)

    return _make(out, (x,), bw, "take_along_last")


# linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a 2-D matrix applied to every leading row of ``a``, or a
    stack with the same leading shape as ``a``. The global FLOP counter is
    charged ``2*m*n*k`` per constituent 2-D product.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    k = a.shape[-1]
    n = b.shape[-1]
    rows = a.size // k
    flop_counter.add(2 * rows * n * k)

    if b.ndim == 2:
        a2 = a.data.reshape(rows, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(rows, n)
            da = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            db = a2.T @ g2 if b.requires_grad else None
            return da, db

    else:
        out = np.matmul(a.data, b.data)

        def bw(g):
            da = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
            db = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
            return da, db

    return _make(out, (a, b), bw, "matmul")


# normalisation & losses ------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    if gain.shape != x.shape[-1:] or offset.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}, {offset.shape} do not match last extent of {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + offset.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, offset), bw, "layer_norm")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    t = targets.reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise DimensionError(f"{t.shape[0]} targets for {flat.shape[0]} logit rows")
    if t.size and (t.min() < 0 or t.max() >= vocab):
        raise IndexError(f"target id out of range [0, {vocab})")
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    n = t.shape[0]
    loss = -logp[np.arange(n), t].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return ((p * (g / n)).reshape(logits.shape),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``; identity if rate is 0 or rng is None."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
