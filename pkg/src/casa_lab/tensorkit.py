"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds a node holding its parents and a closure mapping the output
gradient to one gradient per parent. ``backward`` walks the tape in reverse
topological order. Only the ops the fusion layers need are provided.

Broadcasting is restricted: an operand may only be missing *leading* batch
dimensions (bias rows, shared weights) or be a size-1 scalar.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError


_state = {"grad": True, "mac_counter": None}


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class MacCounter:
    """Accumulates multiply-accumulate counts of every matmul executed."""

    def __init__(self):
        self.total = 0
        self.by_tag: dict[str, int] = {}
        self.tag = "other"

    @contextlib.contextmanager
    def tagged(self, tag: str):
        prev, self.tag = self.tag, tag
        try:
            yield
        finally:
            self.tag = prev

    def add(self, n: int):
        self.total += n
        self.by_tag[self.tag] = self.by_tag.get(self.tag, 0) + n


@contextlib.contextmanager
def count_macs():
    counter = MacCounter()
    prev = _state["mac_counter"]
    _state["mac_counter"] = counter
    try:
        yield counter
    finally:
        _state["mac_counter"] = prev


def mac_tag(tag: str):
    counter = _state["mac_counter"]
    return counter.tagged(tag) if counter is not None else contextlib.nullcontext()


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; identical streams for identical seeds."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name", "meta")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name
        self.meta: dict = {}

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or b.data.size == 1 and b.ndim <= 1:
        return
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape} (only leading-dim broadcasting)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim or (b.ndim == a.ndim and b.data.size > a.data.size):
        a, b = b, a
    _check_broadcast(a, b, "add")

    def back(g):
        return g, _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if b.ndim > a.ndim or (b.ndim == a.ndim and b.data.size > a.data.size):
        a, b = b, a
    _check_broadcast(a, b, "mul")

    def back(g):
        return g * b.data, _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two dims; ``b`` may be a shared 2-D weight."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    counter = _state["mac_counter"]
    if counter is not None:
        counter.add(int(np.prod(a.shape[:-1])) * a.shape[-1] * b.shape[-1])
    out = a.data @ b.data

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), back)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, (a,), back)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Stable softmax over the last axis.

    A slice containing +inf puts all its mass uniformly on the +inf entries.
    A slice that is entirely -inf becomes uniform; such slices are listed in
    ``out.meta["degenerate"]`` as flat slice indices.
    """
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: last dim must be >= 1, got shape {x.shape}")
    d = x.data
    pos_inf = np.isposinf(d)
    safe = d
    if pos_inf.any():
        has_pos = pos_inf.any(axis=-1, keepdims=True)
        safe = np.where(has_pos, np.where(pos_inf, 0.0, -np.inf), d)
    m = np.max(safe, axis=-1, keepdims=True)
    dead = np.isneginf(m)
    m = np.where(dead, 0.0, m)
    e = np.exp(safe - m)
    if dead.any():
        e = np.where(dead, 1.0, e)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    out = _make(p, (x,), back)
    if dead.any():
        out.meta["degenerate"] = np.flatnonzero(dead.reshape(-1))
    return out


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; the mask is a broadcastable constant."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    keep = ~mask
    return _make(np.where(mask, value, x.data), (x,), lambda g: (g * keep,))


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layernorm: gain {gain.shape} / bias {bias.shape} must match last dim {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_to(g * xhat, gain.shape), _reduce_to(g, bias.shape)

    return _make(y, (x, gain, bias), back)


def embedding(table: Tensor, ids) -> Tensor:
    return take(table, np.asarray(ids, dtype=np.int64))


def take(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of ``x`` (axis 0); ``idx`` may have any shape."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), back)


def scatter_rows(x: Tensor, idx: np.ndarray, n: int) -> Tensor:
    """Place rows of ``x`` at distinct positions ``idx`` of an ``n``-row zero tensor."""
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if len(idx) != x.shape[0]:
        raise ShapeError(f"scatter_rows: {len(idx)} indices for {x.shape[0]} rows")
    out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
    out[idx] = x.data
    return _make(out, (x,), lambda g: (g[idx],))


def getitem(x: Tensor, key) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(x.data[key], (x,), back)


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(ts)
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, back)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), back)


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.data.size)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive (even, odd) pairs of the last axis by angles given as cos/sin.

    ``cos``/``sin`` have shape ``x.shape[:-1] + (x.shape[-1] // 2,)`` or broadcast to it.
    """
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def back(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _make(out, (x,), back)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True))
    rows = np.arange(len(targets))
    n = max(len(targets), 1)
    loss = (lse[:, 0] - z[rows, targets]).sum() / n

    def back(g):
        p = np.exp(z - lse)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), back)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every requires-grad leaf reachable from a scalar ``loss``.

    Returns a map from leaf tensor to its gradient. Accumulation follows a fixed
    reverse topological order, so repeated calls give bit-identical results.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
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
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves
