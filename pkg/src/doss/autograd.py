"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every operation builds a node that records its parent nodes and a backward
rule; `backward` replays the tape in reverse topological order and returns a
name -> gradient map for the named leaves. All training math runs in float64.
Forward values are checked for NaN/Inf after every op; a non-finite value is
an error state, not something to propagate.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import NumericsError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording, e.g. for evaluation and decoding."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A dense float64 value, optionally recorded on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values produced by {op}")


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray, "Tensor"], None] | None) -> Tensor:
    """Wrap an op result; record parents/backward only when the tape is live."""
    _ensure_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and backward is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = lambda g, _out=out: backward(g, _out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accum(store: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    key = id(t)
    if key in store:
        store[key] = store[key] + g
    else:
        store[key] = g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

_GRAD_STORE: dict[int, np.ndarray] | None = None


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; `b` may broadcast against `a` (bias add)."""
    def bw(g, out):
        _accum(_GRAD_STORE, a, _unbroadcast(g, a.data.shape))
        _accum(_GRAD_STORE, b, _unbroadcast(g, b.data.shape))
    return _node(a.data + b.data, "add", (a, b), bw)


def add_const(a: Tensor, c) -> Tensor:
    """Add a constant array/scalar (no gradient flows into the constant)."""
    c = np.asarray(c, dtype=np.float64)
    def bw(g, out):
        _accum(_GRAD_STORE, a, _unbroadcast(g, a.data.shape))
    return _node(a.data + c, "add_const", (a,), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g, out):
        _accum(_GRAD_STORE, a, _unbroadcast(g * b.data, a.data.shape))
        _accum(_GRAD_STORE, b, _unbroadcast(g * a.data, b.data.shape))
    return _node(a.data * b.data, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    def bw(g, out):
        _accum(_GRAD_STORE, a, g * c)
    return _node(a.data * c, "scale", (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (k, n): right operand is a plain 2-D weight matrix."""
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects (..., m, k) @ (k, n); got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    def bw(g, out):
        _accum(_GRAD_STORE, a, g @ b.data.T)
        k, n = b.data.shape
        _accum(_GRAD_STORE, b, a.data.reshape(-1, k).T @ g.reshape(-1, n))
    return _node(a.data @ b.data, "matmul", (a, b), bw)


def batched_matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n) with identical leading dims (attention)."""
    if a.data.shape[:-2] != b.data.shape[:-2]:
        raise ShapeError(f"batched_matmul leading dims differ: {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"batched_matmul inner dimensions differ: {a.shape} @ {b.shape}")
    def bw(g, out):
        _accum(_GRAD_STORE, a, g @ b.data.swapaxes(-1, -2))
        _accum(_GRAD_STORE, b, a.data.swapaxes(-1, -2) @ g)
    return _node(a.data @ b.data, "batched_matmul", (a, b), bw)


def relu(a: Tensor) -> Tensor:
    def bw(g, out):
        _accum(_GRAD_STORE, a, g * (a.data > 0.0))
    return _node(np.maximum(a.data, 0.0), "relu", (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax (max-subtracted) along `axis`."""
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    def bw(g, out):
        inner = (g * out.data).sum(axis=axis, keepdims=True)
        _accum(_GRAD_STORE, a, out.data * (g - inner))
    return _node(y, "softmax", (a,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last dimension to mean 0 / variance 1, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    def bw(g, out):
        dxhat = g * gain.data
        dvar = (dxhat * xc * -0.5 * ivar ** 3).sum(axis=-1, keepdims=True)
        dmu = (-dxhat * ivar).sum(axis=-1, keepdims=True) + dvar * (-2.0 * xc).mean(axis=-1, keepdims=True)
        _accum(_GRAD_STORE, x, dxhat * ivar + dvar * 2.0 * xc / d + dmu / d)
        lead = tuple(range(g.ndim - 1))
        _accum(_GRAD_STORE, gain, (g * xhat).sum(axis=lead))
        _accum(_GRAD_STORE, bias, g.sum(axis=lead))
    return _node(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= table.data.shape[0]:
        raise ShapeError("embedding id out of range")
    def bw(g, out):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.ravel(), g.reshape(-1, table.data.shape[1]))
        _accum(_GRAD_STORE, table, dt)
    return _node(table.data[ids], "embedding", (table,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1): {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    def bw(g, out):
        _accum(_GRAD_STORE, a, g * keep)
    return _node(a.data * keep, "dropout", (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g, out):
        _accum(_GRAD_STORE, a, g.reshape(a.data.shape))
    return _node(a.data.reshape(shape), "reshape", (a,), bw)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    def bw(g, out):
        _accum(_GRAD_STORE, a, g.transpose(inv))
    return _node(a.data.transpose(axes), "transpose", (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g, out):
        _accum(_GRAD_STORE, a, np.full_like(a.data, float(g)))
    return _node(np.asarray(a.data.sum()), "sum_all", (a,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean negative log-softmax over non-pad target positions.

    logits: (..., V); targets: integer array matching the leading dims.
    Positions whose target equals `pad_id` contribute nothing.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    vocab = logits.data.shape[-1]
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= vocab:
        raise ShapeError("target id out of range")
    nonpad = targets != pad_id
    n = int(nonpad.sum())
    if n == 0:
        raise ShapeError("cross_entropy: every target position is padding")
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = logits.data - m - np.log(z)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * nonpad).sum() / n
    def bw(g, out):
        dlogits = (e / z)
        flat = dlogits.reshape(-1, vocab)
        flat[np.arange(flat.shape[0]), targets.ravel()] -= 1.0
        dlogits = dlogits * nonpad[..., None] * (float(g) / n)
        _accum(_GRAD_STORE, logits, dlogits)
    return _node(np.asarray(loss), "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the tape; each node appears exactly once."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Propagate from a scalar loss; returns {name: grad} for named leaves.

    Gradients on leaf tensors are overwritten, not accumulated across calls.
    """
    global _GRAD_STORE
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = topo_order(loss)
    store: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    _GRAD_STORE = store
    try:
        for node in reversed(order):
            g = store.get(id(node))
            if g is None or node._backward is None:
                continue
            node._backward(g)
    finally:
        _GRAD_STORE = None
    grads: dict[str, np.ndarray] = {}
    for node in order:
        if node.requires_grad and id(node) in store:
            node.grad = store[id(node)]
            if node.name is not None and node._backward is None:
                grads[node.name] = node.grad
    return grads


# ---------------------------------------------------------------------------
# seeded rng derivation (dropout, stage seeds)
# ---------------------------------------------------------------------------


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from heterogeneous parts via sha256."""
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def derived_rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))
