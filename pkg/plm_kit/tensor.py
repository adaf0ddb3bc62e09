"""
Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` walks the graph in reverse topological order
and stores gradients on leaf tensors only. Calling ``backward`` again before
``zero_grad`` raises GradientStateError instead of accumulating.

Storage is float32. ``precision(np.float64)`` switches the dtype of every
tensor created inside the block, which gradient checks use as a reference path.
Broadcasting is limited to scalars and a 1-D bias over the last dimension.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from plm_kit.errors import GradientStateError, ShapeError

IGNORE_INDEX = -100

_state = threading.local()

GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.float32)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Create tensors with ``dtype`` inside the block (float32 outside)."""
    previous = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = previous


# ── Tensor ────────────────────────────────────────────────


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data: np.ndarray = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Optional[GradFn] = None
        self._op = ""

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
    def is_leaf(self) -> bool:
        return self._grad_fn is None

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{op})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # Operator sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a Python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


Scalar = Union[int, float]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str, grad_fn: GradFn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
        out._op = op
    return out


def _cast(arr: np.ndarray, like: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=like.dtype)


# ── Backward ──────────────────────────────────────────────


def _topo_order(root: Tensor) -> list[Tensor]:
    """Graph nodes in dependency order (parents before children)."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``loss`` depends on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientStateError("loss does not depend on any tensor with requires_grad=True")

    order = _topo_order(loss)
    leaves = [n for n in order if n.is_leaf]
    stale = [n for n in leaves if n.grad is not None]
    if stale:
        raise GradientStateError(
            f"{len(stale)} tensor(s) still hold gradients from a previous backward; "
            "call zero_grad() first"
        )

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = _cast(g, node.data).reshape(node.shape)
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ── Elementwise ───────────────────────────────────────────


def _broadcast_shape(a: tuple, b: tuple, allow_bias: bool) -> tuple:
    if a == b:
        return a
    if b == ():
        return a
    if a == ():
        return b
    if allow_bias:
        if len(b) == 1 and len(a) >= 1 and a[-1] == b[0]:
            return a
        if len(a) == 1 and len(b) >= 1 and b[-1] == a[0]:
            return b
    raise ShapeError(f"shapes {a} and {b} are not compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum(), dtype=g.dtype)
    return g.reshape(-1, shape[0]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, allow_bias=True)

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _node(a.data + b.data, (a, b), "add", grad_fn)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def sub(a, b) -> Tensor:
    return add(a, neg(_as_tensor(b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, allow_bias=False)

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", grad_fn)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient flows only where the input was inside the range."""
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: (g * inside,))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    c = math.sqrt(2.0 / math.pi)
    x = a.data
    t = np.tanh(c * (x + 0.044715 * x**3))
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _node(out, (a,), "gelu", grad_fn)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    try:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    except ValueError as e:
        raise ShapeError(f"mask of shape {np.shape(mask)} does not fit {a.shape}") from e
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _node(out, (a,), "masked_fill", lambda g: (np.where(mask, 0, g),))


def dropout(a: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity outside training."""
    if not train or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    scale = _cast((rng.random(a.shape) >= rate) / (1.0 - rate), a.data)
    return _node(a.data * scale, (a,), "dropout", lambda g: (g * scale,))


# ── Reductions and shape ──────────────────────────────────


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        axes.append(ax % ndim)
    return tuple(sorted(axes))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), "sum", grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from e
    return _node(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if not axes else tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation of {a.ndim} dims")
    inverse = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), "transpose", lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tuple(tensors), "concat", grad_fn)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    axis = _normalize_axes(axis, a.ndim)[0]
    if start < 0 or length < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis of size {a.shape[axis]}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _node(a.data[index], (a,), "narrow", grad_fn)


# ── Linear algebra ────────────────────────────────────────


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product, or batched over identical leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    ok = (
        a.ndim >= 2
        and a.ndim == b.ndim
        and a.shape[:-2] == b.shape[:-2]
        and a.shape[-1] == b.shape[-2]
    )
    if not ok:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def grad_fn(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _node(a.data @ b.data, (a, b), "matmul", grad_fn)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x (..., k) @ w (k, n) + b (n)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape} x {w.shape}")
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, w.shape[0])), w)
    out = reshape(out, (*lead, w.shape[1]))
    return add(out, b) if b is not None else out


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding ids outside [0, {weight.shape[0]})")
    width = weight.shape[1]

    def grad_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, width))
        return (gw,)

    return _node(weight.data[ids], (weight,), "embedding", grad_fn)


# ── Normalization and activations ─────────────────────────


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), "softmax", grad_fn)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), "log_softmax", grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layer_norm gamma {gamma.shape} / beta {beta.shape} do not match last dim {n}"
        )
    if eps < 0:
        raise ValueError("layer_norm eps must be non-negative")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        dxhat = g * gamma.data
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dgamma = (g * xhat).reshape(-1, n).sum(axis=0)
        dbeta = g.reshape(-1, n).sum(axis=0)
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), "layer_norm", grad_fn)


# ── Losses ────────────────────────────────────────────────


def cross_entropy(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over targets that are not ``ignore_index``.

    When every target is ignored the loss is 0 and contributes zero gradient.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, V) logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.shape[0] != n:
        raise ShapeError(f"{targets.shape[0]} targets for {n} rows of logits")
    valid = targets != ignore_index
    if np.any((targets[valid] < 0) | (targets[valid] >= v)):
        raise ValueError(f"cross_entropy target outside [0, {v}) and not ignore_index")
    count = int(valid.sum())
    if count == 0:
        return _node(
            np.zeros((), dtype=logits.data.dtype),
            (logits,),
            "cross_entropy",
            lambda g: (np.zeros_like(logits.data),),
        )

    rows = np.nonzero(valid)[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[rows, targets[rows]].sum() / count

    def grad_fn(g):
        grad = np.exp(logp)
        grad[rows, targets[rows]] -= 1.0
        grad[~valid] = 0.0
        return (grad * (g / count),)

    return _node(np.asarray(loss), (logits,), "cross_entropy", grad_fn)


def mse_loss(pred: Tensor, target) -> Tensor:
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse_loss target {target.shape} does not match prediction {pred.shape}")
    if pred.size == 0:
        raise ShapeError("mse_loss on an empty tensor")
    diff = pred.data - target

    def grad_fn(g):
        return (g * 2.0 * diff / diff.size,)

    return _node(np.asarray((diff * diff).mean()), (pred,), "mse", grad_fn)
