"""Reverse-mode automatic differentiation on numpy buffers.

Graphs are built per forward pass (define-by-run) and released by normal
refcounting once the loss tensor goes out of scope. `backward` flows
gradients through the graph in reverse topological order and accumulates
them only into leaf tensors, so calling it twice on the same graph doubles
every leaf gradient.

Training runs in float32; gradient checks build float64 graphs for
headroom. Ops never promote dtypes silently: lifted constants adopt the
dtype of the tensor they combine with.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    EmbeddingIndexError,
    NumericError,
    ShapeMismatchError,
)

# Backward rules listed here are deliberately broken; used only by the
# verify suite's mutation harness to prove it can catch a bad gradient.
_MUTATIONS: set[str] = set()


class Tensor:
    """Dense array plus an optional position in a computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; the real rules live in the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None) -> "Tensor":
        return _reduce(self, axis, how="sum")

    def mean(self, axis=None) -> "Tensor":
        return _reduce(self, axis, how="mean")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))
        if out._parents:
            src_shape = self.data.shape
            out._backward = lambda g: (g.reshape(src_shape),)
        return out

    def transpose(self, axes) -> "Tensor":
        out = _node(np.transpose(self.data, axes), (self,))
        if out._parents:
            inv = np.argsort(axes)
            out._backward = lambda g: (np.transpose(g, inv),)
        return out


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _node(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    """Result tensor; joins the graph only if some parent participates."""
    out = Tensor(data)
    live = tuple(p for p in parents if p.requires_grad)
    if live:
        out.requires_grad = True
        out._parents = parents
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a = _lift(a, like=b if isinstance(b, Tensor) else None)
    b = _lift(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add: cannot broadcast {a.shape} with {b.shape}")
    out = _node(data, (a, b))
    if out._parents:
        out._backward = lambda g: (
            _unbroadcast(g, a.shape),
            _unbroadcast(g, b.shape),
        )
    return out


def mul(a, b) -> Tensor:
    a = _lift(a, like=b if isinstance(b, Tensor) else None)
    b = _lift(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul: cannot broadcast {a.shape} with {b.shape}")
    out = _node(data, (a, b))
    if out._parents:
        out._backward = lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatchError(
            f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}"
        )
    out = _node(np.matmul(a.data, b.data), (a, b))
    if out._parents:

        def _bw(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        out._backward = _bw
    return out


def relu(x: Tensor) -> Tensor:
    x = _lift(x)
    out = _node(np.maximum(x.data, 0), (x,))
    if out._parents:
        if "relu_backward_sign" in _MUTATIONS:
            out._backward = lambda g: (-(g * (x.data > 0)),)
        else:
            out._backward = lambda g: (g * (x.data > 0),)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = _lift(x)
    z = x.data
    data = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    data = data.astype(z.dtype)
    out = _node(data, (x,))
    if out._parents:
        out._backward = lambda g: (g * data * (1.0 - data),)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rejects non-finite input."""
    x = _lift(x)
    if not np.isfinite(x.data).all():
        raise NumericError("softmax: input contains NaN or Inf")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    data = ex / ex.sum(axis=axis, keepdims=True)
    out = _node(data, (x,))
    if out._parents:
        out._backward = lambda g: (data * (g - (g * data).sum(axis=axis, keepdims=True)),)
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then scale/shift."""
    x, gain, bias = _lift(x), _lift(gain), _lift(bias)
    n = x.shape[-1]
    if n < 2:
        raise ContractError(f"layer_norm: normalization axis must have length >= 2, got {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _node(xhat * gain.data + bias.data, (x, gain, bias))
    if out._parents:

        def _bw(g):
            lead = tuple(range(g.ndim - 1))
            dgain = (g * xhat).sum(axis=lead) if lead else g * xhat
            dbias = g.sum(axis=lead) if lead else g
            dxhat = g * gain.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            return dx, dgain.reshape(gain.shape), dbias.reshape(bias.shape)

        out._backward = _bw
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather; backward scatter-adds so duplicate ids accumulate."""
    table = _lift(table)
    idx = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if idx.size:
        bad = (idx < 0) | (idx >= vocab)
        if bad.any():
            offender = int(idx[bad].flat[0])
            raise EmbeddingIndexError(
                f"embedding_lookup: id {offender} outside table of size {vocab}"
            )
    out = _node(table.data[idx], (table,))
    if out._parents:

        def _bw(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            return (gt,)

        out._backward = _bw
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ContractError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatchError(
            f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}"
        )
    out = _node(data, tuple(ts))
    if out._parents:
        sizes = [t.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]
        out._backward = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = _lift(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = _node(x.data[index], (x,))
    if out._parents:

        def _bw(g):
            gx = np.zeros_like(x.data)
            gx[index] = g
            return (gx,)

        out._backward = _bw
    return out


def mean_pool(x: Tensor, mask) -> Tensor:
    """Average x[..., t, :] over positions where mask[..., t] == 1."""
    x = _lift(x)
    m = np.asarray(mask, dtype=x.data.dtype)
    if m.shape != x.shape[:-1]:
        raise ShapeMismatchError(
            f"mean_pool: mask shape {m.shape} does not match positions {x.shape[:-1]}"
        )
    counts = m.sum(axis=-1)
    if (counts == 0).any():
        raise DegenerateInputError("mean_pool: mask selects no valid positions")
    data = (x.data * m[..., None]).sum(axis=-2) / counts[..., None]
    out = _node(data, (x,))
    if out._parents:
        out._backward = lambda g: ((g[..., None, :] * m[..., None]) / counts[..., None, None],)
    return out


def dropout(x: Tensor, p: float, rng) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: p must be in [0, 1), got {p}")
    if p == 0.0:
        return x
    x = _lift(x)
    keep = (rng.uniform(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    out = _node(x.data * keep, (x,))
    if out._parents:
        out._backward = lambda g: (g * keep,)
    return out


def bce_with_logits(logits: Tensor, labels) -> Tensor:
    """Elementwise binary cross-entropy from pre-sigmoid logits.

    Computed in log-sum-exp form, max(z,0) - z*y + log(1+exp(-|z|)),
    so saturated logits neither overflow nor round to exact zero loss.
    """
    logits = _lift(logits)
    y = np.asarray(labels, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise ShapeMismatchError(
            f"bce_with_logits: labels shape {y.shape} vs logits {logits.shape}"
        )
    z = logits.data
    data = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = _node(data, (logits,))
    if out._parents:
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        out._backward = lambda g: (g * (sig - y),)
    return out


def _reduce(x: Tensor, axis, how: str) -> Tensor:
    x = _lift(x)
    if how == "sum":
        data = x.data.sum(axis=axis)
        scale = 1.0
    else:
        data = x.data.mean(axis=axis)
        scale = 1.0 / (x.data.size if axis is None else x.shape[axis])
    out = _node(np.asarray(data), (x,))
    if out._parents:

        def _bw(g):
            if axis is None:
                return (np.broadcast_to(g, x.shape).astype(x.data.dtype) * x.data.dtype.type(scale),)
            ge = np.expand_dims(g, axis)
            return (np.broadcast_to(ge, x.shape).astype(x.data.dtype) * x.data.dtype.type(scale),)

        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor):
    """Populate .grad on every leaf reachable from a scalar root.

    Visits each node exactly once in reverse topological order; gradient
    accumulates across fan-out and across repeated backward calls.
    """
    if root.data.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    flow: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = flow.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = flow.get(id(parent))
            flow[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# optimizers


def sgd_step(params, grads, lr: float):
    """In-place p -= lr * g over aligned parameter/gradient lists."""
    for p, g in zip(params, grads, strict=True):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatchError(f"sgd_step: grad {g.shape} vs param {p.data.shape}")
        p.data -= np.asarray(lr * g, dtype=p.data.dtype)


@dataclass
class AdamState:
    """Per-parameter first/second moments and shared step count."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam update, in place."""
    params = list(params)
    grads = list(grads)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v, strict=True):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatchError(f"adam_step: grad {g.shape} vs param {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= np.asarray(lr * (m / b1t) / (np.sqrt(v / b2t) + eps), dtype=p.data.dtype)


# ---------------------------------------------------------------------------
# finite-difference verification


def grad_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must rebuild its graph from the current .data of `params` on every
    call and return a scalar Tensor. Requires float64 parameters.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
