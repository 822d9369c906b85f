"""Minimal reverse-mode autodiff on float64 numpy arrays.

Define-by-run: each op records its parents and a vector-Jacobian closure on
the output tensor; backward() walks the graph in reverse topological order.
The graph is rebuilt every step and never cached. Gradients accumulate until
zero_grads is called; the training loop owns the reset.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    """Dense float64 tensor with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents  # tuple of (Tensor, vjp) pairs

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents) -> Tensor:
    tracked = tuple((p, vjp) for p, vjp in parents if p.requires_grad or p._parents)
    return Tensor(data, requires_grad=bool(tracked), _parents=tracked)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _make(out, ((a, lambda g: _unbroadcast(g, a.data.shape)),
                       (b, lambda g: _unbroadcast(g, b.data.shape))))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _make(out, ((a, lambda g: _unbroadcast(g, a.data.shape)),
                       (b, lambda g: _unbroadcast(-g, b.data.shape))))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _make(out, ((a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                       (b, lambda g: _unbroadcast(g * a.data, b.data.shape))))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _make(a.data * s, ((a, lambda g: g * s),))


def matmul(a, b) -> Tensor:
    """2-D matrix product or batched 3-D product with equal batch size."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (2, 3) or b.data.ndim != a.data.ndim:
        raise ValueError(f"matmul expects two 2-D or two 3-D tensors, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2] or (a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]):
        raise ValueError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data
    return _make(out, ((a, lambda g: g @ b.data.swapaxes(-1, -2)),
                       (b, lambda g: a.data.swapaxes(-1, -2) @ g)))


def gather_rows(x, idx) -> Tensor:
    """out[i...] = x[idx[i...]]; backward scatter-adds into the source rows."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather_rows needs an integer index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise IndexError("gather_rows index out of range")
    out = x.data[idx]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return gx

    return _make(out, ((x, vjp),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return _make(out, tuple((t, make_vjp(i)) for i, t in enumerate(tensors)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make(out, ((x, lambda g: g.reshape(x.data.shape)),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), ((x, lambda g: g.transpose(inv)),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return _make(x.data * s, ((x, lambda g: g * s * (1.0 + x.data * (1.0 - s))),))


def group_norm(x, gamma, beta, num_groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize (N, C) features per channel group to zero mean and unit
    variance over all rows, then apply the learned scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise ValueError(f"group_norm expects (N, C) input, got shape {x.data.shape}")
    n, c = x.data.shape
    if c % num_groups != 0:
        raise ValueError(f"group count {num_groups} does not divide {c} channels")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError("scale/shift must have one entry per channel")
    xg = x.data.reshape(n, num_groups, c // num_groups)
    mean = xg.mean(axis=(0, 2), keepdims=True)
    var = xg.var(axis=(0, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(n, c)
    out = xhat * gamma.data + beta.data

    def vjp_x(g):
        dxhat = (g * gamma.data).reshape(n, num_groups, c // num_groups)
        xh = xhat.reshape(n, num_groups, c // num_groups)
        m1 = dxhat.mean(axis=(0, 2), keepdims=True)
        m2 = (dxhat * xh).mean(axis=(0, 2), keepdims=True)
        return ((dxhat - m1 - xh * m2) * inv).reshape(n, c)

    return _make(out, ((x, vjp_x),
                       (gamma, lambda g: (g * xhat).sum(axis=0)),
                       (beta, lambda g: g.sum(axis=0))))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, ((x, lambda g: s * (g - (g * s).sum(axis=axis, keepdims=True))),))


def sum_reduce(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.data.shape).copy()

    return _make(out, ((x, vjp),))


def mean_reduce(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    count = x.data.size // max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, x.data.shape) / count

    return _make(out, ((x, vjp),))


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in node._parents:
            pg = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(params) -> None:
    """Reset accumulated gradients; accepts a dict or an iterable of tensors."""
    tensors = params.values() if isinstance(params, dict) else params
    for t in tensors:
        t.grad = None


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    leaf = Tensor(x.data.copy(), requires_grad=True)
    loss = f(leaf)
    if loss.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(loss)
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad

    numeric = np.zeros_like(x.data)
    flat = numeric.reshape(-1)
    base = x.data.copy()
    for i in range(base.size):
        pert = base.reshape(-1).copy()
        pert[i] += h
        hi = f(Tensor(pert.reshape(base.shape))).data.item()
        pert[i] -= 2 * h
        lo = f(Tensor(pert.reshape(base.shape))).data.item()
        flat[i] = (hi - lo) / (2 * h)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        raise FloatingPointError("non-finite values in gradient check")
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
