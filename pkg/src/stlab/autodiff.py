"""Reverse-mode automatic differentiation over small dense arrays.

Every operation builds a node in a DAG of ``DiffTensor`` objects; calling
``backward()`` on a scalar (or any root) walks the graph once in reverse
topological order and accumulates gradients into every reachable node.

The array dtype of the leaves decides the precision of the whole graph:
gradient tests run in float64, training runs in float32.  Graphs are plain
Python objects confined to one worker; nothing here is thread-safe by
design.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "DiffTensor",
    "GraphError",
    "ShapeError",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "linear",
    "reshape",
    "transpose",
    "softmax",
    "log_softmax",
    "log",
    "relu",
    "gelu",
    "abs_",
    "layer_norm",
    "mean_pool",
    "embedding_lookup",
    "dropout",
    "conv2d",
    "sum_all",
    "take",
    "pick",
    "stack_rows",
    "reset_grads",
]

LOG_FLOOR = 1e-12


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (e.g. repeated backward)."""


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class DiffTensor:
    """A node in the differentiation graph.

    ``data`` is a numpy array (row-major), ``grad`` is filled in by
    ``backward()`` with an array of the same shape.  Leaves have no
    parents; interior nodes carry a closure that routes the incoming
    gradient to their parents.
    """

    __slots__ = ("data", "grad", "parents", "_backward_fn", "_backward_ran", "visit_count")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = data
        self.grad = None
        self.parents = parents
        self._backward_fn = backward_fn
        self._backward_ran = False
        self.visit_count = 0

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def backward(self):
        """Populate ``grad`` for every node reachable from this root.

        The root gradient is seeded with ones.  Calling backward twice on
        the same root without ``reset_grads`` raises: gradients would
        silently accumulate otherwise.
        """
        if self._backward_ran:
            raise GraphError(
                "backward() already ran from this root; call reset_grads() first"
            )
        self._backward_ran = True
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            node.visit_count += 1
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"DiffTensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype})"


def tensor(data, dtype=np.float64):
    """Create a leaf node from array-like data."""
    return DiffTensor(np.array(data, dtype=dtype))


def constant(data, like):
    """Create a leaf matching the dtype of another node."""
    return DiffTensor(np.asarray(data, dtype=like.data.dtype))


def _as_node(x, like):
    if isinstance(x, DiffTensor):
        return x
    return constant(x, like)


def _topo_order(root):
    """Parents-first topological order of the DAG reachable from root."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def reset_grads(root):
    """Clear grads, visit counters and the backward flag below ``root``."""
    for node in _topo_order(root):
        node.grad = None
        node.visit_count = 0
        node._backward_ran = False


def _accum(node, g):
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to ``shape`` (undo numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    b = _as_node(b, a)
    out = DiffTensor(a.data + b.data, (a, b))

    def backward_fn(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward_fn = backward_fn
    return out


def sub(a, b):
    b = _as_node(b, a)
    return add(a, scale(b, -1.0))


def mul(a, b):
    b = _as_node(b, a)
    out = DiffTensor(a.data * b.data, (a, b))

    def backward_fn(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward_fn = backward_fn
    return out


def scale(a, c):
    c = a.data.dtype.type(c)
    out = DiffTensor(a.data * c, (a,))

    def backward_fn(g):
        _accum(a, g * c)

    out._backward_fn = backward_fn
    return out


def abs_(a):
    out = DiffTensor(np.abs(a.data), (a,))

    def backward_fn(g):
        _accum(a, g * np.sign(a.data))

    out._backward_fn = backward_fn
    return out


def log(a, floor=LOG_FLOOR):
    """Natural log with a floor on the argument (keeps -inf out of losses)."""
    floored = np.maximum(a.data, floor)
    out = DiffTensor(np.log(floored), (a,))

    def backward_fn(g):
        _accum(a, g / floored)

    out._backward_fn = backward_fn
    return out


def relu(a):
    out = DiffTensor(np.maximum(a.data, 0), (a,))

    def backward_fn(g):
        _accum(a, g * (a.data > 0))

    out._backward_fn = backward_fn
    return out


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a):
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = DiffTensor((x * cdf).astype(x.dtype), (a,))

    def backward_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, g * (cdf + x * pdf).astype(x.dtype))

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    out = DiffTensor(a.data.reshape(shape), (a,))

    def backward_fn(g):
        _accum(a, g.reshape(a.data.shape))

    out._backward_fn = backward_fn
    return out


def transpose(a, axes):
    inverse = tuple(np.argsort(axes))
    out = DiffTensor(np.ascontiguousarray(a.data.transpose(axes)), (a,))

    def backward_fn(g):
        _accum(a, g.transpose(inverse))

    out._backward_fn = backward_fn
    return out


def stack_rows(nodes):
    """Stack 1-D nodes into a 2-D node (row per input)."""
    out = DiffTensor(np.stack([n.data for n in nodes]), tuple(nodes))

    def backward_fn(g):
        for i, n in enumerate(nodes):
            _accum(n, g[i])

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != b.data.ndim or a.data.ndim not in (2, 3):
        raise ShapeError(
            f"matmul expects two 2-D or two 3-D operands, got shapes "
            f"{tuple(a.data.shape)} and {tuple(b.data.shape)}"
        )
    if a.data.shape[-1] != b.data.shape[-2] or (
        a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]
    ):
        raise ShapeError(
            f"matmul shape mismatch: {tuple(a.data.shape)} @ {tuple(b.data.shape)}"
        )
    out = DiffTensor(a.data @ b.data, (a, b))

    def backward_fn(g):
        _accum(a, g @ b.data.swapaxes(-1, -2))
        _accum(b, a.data.swapaxes(-1, -2) @ g)

    out._backward_fn = backward_fn
    return out


def linear(x, w, b=None):
    """Fused x @ w (+ b).  x: (..., k), w: (k, n), b: (n,)."""
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(
            f"linear shape mismatch: {tuple(x.data.shape)} @ {tuple(w.data.shape)}"
        )
    y = x.data @ w.data
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)
    out = DiffTensor(y, parents)

    def backward_fn(g):
        _accum(x, g @ w.data.T)
        if x.data.ndim == 1:
            _accum(w, np.outer(x.data, g))
        else:
            _accum(w, x.data.reshape(-1, x.data.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        if b is not None:
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0) if g.ndim > 1 else g)

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# normalization / attention pieces


def softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = DiffTensor(y, (a,))

    def backward_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    out._backward_fn = backward_fn
    return out


def log_softmax(a, axis=-1):
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    out = DiffTensor(y, (a,))

    def backward_fn(g):
        _accum(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    out._backward_fn = backward_fn
    return out


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat
    parents = [x]
    if gain is not None:
        y = y * gain.data
        parents.append(gain)
    if bias is not None:
        y = y + bias.data
        parents.append(bias)
    out = DiffTensor(y, tuple(parents))

    def backward_fn(g):
        gx_hat = g * gain.data if gain is not None else g
        term1 = gx_hat.mean(axis=-1, keepdims=True)
        term2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (gx_hat - term1 - xhat * term2))
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            _accum(gain, (g * xhat).sum(axis=lead) if lead else g * xhat)
        if bias is not None:
            _accum(bias, g.sum(axis=lead) if lead else g)

    out._backward_fn = backward_fn
    return out


def mean_pool(h, lo, hi):
    """Mean of rows [lo, hi) of a 2-D node; gradient spreads 1/(hi-lo)."""
    rows = h.data.shape[0]
    if not (0 <= lo < hi <= rows):
        raise ShapeError(f"mean_pool span [{lo}, {hi}) invalid for {rows} rows")
    width = hi - lo
    out = DiffTensor(h.data[lo:hi].mean(axis=0), (h,))

    def backward_fn(g):
        if h.grad is None:
            h.grad = np.zeros_like(h.data)
        h.grad[lo:hi] += g / width

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# lookup / selection


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding ids out of range for table with {table.data.shape[0]} rows"
        )
    out = DiffTensor(table.data[ids], (table,))

    def backward_fn(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    out._backward_fn = backward_fn
    return out


def take(a, ids):
    """Gather elements of a 1-D node."""
    ids = np.asarray(ids, dtype=np.intp)
    out = DiffTensor(a.data[ids], (a,))

    def backward_fn(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, ids, g)

    out._backward_fn = backward_fn
    return out


def pick(a, ids):
    """Per-row gather on a 2-D node: out[i] = a[i, ids[i]]."""
    ids = np.asarray(ids, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = DiffTensor(a.data[rows, ids], (a,))

    def backward_fn(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (rows, ids), g)

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# regularization


def dropout(x, p, rng, training=True):
    """Inverted dropout with a seeded Bernoulli mask recorded in the graph.

    Evaluation mode (or p == 0) returns the input node unchanged.
    """
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    out = DiffTensor(x.data * keep, (x,))

    def backward_fn(g):
        _accum(x, g * keep)

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# convolution


def conv2d(x, w, b=None):
    """3x3 convolution, stride 2, same padding: spatial dims become ceil(n/2).

    x: (C_in, H, W); w: (C_out, C_in, 3, 3); b: (C_out,) optional.
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or w.data.shape[2:] != (3, 3):
        raise ShapeError(
            f"conv2d expects x (C,H,W) and w (O,C,3,3), got {tuple(x.data.shape)} "
            f"and {tuple(w.data.shape)}"
        )
    if x.data.shape[0] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: x {tuple(x.data.shape)} vs w {tuple(w.data.shape)}"
        )
    c_out = w.data.shape[0]
    h_in, w_in = x.data.shape[1], x.data.shape[2]
    h_out, w_out = (h_in + 1) // 2, (w_in + 1) // 2
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))

    def offset_slices(di, dj):
        return (
            slice(di, di + 2 * h_out - 1, 2),
            slice(dj, dj + 2 * w_out - 1, 2),
        )

    y = np.zeros((c_out, h_out, w_out), dtype=x.data.dtype)
    for di in range(3):
        for dj in range(3):
            si, sj = offset_slices(di, dj)
            y += np.tensordot(w.data[:, :, di, dj], xp[:, si, sj], axes=(1, 0))
    if b is not None:
        y += b.data[:, None, None]
    parents = (x, w) if b is None else (x, w, b)
    out = DiffTensor(y, parents)

    def backward_fn(g):
        gxp = np.zeros_like(xp)
        if w.grad is None:
            w.grad = np.zeros_like(w.data)
        for di in range(3):
            for dj in range(3):
                si, sj = offset_slices(di, dj)
                patch = xp[:, si, sj]
                w.grad[:, :, di, dj] += np.tensordot(g, patch, axes=([1, 2], [1, 2]))
                gxp[:, si, sj] += np.tensordot(w.data[:, :, di, dj].T, g, axes=(1, 0))
        _accum(x, gxp[:, 1 : 1 + h_in, 1 : 1 + w_in])
        if b is not None:
            _accum(b, g.sum(axis=(1, 2)))

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_all(a):
    out = DiffTensor(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,))

    def backward_fn(g):
        _accum(a, np.broadcast_to(g, a.data.shape))

    out._backward_fn = backward_fn
    return out
