"""Reverse-mode autodiff over dense float64 numpy arrays.

Design rules:
  * No implicit broadcasting. Elementwise ops demand identical shapes and
    raise ShapeError otherwise; expansion must go through broadcast_to.
  * matmul accepts 2D @ 2D or batched 3D @ 3D (leading batch dim).
  * A recorded graph is confined to one thread; backward visits each node
    exactly once in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

# epsilon floor applied inside log for cross-entropy
CE_EPS = 1e-12

_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / environment rollouts)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


class Tensor:
    """Dense float64 array plus optional gradient bookkeeping.

    Attributes:
        data: the forward value, always a C-contiguous float64 ndarray.
        grad: accumulated adjoint, populated by backward().
        requires_grad: whether this tensor (or anything upstream of it)
            participates in differentiation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor values must be finite")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], vjp) -> "Tensor":
        """Build an op result, recording the graph edge only when needed."""
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = needs
        out.name = None
        if needs:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operator sugar (same-shape semantics) --------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise primitives ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._result(a.data + c, (a,), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    # numerically stable two-sided form
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU, the usual transformer FFN nonlinearity."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner
        return (g * dx,)

    return Tensor._result(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._result(out, (a,), vjp)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalization to zero mean / unit variance along one axis (no affine)."""
    x = a.data
    mu = np.mean(x, axis=axis, keepdims=True)
    xc = x - mu
    var = np.mean(xc**2, axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def vjp(g):
        # d/dx of (x - mu) * inv with mu and var both functions of x
        g_mean = np.mean(g, axis=axis, keepdims=True)
        gy_mean = np.mean(g * out, axis=axis, keepdims=True)
        return (inv * (g - g_mean - out * gy_mean),)

    return Tensor._result(out, (a,), vjp)


# -- linear algebra / shape primitives -----------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: batched shapes differ {a.shape} @ {b.shape}")
    else:
        raise ShapeError(f"matmul: expects 2D@2D or 3D@3D, got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        at = np.swapaxes(ad, -1, -2)
        bt = np.swapaxes(bd, -1, -2)
        return (g @ bt, at @ g)

    return Tensor._result(ad @ bd, (a, b), vjp)


def transpose_last2(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2: needs ndim >= 2, got {a.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))
    return Tensor._result(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    orig = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    """Explicit expansion of size-1 axes; the only broadcasting allowed."""
    if a.ndim != len(shape):
        raise ShapeError(f"broadcast_to: rank mismatch {a.shape} -> {shape}")
    expanded = []
    for ax, (have, want) in enumerate(zip(a.shape, shape)):
        if have == want:
            continue
        if have == 1:
            expanded.append(ax)
        else:
            raise ShapeError(f"broadcast_to: cannot expand {a.shape} -> {shape}")
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))

    def vjp(g):
        if expanded:
            g = np.sum(g, axis=tuple(expanded), keepdims=True)
        return (g,)

    return Tensor._result(out, (a,), vjp)


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        out = np.asarray(np.sum(a.data))
        shape = a.shape
        return Tensor._result(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    out = np.sum(a.data, axis=axis)
    ax = axis if axis >= 0 else axis + a.ndim
    n = a.shape[ax]

    def vjp(g):
        return (np.repeat(np.expand_dims(g, ax), n, axis=ax),)

    return Tensor._result(out, (a,), vjp)


def tensor_mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return mul_scalar(tensor_sum(a, axis), 1.0 / n)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: no tensors given")
    nd = parts[0].ndim
    for p in parts:
        if p.ndim != nd:
            raise ShapeError(f"concat: rank mismatch {[q.shape for q in parts]}")
    ax = axis if axis >= 0 else axis + nd
    sizes = [p.shape[ax] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=ax)

    def vjp(g):
        grads, start = [], 0
        for s in sizes:
            idx = [slice(None)] * nd
            idx[ax] = slice(start, start + s)
            grads.append(g[tuple(idx)])
            start += s
        return tuple(grads)

    return Tensor._result(out, tuple(parts), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis if axis >= 0 else axis + a.ndim
    if not (0 <= start <= stop <= a.shape[ax]):
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for {a.shape} axis {ax}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return Tensor._result(np.ascontiguousarray(a.data[idx]), (a,), vjp)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Select rows of a 2D table; adjoints scatter-add into the picked rows."""
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2D, got {table.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("embedding_lookup: indices must be 1D")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding_lookup: index out of range for table {table.shape}")
    rows, shape = idx, table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, rows, g)
        return (full,)

    return Tensor._result(table.data[rows].copy(), (table,), vjp)


def gather_cols(a: Tensor, indices) -> Tensor:
    """Per-row column gather on a 2D tensor: out[r, j] = a[r, idx[r, j]]."""
    if a.ndim != 2:
        raise ShapeError(f"gather_cols: expects 2D, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_cols: indices {idx.shape} do not match rows of {a.shape}")
    rows = np.arange(a.shape[0])[:, None]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return Tensor._result(a.data[rows, idx].copy(), (a,), vjp)


def scatter_cols(src: Tensor, indices, num_cols: int) -> Tensor:
    """Inverse of gather_cols: place src[r, j] at column idx[r, j] of a zero matrix."""
    if src.ndim != 2:
        raise ShapeError(f"scatter_cols: expects 2D, got {src.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != src.shape:
        raise ShapeError(f"scatter_cols: indices {idx.shape} must match src {src.shape}")
    rows = np.arange(src.shape[0])[:, None]
    out = np.zeros((src.shape[0], num_cols))
    out[rows, idx] = src.data

    def vjp(g):
        return (g[rows, idx].copy(),)

    return Tensor._result(out, (src,), vjp)


def cross_entropy(p: Tensor, q: Tensor) -> Tensor:
    """H(P, Q) = -sum(p * log q), with q floored at CE_EPS inside the log.

    Shapes must match; the sum runs over all elements, yielding a scalar.
    """
    _check_same_shape("cross_entropy", p, q)
    qf = np.maximum(q.data, CE_EPS)
    logq = np.log(qf)
    out = np.asarray(-np.sum(p.data * logq))
    pd, qd = p.data, q.data
    unclipped = qd >= CE_EPS

    def vjp(g):
        gp = -g * logq
        gq = np.where(unclipped, -g * pd / qf, 0.0)
        return (gp, gq)

    return Tensor._result(out, (p, q), vjp)


def top_k(values, k: int):
    """Indices and values of the k largest entries along the last axis.

    Ties are broken toward the lowest index. Selection is discrete: no
    gradient flows through this function; it returns plain arrays.

    Returns:
        (top_values, top_indices), both with shape values.shape[:-1] + (k,).
    """
    v = values.data if isinstance(values, Tensor) else np.asarray(values, dtype=np.float64)
    if not (1 <= k <= v.shape[-1]):
        raise ValueError(f"top_k: k={k} out of range for axis length {v.shape[-1]}")
    # stable sort on -v keeps the original (lowest-first) order among ties
    order = np.argsort(-v, axis=-1, kind="stable")
    idx = order[..., :k]
    vals = np.take_along_axis(v, idx, axis=-1)
    return vals, idx


# -- reverse pass ---------------------------------------------------------------


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) for every requires_grad node reachable from loss.

    The loss must be scalar-valued. Gradients add into .grad, so callers
    reusing parameters across steps should zero them first.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any requires_grad tensor")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if not p.requires_grad:
                    continue
                prev = adjoint.get(id(p))
                adjoint[id(p)] = pg if prev is None else prev + pg
        if node._parents == () or node.name is not None:
            # leaf (or named parameter): expose the accumulated adjoint
            node.grad = g if node.grad is None else node.grad + g
