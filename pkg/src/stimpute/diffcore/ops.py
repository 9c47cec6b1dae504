"""Differentiable primitives.

The op set is exactly what the imputation model needs: affine maps,
elementwise activations, concatenation and stacking, node-axis gather /
sum-scatter for message passing, sparse propagation for diffusion
convolution, masked selection and the pinball loss.

Node-axis ops work on axis 0, so message-passing tensors are laid out
``(nodes_or_edges, batch..., features)``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .tensor import (NumericError, ShapeError, Tensor, as_tensor, checks_enabled,
                     make_node)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_inputs(*arrays: np.ndarray, op: str) -> None:
    if checks_enabled():
        for a in arrays:
            if not np.isfinite(a).all():
                raise NumericError(f"{op} received non-finite input")


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: dims {list(a.shape)} and {list(b.shape)} do not broadcast") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_node(ad * bd, (a, b), bw, "mul")


def matmul(a, w) -> Tensor:
    """``a @ w`` with ``a`` of dims (..., k) and ``w`` a (k, n) matrix."""
    a, w = as_tensor(a), as_tensor(w)
    if w.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: dims {a.dims} and {w.dims} are incompatible")
    _check_inputs(a.data, w.data, op="matmul")
    ad, wd = a.data, w.data

    def bw(g):
        ga = g @ wd.T if a.requires_grad else None
        gw = None
        if w.requires_grad:
            rows = int(np.prod(ad.shape[:-1]))
            gw = ad.reshape(rows, wd.shape[0]).T @ g.reshape(rows, wd.shape[1])
        return ga, gw

    return make_node(ad @ wd, (a, w), bw, "matmul")


def linear(x, w, b) -> Tensor:
    return add(matmul(x, w), b)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    _check_inputs(x.data, op="sigmoid")
    # tanh form is stable for large |x| and exact at 0
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    _check_inputs(x.data, op="tanh")
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.dims for t in ts]} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[t.dims for t in ts]}") from exc

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return make_node(out, ts, bw, "stack")


def unstack(x, axis: int = 0) -> list[Tensor]:
    x = as_tensor(x)
    return [index(x, i, axis) for i in range(x.shape[axis])]


def index(x, i: int, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.take(x.data, i, axis=axis)

    def bw(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = i
        full[tuple(sl)] = g
        return (full,)

    return make_node(out, (x,), bw, "index")


def columns(x, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]``."""
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return make_node(x.data[..., start:stop], (x,), bw, "columns")


def broadcast_to(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {x.dims} -> {list(shape)}") from exc
    return make_node(out, (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` is true, else ``b``; ``cond`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    sa, sb = a.shape, b.shape

    def bw(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), sa) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), sb) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw, "where")


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return make_node(np.asarray(x.data.sum()), (x,),
                     lambda g: (np.full(shape, float(g)),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.data.size
    return make_node(np.asarray(x.data.mean()), (x,),
                     lambda g: (np.full(shape, float(g) / n),), "mean")


class IndexMap:
    """Fixed index array over ``n`` rows, backing gather and sum-scatter.

    Sum-scatter is a CSR product whose per-row column order follows the
    position of each entry in ``idx``; callers that sort their edge lists by
    (target, source) therefore get a reproducible summation order.
    """

    def __init__(self, idx: np.ndarray, n: int):
        idx = np.asarray(idx, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeError("IndexMap expects a 1-D index array")
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ShapeError(f"index out of range for {n} rows")
        self.idx = idx
        self.n = int(n)
        m = idx.size
        self.matrix = sp.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(self.n, m))
        self.matrix.sort_indices()

    def __len__(self) -> int:
        return self.idx.size

    def scatter_array(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.idx.size:
            raise ShapeError(f"scatter: expected {self.idx.size} rows, got {x.shape[0]}")
        rest = x.shape[1:]
        if self.idx.size == 0:
            return np.zeros((self.n,) + rest)
        flat = x.reshape(x.shape[0], -1)
        return np.asarray(self.matrix @ flat).reshape((self.n,) + rest)

    def gather_array(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.n:
            raise ShapeError(f"gather: expected {self.n} rows, got {x.shape[0]}")
        return x[self.idx]


def gather(x, imap: IndexMap) -> Tensor:
    """Rows ``x[idx]`` along axis 0."""
    x = as_tensor(x)
    return make_node(imap.gather_array(x.data), (x,),
                     lambda g: (imap.scatter_array(g),), "gather")


def scatter_sum(x, imap: IndexMap) -> Tensor:
    """Sum rows of ``x`` into ``imap.n`` buckets; empty buckets are zero."""
    x = as_tensor(x)
    return make_node(imap.scatter_array(x.data), (x,),
                     lambda g: (imap.gather_array(g),), "scatter_sum")


def edge_pair(a, b, dst: IndexMap, src: IndexMap) -> Tensor:
    """``a[dst] + b[src]``: the fused first affine layer of an edge MLP."""
    a, b = as_tensor(a), as_tensor(b)
    out = dst.gather_array(a.data) + src.gather_array(b.data)

    def bw(g):
        return (dst.scatter_array(g) if a.requires_grad else None,
                src.scatter_array(g) if b.requires_grad else None)

    return make_node(out, (a, b), bw, "edge_pair")


def propagate(matrix: sp.csr_matrix, x, transpose: sp.csr_matrix | None = None) -> Tensor:
    """Sparse left product along axis 0 (graph diffusion step).

    ``transpose`` may pass a precomputed ``matrix.T`` (or ``matrix`` itself
    when it is symmetric) to skip the conversion on every call.
    """
    x = as_tensor(x)
    n = matrix.shape[0]
    if x.shape[0] != matrix.shape[1]:
        raise ShapeError(f"propagate: matrix {matrix.shape} vs rows {x.shape[0]}")
    rest = x.shape[1:]
    mt = matrix.T.tocsr() if transpose is None else transpose

    def apply(m, arr):
        return np.asarray(m @ arr.reshape(arr.shape[0], -1)).reshape((m.shape[0],) + rest)

    return make_node(apply(matrix, x.data), (x,), lambda g: (apply(mt, g),), "propagate")


def pinball(pred, target: np.ndarray, mask: np.ndarray, taus: Sequence[float]) -> Tensor:
    """Masked mean over entries of the quantile-averaged pinball loss.

    ``pred`` has dims ``target.shape + (|C|,)``. Entries where ``mask`` is 0
    contribute nothing, whatever their values. At a kink (zero residual) the
    indicator is taken as 0, so the subgradient w.r.t. the prediction is -tau.
    """
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    taus_arr = np.asarray(taus, dtype=np.float64)
    if pred.shape != target.shape + (taus_arr.size,) or mask.shape != target.shape:
        raise ShapeError(f"pinball: pred {pred.dims}, target {list(target.shape)}, "
                         f"mask {list(mask.shape)}, |C|={taus_arr.size}")
    count = mask.sum()
    if count <= 0:
        raise ValueError("pinball loss undefined: evaluation mask is empty")
    keep = mask > 0
    resid = np.where(keep[..., None], target[..., None] - pred.data, 0.0)
    _check_inputs(resid, op="pinball")
    factor = taus_arr - (resid < 0.0)
    per_entry = (resid * factor).mean(axis=-1)
    value = np.asarray((per_entry * mask).sum() / count)
    weights = (mask / count)[..., None]

    def bw(g):
        return (-float(g) * factor * weights / taus_arr.size,)

    return make_node(value, (pred,), bw, "pinball")
