"""Dense-tensor engine with reverse-mode automatic differentiation.

Define-by-run: ops executed inside a ``with Graph():`` block append nodes
to the tape whenever an input carries ``requires_grad``; ``backward`` walks
the tape in strict reverse append order and accumulates gradients
additively into every requiring leaf. Outside a graph, ops run
forward-only, which is what evaluation uses.

Everything is float64 (token-id tensors are int64). Ops accept the
documented 2-D shapes and, where noted, a leading batch axis; no other
broadcasting is supported.
"""

import numpy as np

from .errors import ShapeError, UnknownOpError
from . import kernels


class Tensor:
    """Dense value with an optional gradient slot.

    Values are immutable by convention once the tensor is consumed by an
    op; only ``grad`` mutates (accumulation during backward).
    """

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad=False):
        arr = np.asarray(values)
        if arr.dtype.kind in "ui":
            arr = arr.astype(np.int64)
        else:
            arr = arr.astype(np.float64)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.values, dtype=np.float64)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad=False):
    return Tensor(values, requires_grad)


def param(values):
    return Tensor(values, requires_grad=True)


class _Node:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_ACTIVE = None
_LAST = None


class Graph:
    """Append-only tape; inputs of every node precede it."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE, _LAST
        _ACTIVE = self._prev
        _LAST = self
        return False

    def backward(self, loss):
        if loss.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {tuple(loss.shape)}")
        # id -> [grad array, owned]; arrays returned by op rules may alias
        # each other, so only mutate in place once we own a private buffer.
        store = {id(loss): [np.ones_like(loss.values, dtype=np.float64), True]}
        for node in reversed(self.nodes):
            slot = store.pop(id(node.out), None)
            if slot is None:
                continue
            for t, g in zip(node.inputs, node.bwd(slot[0])):
                if g is None or not t.requires_grad:
                    continue
                cur = store.get(id(t))
                if cur is None:
                    store[id(t)] = [g, False]
                elif cur[1]:
                    cur[0] += g
                else:
                    cur[0] = cur[0] + g
                    cur[1] = True
        produced = {id(n.out) for n in self.nodes}
        produced.discard(id(loss))  # loss itself may be a bare leaf
        for n in self.nodes:
            for t in n.inputs:
                if t.requires_grad and id(t) not in produced:
                    slot = store.pop(id(t), None)
                    if slot is not None:
                        t.accumulate_grad(slot[0])
        if loss.requires_grad and id(loss) in store:
            loss.accumulate_grad(store[id(loss)][0])


def backward(loss):
    """Run backward on the graph that recorded ``loss``."""
    g = _ACTIVE if _ACTIVE is not None else _LAST
    if g is None:
        raise ShapeError("backward", "no recorded graph")
    g.backward(loss)


def _record(op, inputs, out_values, bwd):
    needs = _ACTIVE is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    if needs:
        _ACTIVE.nodes.append(_Node(op, tuple(inputs), out, bwd))
    return out


def _unbroadcast(g, shape):
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcast)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _mT(a):
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------- op rules


def _op_matmul(inputs, transpose_a=False, transpose_b=False):
    a, b = inputs
    av = _mT(a.values) if transpose_a and a.values.ndim >= 2 else a.values
    bv = b.values
    vec_rhs = bv.ndim == 1
    if vec_rhs:
        if transpose_b:
            raise ShapeError("matmul", "cannot transpose a 1-D operand")
        bv = bv[:, None]
    elif transpose_b:
        bv = _mT(bv)
    if av.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    out = np.matmul(av, bv)
    if vec_rhs:
        out = out[..., 0]

    def bwd(g):
        gm = g[..., None] if vec_rhs else g
        ga = _unbroadcast(np.matmul(gm, _mT(bv)), av.shape)
        gb = _unbroadcast(np.matmul(_mT(av), gm), bv.shape)
        if transpose_a:
            ga = _mT(ga)
        if vec_rhs:
            gb = gb[..., 0]
        elif transpose_b:
            gb = _mT(gb)
        return ga, gb

    return out, bwd


def _op_conv1d_same(inputs):
    x, w, b = inputs
    if w.values.ndim != 3:
        raise ShapeError("conv1d_same", f"weights must be n x s x d_in, got {w.shape}")
    n, s, d_w = w.values.shape
    if s % 2 == 0:
        raise ShapeError("conv1d_same", f"window size must be odd, got {s}")
    xv = x.values
    batched = xv.ndim == 3
    if not batched:
        if xv.ndim != 2:
            raise ShapeError("conv1d_same", f"input must be l x d_in, got {x.shape}")
        xv = xv[None]
    if xv.shape[-1] != d_w:
        raise ShapeError("conv1d_same", f"input depth {xv.shape[-1]} != filter depth {d_w}")
    if b.values.shape != (n,):
        raise ShapeError("conv1d_same", f"bias must be ({n},), got {b.shape}")
    out = kernels.conv1d_fwd(np.ascontiguousarray(xv), w.values, b.values)

    def bwd(g):
        gv = g if batched else g[None]
        gx, gw, gb = kernels.conv1d_bwd(
            np.ascontiguousarray(xv), w.values, np.ascontiguousarray(gv)
        )
        return (gx if batched else gx[0]), gw, gb

    return (out if batched else out[0]), bwd


def _op_embedding_lookup(inputs):
    table, ids = inputs
    if table.values.ndim != 2:
        raise ShapeError("embedding_lookup", f"table must be 2-D, got {table.shape}")
    idv = ids.values
    if idv.dtype.kind not in "ui" and not np.all(idv == idv.astype(np.int64)):
        raise ShapeError("embedding_lookup", "ids must be integers")
    idv = idv.astype(np.int64)
    if idv.size and (idv.min() < 0 or idv.max() >= table.values.shape[0]):
        raise ShapeError(
            "embedding_lookup",
            f"id out of range [0, {table.values.shape[0]}) : {int(idv.min())}..{int(idv.max())}",
        )
    out = table.values[idv]

    def bwd(g):
        flat_ids = idv.reshape(1, -1)
        flat_g = np.ascontiguousarray(g.reshape(1, -1, table.values.shape[1]))
        gt = kernels.embedding_scatter(flat_ids, flat_g, table.values.shape[0])
        return gt, None

    return out, bwd


def _elementwise(fn, dfn):
    def op(inputs):
        (x,) = inputs
        out = fn(x.values)

        def bwd(g):
            return (g * dfn(x.values, out),)

        return out, bwd

    return op


def _sigmoid_values(v):
    # exp may overflow to inf for saturated inputs; the result is still the
    # correct 0.0/1.0 limit, so just run with the warning off
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-v))


_op_relu = _elementwise(lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0).astype(np.float64))
_op_sigmoid = _elementwise(_sigmoid_values, lambda v, o: o * (1.0 - o))
_op_tanh = _elementwise(np.tanh, lambda v, o: 1.0 - o * o)


def _op_leaky_relu(inputs, alpha):
    if not alpha > 0:
        raise ShapeError("leaky_relu", f"alpha must be positive, got {alpha}")
    (x,) = inputs
    v = x.values
    out = np.where(v > 0, v, alpha * v)

    def bwd(g):
        return (g * np.where(v > 0, 1.0, alpha),)

    return out, bwd


def _binary(op_name, fn, dfa, dfb):
    def op(inputs):
        a, b = inputs
        try:
            out = fn(a.values, b.values)
        except ValueError:
            raise ShapeError(op_name, f"incompatible shapes {a.shape} and {b.shape}")

        def bwd(g):
            return (
                _unbroadcast(dfa(g, a.values, b.values), a.values.shape),
                _unbroadcast(dfb(g, a.values, b.values), b.values.shape),
            )

        return out, bwd

    return op


_op_add = _binary("add", np.add, lambda g, a, b: g, lambda g, a, b: g)
_op_sub = _binary("elementwise_sub", np.subtract, lambda g, a, b: g, lambda g, a, b: -g)
_op_mul = _binary(
    "elementwise_mul", np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a
)


def _op_scalar_add(inputs, value):
    (x,) = inputs
    out = x.values + float(value)

    def bwd(g):
        return (g,)

    return out, bwd


def _op_concat(inputs, axis=0):
    shapes = [t.values.shape for t in inputs]
    try:
        out = np.concatenate([t.values for t in inputs], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"cannot concatenate {shapes} along axis {axis}")
    sizes = [s[axis] for s in shapes]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return out, bwd


def _op_reshape(inputs, shape):
    (x,) = inputs
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot view {x.shape} as {shape}")

    def bwd(g):
        return (g.reshape(x.values.shape),)

    return out, bwd


def _op_masked_softmax(inputs):
    logits, mask = inputs
    if logits.shape != mask.shape:
        raise ShapeError(
            "masked_softmax", f"logits {logits.shape} vs mask {mask.shape}"
        )
    m = (mask.values != 0).astype(np.float64)
    shifted = np.where(m > 0, logits.values, -np.inf)
    hi = shifted.max(axis=-1, keepdims=True)
    hi = np.where(np.isfinite(hi), hi, 0.0)  # all-masked rows
    e = np.exp(shifted - hi) * m
    z = e.sum(axis=-1, keepdims=True)
    p = np.divide(e, z, out=np.zeros_like(e), where=z > 0)

    def bwd(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return p * (g - inner), None

    return p, bwd


def _op_weighted_sum(inputs):
    w, v = inputs
    wv, vv = w.values, v.values
    if vv.ndim == wv.ndim + 1 and vv.shape[:-1] == wv.shape:
        out = np.einsum("...j,...jk->...k", wv, vv)

        def bwd(g):
            gw = np.einsum("...k,...jk->...j", g, vv)
            gv = wv[..., None] * g[..., None, :]
            return gw, gv

    elif vv.shape == wv.shape:
        out = np.einsum("...j,...j->...", wv, vv)

        def bwd(g):
            return g[..., None] * vv, g[..., None] * wv

    else:
        raise ShapeError("weighted_sum", f"weights {w.shape} vs values {v.shape}")
    return out, bwd


def _op_mean_all(inputs):
    (x,) = inputs
    n = x.values.size
    if n == 0:
        raise ShapeError("mean_all", "empty tensor")
    out = np.asarray(x.values.mean())

    def bwd(g):
        return (np.full_like(x.values, float(g) / n, dtype=np.float64),)

    return out, bwd


_OPS = {
    "matmul": _op_matmul,
    "conv1d_same": _op_conv1d_same,
    "embedding_lookup": _op_embedding_lookup,
    "relu": _op_relu,
    "sigmoid": _op_sigmoid,
    "tanh": _op_tanh,
    "leaky_relu": _op_leaky_relu,
    "elementwise_mul": _op_mul,
    "elementwise_sub": _op_sub,
    "add": _op_add,
    "concat": _op_concat,
    "masked_softmax": _op_masked_softmax,
    "weighted_sum": _op_weighted_sum,
    "mean_all": _op_mean_all,
    "scalar_add": _op_scalar_add,
    "reshape": _op_reshape,
}

_ARITY = {
    "matmul": 2, "conv1d_same": 3, "embedding_lookup": 2, "relu": 1,
    "sigmoid": 1, "tanh": 1, "leaky_relu": 1, "elementwise_mul": 2,
    "elementwise_sub": 2, "add": 2, "masked_softmax": 2, "weighted_sum": 2,
    "mean_all": 1, "scalar_add": 1, "reshape": 1,
}


def forward_op(op, inputs, **attrs):
    """Run one engine op over ``inputs`` (list of Tensors)."""
    rule = _OPS.get(op)
    if rule is None:
        raise UnknownOpError(f"unknown op {op!r}")
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    want = _ARITY.get(op)
    if want is not None and len(inputs) != want:
        raise ShapeError(op, f"expected {want} inputs, got {len(inputs)}")
    out_values, bwd = rule(inputs, **attrs)
    return _record(op, inputs, out_values, bwd)


# Thin functional wrappers so model code reads like math.

def matmul(a, b, transpose_a=False, transpose_b=False):
    return forward_op("matmul", [a, b], transpose_a=transpose_a, transpose_b=transpose_b)


def conv1d_same(x, w, b):
    return forward_op("conv1d_same", [x, w, b])


def embedding_lookup(table, ids):
    return forward_op("embedding_lookup", [table, ids])


def relu(x):
    return forward_op("relu", [x])


def sigmoid(x):
    return forward_op("sigmoid", [x])


def tanh(x):
    return forward_op("tanh", [x])


def leaky_relu(x, alpha=0.01):
    return forward_op("leaky_relu", [x], alpha=alpha)


def mul(a, b):
    return forward_op("elementwise_mul", [a, b])


def sub(a, b):
    return forward_op("elementwise_sub", [a, b])


def add(a, b):
    return forward_op("add", [a, b])


def concat(tensors, axis=0):
    return forward_op("concat", list(tensors), axis=axis)


def masked_softmax(logits, mask):
    return forward_op("masked_softmax", [logits, mask])


def weighted_sum(weights, values):
    return forward_op("weighted_sum", [weights, values])


def mean_all(x):
    return forward_op("mean_all", [x])


def scalar_add(x, value):
    return forward_op("scalar_add", [x], value=value)


def reshape(x, shape):
    return forward_op("reshape", [x], shape=shape)
