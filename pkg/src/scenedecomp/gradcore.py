"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` is an append-only list of nodes.  Every node stores its
operation tag, the ids of its inputs, op attributes and the eagerly computed
forward value.  ``backward`` walks the tape in reverse; ``replay`` re-runs the
tape with some leaf values swapped out, which is what the finite-difference
checker uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GROUP_NORM_GROUPS = 4
GROUP_NORM_EPS = 1e-5


class GraphError(Exception):
    """Raised for malformed graph operations."""


class ShapeError(GraphError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    needs_grad: bool = False


@dataclass
class Graph:
    nodes: list[Node] = field(default_factory=list)
    params: dict[int, str] = field(default_factory=dict)

    # -- leaves -----------------------------------------------------------
    def const(self, value) -> int:
        return self._push("const", (), {}, np.asarray(value, dtype=np.float64))

    def param(self, value, name: str | None = None) -> int:
        nid = self._push("param", (), {}, np.asarray(value, dtype=np.float64))
        self.params[nid] = name if name is not None else f"p{nid}"
        return nid

    def _push(self, op, inputs, attrs, value) -> int:
        if not np.all(np.isfinite(value)):
            raise GraphError(f"{op}: non-finite value produced")
        needs = op == "param" or any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(Node(op, tuple(inputs), attrs, value, needs))
        return len(self.nodes) - 1

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def apply(self, op: str, *inputs: int, **attrs) -> int:
        if op not in _OPS:
            raise GraphError(f"unknown op {op!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: bad input id {i}")
        fwd = _OPS[op][0]
        vals = [self.nodes[i].value for i in inputs]
        return self._push(op, inputs, attrs, fwd(op, vals, attrs))

    # -- shorthands used throughout the model code ------------------------
    def add(self, a, b):
        return self.apply("add", a, b)

    def mul(self, a, b):
        return self.apply("mul", a, b)

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def badd(self, a, b):
        return self.apply("broadcast_add", a, b)

    def scale(self, a, c: float):
        return self.apply("scale", a, c=float(c))

    def reshape(self, a, shape):
        return self.apply("reshape", a, shape=tuple(shape))

    def transpose(self, a, axes):
        return self.apply("transpose", a, axes=tuple(axes))

    def sub(self, a, b):
        return self.add(a, self.scale(b, -1.0))

    def silu(self, a):
        return self.apply("silu", a)

    def square(self, a):
        return self.apply("square", a)

    def mean(self, a, axis=None):
        return self.apply("mean", a, axis=axis)

    def sum(self, a, axis=None):
        return self.apply("sum", a, axis=axis)

    # -- evaluation ------------------------------------------------------
    def replay(self, overrides: dict[int, np.ndarray], stop: int | None = None) -> list[np.ndarray]:
        """Recompute the tape with some leaf values replaced.

        Nodes that do not depend on an overridden leaf keep their recorded value.
        """
        vals: list[np.ndarray] = []
        dirty = set(overrides)
        end = len(self.nodes) if stop is None else stop + 1
        for k, node in enumerate(self.nodes[:end]):
            if k in overrides:
                vals.append(np.asarray(overrides[k], dtype=np.float64))
            elif node.op in ("const", "param") or not dirty.intersection(node.inputs):
                vals.append(node.value)
            else:
                dirty.add(k)
                ins = [vals[i] for i in node.inputs]
                vals.append(_OPS[node.op][0](node.op, ins, node.attrs))
        return vals


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcastable(a, b) -> bool:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        return False
    return True


# -- forward implementations ---------------------------------------------
def _fwd_add(op, v, a):
    if v[0].shape != v[1].shape:
        raise ShapeError(f"add: shape mismatch {v[0].shape} vs {v[1].shape}")
    return v[0] + v[1]


def _fwd_badd(op, v, a):
    if not _broadcastable(v[0].shape, v[1].shape):
        raise ShapeError(f"broadcast_add: shape mismatch {v[0].shape} vs {v[1].shape}")
    return v[0] + v[1]


def _fwd_mul(op, v, a):
    if not _broadcastable(v[0].shape, v[1].shape):
        raise ShapeError(f"mul: shape mismatch {v[0].shape} vs {v[1].shape}")
    return v[0] * v[1]


def _fwd_matmul(op, v, a):
    x, y = v
    if x.ndim < 2 or y.ndim < 2 or x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {x.shape} vs {y.shape}")
    try:
        return np.matmul(x, y)
    except ValueError:
        raise ShapeError(f"matmul: shape mismatch {x.shape} vs {y.shape}") from None


def _im2col(x: np.ndarray) -> np.ndarray:
    # (N, C, H, W) -> (N, C*9, H*W), same padding
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 9, h, w))
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, k] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(n, c * 9, h * w)


def _conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    o = w.shape[0]
    return np.matmul(w.reshape(o, -1), _im2col(x)).reshape(n, o, h, wd)


def _fwd_conv2d(op, v, a):
    x, w = v
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    return _conv(x, w)


def _fwd_softmax(op, v, a):
    x = v[0]
    e = np.exp(x - x.max(axis=a["axis"], keepdims=True))
    return e / e.sum(axis=a["axis"], keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _fwd_silu(op, v, a):
    return v[0] * _sigmoid(v[0])


def _gn_stats(x):
    n, c = x.shape[:2]
    g = GROUP_NORM_GROUPS
    if c % g:
        raise ShapeError(f"group_norm: {c} channels not divisible by {g} groups")
    xg = x.reshape(n, g, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + GROUP_NORM_EPS)
    return xg, mu, inv


def _fwd_group_norm(op, v, a):
    x, gamma, beta = v
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"group_norm: shape mismatch {x.shape} vs {gamma.shape}")
    xg, mu, inv = _gn_stats(x)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def _fwd_reshape(op, v, a):
    x = v[0]
    shape = a["shape"]
    if int(np.prod([s for s in shape if s != -1])) == 0 or (
        -1 not in shape and int(np.prod(shape)) != x.size
    ):
        raise ShapeError(f"reshape: shape mismatch {x.shape} vs {shape}")
    try:
        return x.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: shape mismatch {x.shape} vs {shape}") from None


def _fwd_transpose(op, v, a):
    if sorted(a["axes"]) != list(range(v[0].ndim)):
        raise ShapeError(f"transpose: shape mismatch {v[0].shape} vs axes {a['axes']}")
    return np.ascontiguousarray(v[0].transpose(a["axes"]))


def _fwd_mean(op, v, a):
    return np.asarray(v[0].mean(axis=a["axis"], keepdims=a["axis"] is not None))


def _fwd_sum(op, v, a):
    return np.asarray(v[0].sum(axis=a["axis"], keepdims=a["axis"] is not None))


def _fwd_square(op, v, a):
    return v[0] * v[0]


def _fwd_scale(op, v, a):
    return v[0] * a["c"]


def _fwd_avgpool2(op, v, a):
    x = v[0]
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2: odd spatial shape {x.shape}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _fwd_upsample2(op, v, a):
    return v[0].repeat(2, axis=2).repeat(2, axis=3)


_RANGE_EPS = 1e-12


def _fwd_minmax(op, v, a):
    x = v[0]
    ax = a["axis"]
    lo = x.min(axis=ax, keepdims=True)
    rng = x.max(axis=ax, keepdims=True) - lo
    ok = rng > _RANGE_EPS
    return np.where(ok, (x - lo) / np.where(ok, rng, 1.0), 0.0)


# -- backward implementations: return one gradient per input -------------
def _bwd_add(g, v, out, a, need):
    return [g, g]


def _bwd_badd(g, v, out, a, need):
    return [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)]


def _bwd_mul(g, v, out, a, need):
    return [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)]


def _bwd_matmul(g, v, out, a, need):
    x, y = v
    gx = _unbroadcast(np.matmul(g, np.swapaxes(y, -1, -2)), x.shape) if need[0] else None
    gy = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), g), y.shape) if need[1] else None
    return [gx, gy]


def _bwd_conv2d(g, v, out, a, need):
    x, w = v
    n, o = g.shape[:2]
    gw = None
    if need[1]:
        gm = g.reshape(n, o, -1)
        gw = np.matmul(gm, _im2col(x).transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gx = None
    if need[0]:
        # same-padded conv with the flipped, channel-swapped kernel
        gx = _conv(g, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)))
    return [gx, gw]


def _bwd_softmax(g, v, out, a, need):
    return [out * (g - (g * out).sum(axis=a["axis"], keepdims=True))]


def _bwd_silu(g, v, out, a, need):
    s = _sigmoid(v[0])
    return [g * s * (1.0 + v[0] * (1.0 - s))]


def _bwd_group_norm(g, v, out, a, need):
    x, gamma, beta = v
    xg, mu, inv = _gn_stats(x)
    xhat = ((xg - mu) * inv).reshape(x.shape)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    red = (0,) + tuple(range(2, x.ndim))
    ggamma = (g * xhat).sum(axis=red)
    gbeta = g.sum(axis=red)
    gx_hat = (g * gamma.reshape(bshape)).reshape(xg.shape)
    xh = xhat.reshape(xg.shape)
    gx = inv * (gx_hat - gx_hat.mean(axis=2, keepdims=True)
                - xh * (gx_hat * xh).mean(axis=2, keepdims=True))
    return [gx.reshape(x.shape), ggamma, gbeta]


def _bwd_reshape(g, v, out, a, need):
    return [g.reshape(v[0].shape)]


def _bwd_transpose(g, v, out, a, need):
    return [g.transpose(np.argsort(a["axes"]))]


def _bwd_mean(g, v, out, a, need):
    x = v[0]
    ax = a["axis"]
    n = x.size if ax is None else x.size // out.size
    return [np.broadcast_to(g, x.shape) / n]


def _bwd_sum(g, v, out, a, need):
    return [np.broadcast_to(g, v[0].shape).copy()]


def _bwd_square(g, v, out, a, need):
    return [2.0 * v[0] * g]


def _bwd_scale(g, v, out, a, need):
    return [g * a["c"]]


def _bwd_avgpool2(g, v, out, a, need):
    return [g.repeat(2, axis=2).repeat(2, axis=3) * 0.25]


def _bwd_upsample2(g, v, out, a, need):
    n, c, h, w = g.shape
    return [g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))]


def _bwd_minmax(g, v, out, a, need):
    x = v[0]
    ax = a["axis"]
    lo = x.min(axis=ax, keepdims=True)
    rng = x.max(axis=ax, keepdims=True) - lo
    ok = rng > _RANGE_EPS
    r = np.where(ok, rng, 1.0)
    # one-hot at the (first) arg-min / arg-max along the axis
    imin = np.zeros_like(x)
    imax = np.zeros_like(x)
    np.put_along_axis(imin, np.expand_dims(x.argmin(axis=ax), ax), 1.0, axis=ax)
    np.put_along_axis(imax, np.expand_dims(x.argmax(axis=ax), ax), 1.0, axis=ax)
    sg = g.sum(axis=ax, keepdims=True)
    sgy = (g * out).sum(axis=ax, keepdims=True)
    gx = (g - imin * sg - imax * sgy + imin * sgy) / r
    return [np.where(ok, gx, 0.0)]


_OPS = {
    "add": (_fwd_add, _bwd_add),
    "broadcast_add": (_fwd_badd, _bwd_badd),
    "mul": (_fwd_mul, _bwd_mul),
    "matmul": (_fwd_matmul, _bwd_matmul),
    "conv2d": (_fwd_conv2d, _bwd_conv2d),
    "softmax": (_fwd_softmax, _bwd_softmax),
    "silu": (_fwd_silu, _bwd_silu),
    "group_norm": (_fwd_group_norm, _bwd_group_norm),
    "reshape": (_fwd_reshape, _bwd_reshape),
    "transpose": (_fwd_transpose, _bwd_transpose),
    "mean": (_fwd_mean, _bwd_mean),
    "sum": (_fwd_sum, _bwd_sum),
    "square": (_fwd_square, _bwd_square),
    "scale": (_fwd_scale, _bwd_scale),
    "avgpool2": (_fwd_avgpool2, _bwd_avgpool2),
    "upsample2": (_fwd_upsample2, _bwd_upsample2),
    "minmax_norm": (_fwd_minmax, _bwd_minmax),
}

OPS = tuple(_OPS)


def backward(graph: Graph, loss_node: int) -> dict[int, np.ndarray]:
    """Gradients of a scalar node w.r.t. every parameter node.

    Parameters the loss does not depend on get zero gradients.
    """
    loss = graph.nodes[loss_node].value
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss_node: np.ones_like(loss)}
    for k in range(loss_node, -1, -1):
        g = grads.get(k)
        if g is None:
            continue
        node = graph.nodes[k]
        if not node.inputs:
            continue
        if k not in graph.params:
            del grads[k]
        vals = [graph.nodes[i].value for i in node.inputs]
        need = tuple(graph.nodes[i].needs_grad for i in node.inputs)
        for i, n, gi in zip(node.inputs, need, _OPS[node.op][1](g, vals, node.value, node.attrs, need)):
            if not n:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return {
        p: np.asarray(grads[p], dtype=np.float64).reshape(graph.nodes[p].value.shape)
        if p in grads else np.zeros_like(graph.nodes[p].value)
        for p in graph.params
    }


def fd_check(graph: Graph, loss_node: int, param: int | None, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``param=None`` (or a graph without parameters) returns exactly 0.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if param is None or not graph.params:
        return 0.0
    analytic = backward(graph, loss_node)[param]
    base = graph.nodes[param].value
    worst = 0.0
    for idx in np.ndindex(base.shape):
        plus = base.copy()
        minus = base.copy()
        plus[idx] += h
        minus[idx] -= h
        fp = graph.replay({param: plus}, loss_node)[loss_node].item()
        fm = graph.replay({param: minus}, loss_node)[loss_node].item()
        numeric = (fp - fm) / (2 * h)
        err = abs(analytic[idx] - numeric) / (abs(numeric) + 1e-8)
        worst = max(worst, err)
    return worst
