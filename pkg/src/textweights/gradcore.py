"""Reverse-mode automatic differentiation over dense float64 matrices.

A :class:`Graph` is declared once (inputs, constants and op nodes) and then
evaluated any number of times with different input bindings.  Every value is
a 2-D ``numpy.ndarray`` of dtype float64.  Gradients are accumulated in
reverse declaration order and, for each node, into its parents in the order
they were declared, so repeated runs are bit-identical.

Besides the elementary op kinds, a few structured ops (block-wise linear
maps, token packing and multi-head attention) are provided so that the
transformer denoiser can be expressed without per-item Python loops.  All of
them are validated against central finite differences in the test-suite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class GraphError(ValueError):
    """Raised when a node cannot be evaluated; carries the node description."""

    def __init__(self, node: "Node", message: str):
        self.node = node
        super().__init__(f"node {node.describe()}: {message}")


class Node:
    __slots__ = ("index", "op", "parents", "attrs", "name", "value", "grad")

    def __init__(self, index, op, parents, attrs, name):
        self.index = index
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.name = name
        self.value = None
        self.grad = None

    def describe(self) -> str:
        label = f"#{self.index}<{self.op}>"
        return f"{label}'{self.name}'" if self.name else label

    def __repr__(self):
        return f"Node({self.describe()})"


# ---------------------------------------------------------------------------
# op kernels: forward(values, attrs) -> value ; backward(g, values, out, attrs)
# -> tuple of parent grads (None where no gradient flows)
# ---------------------------------------------------------------------------

def _matmul_f(v, a):
    x, w = v
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"matmul shapes {x.shape} @ {w.shape}")
    return x @ w


def _matmul_b(g, v, out, a):
    x, w = v
    return g @ w.T, x.T @ g


def _add_f(v, a):
    x, y = v
    if x.shape == y.shape or (y.shape[0] == 1 and y.shape[1] == x.shape[1]):
        return x + y
    raise ValueError(f"add shapes {x.shape} + {y.shape}")


def _add_b(g, v, out, a):
    x, y = v
    if y.shape == x.shape:
        return g, g
    return g, g.sum(axis=0, keepdims=True)


def _sub_f(v, a):
    x, y = v
    if x.shape != y.shape:
        raise ValueError(f"sub shapes {x.shape} - {y.shape}")
    return x - y


def _sub_b(g, v, out, a):
    return g, -g


def _mul_f(v, a):
    x, y = v
    if x.shape != y.shape:
        raise ValueError(f"mul shapes {x.shape} * {y.shape}")
    return x * y


def _mul_b(g, v, out, a):
    x, y = v
    return g * y, g * x


def _scale_f(v, a):
    return v[0] * a["c"]


def _scale_b(g, v, out, a):
    return (g * a["c"],)


def _gelu_f(v, a):
    x = v[0]
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x * x * x)))


def _gelu_b(g, v, out, a):
    x = v[0]
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return (g * d,)


def _relu_f(v, a):
    return np.maximum(v[0], 0.0)


def _relu_b(g, v, out, a):
    return (g * (v[0] > 0.0),)


def _layer_norm_f(v, a):
    x, gamma, beta = v
    if gamma.shape != (1, x.shape[1]) or beta.shape != (1, x.shape[1]):
        raise ValueError(f"layer-norm gain/bias must be 1x{x.shape[1]}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    xhat = xc / np.sqrt(var + a["eps"])
    return xhat * gamma + beta


def _layer_norm_b(g, v, out, a):
    x, gamma, beta = v
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a["eps"])
    xhat = xc * inv
    gx_hat = g * gamma
    gx = inv * (gx_hat - gx_hat.mean(axis=1, keepdims=True)
                - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True))
    return gx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_f(v, a):
    return _softmax(v[0])


def _softmax_b(g, v, out, a):
    return (out * (g - (g * out).sum(axis=1, keepdims=True)),)


def _transpose_f(v, a):
    return np.ascontiguousarray(v[0].T)


def _transpose_b(g, v, out, a):
    return (g.T,)


def _concat_rows_f(v, a):
    cols = {x.shape[1] for x in v}
    if len(cols) != 1:
        raise ValueError(f"concat-rows column counts differ: {sorted(cols)}")
    return np.concatenate(v, axis=0)


def _concat_rows_b(g, v, out, a):
    grads, start = [], 0
    for x in v:
        grads.append(g[start:start + x.shape[0]])
        start += x.shape[0]
    return tuple(grads)


def _slice_rows_f(v, a):
    x = v[0]
    if not 0 <= a["start"] < a["stop"] <= x.shape[0]:
        raise ValueError(f"slice-rows [{a['start']}:{a['stop']}] of {x.shape[0]} rows")
    return x[a["start"]:a["stop"]]


def _slice_rows_b(g, v, out, a):
    full = np.zeros_like(v[0])
    full[a["start"]:a["stop"]] = g
    return (full,)


def _slice_cols_f(v, a):
    x = v[0]
    if not 0 <= a["start"] < a["stop"] <= x.shape[1]:
        raise ValueError(f"slice-cols [{a['start']}:{a['stop']}] of {x.shape[1]} cols")
    return np.ascontiguousarray(x[:, a["start"]:a["stop"]])


def _slice_cols_b(g, v, out, a):
    full = np.zeros_like(v[0])
    full[:, a["start"]:a["stop"]] = g
    return (full,)


def _reduce_mean_f(v, a):
    return np.array([[v[0].mean()]])


def _reduce_mean_b(g, v, out, a):
    x = v[0]
    return (np.full_like(x, g[0, 0] / x.size),)


def _mse_f(v, a):
    x, y = v
    if x.shape != y.shape:
        raise ValueError(f"mse shapes {x.shape} vs {y.shape}")
    d = x - y
    return np.array([[np.mean(d * d)]])


def _mse_b(g, v, out, a):
    x, y = v
    d = (2.0 * g[0, 0] / x.size) * (x - y)
    return d, -d


def _ce_f(v, a):
    z = v[0]
    t = a["targets"]
    if t.shape != (z.shape[0],):
        raise ValueError(f"cross-entropy targets {t.shape} for logits {z.shape}")
    if t.size and (t.min() < 0 or t.max() >= z.shape[1]):
        raise ValueError("cross-entropy target out of range")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return np.array([[np.mean(lse - z[np.arange(z.shape[0]), t])]])


def _ce_b(g, v, out, a):
    z = v[0]
    p = _softmax(z)
    p[np.arange(z.shape[0]), a["targets"]] -= 1.0
    return (p * (g[0, 0] / z.shape[0]),)


def _log_f(v, a):
    x = v[0]
    if np.any(x <= 0.0):
        raise ValueError("log of non-positive entry")
    return np.log(x)


def _log_b(g, v, out, a):
    return (g / v[0],)


def _sigmoid_f(v, a):
    x = v[0]
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _sigmoid_b(g, v, out, a):
    return (g * out * (1.0 - out),)


def _clamp_f(v, a):
    return np.clip(v[0], a["lo"], a["hi"])


def _clamp_b(g, v, out, a):
    x = v[0]
    return (g * ((x >= a["lo"]) & (x <= a["hi"])),)


def _normalize_rows_f(v, a):
    x = v[0]
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(n == 0.0):
        raise ValueError("zero-norm row cannot be normalized")
    return x / n


def _normalize_rows_b(g, v, out, a):
    x = v[0]
    n = np.sqrt((x * x).sum(axis=1, keepdims=True))
    return ((g - out * (g * out).sum(axis=1, keepdims=True)) / n,)


def _take_cols_f(v, a):
    x = v[0]
    idx = a["index"]
    if idx.shape[0] != x.shape[0]:
        raise ValueError(f"take-cols index rows {idx.shape[0]} vs {x.shape[0]}")
    return np.take_along_axis(x, idx, axis=1)


def _take_cols_b(g, v, out, a):
    x = v[0]
    full = np.zeros_like(x)
    rows = np.broadcast_to(np.arange(x.shape[0])[:, None], a["index"].shape)
    np.add.at(full, (rows, a["index"]), g)
    return (full,)


def _block_linear_f(v, a):
    x, w, b = v
    nb = a["blocks"]
    if x.shape[1] % nb or w.shape[0] != x.shape[1] or b.shape != (nb, w.shape[1]):
        raise ValueError(f"block-linear shapes x{x.shape} w{w.shape} b{b.shape} blocks={nb}")
    s, h = x.shape[1] // nb, w.shape[1]
    xb = x.reshape(x.shape[0], nb, s).transpose(1, 0, 2)
    y = np.matmul(xb, w.reshape(nb, s, h)) + b[:, None, :]
    return np.ascontiguousarray(y.transpose(1, 0, 2)).reshape(-1, h)


def _block_linear_b(g, v, out, a):
    x, w, b = v
    nb = a["blocks"]
    s, h = x.shape[1] // nb, w.shape[1]
    gb = g.reshape(x.shape[0], nb, h).transpose(1, 0, 2)
    xb = x.reshape(x.shape[0], nb, s).transpose(1, 0, 2)
    w3 = w.reshape(nb, s, h)
    gx = np.matmul(gb, w3.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(x.shape)
    gw = np.matmul(xb.transpose(0, 2, 1), gb).reshape(w.shape)
    return gx, gw, gb.sum(axis=1)


def _block_unlinear_f(v, a):
    t, w, b = v
    nb = a["blocks"]
    h = t.shape[1]
    if t.shape[0] % nb or w.shape[0] != nb * h or b.shape != (nb, w.shape[1]):
        raise ValueError(f"block-unlinear shapes t{t.shape} w{w.shape} b{b.shape} blocks={nb}")
    items, s = t.shape[0] // nb, w.shape[1]
    tb = t.reshape(items, nb, h).transpose(1, 0, 2)
    y = np.matmul(tb, w.reshape(nb, h, s)) + b[:, None, :]
    return np.ascontiguousarray(y.transpose(1, 0, 2)).reshape(items, nb * s)


def _block_unlinear_b(g, v, out, a):
    t, w, b = v
    nb = a["blocks"]
    h = t.shape[1]
    items, s = t.shape[0] // nb, w.shape[1]
    gb = g.reshape(items, nb, s).transpose(1, 0, 2)
    tb = t.reshape(items, nb, h).transpose(1, 0, 2)
    w3 = w.reshape(nb, h, s)
    gt = np.matmul(gb, w3.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(t.shape)
    gw = np.matmul(tb.transpose(0, 2, 1), gb).reshape(w.shape)
    return gt, gw, gb.sum(axis=1)


def _concat_tokens_f(v, a):
    counts = a["counts"]
    h = v[0].shape[1]
    items = v[0].shape[0] // counts[0]
    parts = []
    for x, c in zip(v, counts):
        if x.shape != (items * c, h):
            raise ValueError(f"concat-tokens part {x.shape} expected {(items * c, h)}")
        parts.append(x.reshape(items, c, h))
    return np.concatenate(parts, axis=1).reshape(-1, h)


def _concat_tokens_b(g, v, out, a):
    counts = a["counts"]
    h = g.shape[1]
    items = g.shape[0] // sum(counts)
    g3 = g.reshape(items, sum(counts), h)
    grads, start = [], 0
    for c in counts:
        grads.append(np.ascontiguousarray(g3[:, start:start + c]).reshape(-1, h))
        start += c
    return tuple(grads)


def _slice_tokens_f(v, a):
    x = v[0]
    per = a["per_item"]
    if x.shape[0] % per or a["start"] + a["count"] > per:
        raise ValueError(f"slice-tokens of {x.shape[0]} rows with {per} per item")
    x3 = x.reshape(-1, per, x.shape[1])
    return np.ascontiguousarray(x3[:, a["start"]:a["start"] + a["count"]]).reshape(-1, x.shape[1])


def _slice_tokens_b(g, v, out, a):
    x = v[0]
    per = a["per_item"]
    full = np.zeros((x.shape[0] // per, per, x.shape[1]))
    full[:, a["start"]:a["start"] + a["count"]] = g.reshape(-1, a["count"], x.shape[1])
    return (full.reshape(x.shape),)


def _heads(x, per, heads):
    items = x.shape[0] // per
    dh = x.shape[1] // heads
    return x.reshape(items, per, heads, dh).transpose(0, 2, 1, 3)


def _merge_heads(x):
    items, heads, per, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(items * per, heads * dh)


def _attention_f(v, a):
    q, k, val = v
    per, heads = a["per_item"], a["heads"]
    if not (q.shape == k.shape == val.shape) or q.shape[0] % per or q.shape[1] % heads:
        raise ValueError(f"attention shapes q{q.shape} k{k.shape} v{val.shape}")
    scale = 1.0 / math.sqrt(q.shape[1] // heads)
    qh, kh, vh = _heads(q, per, heads), _heads(k, per, heads), _heads(val, per, heads)
    p = _softmax(np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale)
    return _merge_heads(np.matmul(p, vh))


def _attention_b(g, v, out, a):
    q, k, val = v
    per, heads = a["per_item"], a["heads"]
    scale = 1.0 / math.sqrt(q.shape[1] // heads)
    qh, kh, vh = _heads(q, per, heads), _heads(k, per, heads), _heads(val, per, heads)
    p = _softmax(np.matmul(qh, kh.transpose(0, 1, 3, 2)) * scale)
    gh = _heads(g, per, heads)
    gv = np.matmul(p.transpose(0, 1, 3, 2), gh)
    gp = np.matmul(gh, vh.transpose(0, 1, 3, 2))
    gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
    gq = np.matmul(gs, kh)
    gk = np.matmul(gs.transpose(0, 1, 3, 2), qh)
    return _merge_heads(gq), _merge_heads(gk), _merge_heads(gv)


@dataclass(frozen=True)
class OpKind:
    forward: Callable
    backward: Callable


OPS: dict[str, OpKind] = {
    "matmul": OpKind(_matmul_f, _matmul_b),
    "add": OpKind(_add_f, _add_b),
    "sub": OpKind(_sub_f, _sub_b),
    "mul": OpKind(_mul_f, _mul_b),
    "scale": OpKind(_scale_f, _scale_b),
    "gelu": OpKind(_gelu_f, _gelu_b),
    "relu": OpKind(_relu_f, _relu_b),
    "layer-norm": OpKind(_layer_norm_f, _layer_norm_b),
    "softmax-rows": OpKind(_softmax_f, _softmax_b),
    "transpose": OpKind(_transpose_f, _transpose_b),
    "concat-rows": OpKind(_concat_rows_f, _concat_rows_b),
    "slice-rows": OpKind(_slice_rows_f, _slice_rows_b),
    "slice-cols": OpKind(_slice_cols_f, _slice_cols_b),
    "reduce-mean": OpKind(_reduce_mean_f, _reduce_mean_b),
    "mse-loss": OpKind(_mse_f, _mse_b),
    "cross-entropy-loss": OpKind(_ce_f, _ce_b),
    "log": OpKind(_log_f, _log_b),
    "sigmoid": OpKind(_sigmoid_f, _sigmoid_b),
    "clamp": OpKind(_clamp_f, _clamp_b),
    "normalize-rows": OpKind(_normalize_rows_f, _normalize_rows_b),
    "take-cols": OpKind(_take_cols_f, _take_cols_b),
    "block-linear": OpKind(_block_linear_f, _block_linear_b),
    "block-unlinear": OpKind(_block_unlinear_f, _block_unlinear_b),
    "concat-tokens": OpKind(_concat_tokens_f, _concat_tokens_b),
    "slice-tokens": OpKind(_slice_tokens_f, _slice_tokens_b),
    "attention": OpKind(_attention_f, _attention_b),
}


def as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ValueError(f"expected a matrix, got {arr.ndim}-d array")
    return arr


class Graph:
    """A declared computation DAG with named inputs and a single root.

    Nodes are appended in declaration order, which is also a valid
    topological order since every op takes already-declared parents.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.root: Node | None = None

    # -- declaration -------------------------------------------------------
    def _add(self, op, parents=(), name=None, **attrs) -> Node:
        for p in parents:
            if not isinstance(p, Node) or p.index >= len(self.nodes) or self.nodes[p.index] is not p:
                raise ValueError(f"parent {p!r} does not belong to this graph")
        node = Node(len(self.nodes), op, tuple(parents), attrs, name)
        self.nodes.append(node)
        self.root = node
        return node

    def input(self, name: str) -> Node:
        if name in self.inputs:
            raise ValueError(f"duplicate input {name!r}")
        node = self._add("input", name=name)
        self.inputs[name] = node
        return node

    def const(self, value, name=None) -> Node:
        node = self._add("const", name=name)
        node.attrs["value"] = as_matrix(value)
        return node

    def set_root(self, node: Node):
        self.root = node
        return node

    def matmul(self, x, w, name=None):
        return self._add("matmul", (x, w), name)

    def add(self, x, y, name=None):
        return self._add("add", (x, y), name)

    def sub(self, x, y, name=None):
        return self._add("sub", (x, y), name)

    def mul(self, x, y, name=None):
        return self._add("mul", (x, y), name)

    def scale(self, x, c: float, name=None):
        return self._add("scale", (x,), name, c=float(c))

    def gelu(self, x, name=None):
        return self._add("gelu", (x,), name)

    def relu(self, x, name=None):
        return self._add("relu", (x,), name)

    def activation(self, x, kind: str, name=None):
        if kind == "gelu":
            return self.gelu(x, name)
        if kind == "relu":
            return self.relu(x, name)
        if kind == "none":
            return x
        raise ValueError(f"unknown activation {kind!r}")

    def layer_norm(self, x, gamma, beta, eps=1e-5, name=None):
        return self._add("layer-norm", (x, gamma, beta), name, eps=float(eps))

    def softmax_rows(self, x, name=None):
        return self._add("softmax-rows", (x,), name)

    def transpose(self, x, name=None):
        return self._add("transpose", (x,), name)

    def concat_rows(self, *xs, name=None):
        return self._add("concat-rows", xs, name)

    def slice_rows(self, x, start, stop, name=None):
        return self._add("slice-rows", (x,), name, start=int(start), stop=int(stop))

    def slice_cols(self, x, start, stop, name=None):
        return self._add("slice-cols", (x,), name, start=int(start), stop=int(stop))

    def reduce_mean(self, x, name=None):
        return self._add("reduce-mean", (x,), name)

    def mse_loss(self, x, y, name=None):
        return self._add("mse-loss", (x, y), name)

    def cross_entropy_loss(self, logits, targets, name=None):
        t = np.asarray(targets, dtype=np.int64).reshape(-1)
        return self._add("cross-entropy-loss", (logits,), name, targets=t)

    def log(self, x, name=None):
        return self._add("log", (x,), name)

    def sigmoid(self, x, name=None):
        return self._add("sigmoid", (x,), name)

    def clamp(self, x, lo, hi, name=None):
        return self._add("clamp", (x,), name, lo=float(lo), hi=float(hi))

    def normalize_rows(self, x, name=None):
        return self._add("normalize-rows", (x,), name)

    def take_cols(self, x, index, name=None):
        return self._add("take-cols", (x,), name, index=np.asarray(index, dtype=np.int64))

    def block_linear(self, x, w, b, blocks, name=None):
        return self._add("block-linear", (x, w, b), name, blocks=int(blocks))

    def block_unlinear(self, t, w, b, blocks, name=None):
        return self._add("block-unlinear", (t, w, b), name, blocks=int(blocks))

    def concat_tokens(self, parts, counts, name=None):
        return self._add("concat-tokens", tuple(parts), name, counts=tuple(int(c) for c in counts))

    def slice_tokens(self, x, per_item, start, count, name=None):
        return self._add("slice-tokens", (x,), name, per_item=int(per_item),
                         start=int(start), count=int(count))

    def attention(self, q, k, v, per_item, heads, name=None):
        return self._add("attention", (q, k, v), name, per_item=int(per_item), heads=int(heads))

    # -- execution ---------------------------------------------------------
    def set_attr(self, node: Node, **attrs):
        """Rebind data-dependent attributes (targets, gather indices)."""
        node.attrs.update(attrs)
        if "targets" in attrs:
            node.attrs["targets"] = np.asarray(attrs["targets"], dtype=np.int64).reshape(-1)
        if "index" in attrs:
            node.attrs["index"] = np.asarray(attrs["index"], dtype=np.int64)

    def evaluate(self, inputs: Mapping[str, object], output: Node | None = None) -> np.ndarray:
        missing = [n for n in self.inputs if n not in inputs]
        if missing:
            raise GraphError(self.inputs[missing[0]], "input not bound")
        stop = (output or self.root).index
        for node in self.nodes[:stop + 1]:
            node.grad = None
            if node.op == "input":
                val = as_matrix(inputs[node.name])
            elif node.op == "const":
                val = node.attrs["value"]
            else:
                kind = OPS[node.op]
                try:
                    with np.errstate(all="ignore"):
                        val = kind.forward([p.value for p in node.parents], node.attrs)
                except ValueError as exc:
                    raise GraphError(node, str(exc)) from None
            if not np.all(np.isfinite(val)):
                raise GraphError(node, "non-finite value")
            node.value = val
        return self.nodes[stop].value

    def backward(self, output: Node | None = None, wrt: Iterable[Node] | None = None):
        """Reverse accumulation from a scalar node whose value is current."""
        root = output or self.root
        if root.value is None or root.value.shape != (1, 1):
            raise GraphError(root, "gradient root must be an evaluated 1x1 scalar")
        nodes = self.nodes[:root.index + 1]
        needs = [False] * len(nodes)
        targets = None if wrt is None else {n.index for n in wrt}
        for node in nodes:
            if node.op == "input":
                needs[node.index] = targets is None or node.index in targets
            elif node.op != "const":
                needs[node.index] = any(needs[p.index] for p in node.parents)
        for node in nodes:
            node.grad = None
        root.grad = np.ones((1, 1))
        for node in reversed(nodes):
            if node.grad is None or node.op in ("input", "const") or not needs[node.index]:
                continue
            vals = [p.value for p in node.parents]
            grads = OPS[node.op].backward(node.grad, vals, node.value, node.attrs)
            for parent, g in zip(node.parents, grads):
                if g is None or not needs[parent.index]:
                    continue
                parent.grad = g.copy() if parent.grad is None else parent.grad + g

    def gradient(self, inputs: Mapping[str, object], wrt: Sequence[str],
                 output: Node | None = None) -> dict[str, np.ndarray]:
        self.evaluate(inputs, output)
        nodes = [self.inputs[n] for n in wrt]
        self.backward(output, nodes)
        return {n: (node.grad if node.grad is not None else np.zeros_like(node.value))
                for n, node in zip(wrt, nodes)}


def evaluate(graph: Graph, inputs: Mapping[str, object]) -> np.ndarray:
    return graph.evaluate(inputs)


def gradient(graph: Graph, inputs: Mapping[str, object], wrt: Sequence[str]) -> dict[str, np.ndarray]:
    return graph.gradient(inputs, wrt)


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    passed: bool
    worst_input: str | None = None
    worst_index: tuple | None = None


def finite_diff_check(graph: Graph, inputs: Mapping[str, object], step: float = 1e-5,
                      tolerance: float = 1e-4, wrt: Sequence[str] | None = None,
                      coords_per_input: int | None = None,
                      rng: np.random.Generator | None = None) -> FiniteDiffReport:
    """Compare reverse-mode gradients with central differences coordinate-wise.

    With ``coords_per_input`` only that many coordinates of each input,
    drawn from ``rng`` without replacement, are perturbed.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    names = list(wrt) if wrt is not None else list(graph.inputs)
    base = {k: as_matrix(v).copy() for k, v in inputs.items()}
    analytic = graph.gradient(base, names)
    if coords_per_input is not None and rng is None:
        rng = np.random.default_rng(0)
    worst, where = 0.0, (None, None)
    for name in names:
        x = base[name]
        coords = list(np.ndindex(x.shape))
        if coords_per_input is not None and coords_per_input < len(coords):
            pick = np.sort(rng.choice(len(coords), size=coords_per_input, replace=False))
            coords = [coords[i] for i in pick]
        for idx in coords:
            orig = x[idx]
            x[idx] = orig + step
            fp = graph.evaluate(base)[0, 0]
            x[idx] = orig - step
            fm = graph.evaluate(base)[0, 0]
            x[idx] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = analytic[name][idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst, where = rel, (name, idx)
    graph.evaluate(base)
    return FiniteDiffReport(float(worst), bool(worst < tolerance), where[0], where[1])


class Adam:
    """Adam over a dict of float64 parameter matrices, updated in place."""

    def __init__(self, params: Mapping[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: Mapping[str, np.ndarray], lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        f = max_norm / total
        for k in grads:
            grads[k] = grads[k] * f
    return total
