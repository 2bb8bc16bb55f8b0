"""Reverse-mode differentiation over a recorded operation tape.

A Graph owns an append-only list of nodes; creation order is the
topological order, so backward is a single reverse sweep that visits each
node once and sums gradients where a tensor fans out to several consumers.

Forward values are float32 in normal use. Every op preserves the dtype of
its inputs, so the same graph-building code can be rerun in float64 by the
finite-difference oracle (kernel dispatch routes float64 to the numpy
backend).

Tensors reachable from a graph must not be mutated in place; backward
relies on the recorded forward values.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DimensionError, NonFiniteError


class Node:
    __slots__ = ("id", "op", "inputs", "value", "aux", "param")

    def __init__(self, nid, op, inputs, value, aux=None, param=False):
        self.id = nid
        self.op = op
        self.inputs = inputs
        self.value = value
        self.aux = aux
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"


def _conv_pad(padding, kh, kw):
    if padding == "same":
        return (kh // 2, kw // 2)
    if padding == "valid":
        return (0, 0)
    raise DimensionError(f"padding must be 'same' or 'valid', got {padding!r}")


class Graph:
    """Tape of tensor operations with reverse-mode backward.

    check_finite=False skips the per-op NaN/Inf validation; the trainer uses
    that fast path and runs its own checks on losses, gradients, and
    parameters each step.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def _record(self, op, inputs, value, aux=None, param=False) -> Node:
        if self.check_finite and not np.isfinite(value).all():
            raise NonFiniteError(f"op {op!r} produced non-finite values")
        node = Node(len(self.nodes), op, tuple(inputs), value, aux, param)
        self.nodes.append(node)
        return node

    # -- leaves ------------------------------------------------------------

    def leaf(self, value, param: bool = False) -> Node:
        value = np.asarray(value)
        if value.dtype not in (np.float32, np.float64):
            value = value.astype(np.float32)
        return self._record("leaf", (), value, param=param)

    # -- operations ---------------------------------------------------------

    def conv2d(self, x: Node, kernel: Node, bias: Node, padding: str = "same") -> Node:
        k = kernel.value
        if k.ndim != 4:
            raise DimensionError(f"conv kernel must be rank 4, got shape {k.shape}")
        kh, kw, ci, co = k.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError(f"kernel spatial dims must be odd, got {kh}x{kw}")
        if x.value.ndim not in (3, 4):
            raise DimensionError(f"conv input must be rank 3 or 4, got shape {x.shape}")
        if x.value.shape[-1] != ci:
            raise DimensionError(
                f"conv input has {x.value.shape[-1]} channels, kernel expects {ci}"
            )
        if bias.value.shape != (co,):
            raise DimensionError(f"conv bias must have shape ({co},), got {bias.value.shape}")
        pad = _conv_pad(padding, kh, kw)
        batched = x.value.ndim == 4
        x4 = x.value if batched else x.value[None]
        if x4.shape[1] + 2 * pad[0] < kh or x4.shape[2] + 2 * pad[1] < kw:
            raise DimensionError("conv input smaller than kernel under 'valid' padding")
        y, col = kernels.conv2d_forward(x4, k, bias.value, pad)
        out = y if batched else y[0]
        return self._record("conv2d", (x, kernel, bias), out, aux=(pad, col, batched))

    def relu(self, x: Node) -> Node:
        return self._record("relu", (x,), np.maximum(x.value, 0))

    def softmax_channels(self, x: Node) -> Node:
        v = x.value
        shifted = v - v.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
        return self._record("softmax", (x,), p)

    def log_softmax_channels(self, x: Node) -> Node:
        v = x.value
        shifted = v - v.max(axis=-1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        return self._record("log_softmax", (x,), logp)

    def mul(self, x: Node, y: Node) -> Node:
        if x.value.shape != y.value.shape:
            raise DimensionError(f"mul shapes differ: {x.shape} vs {y.shape}")
        return self._record("mul", (x, y), x.value * y.value)

    def add(self, x: Node, y: Node) -> Node:
        if x.value.shape != y.value.shape:
            raise DimensionError(f"add shapes differ: {x.shape} vs {y.shape}")
        return self._record("add", (x, y), x.value + y.value)

    def scale(self, x: Node, s: float) -> Node:
        return self._record("scale", (x,), x.value * float(s), aux=float(s))

    def sum(self, x: Node) -> Node:
        return self._record("sum", (x,), np.asarray(x.value.sum(), dtype=x.value.dtype))

    def select_channel(self, x: Node, c: int) -> Node:
        if not 0 <= c < x.value.shape[-1]:
            raise DimensionError(f"channel {c} out of range for shape {x.shape}")
        return self._record("select_channel", (x,), np.ascontiguousarray(x.value[..., c]), aux=c)

    def drop_aggregate(self, x: Node, importance: np.ndarray, z) -> Node:
        """Fused sum_{c != z} relu(x * importance[:, c]) / C over channels.

        importance is a constant [K, C] matrix (one column per class) and is
        deliberately outside the graph: no gradient flows into it.
        """
        k, c = importance.shape
        if x.value.shape[-1] != k:
            raise DimensionError(
                f"drop_aggregate input has {x.value.shape[-1]} channels, importance has {k}"
            )
        if z is not None and not 0 <= z < c:
            raise DimensionError(f"drop class {z} out of range for {c} classes")
        imp = np.ascontiguousarray(importance, dtype=x.value.dtype)
        out = kernels.drop_aggregate_forward(x.value, imp, z, 1.0 / c)
        return self._record("drop_aggregate", (x,), out, aux=(imp, z, 1.0 / c))

    # -- backward ------------------------------------------------------------

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Gradients of a scalar loss node w.r.t. every contributing node."""
        if loss.value.shape != ():
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=loss.value.dtype)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.get(node.id)
            if g is None or node.op == "leaf":
                continue
            for inp, ig in zip(node.inputs, self._input_grads(node, g)):
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + ig
                else:
                    grads[inp.id] = ig
        if self.check_finite:
            for nid, g in grads.items():
                if not np.isfinite(g).all():
                    raise NonFiniteError(f"backward produced non-finite gradient at node {nid}")
        return grads

    def _input_grads(self, node: Node, g: np.ndarray):
        op = node.op
        if op == "conv2d":
            x, kernel, _ = node.inputs
            pad, col, batched = node.aux
            x4 = x.value if batched else x.value[None]
            g4 = g if batched else g[None]
            gx, gk, gb = kernels.conv2d_backward(x4, kernel.value, g4, pad, col)
            return (gx if batched else gx[0]), gk, gb
        if op == "relu":
            return (kernels.relu_backward(node.inputs[0].value, g),)
        if op == "softmax":
            p = node.value
            dot = (g * p).sum(axis=-1, keepdims=True)
            return (p * (g - dot),)
        if op == "log_softmax":
            p = np.exp(node.value)
            return (g - p * g.sum(axis=-1, keepdims=True),)
        if op == "mul":
            x, y = node.inputs
            return g * y.value, g * x.value
        if op == "add":
            return g, g
        if op == "scale":
            return (g * node.aux,)
        if op == "sum":
            x = node.inputs[0]
            return (np.full(x.value.shape, g, dtype=x.value.dtype),)
        if op == "select_channel":
            x = node.inputs[0]
            gx = np.zeros_like(x.value)
            gx[..., node.aux] = g
            return (gx,)
        if op == "drop_aggregate":
            imp, z, scl = node.aux
            return (kernels.drop_aggregate_backward(node.inputs[0].value, imp, z, scl, g),)
        raise AssertionError(f"no backward rule for op {op!r}")

    def param_grads(self, grads: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
        """Gradients for every param leaf, zero-filled where none flowed."""
        out = {}
        for node in self.nodes:
            if node.param:
                out[node.id] = grads.get(node.id, np.zeros_like(node.value))
        return out
