"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation eagerly, in creation order, and
:meth:`Tape.backward` walks that order in reverse accumulating adjoints.
Only first derivatives are supported.

    >>> tape = Tape()
    >>> x = tape.leaf([1.0, 2.0, 3.0], requires_grad=True)
    >>> y = tape.sum(tape.multiply(x, x))
    >>> tape.backward(y)[x.id]
    array([2., 4., 6.])
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


@dataclass(eq=False)
class Node:
    id: int
    values: np.ndarray
    op_kind: str
    parents: tuple[int, ...] = ()
    requires_grad: bool = False
    grad_blocked: bool = False
    attrs: dict = field(default_factory=dict)
    adjoint: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        return float(self.values)


# Each op is a pair (forward, backward).
#   forward(parent_values, attrs) -> values
#   backward(out_adjoint, out_values, parent_values, attrs, need) -> list of
#       parent adjoints (None where need[i] is False)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b


def _bwd_matmul(g, out, vals, attrs, need):
    a, b = vals
    return [g @ b.T if need[0] else None, a.T @ g if need[1] else None]


def _fwd_add(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}; use broadcast_add")
    return a + b


def _bwd_add(g, out, vals, attrs, need):
    return [g if need[0] else None, g if need[1] else None]


def _fwd_broadcast_add(vals, attrs):
    a, b = vals
    _broadcast_shape(a, b, "broadcast_add")
    return a + b


def _bwd_broadcast_add(g, out, vals, attrs, need):
    a, b = vals
    return [_unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None]


def _fwd_multiply(vals, attrs):
    a, b = vals
    _broadcast_shape(a, b, "multiply")
    return a * b


def _bwd_multiply(g, out, vals, attrs, need):
    a, b = vals
    return [_unbroadcast(g * b, a.shape) if need[0] else None,
            _unbroadcast(g * a, b.shape) if need[1] else None]


def _fwd_scale(vals, attrs):
    return attrs["factor"] * vals[0]


def _bwd_scale(g, out, vals, attrs, need):
    return [attrs["factor"] * g]


def _fwd_relu(vals, attrs):
    return np.maximum(vals[0], 0.0)


def _bwd_relu(g, out, vals, attrs, need):
    return [g * (vals[0] > 0.0)]


def sigmoid(x):
    """Numerically stable logistic function on arrays or scalars."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fwd_sigmoid(vals, attrs):
    return sigmoid(vals[0])


def _bwd_sigmoid(g, out, vals, attrs, need):
    return [g * out * (1.0 - out)]


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _fwd_softmax(vals, attrs):
    if vals[0].ndim == 0:
        raise ShapeError("softmax: needs at least one axis, got a scalar")
    return softmax(vals[0])


def _bwd_softmax(g, out, vals, attrs, need):
    return [out * (g - np.sum(g * out, axis=-1, keepdims=True))]


def _fwd_sum(vals, attrs):
    return np.sum(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _expand_reduced(g, shape, attrs):
    axis = attrs.get("axis")
    if axis is not None and not attrs.get("keepdims", False):
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _bwd_sum(g, out, vals, attrs, need):
    return [np.array(_expand_reduced(g, vals[0].shape, attrs))]


def _fwd_mean(vals, attrs):
    if vals[0].size == 0:
        raise ShapeError("mean: empty input")
    return np.mean(vals[0], axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))


def _bwd_mean(g, out, vals, attrs, need):
    x = vals[0]
    count = x.size // max(np.asarray(out).size, 1)
    return [_expand_reduced(g, x.shape, attrs) / count]


def _fwd_log(vals, attrs):
    return np.log(vals[0])


def _bwd_log(g, out, vals, attrs, need):
    return [g / vals[0]]


def _fwd_reshape(vals, attrs):
    x = vals[0]
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def _bwd_reshape(g, out, vals, attrs, need):
    return [g.reshape(vals[0].shape)]


def _fwd_cross_entropy(vals, attrs):
    logits = vals[0]
    labels = attrs["labels"]
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} do not match labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(
            f"cross_entropy: label out of range [0, {logits.shape[1]})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(len(labels)), labels]
    return np.mean(lse - picked)


def _bwd_cross_entropy(g, out, vals, attrs, need):
    logits = vals[0]
    labels = attrs["labels"]
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return [g * p / logits.shape[0]]


def _fwd_stop_gradient(vals, attrs):
    return vals[0]


def _bwd_stop_gradient(g, out, vals, attrs, need):
    return [None]


OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_fwd_matmul, _bwd_matmul),
    "add": (_fwd_add, _bwd_add),
    "broadcast_add": (_fwd_broadcast_add, _bwd_broadcast_add),
    "multiply": (_fwd_multiply, _bwd_multiply),
    "scale": (_fwd_scale, _bwd_scale),
    "relu": (_fwd_relu, _bwd_relu),
    "sigmoid": (_fwd_sigmoid, _bwd_sigmoid),
    "softmax": (_fwd_softmax, _bwd_softmax),
    "sum": (_fwd_sum, _bwd_sum),
    "mean": (_fwd_mean, _bwd_mean),
    "log": (_fwd_log, _bwd_log),
    "reshape": (_fwd_reshape, _bwd_reshape),
    "cross_entropy": (_fwd_cross_entropy, _bwd_cross_entropy),
    "stop_gradient": (_fwd_stop_gradient, _bwd_stop_gradient),
}


class Tape:
    """Append-only record of nodes in creation (topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def leaf(self, values, requires_grad: bool = False) -> Node:
        arr = np.array(values, dtype=np.float64)
        node = Node(len(self.nodes), arr, "leaf", requires_grad=requires_grad)
        self.nodes.append(node)
        return node

    def _resolve(self, parent) -> Node:
        if isinstance(parent, Node):
            if parent.id >= len(self.nodes) or self.nodes[parent.id] is not parent:
                raise ValueError(f"node {parent.id} does not belong to this tape")
            return parent
        if isinstance(parent, (int, np.integer)) and 0 <= parent < len(self.nodes):
            return self.nodes[parent]
        raise ValueError(f"invalid parent handle {parent!r}")

    def record(self, op_kind: str, parents: Sequence, **attrs) -> Node:
        """Apply ``op_kind`` to ``parents`` eagerly and append the result."""
        if op_kind not in OPS:
            raise ValueError(f"unknown op_kind {op_kind!r}")
        forward, _ = OPS[op_kind]
        pnodes = [self._resolve(p) for p in parents]
        values = np.asarray(forward([p.values for p in pnodes], attrs), dtype=np.float64)
        blocked = op_kind == "stop_gradient"
        node = Node(
            len(self.nodes), values, op_kind,
            parents=tuple(p.id for p in pnodes),
            requires_grad=(not blocked) and any(p.requires_grad for p in pnodes),
            grad_blocked=blocked,
            attrs=attrs,
        )
        self.nodes.append(node)
        return node

    # convenience wrappers

    def matmul(self, a, b):
        return self.record("matmul", (a, b))

    def add(self, a, b):
        return self.record("add", (a, b))

    def broadcast_add(self, a, b):
        return self.record("broadcast_add", (a, b))

    def multiply(self, a, b):
        return self.record("multiply", (a, b))

    def scale(self, a, factor: float):
        return self.record("scale", (a,), factor=float(factor))

    def relu(self, a):
        return self.record("relu", (a,))

    def sigmoid(self, a):
        return self.record("sigmoid", (a,))

    def softmax(self, a):
        return self.record("softmax", (a,))

    def sum(self, a, axis=None, keepdims=False):
        return self.record("sum", (a,), axis=axis, keepdims=keepdims)

    def mean(self, a, axis=None, keepdims=False):
        return self.record("mean", (a,), axis=axis, keepdims=keepdims)

    def log(self, a):
        return self.record("log", (a,))

    def reshape(self, a, shape):
        return self.record("reshape", (a,), shape=tuple(shape))

    def cross_entropy(self, logits, labels):
        labels = np.asarray(labels, dtype=np.int64)
        return self.record("cross_entropy", (logits,), labels=labels)

    def stop_gradient(self, a):
        return self.record("stop_gradient", (a,))

    def backward(self, root) -> dict[int, np.ndarray]:
        """Propagate d(root)/d(node) to every node; return leaf adjoints.

        After the call every node on the tape carries an ``adjoint`` of its
        own shape (zeros where no gradient reaches it). The returned dict
        maps the id of each ``requires_grad`` leaf to its adjoint.
        """
        root = self._resolve(root)
        if root.values.ndim != 0 and root.values.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
        adj: list[np.ndarray | None] = [None] * (root.id + 1)
        adj[root.id] = np.ones_like(root.values)
        for node in reversed(self.nodes[: root.id + 1]):
            g = adj[node.id]
            if g is None or not node.parents or node.grad_blocked:
                continue
            pnodes = [self.nodes[i] for i in node.parents]
            need = [p.requires_grad for p in pnodes]
            if not any(need):
                continue
            _, backward = OPS[node.op_kind]
            grads = backward(g, node.values, [p.values for p in pnodes], node.attrs, need)
            for p, n, pg in zip(pnodes, need, grads):
                if not n or pg is None:
                    continue
                if adj[p.id] is None:
                    adj[p.id] = np.array(pg, dtype=np.float64)
                else:
                    adj[p.id] = adj[p.id] + pg
        out = {}
        for node in self.nodes:
            a = adj[node.id] if node.id < len(adj) else None
            node.adjoint = np.zeros_like(node.values) if a is None else a.reshape(node.shape)
            if node.op_kind == "leaf" and node.requires_grad:
                out[node.id] = node.adjoint
        return out
