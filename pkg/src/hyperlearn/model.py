"""Inner network: an MLP with a designated high-level feature layer.

The feature layer is the penultimate one, whose post-ReLU output ``h``
feeds the linear output head. :func:`gated_forward` rescales those features
by a batch-size dependent gate before the head is applied.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Node, Tape
from .datasets import keyed_rng


class NumericError(ArithmeticError):
    """A run produced non-finite numbers and had to stop."""


OPTIMIZER_KINDS = ("sgd", "momentum", "adam", "sgdhd", "adamhd")
HD_KINDS = ("sgdhd", "adamhd")
LR_MIN = 1e-6


@dataclass
class InnerParams:
    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ValueError("need at least one hidden layer and an output head")
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if w0.shape[1] != w1.shape[0]:
                raise ValueError(f"layer shapes do not compose: {w0.shape} then {w1.shape}")
        for w, b in self.layers:
            if b.shape != (w.shape[1],):
                raise ValueError(f"bias shape {b.shape} does not match weight {w.shape}")

    @classmethod
    def init(cls, sizes, seed: int) -> "InnerParams":
        """He-normal hidden layers, 1/sqrt(fan_in) head, zero biases."""
        rng = keyed_rng(seed, 0x1A4E)
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            gain = 1.0 if i == len(sizes) - 2 else 2.0
            w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(gain / fan_in)
            layers.append((w, np.zeros(fan_out)))
        return cls(layers)

    @property
    def feature_layer_index(self) -> int:
        return len(self.layers) - 2

    @property
    def f(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def d(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in self.layers for a in pair])

    def with_flat(self, vec: np.ndarray) -> "InnerParams":
        layers, k = [], 0
        for w, b in self.layers:
            nw = vec[k:k + w.size].reshape(w.shape)
            k += w.size
            nb = vec[k:k + b.size].copy()
            k += b.size
            layers.append((nw.copy(), nb))
        return InnerParams(layers)

    def copy(self) -> "InnerParams":
        return InnerParams([(w.copy(), b.copy()) for w, b in self.layers])

    def to_tape(self, tape: Tape, requires_grad: bool = True) -> list[tuple[Node, Node]]:
        return [(tape.leaf(w, requires_grad), tape.leaf(b, requires_grad)) for w, b in self.layers]


def _check_input(w_nodes, X: Node):
    d_in = w_nodes[0][0].shape[0]
    if X.values.ndim != 2 or X.shape[1] != d_in:
        raise ValueError(f"input shape {X.shape} does not match first layer ({d_in} inputs)")


def _features(tape: Tape, w_nodes, X: Node) -> Node:
    a = X
    for w, b in w_nodes[:-1]:
        a = tape.relu(tape.broadcast_add(tape.matmul(a, w), b))
    return a


def forward(tape: Tape, w_nodes, X: Node) -> tuple[Node, Node]:
    """Plain pass; returns ``(logits, h)`` with ``h`` of shape (B, f)."""
    _check_input(w_nodes, X)
    h = _features(tape, w_nodes, X)
    w, b = w_nodes[-1]
    return tape.broadcast_add(tape.matmul(h, w), b), h


def gated_forward(tape: Tape, w_nodes, X: Node, s: Node, gate_weights: Node) -> tuple[Node, Node]:
    """Pass with features rescaled as ``h_hat = (A * s) * h + h``.

    One scalar ``s`` gates every row of the batch. The inner weights are
    placed behind stop-gradients, so only ``s`` and ``gate_weights`` (and
    whatever produced them) receive adjoints.
    """
    _check_input(w_nodes, X)
    f = w_nodes[-1][0].shape[0]
    if gate_weights.shape != (f,):
        raise ValueError(f"gate weights have shape {gate_weights.shape}, expected ({f},)")
    if s.values.size != 1:
        raise ValueError(f"gate input s must be a scalar, got shape {s.shape}")
    frozen = [(tape.stop_gradient(w), tape.stop_gradient(b)) for w, b in w_nodes]
    h = _features(tape, frozen, X)
    gate = tape.multiply(gate_weights, s)
    h_hat = tape.add(tape.multiply(h, gate), h)
    w, b = frozen[-1]
    return tape.broadcast_add(tape.matmul(h_hat, w), b), h_hat


def loss(tape: Tape, logits: Node, labels) -> Node:
    """Mean softmax cross-entropy over the batch."""
    return tape.cross_entropy(logits, labels)


def predict(params: InnerParams, X: np.ndarray) -> np.ndarray:
    """Logits without building a tape."""
    a = X
    for w, b in params.layers[:-1]:
        a = np.maximum(a @ w + b, 0.0)
    w, b = params.layers[-1]
    return a @ w + b


def loss_and_grad(params: InnerParams, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mini-batch loss and its flat gradient (the batch-averaged gradient)."""
    tape = Tape()
    w_nodes = params.to_tape(tape)
    logits, _ = forward(tape, w_nodes, tape.leaf(X))
    L = loss(tape, logits, y)
    grads = tape.backward(L)
    flat = np.concatenate([grads[n.id].ravel() for pair in w_nodes for n in pair])
    return L.item(), flat


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hyper_lr: float = 0.0
    lr_min: float = LR_MIN
    step_count: int = 0
    buffers: dict = field(default_factory=dict)
    prev_grad: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; choose from {OPTIMIZER_KINDS}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def hd_update(opt: OptimizerState, grad: np.ndarray) -> OptimizerState:
    """Hypergradient step on the learning rate from consecutive gradients.

    ``lr += hyper_lr * <grad, prev_grad>``, clamped below at ``lr_min``.
    """
    if opt.prev_grad is None:
        raise ValueError("hd_update needs a previous gradient (step_count >= 1)")
    h = float(np.dot(grad, opt.prev_grad))
    new_lr = opt.lr + opt.hyper_lr * h
    if not np.isfinite(new_lr):
        raise NumericError(f"learning rate became non-finite (hypergradient {h!r})")
    opt.lr = max(new_lr, opt.lr_min)
    opt.prev_grad = grad.copy()
    return opt


def inner_step(params: InnerParams, opt: OptimizerState, grad: np.ndarray) -> tuple[InnerParams, OptimizerState]:
    """One optimizer update of the inner weights from a flat gradient."""
    grad = np.asarray(grad, dtype=np.float64)
    w = params.flat()
    if grad.shape != w.shape:
        raise ValueError(f"gradient has {grad.size} elements, model has {w.size}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.sum(~np.isfinite(grad)))
        raise NumericError(f"{bad} non-finite gradient elements at step {opt.step_count}")

    if opt.kind in HD_KINDS:
        if opt.step_count >= 1:
            hd_update(opt, grad)
        else:
            opt.prev_grad = grad.copy()

    buf = opt.buffers
    if opt.kind == "sgd":
        w = w - opt.lr * grad
    elif opt.kind in ("momentum", "sgdhd"):
        v = opt.momentum * buf.get("v", 0.0) + grad
        buf["v"] = v
        w = w - opt.lr * v
    else:
        t = opt.step_count + 1
        m = opt.beta1 * buf.get("m", 0.0) + (1 - opt.beta1) * grad
        v = opt.beta2 * buf.get("v", 0.0) + (1 - opt.beta2) * grad * grad
        buf["m"], buf["v"] = m, v
        m_hat = m / (1 - opt.beta1 ** t)
        v_hat = v / (1 - opt.beta2 ** t)
        w = w - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    opt.step_count += 1
    return params.with_flat(w), opt
