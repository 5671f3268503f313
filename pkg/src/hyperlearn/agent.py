"""The batch-size agent: sample generation, softmax mixing and the codec.

Samples live in logit space. The agent maps a validation mini-batch to
``N`` offsets that are added to the logit of the current batch size, so a
zero network proposes "keep the current batch size".
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Node, Tape, sigmoid
from .datasets import keyed_rng

# Half-unit margin used to centre samples on batch sizes sitting at the
# codec bounds (their logits are infinite).
EDGE_MARGIN = 0.25


@dataclass(frozen=True)
class BatchSizeCodec:
    """Sigmoid bijection between batch sizes in [b_min, b_max] and logits."""

    b_min: int = 16
    b_max: int = 600

    def __post_init__(self):
        if not 1 <= self.b_min < self.b_max:
            raise ValueError(f"need 1 <= b_min < b_max, got ({self.b_min}, {self.b_max})")

    @property
    def span(self) -> int:
        return self.b_max - self.b_min

    def decode(self, b: float) -> int:
        b = float(b)
        if math.isnan(b):
            raise ValueError("cannot decode a NaN logit")
        x = self.b_min + self.span * float(sigmoid(b))
        return int(min(max(math.floor(x + 0.5), self.b_min), self.b_max))

    def encode(self, B: float) -> float:
        if not self.b_min < B < self.b_max:
            raise ValueError(
                f"batch size {B} is outside the open interval ({self.b_min}, {self.b_max}); "
                f"clamp it first (see BatchSizeCodec.center_logit)")
        p = (B - self.b_min) / self.span
        return math.log(p) - math.log1p(-p)

    def center_logit(self, B: float) -> float:
        """Logit of ``B`` after pulling endpoint values just inside the bounds."""
        B = min(max(B, self.b_min + EDGE_MARGIN), self.b_max - EDGE_MARGIN)
        return self.encode(B)


def decode_batch_size(b: float, codec: BatchSizeCodec) -> int:
    return codec.decode(b)


def encode_batch_size(B: float, codec: BatchSizeCodec) -> float:
    return codec.encode(B)


@dataclass
class AgentState:
    """Pooling MLP weights, mixing weights ``alpha`` and gate weights."""

    phi: list[tuple[np.ndarray, np.ndarray]]
    alpha: np.ndarray
    gate: np.ndarray

    @classmethod
    def init(cls, input_dim: int, f: int, n_samples: int = 10, hidden: int = 32,
             seed: int = 0) -> "AgentState":
        """Random hidden layer; zero output layer and zero gate (null action)."""
        if n_samples < 1:
            raise ValueError("need at least one sample")
        rng = keyed_rng(seed, 0xA6E7)
        w1 = rng.standard_normal((input_dim, hidden)) * np.sqrt(2.0 / input_dim)
        phi = [(w1, np.zeros(hidden)), (np.zeros((hidden, n_samples)), np.zeros(n_samples))]
        alpha = keyed_rng(seed, 0xA1FA).standard_normal(n_samples)
        return cls(phi, alpha, np.zeros(f))

    @classmethod
    def zeros(cls, input_dim: int, f: int, n_samples: int = 10, hidden: int = 32) -> "AgentState":
        phi = [(np.zeros((input_dim, hidden)), np.zeros(hidden)),
               (np.zeros((hidden, n_samples)), np.zeros(n_samples))]
        return cls(phi, np.zeros(n_samples), np.zeros(f))

    @property
    def n_samples(self) -> int:
        return self.alpha.shape[0]

    def copy(self) -> "AgentState":
        return AgentState([(w.copy(), b.copy()) for w, b in self.phi],
                          self.alpha.copy(), self.gate.copy())

    def to_tape(self, tape: Tape, requires_grad: bool = True) -> "AgentNodes":
        return AgentNodes(
            [(tape.leaf(w, requires_grad), tape.leaf(b, requires_grad)) for w, b in self.phi],
            tape.leaf(self.alpha, requires_grad),
            tape.leaf(self.gate, requires_grad),
        )


class AgentNodes(NamedTuple):
    phi: list[tuple[Node, Node]]
    alpha: Node
    gate: Node


def agent_sample(tape: Tape, nodes: AgentNodes, X_val: Node, B_cur: float,
                 codec: BatchSizeCodec) -> Node:
    """Length-N sample logits ``center_logit(B_cur) + MLP(mean over rows of X_val)``."""
    if X_val.values.ndim != 2 or X_val.shape[0] < 1:
        raise ValueError(f"X_val must be a non-empty V x D matrix, got {X_val.shape}")
    if not np.all(np.isfinite(X_val.values)):
        raise ValueError("X_val contains non-finite values")
    a = tape.mean(X_val, axis=0, keepdims=True)
    (w1, b1), (w2, b2) = nodes.phi
    a = tape.relu(tape.broadcast_add(tape.matmul(a, w1), b1))
    offsets = tape.broadcast_add(tape.matmul(a, w2), b2)
    offsets = tape.reshape(offsets, (offsets.shape[1],))
    center = tape.leaf(codec.center_logit(B_cur))
    return tape.broadcast_add(offsets, center)


def mix_samples(tape: Tape, S: Node, alpha: Node) -> Node:
    """Softmax(alpha)-weighted combination of the samples, a scalar node."""
    if S.values.ndim != 1 or S.shape != alpha.shape:
        raise ValueError(f"sample/alpha length mismatch: {S.shape} vs {alpha.shape}")
    return tape.sum(tape.multiply(tape.softmax(alpha), S))


def select_best(S, alpha) -> float:
    """Sample with the largest alpha; ties go to the lowest index."""
    S = np.asarray(S, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if S.size == 0 or alpha.size == 0:
        raise ValueError("select_best needs non-empty inputs")
    if S.shape != alpha.shape:
        raise ValueError(f"sample/alpha length mismatch: {S.shape} vs {alpha.shape}")
    return float(S[int(np.argmax(alpha))])


def reset_alpha(agent: AgentState, seed: int) -> AgentState:
    """Redraw alpha i.i.d. standard normal; phi and gate are left alone."""
    agent.alpha = keyed_rng(seed, 0xA1FA).standard_normal(agent.n_samples)
    return agent
