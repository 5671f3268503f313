"""Finite-difference checks of every gradient path used in training.

Each suite compares tape adjoints with central differences and reports the
worst relative error, measured as ``|a - n| / max(|a|, |n|, 1e-3)`` so that
a 1e-4 threshold also admits absolute errors below 1e-7 near zero.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import autodiff
from .agent import AgentState, BatchSizeCodec, agent_sample, mix_samples
from .autodiff import Tape
from .model import InnerParams, forward, gated_forward, loss
from .loop import meta_step

TOLERANCE = 1e-4
FD_STEP = 1e-5


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
    return float(np.max(np.abs(a - n) / denom))


def central_difference(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """d f / d x by perturbing ``x`` in place, one entry at a time."""
    grad = np.zeros_like(x)
    flat, g = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        g[i] = (up - down) / (2 * step)
    return grad


def check_tape_function(build: Callable[[Tape, list], object], inputs: list[np.ndarray]) -> float:
    """Max relative error of d build(inputs) / d inputs, tape vs differences."""
    tape = Tape()
    leaves = [tape.leaf(x, requires_grad=True) for x in inputs]
    adj = tape.backward(build(tape, leaves))

    def value():
        t = Tape()
        return build(t, [t.leaf(x) for x in inputs]).item()

    return max(rel_error(adj[leaf.id], central_difference(value, x))
               for leaf, x in zip(leaves, inputs))


def _uniform(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def suite_ops(seed: int = 0) -> float:
    """Each differentiable op, reduced to a scalar with random weights."""
    rng = np.random.default_rng(seed)
    worst = 0.0

    def weighted(build, shape):
        r = rng.standard_normal(shape)

        def f(tape, xs):
            return tape.sum(tape.multiply(build(tape, xs), tape.leaf(r)))
        return f

    cases = [
        (lambda t, x: t.matmul(x[0], x[1]), [_uniform(rng, 3, 4), _uniform(rng, 4, 2)], (3, 2)),
        (lambda t, x: t.add(x[0], x[1]), [_uniform(rng, 2, 3), _uniform(rng, 2, 3)], (2, 3)),
        (lambda t, x: t.broadcast_add(x[0], x[1]), [_uniform(rng, 4, 3), _uniform(rng, 3)], (4, 3)),
        (lambda t, x: t.multiply(x[0], x[1]), [_uniform(rng, 4, 3), _uniform(rng, 3)], (4, 3)),
        (lambda t, x: t.scale(x[0], -1.7), [_uniform(rng, 5)], (5,)),
        (lambda t, x: t.relu(x[0]), [_uniform(rng, 3, 3)], (3, 3)),
        (lambda t, x: t.sigmoid(x[0]), [_uniform(rng, 6)], (6,)),
        (lambda t, x: t.softmax(x[0]), [_uniform(rng, 2, 4)], (2, 4)),
        (lambda t, x: t.sum(x[0], axis=0), [_uniform(rng, 3, 4)], (4,)),
        (lambda t, x: t.mean(x[0], axis=1, keepdims=True), [_uniform(rng, 3, 4)], (3, 1)),
        (lambda t, x: t.log(x[0]), [rng.uniform(0.5, 2.0, size=5)], (5,)),
        (lambda t, x: t.reshape(x[0], (6,)), [_uniform(rng, 2, 3)], (6,)),
    ]
    for build, inputs, shape in cases:
        worst = max(worst, check_tape_function(weighted(build, shape), inputs))
    labels = rng.integers(0, 4, size=5)
    worst = max(worst, check_tape_function(
        lambda t, x: t.cross_entropy(x[0], labels), [_uniform(rng, 5, 4) * 3]))
    worst = max(worst, check_tape_function(lambda t, x: t.mean(x[0]), [_uniform(rng, 4, 2)]))
    return worst


def suite_mlp(seed: int = 0) -> float:
    """Loss of a random two-layer MLP with respect to all of its weights."""
    rng = np.random.default_rng(seed)
    params = InnerParams.init([5, 7, 3], seed)
    X = _uniform(rng, 6, 5)
    y = rng.integers(0, 3, size=6)
    flat = [a.copy() for pair in params.layers for a in pair]

    def build(tape, xs):
        w_nodes = list(zip(xs[0::2], xs[1::2]))
        logits, _ = forward(tape, w_nodes, tape.leaf(X))
        return loss(tape, logits, y)

    return check_tape_function(build, flat)


def suite_gate(seed: int = 0) -> float:
    """Validation loss through the gated features, w.r.t. s and the gate weights."""
    rng = np.random.default_rng(seed)
    params = InnerParams.init([3, 6, 4, 3], seed)
    X = _uniform(rng, 8, 3)
    y = rng.integers(0, 3, size=8)

    def build(tape, xs):
        logits, _ = gated_forward(tape, params.to_tape(tape), tape.leaf(X), xs[0], xs[1])
        return loss(tape, logits, y)

    return check_tape_function(build, [np.array(0.7), rng.standard_normal(4)])


def random_agent(input_dim: int, f: int, n_samples: int, rng, hidden: int = 32) -> AgentState:
    agent = AgentState.init(input_dim, f, n_samples, hidden, int(rng.integers(2**31)))
    w2, b2 = agent.phi[1]
    agent.phi[1] = (rng.standard_normal(w2.shape) * 0.3, rng.standard_normal(b2.shape) * 0.3)
    agent.gate = rng.standard_normal(f)
    return agent


def suite_agent(seed: int = 0) -> float:
    """Mixed sample s w.r.t. alpha and phi (sampling followed by mixing)."""
    rng = np.random.default_rng(seed)
    codec = BatchSizeCodec(16, 600)
    agent = random_agent(4, 3, 5, rng)
    X = _uniform(rng, 6, 4)
    inputs = [a.copy() for pair in agent.phi for a in pair] + [agent.alpha.copy()]

    def build(tape, xs):
        phi = [(xs[0], xs[1]), (xs[2], xs[3])]
        from .agent import AgentNodes
        nodes = AgentNodes(phi, xs[4], tape.leaf(agent.gate))
        S = agent_sample(tape, nodes, tape.leaf(X), 128, codec)
        return mix_samples(tape, S, nodes.alpha)

    return check_tape_function(build, inputs)


def meta_objective(agent: AgentState, params: InnerParams, X: np.ndarray, y: np.ndarray,
                   B_cur: float, codec: BatchSizeCodec) -> float:
    """Straight-line numpy evaluation of the validation loss seen by the agent."""
    pooled = X.mean(axis=0)
    (w1, b1), (w2, b2) = agent.phi
    hidden = np.maximum(pooled @ w1 + b1, 0.0)
    samples = hidden @ w2 + b2 + codec.center_logit(B_cur)
    weights = np.exp(agent.alpha - agent.alpha.max())
    weights /= weights.sum()
    s = float(np.dot(weights, samples))
    z = 1.0 / (1.0 + math.exp(-s))
    a = X
    for w, b in params.layers[:-1]:
        a = np.maximum(a @ w + b, 0.0)
    a = (1.0 + agent.gate * z) * a
    w, b = params.layers[-1]
    logits = a @ w + b
    logits = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits).sum(axis=1))
    return float(np.mean(lse - logits[np.arange(len(y)), y]))


def meta_gradient_error(seed: int, input_dim: int = 3, f: int = 4, n_samples: int = 3,
                        val_batch: int = 8, classes: int = 3) -> float:
    """Meta-gradient from a meta-step vs differences of :func:`meta_objective`."""
    rng = np.random.default_rng(seed)
    codec = BatchSizeCodec(16, 600)
    params = InnerParams.init([input_dim, 6, f, classes], seed)
    agent = random_agent(input_dim, f, n_samples, rng)
    X = _uniform(rng, val_batch, input_dim)
    y = rng.integers(0, classes, size=val_batch)
    B = int(rng.integers(17, 600))
    res = meta_step(agent, params, X, y, B, 0.0, 0.0, codec)

    def F():
        return meta_objective(agent, params, X, y, B, codec)

    errs = [rel_error(res.grads["alpha"], central_difference(F, agent.alpha)),
            rel_error(res.grads["gate"], central_difference(F, agent.gate))]
    for (w, b), (gw, gb) in zip(agent.phi, res.grads["phi"]):
        errs.append(rel_error(gw, central_difference(F, w)))
        errs.append(rel_error(gb, central_difference(F, b)))
    return max(errs)


def suite_meta(seed: int = 0, repeats: int = 10) -> float:
    return max(meta_gradient_error(seed * 1000 + k) for k in range(repeats))


SUITES = {
    "autodiff_ops": suite_ops,
    "mlp_loss": suite_mlp,
    "gated_features": suite_gate,
    "agent_mixing": suite_agent,
    "meta_gradient": suite_meta,
}


def run_grad_check(seed: int = 0) -> dict[str, float]:
    """Worst relative error per suite, on fixed seeds."""
    return {name: fn(seed) for name, fn in SUITES.items()}


def passed(report: dict[str, float], tol: float = TOLERANCE) -> bool:
    return all(err <= tol for err in report.values())


__all__ = ["run_grad_check", "passed", "central_difference", "rel_error",
           "meta_objective", "meta_gradient_error", "autodiff"]
