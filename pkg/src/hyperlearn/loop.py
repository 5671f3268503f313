"""Interleaved inner training and agent meta-steps, with batch-size scheduling.

Every inner SGD step is followed (for agent-driven schedulers) by one
meta-step on a fresh validation mini-batch, evaluated at the post-step
weights. At epoch boundaries the scheduler picks the next batch size.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .agent import (AgentState, BatchSizeCodec, agent_sample, mix_samples,
                    reset_alpha, select_best)
from .autodiff import Tape
from .datasets import BatchSampler, CyclingSampler, Dataset
from .model import (HD_KINDS, InnerParams, NumericError, OptimizerState,
                    gated_forward, inner_step, loss, loss_and_grad, predict)

log = logging.getLogger(__name__)

SCHEDULERS = ("constant", "milestone", "arbiter", "hybrid", "arbiter+hd")
AGENT_SCHEDULERS = ("arbiter", "hybrid", "arbiter+hd")


@dataclass
class MetaConfig:
    scheduler: str = "arbiter"
    epochs: int = 10
    lr: float = 0.1
    optimizer: str = "sgd"
    hyper_lr: float = 1e-4
    b0: int = 128
    b_min: int = 16
    b_max: int = 600
    n_samples: int = 10
    n_learn: int = 1
    zeta_phi: float = 1e-3
    zeta_alpha: float = 1e-2
    val_batch: int = 128
    warmup_epochs: int = 0
    milestones: dict[int, int] = field(default_factory=dict)
    hidden: tuple[int, ...] = (64, 32)
    agent_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        self.milestones = {int(k): int(v) for k, v in sorted(self.milestones.items())}
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}; choose from {SCHEDULERS}")
        if self.zeta_phi < 0 or self.zeta_alpha < 0:
            raise ValueError("meta learning rates must be >= 0")
        if self.n_learn < 1:
            raise ValueError("n_learn must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.b_min <= self.b0 <= self.b_max:
            raise ValueError(f"b0={self.b0} outside [{self.b_min}, {self.b_max}]")
        if self.scheduler in ("milestone", "hybrid") and not self.milestones:
            raise ValueError(f"scheduler {self.scheduler!r} needs a milestone table")
        if any(k < 1 for k in self.milestones):
            raise ValueError("milestone epochs must be >= 1")
        if self.scheduler == "arbiter+hd" and self.optimizer not in HD_KINDS:
            raise ValueError(f"scheduler 'arbiter+hd' needs optimizer in {HD_KINDS}")
        if not self.hidden:
            raise ValueError("need at least one hidden layer")
        BatchSizeCodec(self.b_min, self.b_max)

    @property
    def uses_agent(self) -> bool:
        return self.scheduler in AGENT_SCHEDULERS


@dataclass
class StepRecord:
    epoch: int
    t: int
    train_loss: float
    meta_loss: float | None
    batch_size: int
    mixed_sample: float | None
    candidate_B: int | None
    lr: float


@dataclass
class EpochRecord:
    epoch: int
    val_loss: float
    val_acc: float
    next_B: int


@dataclass
class RunLog:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)

    def batch_trace(self) -> list[int]:
        """Batch size in effect during each epoch."""
        trace = {}
        for r in self.steps:
            trace.setdefault(r.epoch, r.batch_size)
        return [trace[e] for e in sorted(trace)]

    def to_dict(self) -> dict:
        return {"steps": [asdict(r) for r in self.steps],
                "epochs": [asdict(r) for r in self.epochs],
                "events": list(self.events)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunLog":
        return cls([StepRecord(**r) for r in d["steps"]],
                   [EpochRecord(**r) for r in d["epochs"]],
                   list(d.get("events", [])))


class MetaStep(NamedTuple):
    agent: AgentState
    s: float
    F: float
    S: np.ndarray
    grads: dict | None


def meta_step(agent: AgentState, w_next: InnerParams, X_val, y_val, B_cur: float,
              zeta_phi: float, zeta_alpha: float, codec: BatchSizeCodec) -> MetaStep:
    """One gradient-descent update of (phi, alpha, gate) on the validation loss.

    The inner weights enter only through stop-gradients and are not modified.
    ``grads`` is None when a non-finite meta-gradient caused the update to
    be skipped.
    """
    tape = Tape()
    nodes = agent.to_tape(tape)
    X = tape.leaf(X_val)
    S = agent_sample(tape, nodes, X, B_cur, codec)
    s = mix_samples(tape, S, nodes.alpha)
    logits, _ = gated_forward(tape, w_next.to_tape(tape, requires_grad=False), X,
                              tape.sigmoid(s), nodes.gate)
    F = loss(tape, logits, y_val)
    if not np.isfinite(F.values):
        raise NumericError(f"meta-objective is non-finite ({F.item()!r})")
    adj = tape.backward(F)
    grads = {
        "phi": [(adj[w.id], adj[b.id]) for w, b in nodes.phi],
        "alpha": adj[nodes.alpha.id],
        "gate": adj[nodes.gate.id],
    }
    flat = [grads["alpha"], grads["gate"]] + [a for pair in grads["phi"] for a in pair]
    if not all(np.all(np.isfinite(g)) for g in flat):
        return MetaStep(agent, s.item(), F.item(), S.values.copy(), None)
    new = AgentState(
        [(w - zeta_phi * gw, b - zeta_phi * gb) for (w, b), (gw, gb) in zip(agent.phi, grads["phi"])],
        agent.alpha - zeta_alpha * grads["alpha"],
        agent.gate - zeta_phi * grads["gate"],
    )
    return MetaStep(new, s.item(), F.item(), S.values.copy(), grads)


def alpha_reset_seed(run_seed: int, n: int) -> int:
    return int(np.random.SeedSequence([run_seed, 0xA1FA, n]).generate_state(1)[0])


@dataclass
class RunState:
    config: MetaConfig
    train: Dataset
    val: Dataset
    params: InnerParams
    opt: OptimizerState
    agent: AgentState
    codec: BatchSizeCodec
    sampler: BatchSampler
    val_sampler: CyclingSampler
    B: int
    epoch: int = 0
    last_S: np.ndarray | None = None
    log: RunLog = field(default_factory=RunLog)

    @classmethod
    def create(cls, config: MetaConfig, train: Dataset, val: Dataset) -> "RunState":
        if not train.is_classification:
            raise ValueError("training loop supports classification datasets only")
        sizes = [train.D, *config.hidden, train.num_classes]
        params = InnerParams.init(sizes, config.seed)
        opt = OptimizerState(config.optimizer, lr=config.lr,
                             hyper_lr=config.hyper_lr if config.optimizer in HD_KINDS else 0.0)
        agent = AgentState.init(train.D, params.f, config.n_samples, config.agent_hidden, config.seed)
        B = min(config.b0, train.M)
        sampler = BatchSampler(train.M, B, config.seed, stream=1)
        val_sampler = CyclingSampler(val.M, min(config.val_batch, val.M), config.seed, stream=2)
        return cls(config, train, val, params, opt, agent,
                   BatchSizeCodec(config.b_min, config.b_max), sampler, val_sampler, B)


def evaluate(params: InnerParams, ds: Dataset) -> tuple[float, float]:
    """Mean cross-entropy and accuracy on a whole dataset."""
    logits = predict(params, ds.inputs)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    ce = float(np.mean(lse - z[np.arange(ds.M), ds.labels]))
    acc = float(np.mean(np.argmax(logits, axis=1) == ds.labels))
    return ce, acc


def run_epoch(state: RunState) -> RunState:
    cfg = state.config
    if state.sampler.exhausted:
        state.sampler.reset()
    state.sampler.batch_size = state.B
    for t, idx in enumerate(state.sampler.epoch_batches()):
        L, g = loss_and_grad(state.params, state.train.inputs[idx], state.train.labels[idx])
        if not math.isfinite(L):
            raise NumericError(f"training loss is non-finite at epoch {state.epoch}, step {t}")
        state.params, state.opt = inner_step(state.params, state.opt, g)
        F = s = cand = None
        if cfg.uses_agent:
            vidx = state.val_sampler.next_indices()
            res = meta_step(state.agent, state.params, state.val.inputs[vidx],
                            state.val.labels[vidx], state.B, cfg.zeta_phi, cfg.zeta_alpha,
                            state.codec)
            if res.grads is None:
                state.log.events.append({"epoch": state.epoch, "t": t, "kind": "meta_update_skipped"})
                log.warning("non-finite meta-gradient at epoch %d step %d; update skipped",
                            state.epoch, t)
            state.agent, state.last_S = res.agent, res.S
            F, s = res.F, res.s
            cand = state.codec.decode(select_best(res.S, state.agent.alpha))
        state.log.steps.append(StepRecord(state.epoch, t, L, F, state.B, s, cand, state.opt.lr))
    return state


def epoch_boundary_update(state: RunState) -> RunState:
    """Choose the batch size for the next epoch and record the epoch."""
    cfg = state.config
    n = state.epoch + 1
    next_B = state.B
    reset = False
    if cfg.scheduler in ("milestone", "hybrid") and n in cfg.milestones:
        next_B = cfg.milestones[n]
        reset = cfg.scheduler == "hybrid"
    elif cfg.uses_agent and n > cfg.warmup_epochs and n % cfg.n_learn == 0 and state.last_S is not None:
        next_B = state.codec.decode(select_best(state.last_S, state.agent.alpha))
        reset = True
    if reset:
        seed = alpha_reset_seed(cfg.seed, n)
        reset_alpha(state.agent, seed)
        state.log.events.append({"epoch": state.epoch, "kind": "alpha_reset", "seed": seed})
    if next_B > state.train.M:
        log.warning("batch size %d exceeds training set size %d; clamped", next_B, state.train.M)
        state.log.events.append({"epoch": state.epoch, "kind": "clamped_to_M", "requested": next_B})
        next_B = state.train.M
    val_loss, val_acc = evaluate(state.params, state.val)
    state.log.epochs.append(EpochRecord(state.epoch, val_loss, val_acc, next_B))
    state.B = next_B
    state.epoch = n
    return state


def run_experiment(config: MetaConfig, train: Dataset, val: Dataset,
                   state: RunState | None = None) -> RunLog:
    """Train for ``config.epochs`` epochs and return the run log.

    On a numeric abort the exception carries the partial log as ``.log``.
    """
    state = state or RunState.create(config, train, val)
    try:
        while state.epoch < config.epochs:
            run_epoch(state)
            epoch_boundary_update(state)
    except NumericError as exc:
        exc.log = state.log
        raise
    return state.log
