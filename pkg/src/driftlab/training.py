"""Deterministic gradient-based training loop.

One run is a pure function of (config, corpus, objective, initial policy):
per-epoch shuffles come from seeds derived as (seed, epoch), the optimizer is
plain numpy, and reruns are bit-identical. Batches use the mean record loss;
gradients are globally norm-clipped before each update.

The learning-rate schedule is linear warmup followed by cosine decay to zero.
The first warmup step gets lr * 1/warmup_steps (not zero), and the step at the
end of warmup gets the full learning rate.

Weight decay (decoupled, adam-style) is available as a parity flag but is
never applied to tabular logit tables: shrinking logits just biases the policy
toward uniform and would confound objective comparisons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .objectives import ObjectiveSpec, evaluate_objective, gkd_step
from .policy import FAMILY_TABULAR, GradientBuffer, ParametricPolicy
from .task import TraceCorpus


class TrainError(ValueError):
    pass


class TrainAbortError(RuntimeError):
    """Non-finite loss; carries the step index where training stopped."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 3
    batch_size: int = 16
    warmup_fraction: float = 0.05
    clip_norm: float = 1.0
    seed: int = 0
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise TrainError("learning_rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise TrainError("warmup_fraction must lie in [0, 1)")
        if self.clip_norm <= 0:
            raise TrainError("clip_norm must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def for_policy(cls, policy: ParametricPolicy) -> "OptimizerState":
        return cls(m=np.zeros_like(policy.params), v=np.zeros_like(policy.params))


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    grad_norm_pre: float
    grad_norm_post: float
    mean_weight: float
    weight_min: float
    weight_max: float


@dataclass
class RunHistory:
    steps: list[StepRecord] = field(default_factory=list)
    epochs: int = 0

    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    def csv_rows(self) -> list[str]:
        rows = ["step,lr,loss,grad_norm_pre,grad_norm_post,mean_weight"]
        for s in self.steps:
            rows.append(
                f"{s.step},{s.lr!r},{s.loss!r},{s.grad_norm_pre!r},{s.grad_norm_post!r},{s.mean_weight!r}"
            )
        return rows


def clip_global_norm(grad: GradientBuffer, clip_norm: float) -> float:
    """Scale the gradient to at most ``clip_norm`` in L2; returns the pre-clip norm."""
    if clip_norm <= 0:
        raise TrainError("clip_norm must be positive")
    grad.check_finite()
    norm = float(np.linalg.norm(grad.values))
    if norm > clip_norm:
        grad.values *= clip_norm / norm
    return norm


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if not 0 <= step < total_steps:
        raise TrainError(f"step {step} outside [0, {total_steps})")
    warmup_steps = int(round(cfg.warmup_fraction * total_steps))
    if step < warmup_steps:
        return cfg.learning_rate * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def _apply_update(policy: ParametricPolicy, grad: GradientBuffer, lr: float, cfg: TrainConfig, state: OptimizerState) -> None:
    state.step += 1
    if cfg.optimizer == "sgd":
        policy.params -= lr * grad.values
    else:
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        state.m = b1 * state.m + (1.0 - b1) * grad.values
        state.v = b2 * state.v + (1.0 - b2) * grad.values**2
        m_hat = state.m / (1.0 - b1**state.step)
        v_hat = state.v / (1.0 - b2**state.step)
        policy.params -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    if cfg.weight_decay > 0.0 and policy.family != FAMILY_TABULAR:
        policy.params -= lr * cfg.weight_decay * policy.params


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def train(
    cfg: TrainConfig,
    corpus: TraceCorpus,
    objective: ObjectiveSpec,
    init_policy: ParametricPolicy,
    teacher=None,
    max_len: int = 24,
) -> tuple[ParametricPolicy, RunHistory]:
    """Train a copy of ``init_policy`` on the corpus; returns (snapshot, history)."""
    if len(corpus) == 0:
        raise TrainError("corpus is empty")
    if objective.base in ("forward-kl", "reverse-kl", "symmetric-kl", "gkd") and teacher is None:
        raise TrainError(f"objective {objective.base!r} requires the analytic teacher")
    policy = init_policy.clone()
    records = corpus.records
    n = len(records)
    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * n_batches
    state = OptimizerState.for_policy(policy)
    history = RunHistory(epochs=cfg.epochs)
    step = 0
    for epoch in range(cfg.epochs):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, epoch])))
        perm = rng.permutation(n)
        for batch in _batches(n, cfg.batch_size, perm):
            grad = GradientBuffer.for_policy(policy)
            loss = 0.0
            weights = []
            if objective.base == "gkd":
                step_rng = np.random.Generator(
                    np.random.PCG64(np.random.SeedSequence([cfg.seed, 5, step]))
                )
                result, _ = gkd_step(
                    policy,
                    teacher,
                    [records[i] for i in batch],
                    objective.gkd_lambda,
                    objective.gkd_beta,
                    step_rng,
                    max_len=max_len,
                )
                loss = result.loss
                grad.add(result.grad)
                weights.append(result.token_weights)
            else:
                for i in batch:
                    result = evaluate_objective(policy, records[i], objective, teacher)
                    loss += result.loss
                    grad.add(result.grad)
                    weights.append(result.token_weights)
            scale = 1.0 / len(batch)
            loss *= scale
            grad.values *= scale
            if not np.isfinite(loss):
                raise TrainAbortError(step, f"non-finite loss at step {step}")
            pre_norm = clip_global_norm(grad, cfg.clip_norm)
            lr = lr_at(step, total_steps, cfg)
            _apply_update(policy, grad, lr, cfg, state)
            allw = np.concatenate([np.asarray(w, dtype=np.float64).ravel() for w in weights])
            history.steps.append(
                StepRecord(
                    step=step,
                    lr=lr,
                    loss=float(loss),
                    grad_norm_pre=pre_norm,
                    grad_norm_post=min(pre_norm, cfg.clip_norm),
                    mean_weight=float(allw.mean()) if allw.size else 1.0,
                    weight_min=float(allw.min()) if allw.size else 1.0,
                    weight_max=float(allw.max()) if allw.size else 1.0,
                )
            )
            step += 1
    return policy, history
