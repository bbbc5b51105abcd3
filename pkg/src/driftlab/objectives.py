"""Distillation objectives over cached teacher traces.

Every offline loss shares one skeleton: walk the trace positions, compute the
student's next-token log-probabilities on teacher-trace prefixes, and combine
them with per-token correction weights. The weights are transforms of the
token-level log-density gap

    delta_t = log p_student(y_t | prefix) - log p_teacher(y_t | prefix)

and always enter the loss as stop-gradient constants: they are recomputed from
the live student on every call, but the returned gradient treats them as
fixed. Available transforms: constant-one (plain supervision), a bounded
sigmoid (default), the raw exponential ratio, a clipped exponential, a
one-sided ReLU, and a whole-sequence sigmoid applied to the summed gap.

At unit temperature the sigmoid weight equals p_s / (p_s + p_t): the posterior
probability that the token came from the student rather than the teacher under
an even prior, which is what makes it a calibrated support measure.

The online reference baseline mixes student-rollout prefixes into the batch
and scores each position with a generalized Jensen-Shannon divergence
JS_beta(P, Q) = beta * KL(P || M) + (1 - beta) * KL(Q || M), where P is the
teacher, Q the student, and M = beta * Q + (1 - beta) * P. At beta = 1 this is
KL(P || Q); at beta = 0 it is KL(Q || P).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .policy import GradientBuffer, sample_token
from .task import CorpusRecord
from .vocab import EOS, TokenSequence

TAU_DIVIDE = "divide"
TAU_MULTIPLY = "multiply"

TRANSFORM_KINDS = ("constant-one", "sigmoid", "raw-ratio", "clip-exp", "relu", "sequence-sigmoid")
BASE_KINDS = ("sft", "forward-kl", "reverse-kl", "symmetric-kl", "gkd")


class ObjectiveError(ValueError):
    pass


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass(frozen=True)
class WeightTransform:
    kind: str = "constant-one"
    tau: float = 1.0
    clip: float = 5.0
    tau_convention: str = TAU_DIVIDE

    def __post_init__(self) -> None:
        if self.kind not in TRANSFORM_KINDS:
            raise ObjectiveError(f"unknown transform kind {self.kind!r}")
        if self.tau <= 0:
            raise ObjectiveError("temperature must be positive")
        if self.clip <= 0:
            raise ObjectiveError("clip bound must be positive")
        if self.tau_convention not in (TAU_DIVIDE, TAU_MULTIPLY):
            raise ObjectiveError(f"unknown tau convention {self.tau_convention!r}")

    def scaled(self, delta: float) -> float:
        if self.tau_convention == TAU_DIVIDE:
            return delta / self.tau
        return delta * self.tau


CONSTANT_ONE = WeightTransform("constant-one")


@dataclass(frozen=True)
class ObjectiveSpec:
    base: str = "sft"
    transform: WeightTransform = CONSTANT_ONE
    gkd_lambda: float = 0.0
    gkd_beta: float = 0.5

    def __post_init__(self) -> None:
        if self.base not in BASE_KINDS:
            raise ObjectiveError(f"unknown objective base {self.base!r}")
        if not 0.0 <= self.gkd_lambda <= 1.0 or not 0.0 <= self.gkd_beta <= 1.0:
            raise ObjectiveError("gkd mixing parameters must lie in [0, 1]")


@dataclass
class LossResult:
    loss: float
    grad: GradientBuffer
    token_weights: np.ndarray = field(default_factory=lambda: np.zeros(0))


def token_delta(student_logp: float, teacher_logp: float) -> float:
    """Log-density gap; both inputs are treated as stop-gradient constants."""
    if not (np.isfinite(student_logp) and np.isfinite(teacher_logp)):
        raise ObjectiveError("log-probabilities must be finite")
    return float(student_logp) - float(teacher_logp)


def apply_transform(delta: float, transform: WeightTransform) -> float:
    if not np.isfinite(delta):
        raise ObjectiveError("delta must be finite")
    kind = transform.kind
    if kind == "constant-one":
        return 1.0
    if kind == "sigmoid":
        return _sigmoid(transform.scaled(delta))
    if kind == "raw-ratio":
        return math.exp(delta)
    if kind == "clip-exp":
        return math.exp(min(max(delta, -transform.clip), transform.clip))
    if kind == "relu":
        return max(delta, 0.0)
    raise ObjectiveError(f"transform {kind!r} has no per-token form (use sequence_weight)")


def sequence_weight(trace_deltas, transform: WeightTransform) -> float:
    """Sigmoid of the summed gap: one weight for the whole trajectory."""
    deltas = list(trace_deltas)
    if not deltas:
        raise ObjectiveError("need at least one delta")
    return _sigmoid(transform.scaled(float(sum(deltas))))


def nce_identity_residual(p_student: float, p_teacher: float) -> float:
    """|sigmoid(log(p_s/p_t)) - p_s/(p_s+p_t)|; zero up to rounding."""
    if not (0.0 < p_student < 1.0 and 0.0 < p_teacher < 1.0):
        raise ObjectiveError("probabilities must lie strictly inside (0, 1)")
    lhs = _sigmoid(math.log(p_student / p_teacher))
    rhs = p_student / (p_student + p_teacher)
    return abs(lhs - rhs)


def _require_cached_logps(record: CorpusRecord) -> None:
    if record.teacher_token_logps is None or len(record.teacher_token_logps) != len(record.trace):
        raise ObjectiveError("record is missing cached teacher log-probabilities")


def _student_position_logs(policy, record: CorpusRecord) -> list[np.ndarray]:
    """Student log-distribution at every teacher-trace prefix of the record."""
    ctx = list(record.question.tokens)
    logs = []
    for tok in record.trace.tokens:
        logs.append(policy.log_next_token_distribution(ctx))
        ctx.append(tok)
    return logs


def record_token_weights(policy, record: CorpusRecord, transform: WeightTransform) -> np.ndarray:
    """Correction weights for each trace token, computed from the live student."""
    _require_cached_logps(record)
    if transform.kind == "constant-one":
        return np.ones(len(record.trace))
    logs = _student_position_logs(policy, record)
    deltas = [
        token_delta(logs[t][tok], record.teacher_token_logps[t])
        for t, tok in enumerate(record.trace.tokens)
    ]
    if transform.kind == "sequence-sigmoid":
        w = sequence_weight(deltas, transform)
        return np.full(len(deltas), w)
    return np.array([apply_transform(d, transform) for d in deltas])


def sft_loss_frozen(policy, record: CorpusRecord, weights: np.ndarray) -> LossResult:
    """Weighted negative log-likelihood with the weights held fixed."""
    buf = GradientBuffer.for_policy(policy)
    ctx = list(record.question.tokens)
    loss = 0.0
    for t, tok in enumerate(record.trace.tokens):
        w = float(weights[t])
        logp = policy.log_next_token_distribution(ctx)
        loss -= w * float(logp[tok])
        probs = np.exp(logp)
        dlogits = w * probs
        dlogits[tok] -= w
        policy.accumulate_logit_grad(ctx, dlogits, buf)
        ctx.append(tok)
    return LossResult(loss=loss, grad=buf, token_weights=np.asarray(weights, dtype=np.float64))


def sft_loss(policy, record: CorpusRecord, transform: WeightTransform = CONSTANT_ONE) -> LossResult:
    weights = record_token_weights(policy, record, transform)
    return sft_loss_frozen(policy, record, weights)


def _position_kl_terms(p_teacher: np.ndarray, q_log: np.ndarray, direction: str):
    """Per-position divergence value and its gradient w.r.t. the student logits."""
    if direction not in ("forward", "reverse", "symmetric"):
        raise ObjectiveError(f"unknown KL direction {direction!r}")
    q = np.exp(q_log)
    if direction in ("forward", "symmetric"):
        mask = p_teacher > 0.0
        fwd = float(np.sum(p_teacher[mask] * (np.log(p_teacher[mask]) - q_log[mask])))
        fwd_dlogits = q - p_teacher
    if direction in ("reverse", "symmetric"):
        with np.errstate(divide="ignore", invalid="ignore"):
            s = q_log - np.log(p_teacher)
        # entries with q = 0 contribute nothing (0 log 0 convention); q is only
        # exactly zero for hand-built policies, softmax students never hit this
        qs = np.where(q > 0.0, q * s, 0.0)
        rev = float(np.sum(qs))
        rev_dlogits = np.where(q > 0.0, q * (s - rev), 0.0)
    if direction == "forward":
        return fwd, fwd_dlogits
    if direction == "reverse":
        return rev, rev_dlogits
    return 0.5 * (fwd + rev), 0.5 * (fwd_dlogits + rev_dlogits)


def kl_loss_frozen(policy, record: CorpusRecord, teacher, direction: str, weights: np.ndarray) -> LossResult:
    buf = GradientBuffer.for_policy(policy)
    ctx = list(record.question.tokens)
    loss = 0.0
    for t, tok in enumerate(record.trace.tokens):
        w = float(weights[t])
        p_teacher = teacher.next_token_distribution(ctx)
        q_log = policy.log_next_token_distribution(ctx)
        value, dlogits = _position_kl_terms(p_teacher, q_log, direction)
        loss += w * value
        policy.accumulate_logit_grad(ctx, w * dlogits, buf)
        ctx.append(tok)
    return LossResult(loss=loss, grad=buf, token_weights=np.asarray(weights, dtype=np.float64))


def kl_loss(
    policy,
    record: CorpusRecord,
    teacher,
    direction: str = "forward",
    transform: WeightTransform = CONSTANT_ONE,
) -> LossResult:
    """Token-weighted full-vocabulary divergence on teacher-trace prefixes.

    forward: KL(teacher || student); reverse: KL(student || teacher);
    symmetric: their mean, with a single weight multiplying both directions.
    Teacher zeros contribute nothing to the forward term (0 log 0 = 0); the
    reverse term is finite only where the teacher has full support.
    """
    weights = record_token_weights(policy, record, transform)
    return kl_loss_frozen(policy, record, teacher, direction, weights)


def _js_terms(p_teacher: np.ndarray, q_log: np.ndarray, beta: float):
    """Generalized JS divergence value and gradient w.r.t. student logits.

    Support bookkeeping: tokens outside both supports contribute nothing and
    get zero gradient; the mixture is positive wherever either side is.
    """
    q = np.exp(q_log)
    mix = beta * q + (1.0 - beta) * p_teacher
    safe_mix = np.where(mix > 0.0, mix, 1.0)
    log_mix = np.log(safe_mix)
    value = 0.0
    if beta > 0.0:
        mask = p_teacher > 0.0
        value += beta * float(np.sum(p_teacher[mask] * (np.log(p_teacher[mask]) - log_mix[mask])))
    support_q = q > 0.0
    if beta < 1.0:
        if np.any(support_q & (mix <= 0.0)):
            # student mass outside the mixture's support: the divergence is
            # genuinely infinite (only reachable at beta=0 with a noiseless teacher)
            return float("inf"), np.zeros_like(q)
        with np.errstate(invalid="ignore"):
            value += (1.0 - beta) * float(np.sum(np.where(support_q, q * (q_log - log_mix), 0.0)))
    dq = -(beta**2) * np.where(mix > 0.0, p_teacher / safe_mix, 0.0)
    if beta < 1.0:
        rel = np.where(support_q, q_log - log_mix, 0.0)
        dq = dq + (1.0 - beta) * (rel + 1.0 - beta * q / safe_mix)
    dlogits = q * (dq - float(np.sum(q * dq)))
    return value, dlogits


def js_sequence_loss(policy, teacher, question: TokenSequence, supervision: TokenSequence, beta: float):
    """Sum of per-position generalized JS terms along one supervision sequence."""
    buf = GradientBuffer.for_policy(policy)
    ctx = list(question.tokens)
    loss = 0.0
    for tok in supervision.tokens:
        p_teacher = teacher.next_token_distribution(ctx)
        q_log = policy.log_next_token_distribution(ctx)
        value, dlogits = _js_terms(p_teacher, q_log, beta)
        loss += value
        policy.accumulate_logit_grad(ctx, dlogits, buf)
        ctx.append(tok)
    return loss, buf


def gkd_step(
    policy,
    teacher,
    records,
    gkd_lambda: float,
    gkd_beta: float,
    rng: np.random.Generator,
    max_len: int = 24,
):
    """One online-baseline step over a batch of records.

    Per record, one uniform draw decides the prefix source: with probability
    ``gkd_lambda`` a fresh student rollout on the record's question (sampled
    from the same ``rng`` stream, so a seeded rerun replays it exactly),
    otherwise the stored teacher trace. Returns the summed LossResult and the
    list of (source, supervision sequence) pairs actually used.
    """
    if not 0.0 <= gkd_lambda <= 1.0 or not 0.0 <= gkd_beta <= 1.0:
        raise ObjectiveError("gkd mixing parameters must lie in [0, 1]")
    buf = GradientBuffer.for_policy(policy)
    total = 0.0
    used = []
    for record in records:
        on_policy = rng.random() < gkd_lambda
        if on_policy:
            supervision = _sample_trace(policy, record.question, rng, max_len)
            source = "student"
        else:
            supervision = record.trace
            source = "teacher"
        loss, grad = js_sequence_loss(policy, teacher, record.question, supervision, gkd_beta)
        total += loss
        buf.add(grad)
        used.append((source, supervision))
    weights = np.ones(sum(len(s) for _, s in used))
    return LossResult(loss=total, grad=buf, token_weights=weights), used


def _sample_trace(policy, question: TokenSequence, rng: np.random.Generator, max_len: int) -> TokenSequence:
    ctx = list(question.tokens)
    out = []
    for _ in range(max_len):
        tok = sample_token(policy.next_token_distribution(ctx), rng)
        out.append(tok)
        ctx.append(tok)
        if tok == EOS:
            break
    return TokenSequence(tuple(out), "trace")


_KL_DIRECTIONS = {"forward-kl": "forward", "reverse-kl": "reverse", "symmetric-kl": "symmetric"}


def evaluate_objective(policy, record: CorpusRecord, spec: ObjectiveSpec, teacher=None) -> LossResult:
    """Dispatch for the offline bases; the online base is handled per batch."""
    if spec.base == "sft":
        return sft_loss(policy, record, spec.transform)
    if spec.base in _KL_DIRECTIONS:
        if teacher is None:
            raise ObjectiveError(f"{spec.base} needs the analytic teacher for full distributions")
        return kl_loss(policy, record, teacher, _KL_DIRECTIONS[spec.base], spec.transform)
    raise ObjectiveError("the online base is evaluated per batch via gkd_step")


def frozen_weight_evaluator(record: CorpusRecord, spec: ObjectiveSpec, teacher=None, weights: np.ndarray | None = None):
    """Loss evaluator with the correction weights pinned at given values.

    Used by gradient checks: the returned callable recomputes the loss at any
    parameter point while treating the weights as constants, which is exactly
    the contract the analytic gradient implements.
    """
    if spec.base == "gkd":
        raise ObjectiveError("freeze rollouts explicitly for the online base")

    def evaluator(policy):
        w = weights
        if w is None:
            raise ObjectiveError("weights must be precomputed for the frozen evaluator")
        if spec.base == "sft":
            res = sft_loss_frozen(policy, record, w)
        else:
            res = kl_loss_frozen(policy, record, teacher, _KL_DIRECTIONS[spec.base], w)
        return res.loss, res.grad

    return evaluator
