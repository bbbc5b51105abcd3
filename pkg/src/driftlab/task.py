"""Synthetic modular chain-arithmetic task and its analytic noisy expert.

A problem is a start value followed by a chain of (operator, operand) steps
mod m. The question encodes ``BOS v0 op1 a1 ... opL aL``; the reference trace
emits each running value, an answer marker, the final value again, and EOS.

The teacher is an explicit automaton, not a trained model: at every prefix it
re-derives the semantically correct continuation from the tokens actually
emitted (so it keeps behaving sensibly after its own or a student's mistake)
and places ``1 - eps`` on that continuation, spreading ``eps`` uniformly over
the rest of the vocabulary. Prefixes with no sensible continuation get a point
mass on EOS.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import PolicyError, sample_token
from .vocab import ADD, ANSWER_MARK, BOS, EOS, MUL, TokenSequence, Vocabulary


class TaskError(ValueError):
    pass


class EmptyCorpusError(RuntimeError):
    """Filtering removed every record; training cannot proceed."""


@dataclass(frozen=True)
class TaskConfig:
    modulus: int = 7
    chain_length: int = 4
    ops: tuple[int, ...] = (ADD, MUL)

    def __post_init__(self) -> None:
        if self.modulus < 3:
            raise TaskError("modulus must be >= 3 so chance accuracy stays below 0.5")
        if self.chain_length < 1:
            raise TaskError("chain_length must be >= 1")
        if not self.ops or any(op not in (ADD, MUL) for op in self.ops):
            raise TaskError("ops must be a non-empty subset of {ADD, MUL}")

    @property
    def question_len(self) -> int:
        return 2 + 2 * self.chain_length

    def vocab(self) -> Vocabulary:
        return Vocabulary(self.modulus)


def chain_step(value: int, op: int, operand: int, modulus: int) -> int:
    if op == ADD:
        return (value + operand) % modulus
    if op == MUL:
        return (value * operand) % modulus
    raise TaskError(f"unknown operator token {op}")


@dataclass(frozen=True)
class ProblemInstance:
    question: TokenSequence
    gold_answer: int
    gold_trace: TokenSequence


def generate_problem(cfg: TaskConfig, rng: np.random.Generator) -> ProblemInstance:
    """Uniformly sample start value, operators, and operands; derive the gold trace."""
    vocab = cfg.vocab()
    m = cfg.modulus
    v0 = int(rng.integers(m))
    ops = [int(cfg.ops[rng.integers(len(cfg.ops))]) for _ in range(cfg.chain_length)]
    operands = [int(rng.integers(m)) for _ in range(cfg.chain_length)]
    question = [BOS, vocab.value_token(v0)]
    values = []
    v = v0
    for op, a in zip(ops, operands):
        question.extend([op, vocab.value_token(a)])
        v = chain_step(v, op, a, m)
        values.append(v)
    answer = vocab.value_token(values[-1])
    trace = [vocab.value_token(u) for u in values] + [ANSWER_MARK, answer, EOS]
    return ProblemInstance(
        question=TokenSequence(tuple(question), "question"),
        gold_answer=answer,
        gold_trace=TokenSequence(tuple(trace), "trace"),
    )


def generate_problems(cfg: TaskConfig, n: int, seed: int) -> list[ProblemInstance]:
    """n problems with per-index derived streams, so any slice is reproducible."""
    out = []
    for i in range(n):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, i])))
        out.append(generate_problem(cfg, rng))
    return out


@dataclass(frozen=True)
class TeacherSpec:
    epsilon_instructed: float = 0.05
    epsilon_plain: float = 0.3
    instructed: bool = True

    def __post_init__(self) -> None:
        for name, e in (("epsilon_instructed", self.epsilon_instructed), ("epsilon_plain", self.epsilon_plain)):
            if not 0.0 <= e < 1.0:
                raise TaskError(f"{name} must lie in [0, 1), got {e}")
        if self.epsilon_instructed >= self.epsilon_plain:
            raise TaskError("the instruction must strictly improve the teacher")

    @property
    def epsilon(self) -> float:
        return self.epsilon_instructed if self.instructed else self.epsilon_plain


_PHASE_STEPS = 0
_PHASE_ANSWER = 1
_PHASE_POST = 2
_PHASE_SINK = 3


class ChainTeacher:
    """Analytic expert policy over full (question + trace prefix) contexts.

    The automaton phases: emitting chain values, emitting the answer after the
    marker, expecting EOS after the answer, and a sink for prefixes with no
    correct continuation (point mass on EOS). Stray value tokens update the
    running value, so the expert continues consistently from wrong states.
    """

    family = "analytic-teacher"

    def __init__(self, spec: TeacherSpec, cfg: TaskConfig):
        self.spec = spec
        self.cfg = cfg
        self.vocab = cfg.vocab()
        self.epsilon = spec.epsilon

    def _parse_question(self, tokens):
        cfg, vocab = self.cfg, self.vocab
        q = tokens[: cfg.question_len]
        if len(q) < cfg.question_len or q[0] != BOS or not vocab.is_value(q[1]):
            return None
        ops, operands = [], []
        for j in range(cfg.chain_length):
            op, a = q[2 + 2 * j], q[3 + 2 * j]
            if op not in (ADD, MUL) or not vocab.is_value(a):
                return None
            ops.append(op)
            operands.append(vocab.residue(a))
        return vocab.residue(q[1]), ops, operands

    def expected_next(self, context) -> int | None:
        """Semantically correct continuation for this prefix, or None for the sink."""
        tokens = list(context.tokens) if isinstance(context, TokenSequence) else list(context)
        for t in tokens:
            if not self.vocab.contains(t):
                raise PolicyError(f"context token {t} outside vocabulary of size {self.vocab.size}")
        parsed = self._parse_question(tokens)
        if parsed is None:
            return None
        running, ops, operands = parsed
        L = self.cfg.chain_length
        steps = 0
        phase = _PHASE_STEPS
        for tok in tokens[self.cfg.question_len :]:
            if tok == EOS or phase == _PHASE_SINK:
                phase = _PHASE_SINK
            elif phase == _PHASE_STEPS:
                if self.vocab.is_value(tok):
                    running = self.vocab.residue(tok)
                    steps = min(steps + 1, L)
                elif tok == ANSWER_MARK:
                    phase = _PHASE_ANSWER
                else:
                    phase = _PHASE_SINK
            elif phase == _PHASE_ANSWER:
                if self.vocab.is_value(tok):
                    phase = _PHASE_POST
                elif tok != ANSWER_MARK:
                    phase = _PHASE_SINK
            # _PHASE_POST absorbs everything: the correct continuation stays EOS
        if phase == _PHASE_SINK:
            return None
        if phase == _PHASE_STEPS:
            if steps < L:
                return self.vocab.value_token(chain_step(running, ops[steps], operands[steps], self.cfg.modulus))
            return ANSWER_MARK
        if phase == _PHASE_ANSWER:
            return self.vocab.value_token(running)
        return EOS

    def next_token_distribution(self, context) -> np.ndarray:
        V = self.vocab.size
        target = self.expected_next(context)
        if target is None:
            dist = np.zeros(V)
            dist[EOS] = 1.0
            return dist
        dist = np.full(V, self.epsilon / (V - 1))
        dist[target] = 1.0 - self.epsilon
        return dist

    def log_next_token_distribution(self, context) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.next_token_distribution(context))


def teacher_policy(spec: TeacherSpec, cfg: TaskConfig) -> ChainTeacher:
    return ChainTeacher(spec, cfg)


@dataclass
class CorpusRecord:
    question: TokenSequence
    trace: TokenSequence
    teacher_token_logps: np.ndarray
    teacher_correct: bool

    @property
    def truncated(self) -> bool:
        return not self.trace.ends_with_eos


@dataclass
class TraceCorpus:
    records: list[CorpusRecord]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


@dataclass(frozen=True)
class FilterStats:
    n_input: int
    n_retained: int

    @property
    def retention_rate(self) -> float:
        return self.n_retained / self.n_input if self.n_input else 0.0


def answer_token(trace: TokenSequence) -> int | None:
    """First token after the first answer marker, or None if absent."""
    toks = trace.tokens
    if ANSWER_MARK in toks:
        idx = toks.index(ANSWER_MARK)
        if idx + 1 < len(toks):
            return toks[idx + 1]
    return None


def _sample_with_logps(teacher: ChainTeacher, question: TokenSequence, rng: np.random.Generator, max_len: int):
    ctx = list(question.tokens)
    toks: list[int] = []
    logps: list[float] = []
    for _ in range(max_len):
        dist = teacher.next_token_distribution(ctx)
        tok = sample_token(dist, rng)
        toks.append(tok)
        logps.append(float(np.log(dist[tok])))
        ctx.append(tok)
        if tok == EOS:
            break
    return toks, logps


def generate_corpus(
    teacher: ChainTeacher,
    problems: list[ProblemInstance],
    seed: int,
    samples_per_problem: int = 1,
    max_len: int = 24,
) -> TraceCorpus:
    """Sample teacher traces with exact cached log-probabilities.

    Each record's stream is derived from (seed, record index), so parallel and
    serial generation produce identical corpora. Traces that hit ``max_len``
    without EOS are kept but flagged teacher-incorrect.
    """
    if samples_per_problem < 1:
        raise TaskError("samples_per_problem must be >= 1")
    records = []
    for p_idx, problem in enumerate(problems):
        for s in range(samples_per_problem):
            r_idx = p_idx * samples_per_problem + s
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, r_idx])))
            toks, logps = _sample_with_logps(teacher, problem.question, rng, max_len)
            trace = TokenSequence(tuple(toks), "trace")
            correct = trace.ends_with_eos and answer_token(trace) == problem.gold_answer
            records.append(
                CorpusRecord(
                    question=problem.question,
                    trace=trace,
                    teacher_token_logps=np.array(logps, dtype=np.float64),
                    teacher_correct=bool(correct),
                )
            )
    return TraceCorpus(records)


def filter_teacher_correct(corpus: TraceCorpus) -> tuple[TraceCorpus, FilterStats]:
    """Keep only records whose final answer matched; order preserved."""
    kept = [r for r in corpus.records if r.teacher_correct]
    stats = FilterStats(n_input=len(corpus.records), n_retained=len(kept))
    if not kept:
        raise EmptyCorpusError("no teacher-correct records survived filtering")
    return TraceCorpus(kept), stats


def write_corpus(corpus: TraceCorpus, path, header_comment: str | None = None) -> None:
    """One record per line: question, trace, logps, correct flag (tab-separated)."""
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    for r in corpus.records:
        lines.append(
            "\t".join(
                [
                    " ".join(str(t) for t in r.question.tokens),
                    " ".join(str(t) for t in r.trace.tokens),
                    " ".join(repr(float(v)) for v in r.teacher_token_logps),
                    "1" if r.teacher_correct else "0",
                ]
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_corpus(path) -> TraceCorpus:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            q, t, lp, flag = line.split("\t")
            toks = tuple(int(v) for v in t.split())
            records.append(
                CorpusRecord(
                    question=TokenSequence(tuple(int(v) for v in q.split()), "question"),
                    trace=TokenSequence(toks, "trace"),
                    teacher_token_logps=np.array([float(v) for v in lp.split()], dtype=np.float64),
                    teacher_correct=flag == "1",
                )
            )
    return TraceCorpus(records)
