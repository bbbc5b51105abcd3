"""Autoregressive softmax policies with exact analytic gradients.

Two trainable families share one interface:

* ``TabularPolicy`` keeps an explicit logit row per context of the last k
  tokens. Exact and fast; the workhorse for oracle-checked experiments.
* ``FeedForwardPolicy`` embeds the last k tokens, concatenates, and runs one
  tanh hidden layer. Small enough to finite-difference, large enough to
  exercise real backprop.

Contexts shorter than the order are left-padded with BOS. Log-probabilities
are always computed as log-softmax of logits, never as ``log`` of a stored
probability, so they stay finite. All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vocab import BOS, EOS, TokenSequence, Vocabulary

FAMILY_TABULAR = "tabular"
FAMILY_FEEDFORWARD = "feedforward"

SNAPSHOT_MAGIC = "driftlab-policy v1"


class PolicyError(ValueError):
    """Input-domain errors: bad contexts, malformed snapshots, shape mismatches."""


class NonDeterministicLossError(RuntimeError):
    """A loss evaluator returned different values for identical inputs."""


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max()
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum())


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


@dataclass
class GradientBuffer:
    """Flat gradient accumulator shaped like a policy's parameter vector."""

    values: np.ndarray

    @classmethod
    def for_policy(cls, policy: "ParametricPolicy") -> "GradientBuffer":
        return cls(np.zeros_like(policy.params))

    def zero(self) -> None:
        self.values.fill(0.0)

    def add(self, other: "GradientBuffer", scale: float = 1.0) -> None:
        self.values += scale * other.values

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise PolicyError("gradient buffer contains non-finite entries")


class ParametricPolicy:
    """Shared machinery for trainable softmax policies."""

    family: str
    order: int
    vocab: Vocabulary
    params: np.ndarray

    def _context_window(self, context) -> list[int]:
        toks = list(context.tokens) if isinstance(context, TokenSequence) else list(context)
        if not toks:
            raise PolicyError("context must be non-empty (sequences start at BOS)")
        V = self.vocab.size
        for t in toks:
            if not 0 <= t < V:
                raise PolicyError(f"context token {t} outside vocabulary of size {V}")
        window = toks[-self.order :]
        if len(window) < self.order:
            window = [BOS] * (self.order - len(window)) + window
        return window

    def logits(self, context) -> np.ndarray:
        raise NotImplementedError

    def next_token_distribution(self, context) -> np.ndarray:
        return _softmax(self.logits(context))

    def log_next_token_distribution(self, context) -> np.ndarray:
        return _log_softmax(self.logits(context))

    def accumulate_logit_grad(self, context, dlogits: np.ndarray, buf: GradientBuffer) -> None:
        """Backpropagate a d(loss)/d(logits) vector for one context into ``buf``."""
        raise NotImplementedError

    def clone(self) -> "ParametricPolicy":
        raise NotImplementedError


class TabularPolicy(ParametricPolicy):
    """Order-k table of logits: one row of size V per context index."""

    family = FAMILY_TABULAR

    def __init__(self, vocab: Vocabulary, order: int = 1, params: np.ndarray | None = None):
        if order < 1:
            raise PolicyError("tabular order must be >= 1")
        self.vocab = vocab
        self.order = order
        V = vocab.size
        self.n_contexts = V**order
        n = self.n_contexts * V
        if params is None:
            self.params = np.zeros(n, dtype=np.float64)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise PolicyError(f"tabular params must have shape ({n},), got {params.shape}")
            self.params = params.copy()

    def context_index(self, context) -> int:
        window = self._context_window(context)
        V = self.vocab.size
        idx = 0
        for t in window:
            idx = idx * V + t
        return idx

    def logits(self, context) -> np.ndarray:
        V = self.vocab.size
        row = self.context_index(context)
        return self.params[row * V : (row + 1) * V]

    def accumulate_logit_grad(self, context, dlogits, buf: GradientBuffer) -> None:
        V = self.vocab.size
        row = self.context_index(context)
        buf.values[row * V : (row + 1) * V] += dlogits

    def clone(self) -> "TabularPolicy":
        return TabularPolicy(self.vocab, self.order, self.params)


class FeedForwardPolicy(ParametricPolicy):
    """One-hidden-layer tanh network over the concatenated last-k embeddings.

    Parameter layout (flat, in order): embedding table (V, d), input weights
    (H, k*d), input bias (H,), output weights (V, H), output bias (V,).
    """

    family = FAMILY_FEEDFORWARD

    def __init__(
        self,
        vocab: Vocabulary,
        order: int = 2,
        embed_dim: int = 8,
        hidden_dim: int = 16,
        params: np.ndarray | None = None,
        init_scale: float = 0.1,
        rng: np.random.Generator | None = None,
    ):
        if order < 1:
            raise PolicyError("feedforward order must be >= 1")
        self.vocab = vocab
        self.order = order
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        V = vocab.size
        n = V * embed_dim + hidden_dim * (order * embed_dim) + hidden_dim + V * hidden_dim + V
        if params is not None:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise PolicyError(f"feedforward params must have shape ({n},), got {params.shape}")
            self.params = params.copy()
        elif rng is not None:
            self.params = init_scale * rng.standard_normal(n)
        else:
            self.params = np.zeros(n, dtype=np.float64)
        self._cuts = np.cumsum(
            [V * embed_dim, hidden_dim * order * embed_dim, hidden_dim, V * hidden_dim]
        )

    def _views(self):
        V, d, H, k = self.vocab.size, self.embed_dim, self.hidden_dim, self.order
        e, w1, b1, w2, b2 = np.split(self.params, self._cuts)
        return (
            e.reshape(V, d),
            w1.reshape(H, k * d),
            b1,
            w2.reshape(V, H),
            b2,
        )

    def _forward(self, context):
        window = self._context_window(context)
        E, W1, b1, W2, b2 = self._views()
        x = E[window].reshape(-1)
        h = np.tanh(W1 @ x + b1)
        logits = W2 @ h + b2
        return window, x, h, logits

    def logits(self, context) -> np.ndarray:
        return self._forward(context)[3]

    def accumulate_logit_grad(self, context, dlogits, buf: GradientBuffer) -> None:
        window, x, h, _ = self._forward(context)
        E, W1, b1, W2, b2 = self._views()
        d = self.embed_dim
        dW2 = np.outer(dlogits, h)
        db2 = dlogits
        dh = W2.T @ dlogits
        dpre = dh * (1.0 - h * h)
        dW1 = np.outer(dpre, x)
        db1 = dpre
        dx = W1.T @ dpre
        gE, gW1, gb1, gW2, gb2 = np.split(buf.values, self._cuts)
        gE = gE.reshape(E.shape)
        for j, tok in enumerate(window):
            gE[tok] += dx[j * d : (j + 1) * d]
        gW1 += dW1.reshape(-1)
        gb1 += db1
        gW2 += dW2.reshape(-1)
        gb2 += db2

    def clone(self) -> "FeedForwardPolicy":
        return FeedForwardPolicy(
            self.vocab,
            self.order,
            self.embed_dim,
            self.hidden_dim,
            params=self.params,
        )


def sample_token(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; deterministic given the generator state."""
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, len(probs) - 1)


def sample_sequence(policy, question: TokenSequence, rng: np.random.Generator, max_len: int) -> TokenSequence:
    """Autoregressively sample until EOS or ``max_len`` tokens."""
    if max_len < 1:
        raise PolicyError("max_len must be >= 1")
    ctx = list(question.tokens)
    out: list[int] = []
    for _ in range(max_len):
        tok = sample_token(policy.next_token_distribution(ctx), rng)
        out.append(tok)
        ctx.append(tok)
        if tok == EOS:
            break
    return TokenSequence(tuple(out), "trace")


def greedy_decode(policy, question: TokenSequence, max_len: int) -> TokenSequence:
    """Greedy rollout; argmax ties break toward the lowest token index."""
    if max_len < 1:
        raise PolicyError("max_len must be >= 1")
    ctx = list(question.tokens)
    out: list[int] = []
    for _ in range(max_len):
        tok = int(np.argmax(policy.next_token_distribution(ctx)))
        out.append(tok)
        ctx.append(tok)
        if tok == EOS:
            break
    return TokenSequence(tuple(out), "trace")


def log_prob_sequence(policy, question: TokenSequence, trace: TokenSequence) -> float:
    """Sum of per-token conditional log-probabilities of ``trace`` (EOS included)."""
    if len(trace) == 0:
        raise PolicyError("cannot score an empty trace")
    ctx = list(question.tokens)
    total = 0.0
    for tok in trace.tokens:
        total += float(policy.log_next_token_distribution(ctx)[tok])
        ctx.append(tok)
    return total


def accumulate_weighted_grad_logp(policy, context, token: int, weight: float, buf: GradientBuffer) -> GradientBuffer:
    """Add ``weight * d log pi(token | context) / d params`` into ``buf``."""
    if not np.isfinite(weight):
        raise PolicyError("weight must be finite")
    if weight == 0.0:
        return buf
    probs = policy.next_token_distribution(context)
    dlogits = -weight * probs
    dlogits[token] += weight
    policy.accumulate_logit_grad(context, dlogits, buf)
    return buf


def finite_difference_check(policy, loss_evaluator, h: float = 1e-5) -> float:
    """Max relative error between the evaluator's gradient and central differences.

    ``loss_evaluator(policy) -> (loss, GradientBuffer)`` must be deterministic;
    this is verified by evaluating twice. Each parameter is perturbed by +-h.
    """
    if h <= 0:
        raise PolicyError("h must be positive")
    loss1, grad = loss_evaluator(policy)
    loss2, _ = loss_evaluator(policy)
    if loss1 != loss2:
        raise NonDeterministicLossError(f"loss evaluator not deterministic: {loss1} vs {loss2}")
    work = policy.clone()
    base = policy.params.copy()
    worst = 0.0
    for i in range(base.size):
        work.params[:] = base
        work.params[i] = base[i] + h
        up, _ = loss_evaluator(work)
        work.params[i] = base[i] - h
        down, _ = loss_evaluator(work)
        fd = (up - down) / (2.0 * h)
        err = abs(grad.values[i] - fd) / (abs(fd) + 1e-12)
        worst = max(worst, err)
    work.params[:] = base
    return worst


def save_policy(policy: ParametricPolicy, path) -> None:
    """Write a plain-text snapshot: versioned header, then one parameter per line.

    Parameters are serialized with ``repr`` so the round-trip is bit-exact.
    """
    lines = [SNAPSHOT_MAGIC]
    lines.append(f"family={policy.family}")
    lines.append(f"modulus={policy.vocab.modulus}")
    lines.append(f"vocab_size={policy.vocab.size}")
    lines.append(f"order={policy.order}")
    if policy.family == FAMILY_FEEDFORWARD:
        lines.append(f"embed_dim={policy.embed_dim}")
        lines.append(f"hidden_dim={policy.hidden_dim}")
    lines.append(f"n_params={policy.params.size}")
    lines.extend(repr(float(v)) for v in policy.params)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_policy(path) -> ParametricPolicy:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != SNAPSHOT_MAGIC:
        raise PolicyError(f"not a policy snapshot: {path}")
    header: dict[str, str] = {}
    i = 1
    while i < len(lines) and "=" in lines[i]:
        key, val = lines[i].split("=", 1)
        header[key] = val
        i += 1
        if key == "n_params":
            break
    n = int(header["n_params"])
    params = np.array([float(v) for v in lines[i : i + n]], dtype=np.float64)
    if params.size != n:
        raise PolicyError(f"snapshot truncated: expected {n} params, found {params.size}")
    vocab = Vocabulary(int(header["modulus"]))
    if vocab.size != int(header["vocab_size"]):
        raise PolicyError("snapshot vocab_size inconsistent with modulus")
    family = header["family"]
    if family == FAMILY_TABULAR:
        return TabularPolicy(vocab, int(header["order"]), params)
    if family == FAMILY_FEEDFORWARD:
        return FeedForwardPolicy(
            vocab,
            int(header["order"]),
            int(header["embed_dim"]),
            int(header["hidden_dim"]),
            params=params,
        )
    raise PolicyError(f"unknown policy family {family!r}")
