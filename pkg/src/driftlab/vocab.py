"""Token inventory shared by every policy, teacher, and metric.

The vocabulary is fixed by the task modulus: three control tokens, two
operator tokens, and one value token per residue class. Indices are frozen
so corpora, policy snapshots, and metric tables agree without a registry.
"""

from __future__ import annotations

from dataclasses import dataclass

BOS = 0
EOS = 1
ANSWER_MARK = 2
ADD = 3
MUL = 4

N_SPECIAL = 5
VALUE_BASE = 5

OP_TOKENS = (ADD, MUL)
OP_NAMES = {ADD: "ADD", MUL: "MUL"}

SEQ_KINDS = ("question", "trace", "full")


class VocabularyError(ValueError):
    """Raised for out-of-range residues or token indices."""


@dataclass(frozen=True)
class Vocabulary:
    """Token space for a modulus-m chain task: 5 special tokens plus m values."""

    modulus: int

    def __post_init__(self) -> None:
        if self.modulus < 3:
            raise VocabularyError(f"modulus must be >= 3, got {self.modulus}")

    @property
    def size(self) -> int:
        return self.modulus + N_SPECIAL

    @property
    def value_tokens(self) -> range:
        return range(VALUE_BASE, VALUE_BASE + self.modulus)

    @property
    def op_tokens(self) -> tuple[int, int]:
        return OP_TOKENS

    def value_token(self, residue: int) -> int:
        if not 0 <= residue < self.modulus:
            raise VocabularyError(f"residue {residue} outside [0, {self.modulus})")
        return VALUE_BASE + residue

    def residue(self, token: int) -> int:
        if not self.is_value(token):
            raise VocabularyError(f"token {token} is not a value token")
        return token - VALUE_BASE

    def is_value(self, token: int) -> bool:
        return VALUE_BASE <= token < VALUE_BASE + self.modulus

    def contains(self, token: int) -> bool:
        return 0 <= token < self.size


@dataclass(frozen=True)
class SimpleVocab:
    """Bare token space for hand-built policies; EOS keeps its reserved index 1."""

    n_tokens: int

    def __post_init__(self) -> None:
        if self.n_tokens < 2:
            raise VocabularyError("need at least 2 tokens (something plus EOS)")

    @property
    def size(self) -> int:
        return self.n_tokens

    def contains(self, token: int) -> bool:
        return 0 <= token < self.n_tokens


@dataclass(frozen=True)
class TokenSequence:
    """Immutable token run tagged with its role (question / trace / full)."""

    tokens: tuple[int, ...]
    kind: str = "full"

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.kind not in SEQ_KINDS:
            raise VocabularyError(f"unknown sequence kind {self.kind!r}")
        if self.kind == "trace" and EOS in self.tokens:
            # a trace carries at most one EOS and it terminates the sequence
            if self.tokens.index(EOS) != len(self.tokens) - 1:
                raise VocabularyError("trace has tokens after its EOS")

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def check(self, vocab) -> None:
        for t in self.tokens:
            if not vocab.contains(t):
                raise VocabularyError(f"token {t} outside vocabulary of size {vocab.size}")

    @property
    def ends_with_eos(self) -> bool:
        return len(self.tokens) > 0 and self.tokens[-1] == EOS

    def up_to_eos(self) -> tuple[int, ...]:
        """Tokens before the first EOS (the whole run if none)."""
        if EOS in self.tokens:
            return self.tokens[: self.tokens.index(EOS)]
        return self.tokens
