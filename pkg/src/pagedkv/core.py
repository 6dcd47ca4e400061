"""Shared vocabulary: sequences, sequence groups, decoding configs and lifecycle states.

Tokens are plain ``int`` ids in ``[0, vocab_size)``; there is no tokenizer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Optional

TokenId = int


class SequenceStatus(enum.Enum):
    WAITING = "waiting"
    RUNNING = "running"
    SWAPPED_OUT = "swapped_out"
    PREEMPTED_FOR_RECOMPUTE = "preempted_for_recompute"
    FINISHED = "finished"


# Lifecycle DAG. Anything not listed here is a bug in the scheduler/engine.
ALLOWED_TRANSITIONS: dict[SequenceStatus, frozenset[SequenceStatus]] = {
    SequenceStatus.WAITING: frozenset({SequenceStatus.RUNNING}),
    SequenceStatus.RUNNING: frozenset(
        {
            SequenceStatus.SWAPPED_OUT,
            SequenceStatus.PREEMPTED_FOR_RECOMPUTE,
            SequenceStatus.FINISHED,
        }
    ),
    SequenceStatus.SWAPPED_OUT: frozenset({SequenceStatus.RUNNING}),
    SequenceStatus.PREEMPTED_FOR_RECOMPUTE: frozenset({SequenceStatus.WAITING}),
    SequenceStatus.FINISHED: frozenset(),
}


class InvalidTransition(RuntimeError):
    pass


class DecodingKind(str, enum.Enum):
    GREEDY = "greedy"
    SAMPLE = "sample"
    BEAM = "beam"


@dataclass(frozen=True)
class DecodingConfig:
    """How a request turns logits into tokens.

    ``n`` is the number of parallel samples (``SAMPLE``), ``k`` the beam width
    (``BEAM``). Generation is force-stopped after ``max_new_tokens``.
    """

    kind: DecodingKind = DecodingKind.GREEDY
    max_new_tokens: int = 16
    n: int = 1
    temperature: float = 1.0
    k: int = 1
    eos_token: Optional[TokenId] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", DecodingKind(self.kind))
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.k < 1:
            raise ValueError("beam width k must be >= 1")
        if self.kind is DecodingKind.SAMPLE and not self.temperature > 0:
            raise ValueError("temperature must be > 0")

    @classmethod
    def greedy(cls, max_new_tokens: int = 16) -> DecodingConfig:
        return cls(DecodingKind.GREEDY, max_new_tokens)

    @classmethod
    def sample(cls, n: int = 1, temperature: float = 1.0, max_new_tokens: int = 16) -> DecodingConfig:
        return cls(DecodingKind.SAMPLE, max_new_tokens, n=n, temperature=temperature)

    @classmethod
    def beam(cls, k: int, max_new_tokens: int = 16) -> DecodingConfig:
        return cls(DecodingKind.BEAM, max_new_tokens, k=k)

    @property
    def num_seqs(self) -> int:
        """Number of sequences the group holds once decoding is under way."""
        if self.kind is DecodingKind.SAMPLE:
            return self.n
        if self.kind is DecodingKind.BEAM:
            return self.k
        return 1

    def with_max_new_tokens(self, max_new_tokens: int) -> DecodingConfig:
        return DecodingConfig(
            self.kind, max_new_tokens, self.n, self.temperature, self.k, self.eos_token
        )

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind.value, "max_new_tokens": self.max_new_tokens}
        if self.kind is DecodingKind.SAMPLE:
            d["n"] = self.n
            d["temperature"] = self.temperature
        elif self.kind is DecodingKind.BEAM:
            d["k"] = self.k
        if self.eos_token is not None:
            d["eos_token"] = self.eos_token
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DecodingConfig:
        unknown = set(d) - {"kind", "max_new_tokens", "n", "k", "temperature", "eos_token"}
        if unknown:
            raise ValueError(f"unknown decoding keys: {sorted(unknown)}")
        return cls(
            kind=DecodingKind(d["kind"]),
            max_new_tokens=int(d["max_new_tokens"]),
            n=int(d.get("n", 1)),
            temperature=float(d.get("temperature", 1.0)),
            k=int(d.get("k", 1)),
            eos_token=d.get("eos_token"),
        )


@dataclass(eq=False)
class Sequence:
    """One token stream. ``kv`` is the memory handle (block table or extent)."""

    seq_id: int
    prompt: list[TokenId]
    generated: list[TokenId] = field(default_factory=list)
    status: SequenceStatus = SequenceStatus.WAITING
    kv: Any = None
    cumulative_logprob: float = 0.0
    rng: Any = None
    sample_index: int = 0
    status_log: list[SequenceStatus] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.status_log:
            self.status_log.append(self.status)

    def __len__(self) -> int:
        return len(self.prompt) + len(self.generated)

    @property
    def tokens(self) -> list[TokenId]:
        return self.prompt + self.generated

    @property
    def num_cached(self) -> int:
        # The newest sampled token has no KV yet; it is written on the next step.
        return len(self) - 1 if self.generated else len(self.prompt)

    def set_status(self, new: SequenceStatus) -> None:
        if new not in ALLOWED_TRANSITIONS[self.status]:
            raise InvalidTransition(f"seq {self.seq_id}: {self.status.name} -> {new.name}")
        self.status = new
        self.status_log.append(new)


@dataclass(eq=False)
class SequenceGroup:
    """All sequences of one request. Scheduled and preempted as a unit."""

    group_id: int
    arrival_time: float
    prompt: list[TokenId]
    decoding: DecodingConfig
    sampling_seed: int = 0
    sequences: list[Sequence] = field(default_factory=list)
    finished: list[Sequence] = field(default_factory=list)
    finish_time: Optional[float] = None
    first_scheduled_time: Optional[float] = None
    num_preemptions: int = 0
    # Memory-side per-group state (prefix attachment, reservations ...).
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def output_len(self) -> int:
        return self.decoding.max_new_tokens

    @property
    def live(self) -> list[Sequence]:
        return [s for s in self.sequences if s.status is not SequenceStatus.FINISHED]

    @property
    def is_finished(self) -> bool:
        return not self.sequences and bool(self.finished)

    @property
    def status(self) -> SequenceStatus:
        seqs = self.sequences or self.finished
        return seqs[0].status

    def set_status(self, new: SequenceStatus) -> None:
        for s in self.sequences:
            s.set_status(new)

    def outputs(self) -> list[list[TokenId]]:
        """Generated token lists, best first for beam search, by sample index otherwise."""
        if self.decoding.kind is DecodingKind.BEAM:
            ranked = sorted(self.finished, key=lambda s: (-s.cumulative_logprob, s.seq_id))
            return [list(s.generated) for s in ranked]
        return [list(s.generated) for s in sorted(self.finished, key=lambda s: s.sample_index)]


def sequence_total_len(seq: Sequence) -> int:
    return len(seq.prompt) + len(seq.generated)


def num_logical_blocks(seq_len: int, block_size: int) -> int:
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    if seq_len < 0:
        raise ValueError("seq_len must be >= 0")
    return -(-seq_len // block_size)
