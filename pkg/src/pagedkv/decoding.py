"""Token selection and the per-group decoding state machines.

Every sequence carries the token it sampled last without KV for it; that
token is fed to the model (and its slot appended) on the next iteration.
Groups advance in two ways:

* :func:`first_step` right after the prompt has been prefilled, where
  parallel sampling forks its samples and beam search expands its first
  ``k`` candidates;
* :func:`next_step` after every decode iteration.

Memory operations go through a backend (``fork``, ``free``) so the same code
drives paged and contiguous storage.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Sequence as Seq

import numpy as np

from .core import DecodingConfig, DecodingKind, Sequence, SequenceGroup, SequenceStatus


def log_softmax(logits: np.ndarray) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def step_greedy(logits: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest tied index.
    return int(np.argmax(logits))


def step_sample(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from ``softmax(logits / temperature)``; consumes one uniform."""
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(logits, dtype=np.float64) / temperature
    p = np.exp(z - z.max())
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def sample_rng(sampling_seed: int, sample_index: int) -> np.random.Generator:
    return np.random.default_rng(sampling_seed + sample_index)


def beam_select(
    parent_ids: Seq[int], cum_logprobs: Seq[float], logprobs: np.ndarray, k: int
) -> list[tuple[int, int, float]]:
    """Top ``k`` of all ``len(parents) * V`` continuations.

    Returns ``(parent_index, token, score)`` best first.  Ties go to the lower
    parent seq_id, then to the lower token id.
    """
    lp = np.asarray(logprobs, dtype=np.float64)
    n, V = lp.shape
    scores = (np.asarray(cum_logprobs, dtype=np.float64)[:, None] + lp).ravel()
    pid = np.repeat(np.asarray(parent_ids), V)
    tok = np.tile(np.arange(V), n)
    order = np.lexsort((tok, pid, -scores))[:k]
    return [(int(i // V), int(i % V), float(scores[i])) for i in order]


@dataclass
class BeamState:
    """Live beam candidates, best first."""

    width: int
    candidates: list[tuple[Sequence, float]] = field(default_factory=list)

    @classmethod
    def of(cls, group: SequenceGroup) -> BeamState:
        ranked = sorted(group.sequences, key=lambda s: (-s.cumulative_logprob, s.seq_id))
        return cls(group.decoding.k, [(s, s.cumulative_logprob) for s in ranked])

    def is_sorted(self) -> bool:
        keys = [(-lp, s.seq_id) for s, lp in self.candidates]
        return keys == sorted(keys)


# -- group state machines -------------------------------------------------------


def new_group(
    group_id: int,
    arrival_time: float,
    prompt: Seq[int],
    decoding: DecodingConfig,
    sampling_seed: int,
    seq_id: int,
) -> SequenceGroup:
    group = SequenceGroup(group_id, arrival_time, list(prompt), decoding, sampling_seed)
    seq = Sequence(seq_id, group.prompt)
    if decoding.kind is DecodingKind.SAMPLE:
        seq.rng = sample_rng(sampling_seed, 0)
    group.sequences.append(seq)
    return group


def _child(parent: Sequence, seq_id: int, kv: Any) -> Sequence:
    return Sequence(
        seq_id,
        parent.prompt,
        list(parent.generated),
        status=SequenceStatus.RUNNING,
        kv=kv,
        cumulative_logprob=parent.cumulative_logprob,
    )


def _emit(seq: Sequence, token: int, lp: np.ndarray) -> None:
    seq.generated.append(token)
    seq.cumulative_logprob += float(lp[token])


def _pick(group: SequenceGroup, seq: Sequence, logits: np.ndarray) -> int:
    if group.decoding.kind is DecodingKind.SAMPLE:
        return step_sample(logits, group.decoding.temperature, seq.rng)
    return step_greedy(logits)


def _beam_step(group: SequenceGroup, logits: np.ndarray, memory: Any, ids: Iterator[int]) -> None:
    parents = list(group.sequences)
    lp = log_softmax(logits)
    chosen = beam_select(
        [s.seq_id for s in parents], [s.cumulative_logprob for s in parents], lp, group.decoding.k
    )
    used = {p for p, _, _ in chosen}
    # Free dropped candidates first so their blocks are available to forks.
    for i, s in enumerate(parents):
        if i not in used:
            memory.free(s)
            s.set_status(SequenceStatus.FINISHED)
    seen: set[int] = set()
    survivors = []
    for p, tok, score in chosen:
        parent = parents[p]
        if p in seen:
            seq = _child(parent, next(ids), memory.fork(parent))
        else:
            seen.add(p)
            seq = parent
        survivors.append((seq, tok, score))
    # Tokens are assigned only after every extra child has forked from its parent.
    out = []
    for seq, tok, score in survivors:
        seq.generated.append(tok)
        seq.cumulative_logprob = score
        out.append(seq)
    group.sequences = sorted(out, key=lambda s: (-s.cumulative_logprob, s.seq_id))


def first_step(group: SequenceGroup, logits: np.ndarray, memory: Any, ids: Iterator[int]) -> None:
    """Turn prompt logits into the first generated token(s) of every sequence."""
    dec = group.decoding
    (seq,) = group.sequences
    if dec.kind is DecodingKind.BEAM:
        _beam_step(group, logits[None, :], memory, ids)
        return
    lp = log_softmax(logits)
    if dec.kind is DecodingKind.SAMPLE:
        for i in range(1, dec.n):
            child = _child(seq, next(ids), memory.fork(seq))
            child.sample_index = i
            child.rng = sample_rng(group.sampling_seed, i)
            group.sequences.append(child)
    for s in group.sequences:
        _emit(s, _pick(group, s, logits), lp)


def next_step(group: SequenceGroup, logits: np.ndarray, memory: Any, ids: Iterator[int]) -> None:
    """Advance every live sequence given ``logits[i]`` for ``group.sequences[i]``."""
    if group.decoding.kind is DecodingKind.BEAM:
        _beam_step(group, logits, memory, ids)
        return
    lp = log_softmax(logits)
    for i, s in enumerate(group.sequences):
        _emit(s, _pick(group, s, logits[i]), lp[i])


def finish_done(group: SequenceGroup, memory: Any, now: Optional[float] = None) -> list[Sequence]:
    """Retire sequences that hit their length limit (or EOS); returns them."""
    dec = group.decoding
    done = []
    keep = []
    for s in group.sequences:
        stop = len(s.generated) >= dec.max_new_tokens
        if not stop and dec.eos_token is not None and dec.kind is not DecodingKind.BEAM:
            stop = s.generated[-1] == dec.eos_token
        (done if stop else keep).append(s)
    for s in done:
        memory.free(s)
        s.set_status(SequenceStatus.FINISHED)
    group.sequences = keep
    group.finished.extend(done)
    if not keep and done:
        group.finish_time = now
    return done


# -- single-group drivers (no scheduler) -------------------------------------------


def run_group(model: Any, memory: Any, group: SequenceGroup, ids: Optional[Iterator[int]] = None) -> SequenceGroup:
    """Run one group to completion on an otherwise idle backend."""
    ids = ids if ids is not None else itertools.count(max(s.seq_id for s in group.sequences) + 1)
    if not memory.can_admit(group):
        raise MemoryError("group does not fit in the memory backend")
    start = memory.admit(group)
    group.set_status(SequenceStatus.RUNNING)
    (seq,) = group.sequences
    logits = model.prefill(seq.tokens, seq.kv, memory.cache, start=start)
    first_step(group, logits, memory, ids)
    finish_done(group, memory)
    while group.sequences:
        memory.append(group)
        seqs = group.sequences
        logits = model.decode_batch(
            [s.generated[-1] for s in seqs], [len(s) - 1 for s in seqs], [s.kv for s in seqs], memory.cache
        )
        next_step(group, logits, memory, ids)
        finish_done(group, memory)
    memory.finish_group(group)
    return group


def run_parallel_sampling(
    model: Any,
    memory: Any,
    prompt: Seq[int],
    n: int,
    temperature: float = 1.0,
    max_new_tokens: int = 16,
    sampling_seed: int = 0,
) -> list[list[int]]:
    group = new_group(0, 0.0, prompt, DecodingConfig.sample(n, temperature, max_new_tokens), sampling_seed, 0)
    return run_group(model, memory, group).outputs()


def run_beam_search(
    model: Any, memory: Any, prompt: Seq[int], k: int, max_new_tokens: int = 16
) -> list[list[int]]:
    group = new_group(0, 0.0, prompt, DecodingConfig.beam(k, max_new_tokens), 0, 0)
    return run_group(model, memory, group).outputs()


def register_prefix(memory: Any, model: Any, tokens: Seq[int]):
    """Prefill and pin the full blocks of ``tokens``; shorter than a block pins nothing."""
    return memory.register_prefix(tokens, model)


def attach_prefix(group: SequenceGroup, registration: Any) -> None:
    """Make ``group`` start from a registered prefix. Its prompt must begin with it."""
    if group.prompt[: len(registration.tokens)] != list(registration.tokens):
        raise ValueError("prompt does not start with the registered prefix")
    group.meta["prefix"] = tuple(registration.tokens)
