"""Executes scheduler plans with the toy model; one :meth:`Engine.step` per iteration."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence as Seq

import numpy as np

from .core import DecodingConfig, SequenceGroup
from .decoding import finish_done, first_step, new_group, next_step
from .model import TinyModel
from .scheduler import IterationPlan, Policy, Scheduler


@dataclass
class StepStats:
    """What one iteration did, in the units the cost model charges."""

    plan: IterationPlan
    prompt_tokens: int = 0
    decode_tokens: int = 0
    kv_read: int = 0
    recompute_tokens: int = 0
    copy_slots: int = 0
    swap_ops: list[int] = field(default_factory=list)
    finished: list[SequenceGroup] = field(default_factory=list)


class Engine:
    def __init__(
        self,
        model: TinyModel,
        memory: Any,
        policy: Policy | str = Policy.RECOMPUTE,
        max_batched_tokens: Optional[int] = None,
        force_preempt_every: Optional[int] = None,
        snapshot_recompute: bool = False,
    ):
        self.model = model
        self.memory = memory
        self.scheduler = Scheduler(
            memory,
            Policy(policy),
            max_batched_tokens=max_batched_tokens,
            force_preempt_every=force_preempt_every,
            on_preempt=self._on_preempt,
        )
        self.snapshot_recompute = snapshot_recompute
        self.recompute_checks = 0
        self.recompute_max_err = 0.0
        self._seq_ids = itertools.count()
        self._group_ids = itertools.count()
        self.finished: list[SequenceGroup] = []

    # -- requests -----------------------------------------------------------------

    def add_request(
        self,
        prompt: Seq[int],
        decoding: DecodingConfig,
        sampling_seed: int = 0,
        arrival_time: float = 0.0,
        prefix: Optional[Seq[int]] = None,
    ) -> SequenceGroup:
        """Queue a request. Raises ``GroupTooLarge`` if it can never fit."""
        total = len(prompt) + decoding.max_new_tokens
        if total > self.model.config.max_seq_len:
            raise ValueError(f"request of {total} tokens exceeds max_seq_len")
        group = new_group(
            next(self._group_ids), arrival_time, prompt, decoding, sampling_seed, next(self._seq_ids)
        )
        if prefix is not None:
            if list(prompt[: len(prefix)]) != list(prefix):
                raise ValueError("prompt does not start with the prefix")
            group.meta["prefix"] = tuple(prefix)
        self.scheduler.add(group)
        return group

    def register_prefix(self, tokens: Seq[int]):
        return self.memory.register_prefix(tokens, self.model)

    @property
    def has_work(self) -> bool:
        return self.scheduler.has_work

    # -- recompute snapshots (debug aid) ----------------------------------------------

    def _on_preempt(self, group: SequenceGroup, policy: Policy) -> None:
        if not (self.snapshot_recompute and policy is Policy.RECOMPUTE):
            return
        cache = self.memory.cache
        L = self.model.config.num_layers
        group.meta["kv_snapshot"] = {
            s.seq_id: (len(s) - 1, [cache.gather(l, s.kv, len(s) - 1) for l in range(L)])
            for s in group.sequences
        }

    def _check_snapshot(self, group: SequenceGroup) -> None:
        snap = group.meta.pop("kv_snapshot", None)
        if snap is None:
            return
        cache = self.memory.cache
        for s in group.sequences:
            n, layers = snap[s.seq_id]
            for l, (K0, V0) in enumerate(layers):
                K, V = cache.gather(l, s.kv, n)
                err = max(float(np.abs(K - K0).max()), float(np.abs(V - V0).max()))
                self.recompute_max_err = max(self.recompute_max_err, err)
        self.recompute_checks += 1

    # -- one iteration ----------------------------------------------------------------

    def step(self) -> StepStats:
        plan = self.scheduler.schedule()
        st = StepStats(plan)
        model, mem, cache = self.model, self.memory, self.memory.cache
        touched: list[SequenceGroup] = []

        for g in plan.prompt_groups:
            (seq,) = g.sequences
            start = g.meta.pop("prefill_start", 0)
            logits = model.prefill(seq.tokens, seq.kv, cache, start=start)
            st.prompt_tokens += len(seq) - start
            first_step(g, logits, mem, self._seq_ids)
            touched.append(g)

        for g in plan.recompute_groups:
            P = len(g.prompt)
            table, start = mem.restore_prompt(g)
            if start < P:
                model.prefill(g.prompt, table, cache, start=start)
            mem.restore_sequences(g, table)
            mem.drop_table(table)
            rows = [model.prefill(s.tokens, s.kv, cache, start=P) for s in g.sequences]
            n = (P - start) + sum(len(s) - P for s in g.sequences)
            st.prompt_tokens += n
            st.recompute_tokens += n
            self._check_snapshot(g)
            next_step(g, np.stack(rows), mem, self._seq_ids)
            touched.append(g)

        if plan.decode_groups:
            seqs = [s for g in plan.decode_groups for s in g.sequences]
            logits = model.decode_batch(
                [s.generated[-1] for s in seqs], [len(s) - 1 for s in seqs], [s.kv for s in seqs], cache
            )
            st.decode_tokens = len(seqs)
            st.kv_read = sum(len(s) for s in seqs)
            i = 0
            for g in plan.decode_groups:
                n = len(g.sequences)
                next_step(g, logits[i : i + n], mem, self._seq_ids)
                i += n
                touched.append(g)

        for g in touched:
            finish_done(g, mem)
            if not g.sequences:
                self.scheduler.finish(g)
                mem.finish_group(g)
                self.finished.append(g)
                st.finished.append(g)

        copies = mem.copy_stats.reset()
        st.copy_slots = copies.copy_slots
        st.swap_ops = copies.swap_ops
        return st

    def run(self, max_iterations: int = 10**7) -> list[SequenceGroup]:
        """Step until every queued request has finished."""
        for _ in range(max_iterations):
            if not self.has_work:
                return self.finished
            self.step()
        raise RuntimeError("engine did not quiesce")
