"""Iteration-level FCFS scheduler with all-or-nothing group preemption.

Each call to :meth:`Scheduler.schedule` prepares one model iteration:

1. make room for one new slot per running sequence, preempting the most
   recently arrived running group until the appends fit, then append;
2. resume preempted groups, earliest arrival first;
3. admit waiting groups in arrival order, but only while nothing is
   preempted.

The memory backend is duck-typed (see :mod:`pagedkv.memory`).
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .block_manager import SwapDirective
from .core import SequenceGroup, SequenceStatus


class Policy(str, enum.Enum):
    SWAP = "swap"
    RECOMPUTE = "recompute"


class GroupTooLarge(ValueError):
    """The group could not run even with the whole pool to itself."""


@dataclass(frozen=True)
class PreemptionRecord:
    group_id: int
    policy: Policy
    num_blocks: int


@dataclass(frozen=True)
class IterationPlan:
    iteration: int
    prompt_groups: tuple[SequenceGroup, ...] = ()
    recompute_groups: tuple[SequenceGroup, ...] = ()
    decode_groups: tuple[SequenceGroup, ...] = ()
    swap_directives: tuple[SwapDirective, ...] = ()
    preempted: tuple[PreemptionRecord, ...] = ()

    @property
    def is_empty(self) -> bool:
        return not (self.prompt_groups or self.recompute_groups or self.decode_groups)


def _key(g: SequenceGroup) -> tuple[float, int]:
    return (g.arrival_time, g.group_id)


@dataclass
class Scheduler:
    memory: Any
    policy: Policy = Policy.RECOMPUTE
    max_batched_tokens: Optional[int] = None
    force_preempt_every: Optional[int] = None
    on_preempt: Optional[Callable[[SequenceGroup, Policy], None]] = None
    waiting: list[SequenceGroup] = field(default_factory=list)
    running: list[SequenceGroup] = field(default_factory=list)
    swapped: list[SequenceGroup] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    iteration: int = 0

    def __post_init__(self) -> None:
        self.policy = Policy(self.policy)

    # -- queues ------------------------------------------------------------------

    def add(self, group: SequenceGroup) -> None:
        if not group.prompt:
            raise ValueError("empty prompt")
        if not self.memory.fits_ever(group):
            self._log("reject", group)
            raise GroupTooLarge(f"group {group.group_id} cannot fit in the pool")
        self.waiting.append(group)

    def _recompute_pending(self) -> list[SequenceGroup]:
        return [g for g in self.waiting if g.meta.get("recompute")]

    @property
    def accepting_new(self) -> bool:
        return not self.swapped and not any(g.meta.get("recompute") for g in self.waiting)

    @property
    def has_work(self) -> bool:
        return bool(self.waiting or self.running or self.swapped)

    def finish(self, group: SequenceGroup) -> None:
        self.running.remove(group)
        self._log("finish", group)

    def _log(self, event: str, group: SequenceGroup, **extra) -> None:
        self.events.append({"iteration": self.iteration, "event": event, "group": group.group_id, **extra})

    # -- preemption --------------------------------------------------------------

    def preempt(self, group: SequenceGroup, policy: Optional[Policy] = None) -> PreemptionRecord:
        policy = Policy(policy or self.policy)
        if group.status is not SequenceStatus.RUNNING:
            raise RuntimeError(f"group {group.group_id} is not running")
        if policy is Policy.SWAP and not self.memory.can_swap_out(group):
            # The cpu pool is full; recomputation needs no secondary storage.
            self._log("swap_fallback", group)
            policy = Policy.RECOMPUTE
        if self.on_preempt is not None:
            self.on_preempt(group, policy)
        self.running.remove(group)
        group.num_preemptions += 1
        if policy is Policy.SWAP:
            d = self.memory.swap_out(group)
            n = len(d)
            group.set_status(SequenceStatus.SWAPPED_OUT)
            bisect.insort(self.swapped, group, key=_key)
            self._directives.append(d)
        else:
            n = self.memory.release(group)
            group.set_status(SequenceStatus.PREEMPTED_FOR_RECOMPUTE)
            group.set_status(SequenceStatus.WAITING)
            group.meta["recompute"] = True
            pending = self._recompute_pending()
            pending.append(group)
            pending.sort(key=_key)
            self.waiting = pending + [g for g in self.waiting if not g.meta.get("recompute")]
        self._log("preempt", group, policy=policy.value, blocks=n)
        return PreemptionRecord(group.group_id, policy, n)

    # -- the scheduling decision -----------------------------------------------------

    def schedule(self) -> IterationPlan:
        self.iteration += 1
        mem = self.memory
        self._directives: list[SwapDirective] = []
        preempted: list[PreemptionRecord] = []

        # 1. room for one more slot per running sequence
        if (
            self.force_preempt_every
            and self.running
            and mem.preemptible
            and self.iteration % self.force_preempt_every == 0
        ):
            preempted.append(self.preempt(self.running[-1]))
        while self.running and mem.append_demand(self.running) > mem.num_free():
            if not mem.preemptible:
                raise RuntimeError("backend ran out of memory but cannot preempt")
            preempted.append(self.preempt(self.running[-1]))
        for g in self.running:
            mem.append(g)
        decode = list(self.running)
        tokens = sum(len(g.sequences) for g in decode)

        # 2. resume preempted groups, earliest arrival first
        just = {p.group_id for p in preempted}
        recompute: list[SequenceGroup] = []
        reserved = 0
        for g in sorted(self.swapped + self._recompute_pending(), key=_key):
            if g.group_id in just:
                continue
            if g.status is SequenceStatus.SWAPPED_OUT:
                if not mem.can_swap_in(g, reserve=reserved):
                    break
                self._directives.append(mem.swap_in(g))
                self.swapped.remove(g)
                g.set_status(SequenceStatus.RUNNING)
                mem.append(g)
                decode.append(g)
                tokens += len(g.sequences)
            else:
                if not mem.can_restore(g, reserve=reserved):
                    break
                need = sum(len(s) for s in g.sequences)
                if self._over_budget(tokens, need):
                    break
                reserved += mem.restore_demand(g)
                self.waiting.remove(g)
                del g.meta["recompute"]
                g.set_status(SequenceStatus.RUNNING)
                recompute.append(g)
                tokens += need
            bisect.insort(self.running, g, key=_key)
            self._log("resume", g)

        # 3. admit new groups in arrival order
        prompts: list[SequenceGroup] = []
        while self.waiting and self.accepting_new:
            g = self.waiting[0]
            if self._over_budget(tokens, len(g.prompt)) and (prompts or decode or recompute):
                break
            if not mem.can_admit(g, reserve=reserved):
                break
            self.waiting.pop(0)
            g.meta["prefill_start"] = mem.admit(g)
            g.set_status(SequenceStatus.RUNNING)
            bisect.insort(self.running, g, key=_key)
            prompts.append(g)
            tokens += len(g.prompt)
            self._log("admit", g)

        return IterationPlan(
            self.iteration,
            tuple(prompts),
            tuple(recompute),
            tuple(decode),
            tuple(self._directives),
            tuple(preempted),
        )

    def _over_budget(self, tokens: int, extra: int) -> bool:
        return self.max_batched_tokens is not None and tokens + extra > self.max_batched_tokens

    def check_invariants(self) -> None:
        ids = [g.group_id for q in (self.waiting, self.running, self.swapped) for g in q]
        assert len(ids) == len(set(ids)), "group in more than one queue"
        for g in self.running:
            assert all(s.status is SequenceStatus.RUNNING and s.kv is not None for s in g.sequences)
        for g in self.swapped:
            assert all(s.status is SequenceStatus.SWAPPED_OUT and s.kv is not None for s in g.sequences)
        for g in self.waiting:
            assert all(s.status is SequenceStatus.WAITING and s.kv is None for s in g.sequences)
