"""Memory backends seen by the scheduler and the engine.

A backend owns the KV storage for every sequence and answers the questions
the scheduler asks (how many blocks would this take, can it be admitted,
resumed, preempted).  :class:`PagedMemory` is the block-table backend;
``pagedkv.baselines.ContiguousMemory`` implements the same surface with
contiguous reservations.

Block copies (copy-on-write, deep-copied forks, swaps) are executed as soon
as the block manager issues them, so the storage is always consistent with
the tables.  The counts are accumulated in :attr:`PagedMemory.copy_stats`
for the cost model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence as Seq

from .attention import KvStorage, PagedKvCache, execute_copy
from .block_manager import BlockManager, BlockTable, SwapDirective, WasteBreakdown
from .core import Sequence, SequenceGroup
from .model import ModelConfig, TinyModel


@dataclass
class CopyStats:
    """Data movement since the last :meth:`reset`."""

    copy_slots: int = 0
    copy_blocks: int = 0
    swap_out_blocks: int = 0
    swap_in_blocks: int = 0
    swap_ops: list[int] = field(default_factory=list)

    def reset(self) -> CopyStats:
        snap = CopyStats(
            self.copy_slots, self.copy_blocks, self.swap_out_blocks, self.swap_in_blocks, list(self.swap_ops)
        )
        self.copy_slots = self.copy_blocks = self.swap_out_blocks = self.swap_in_blocks = 0
        self.swap_ops.clear()
        return snap


@dataclass
class PrefixRegistration:
    """A pinned run of full blocks holding the KV of ``tokens[:num_shared]``."""

    tokens: list[int]
    table: Optional[BlockTable]
    num_shared: int


class PagedMemory:
    name = "paged"
    preemptible = True

    def __init__(
        self,
        model_config: ModelConfig,
        num_gpu_blocks: int,
        block_size: int,
        num_cpu_blocks: Optional[int] = None,
        watermark: float = 0.01,
        enable_sharing: bool = True,
    ):
        self.block_size = block_size
        self.bm = BlockManager(num_gpu_blocks, block_size, num_cpu_blocks, watermark, enable_sharing=enable_sharing)
        mc = model_config
        self.gpu_storage = KvStorage(
            num_gpu_blocks, mc.num_layers, mc.num_heads, mc.head_dim, block_size, self.bm.gpu.ref_counts
        )
        self.cpu_storage = KvStorage(
            self.bm.cpu.num_blocks, mc.num_layers, mc.num_heads, mc.head_dim, block_size
        )
        self.bm.gpu.storage_handle = self.gpu_storage
        self.bm.cpu.storage_handle = self.cpu_storage
        self.cache = PagedKvCache(self.gpu_storage)
        self.copy_stats = CopyStats()
        self.prefixes: dict[tuple[int, ...], PrefixRegistration] = {}

    # -- capacity ------------------------------------------------------------

    @property
    def capacity_slots(self) -> int:
        return self.bm.gpu.num_blocks * self.block_size

    def num_free(self) -> int:
        return self.bm.gpu.num_free

    def _blocks(self, n: int) -> int:
        return -(-n // self.block_size)

    def _pinned_blocks(self) -> int:
        return sum(len(r.table.block_ids) for r in self.prefixes.values() if r.table is not None)

    def fits_ever(self, group: SequenceGroup) -> bool:
        """Whether the group could run to completion with the pool to itself."""
        total = len(group.prompt) + group.decoding.max_new_tokens
        worst = group.decoding.num_seqs * self._blocks(total)
        room = self.bm.gpu.num_blocks - self.bm.watermark_blocks - self._pinned_blocks()
        return worst <= room

    # -- copies ----------------------------------------------------------------

    def _flush(self) -> None:
        for d in self.bm.take_copies():
            execute_copy(d, self.gpu_storage)
            self.copy_stats.copy_blocks += 1
            self.copy_stats.copy_slots += d.num_slots

    # -- prompt allocation -----------------------------------------------------

    def _prefix_of(self, group: SequenceGroup) -> Optional[PrefixRegistration]:
        key = group.meta.get("prefix")
        if key is None:
            return None
        reg = self.prefixes.get(key)
        return reg if reg is not None and reg.table is not None else None

    def _prompt_demand(self, group: SequenceGroup) -> int:
        reg = self._prefix_of(group)
        shared = len(reg.table.block_ids) if reg else 0
        return self._blocks(len(group.prompt)) - shared

    def can_admit(self, group: SequenceGroup, reserve: int = 0) -> bool:
        return self.bm.gpu.num_free - reserve - self._prompt_demand(group) >= self.bm.watermark_blocks

    def _prompt_table(self, group: SequenceGroup) -> tuple[BlockTable, int]:
        reg = self._prefix_of(group)
        if reg is None:
            return self.bm.allocate(len(group.prompt)), 0
        table = self.bm.fork(reg.table)
        self.bm.extend(table, len(group.prompt) - reg.num_shared)
        self._flush()
        return table, reg.num_shared

    def admit(self, group: SequenceGroup) -> int:
        """Allocate the prompt table; returns the first position prefill must compute."""
        (seq,) = group.sequences
        seq.kv, start = self._prompt_table(group)
        return start

    # -- per-sequence ops --------------------------------------------------------

    def fork(self, parent: Sequence) -> BlockTable:
        table = self.bm.fork(parent.kv)
        self._flush()
        return table

    def free(self, seq: Sequence) -> None:
        if seq.kv is not None:
            self.bm.free(seq.kv)
            seq.kv = None

    def finish_group(self, group: SequenceGroup) -> None:
        pass

    # -- decode appends ------------------------------------------------------------

    def append_demand(self, groups: Seq[SequenceGroup]) -> int:
        return self.bm.blocks_needed_for_append(s.kv for g in groups for s in g.sequences)

    def append(self, group: SequenceGroup) -> None:
        for s in group.sequences:
            self.bm.append_slot(s.kv)
        self._flush()

    # -- swapping -----------------------------------------------------------------

    def _tables(self, group: SequenceGroup) -> list[BlockTable]:
        return [s.kv for s in group.sequences]

    def can_swap_out(self, group: SequenceGroup) -> bool:
        return self.bm.swap_out_demand(self._tables(group)) <= self.bm.cpu.num_free

    def swap_out(self, group: SequenceGroup) -> SwapDirective:
        d = self.bm.swap_out(self._tables(group))
        execute_copy(d, self.gpu_storage, self.cpu_storage)
        self.copy_stats.swap_out_blocks += len(d)
        self.copy_stats.swap_ops.append(len(d))
        return d

    def swap_in_demand(self, group: SequenceGroup) -> int:
        tables = self._tables(group)
        return self.bm.swap_in_demand(tables) + self.bm.blocks_needed_for_append(tables)

    def can_swap_in(self, group: SequenceGroup, reserve: int = 0) -> bool:
        return self.bm.gpu.num_free - reserve - self.swap_in_demand(group) >= self.bm.watermark_blocks

    def swap_in(self, group: SequenceGroup) -> SwapDirective:
        d = self.bm.swap_in(self._tables(group))
        execute_copy(d, self.gpu_storage, self.cpu_storage)
        self.copy_stats.swap_in_blocks += len(d)
        self.copy_stats.swap_ops.append(len(d))
        return d

    # -- recomputation --------------------------------------------------------------

    def release(self, group: SequenceGroup) -> int:
        freed = self.bm.free_for_recompute(self._tables(group))
        for s in group.sequences:
            s.kv = None
        return freed

    def restore_demand(self, group: SequenceGroup) -> int:
        """Upper bound on blocks needed to rebuild every sequence (prompt shared once)."""
        P = len(group.prompt)
        full = P // self.block_size
        return self._prompt_demand(group) + sum(self._blocks(len(s)) - full for s in group.sequences)

    def can_restore(self, group: SequenceGroup, reserve: int = 0) -> bool:
        return self.bm.gpu.num_free - reserve - self.restore_demand(group) >= self.bm.watermark_blocks

    def restore_prompt(self, group: SequenceGroup) -> tuple[BlockTable, int]:
        """First half of a rebuild: a temporary table for the prompt.

        The caller prefills it from the returned start position, then calls
        :meth:`restore_sequences` and finally :meth:`drop_table`.
        """
        return self._prompt_table(group)

    def restore_sequences(self, group: SequenceGroup, prompt_table: BlockTable) -> None:
        """Give every sequence a fork of the prompt table extended to its full length."""
        P = len(group.prompt)
        for s in group.sequences:
            s.kv = self.bm.fork(prompt_table)
        self._flush()
        for s in group.sequences:
            self.bm.extend(s.kv, len(s) - P)
        self._flush()

    def drop_table(self, table: BlockTable) -> None:
        self.bm.free(table)

    # -- shared prefixes ------------------------------------------------------------

    def register_prefix(self, tokens: Seq[int], model: TinyModel) -> PrefixRegistration:
        key = tuple(tokens)
        if key in self.prefixes:
            return self.prefixes[key]
        n = (len(tokens) // self.block_size) * self.block_size
        table = None
        if n:
            table = self.bm.allocate(n)
            table.pinned = True
            model.prefill(list(tokens[:n]), table, self.cache)
        reg = PrefixRegistration(list(tokens), table, n)
        self.prefixes[key] = reg
        return reg

    def unregister_prefix(self, tokens: Seq[int]) -> None:
        reg = self.prefixes.pop(tuple(tokens))
        if reg.table is not None:
            self.bm.free(reg.table)

    # -- inspection ----------------------------------------------------------------

    def waste(self) -> WasteBreakdown:
        return self.bm.waste_breakdown()

    def sharing_counts(self) -> tuple[int, int]:
        """(blocks the live sequences would hold without sharing, blocks actually used)."""
        return self.bm.logical_blocks(), self.bm.gpu.num_used

    def check_invariants(self) -> None:
        self.bm.check_invariants()

    def dump(self) -> dict:
        return self.bm.dump()
