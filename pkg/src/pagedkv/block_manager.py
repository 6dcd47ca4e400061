"""Virtual-memory style bookkeeping for KV blocks.

A :class:`BlockManager` owns two :class:`PhysicalBlockPool` instances, the
primary ("gpu") pool that attention reads from and a secondary ("cpu") pool
used as swap space.  Sequences hold a :class:`BlockTable` mapping logical
block ``j`` (token positions ``[j*B, (j+1)*B)``) to a physical block id.

Physical blocks are reference counted.  ``fork`` shares every block of the
parent; a later ``append_slot`` into a shared, partially filled last block
triggers copy-on-write.  The manager never touches KV data itself; it emits
:class:`CowDirective` and :class:`SwapDirective` records that the storage
layer executes.
"""

from __future__ import annotations

import enum
import itertools
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional


class OutOfBlocks(RuntimeError):
    """No free block in the pool. The scheduler is expected to preempt."""


class CpuPoolExhausted(RuntimeError):
    pass


class RefCountError(RuntimeError):
    """Double free or a reference count going negative."""


class Device(enum.Enum):
    GPU = "gpu"
    CPU = "cpu"


class PhysicalBlockPool:
    """Fixed array of blocks with a LIFO free list and per-block ref counts."""

    def __init__(self, num_blocks: int, block_size: int, device: Device = Device.GPU):
        if num_blocks < 1:
            raise ValueError("pool needs at least one block")
        if block_size < 1:
            raise ValueError("block_size must be >= 1")
        self.num_blocks = num_blocks
        self.block_size = block_size
        self.device = device
        self.ref_counts = [0] * num_blocks
        self.filled = [0] * num_blocks
        # Stack; pop() hands out block 0 first.
        self.free_list = list(range(num_blocks - 1, -1, -1))
        self.filled_total = 0
        self.storage_handle: Any = None

    @property
    def num_free(self) -> int:
        return len(self.free_list)

    @property
    def num_used(self) -> int:
        return self.num_blocks - len(self.free_list)

    def allocate(self, filled: int = 0) -> int:
        if not self.free_list:
            raise OutOfBlocks(f"{self.device.value} pool exhausted ({self.num_blocks} blocks)")
        b = self.free_list.pop()
        self.ref_counts[b] = 1
        self.filled[b] = filled
        self.filled_total += filled
        return b

    def incref(self, b: int, n: int = 1) -> None:
        if self.ref_counts[b] <= 0:
            raise RefCountError(f"incref on free {self.device.value} block {b}")
        self.ref_counts[b] += n

    def decref(self, b: int) -> bool:
        """Drop one reference; returns True when the block went back to the free list."""
        rc = self.ref_counts[b]
        if rc <= 0:
            raise RefCountError(f"refcount underflow on {self.device.value} block {b}")
        rc -= 1
        self.ref_counts[b] = rc
        if rc == 0:
            self.filled_total -= self.filled[b]
            self.filled[b] = 0
            self.free_list.append(b)
            return True
        return False

    def release(self, b: int) -> None:
        """Return a block regardless of its count (used when the whole block moves pools)."""
        if self.ref_counts[b] <= 0:
            raise RefCountError(f"release of free {self.device.value} block {b}")
        self.ref_counts[b] = 1
        self.decref(b)


@dataclass(frozen=True)
class BlockTableEntry:
    physical_block_id: int
    filled: int
    device: Device = Device.GPU


@dataclass(eq=False)
class BlockTable:
    """Logical-to-physical mapping for one sequence.

    Every block but the last is full, so the per-entry fill counts are
    derived from ``num_tokens``.  ``on_cpu`` is only set while some entries
    live in the swap pool.
    """

    block_ids: list[int]
    num_tokens: int
    block_size: int
    table_id: int = -1
    on_cpu: Optional[list[bool]] = None
    pinned: bool = False

    def __len__(self) -> int:
        return len(self.block_ids)

    @property
    def last_filled(self) -> int:
        if not self.block_ids:
            return 0
        return self.num_tokens - (len(self.block_ids) - 1) * self.block_size

    def filled_at(self, j: int) -> int:
        return min(self.block_size, self.num_tokens - j * self.block_size)

    def device_at(self, j: int) -> Device:
        if self.on_cpu is not None and self.on_cpu[j]:
            return Device.CPU
        return Device.GPU

    @property
    def entries(self) -> list[BlockTableEntry]:
        return [
            BlockTableEntry(b, self.filled_at(j), self.device_at(j))
            for j, b in enumerate(self.block_ids)
        ]

    @property
    def is_resident(self) -> bool:
        return self.on_cpu is None or not any(self.on_cpu)


@dataclass(frozen=True)
class CowDirective:
    src_block: int
    dst_block: int
    num_slots: int

    def __post_init__(self) -> None:
        if self.src_block == self.dst_block:
            raise ValueError("copy-on-write source and destination must differ")


class SwapDirection(enum.Enum):
    OUT = "out"
    IN = "in"


@dataclass(frozen=True)
class SwapDirective:
    """``pairs`` are ``(gpu_block, cpu_block)`` regardless of direction."""

    direction: SwapDirection
    pairs: tuple[tuple[int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.pairs)


class AppendKind(enum.Enum):
    IN_PLACE = "in_place"
    NEW_BLOCK = "new_block"
    COW = "cow"


@dataclass(frozen=True)
class AppendResult:
    kind: AppendKind
    block_id: int
    cow: Optional[CowDirective] = None


@dataclass(frozen=True)
class WasteBreakdown:
    """Slot counts of the primary pool. The five fields sum to the pool capacity."""

    token_states: int
    reserved: int
    internal_frag: int
    external_frag: int
    free: int

    @property
    def total(self) -> int:
        return self.token_states + self.reserved + self.internal_frag + self.external_frag + self.free

    @property
    def occupied(self) -> int:
        return self.total - self.free

    def as_dict(self) -> dict[str, int]:
        return {
            "token_states": self.token_states,
            "reserved": self.reserved,
            "internal_frag": self.internal_frag,
            "external_frag": self.external_frag,
            "free": self.free,
        }


@dataclass
class _Stats:
    cow_copies: int = 0
    cow_slots: int = 0
    fork_copies: int = 0
    swapped_out_blocks: int = 0
    swapped_in_blocks: int = 0


class BlockManager:
    """Allocation, append with copy-on-write, fork, free and swap bookkeeping.

    ``watermark`` is a fraction of the gpu pool (at least one block) that
    :meth:`can_allocate` keeps free so running sequences can still append.
    With ``enable_sharing=False`` a fork deep-copies every block instead of
    sharing it; that is the no-sharing twin used for comparisons.
    """

    def __init__(
        self,
        num_gpu_blocks: int,
        block_size: int,
        num_cpu_blocks: Optional[int] = None,
        watermark: float = 0.01,
        watermark_blocks: Optional[int] = None,
        enable_sharing: bool = True,
    ):
        self.block_size = block_size
        self.gpu = PhysicalBlockPool(num_gpu_blocks, block_size, Device.GPU)
        self.cpu = PhysicalBlockPool(
            num_gpu_blocks if num_cpu_blocks is None else num_cpu_blocks, block_size, Device.CPU
        )
        if watermark_blocks is None:
            watermark_blocks = max(1, int(watermark * num_gpu_blocks))
        self.watermark_blocks = watermark_blocks
        self.enable_sharing = enable_sharing
        self.pending_copies: list[CowDirective] = []
        self.stats = _Stats()
        self._live: dict[int, BlockTable] = {}
        self._table_ids = itertools.count()

    # -- helpers -----------------------------------------------------------

    def _pool(self, device: Device) -> PhysicalBlockPool:
        return self.gpu if device is Device.GPU else self.cpu

    def _register(self, table: BlockTable) -> BlockTable:
        table.table_id = next(self._table_ids)
        self._live[table.table_id] = table
        return table

    def _check_live(self, table: BlockTable) -> None:
        if self._live.get(table.table_id) is not table:
            raise RefCountError(f"block table {table.table_id} is not live (double free?)")

    @property
    def num_free_gpu_blocks(self) -> int:
        return self.gpu.num_free

    @property
    def live_tables(self) -> list[BlockTable]:
        return list(self._live.values())

    def blocks_for(self, num_tokens: int) -> int:
        return -(-num_tokens // self.block_size)

    def take_copies(self) -> list[CowDirective]:
        out, self.pending_copies = self.pending_copies, []
        return out

    # -- allocation --------------------------------------------------------

    def can_allocate(self, num_tokens: int, reserve: int = 0) -> bool:
        need = self.blocks_for(num_tokens) + reserve
        return self.gpu.num_free - need >= self.watermark_blocks

    def allocate(self, num_tokens: int) -> BlockTable:
        B = self.block_size
        n = self.blocks_for(num_tokens)
        if n > self.gpu.num_free:
            raise OutOfBlocks(f"need {n} blocks, {self.gpu.num_free} free")
        ids = []
        for j in range(n):
            ids.append(self.gpu.allocate(filled=min(B, num_tokens - j * B)))
        return self._register(BlockTable(ids, num_tokens, B))

    def append_slot(self, table: BlockTable) -> AppendResult:
        self._check_live(table)
        if not table.is_resident:
            raise RuntimeError("append_slot on a table that is not resident in the gpu pool")
        B = self.block_size
        gpu = self.gpu
        if table.num_tokens % B == 0:
            b = gpu.allocate(filled=1)
            table.block_ids.append(b)
            table.num_tokens += 1
            return AppendResult(AppendKind.NEW_BLOCK, b)
        last = table.block_ids[-1]
        if gpu.ref_counts[last] == 1:
            gpu.filled[last] += 1
            gpu.filled_total += 1
            table.num_tokens += 1
            return AppendResult(AppendKind.IN_PLACE, last)
        filled = gpu.filled[last]
        new = gpu.allocate(filled=filled + 1)
        gpu.decref(last)
        table.block_ids[-1] = new
        table.num_tokens += 1
        cow = CowDirective(last, new, filled)
        self.pending_copies.append(cow)
        self.stats.cow_copies += 1
        self.stats.cow_slots += filled
        return AppendResult(AppendKind.COW, new, cow)

    def extend(self, table: BlockTable, num_tokens: int) -> list[AppendResult]:
        return [self.append_slot(table) for _ in range(num_tokens)]

    def fork(self, parent: BlockTable) -> BlockTable:
        self._check_live(parent)
        if not parent.is_resident:
            raise RuntimeError("fork of a table that is not resident in the gpu pool")
        if self.enable_sharing:
            for b in parent.block_ids:
                self.gpu.incref(b)
            return self._register(BlockTable(list(parent.block_ids), parent.num_tokens, self.block_size))
        if len(parent.block_ids) > self.gpu.num_free:
            raise OutOfBlocks("no room for a deep-copied fork")
        ids = []
        for j, b in enumerate(parent.block_ids):
            filled = parent.filled_at(j)
            nb = self.gpu.allocate(filled=filled)
            ids.append(nb)
            self.pending_copies.append(CowDirective(b, nb, filled))
            self.stats.fork_copies += 1
        return self._register(BlockTable(ids, parent.num_tokens, self.block_size))

    def free(self, table: BlockTable) -> int:
        self._check_live(table)
        freed = 0
        for j, b in enumerate(table.block_ids):
            if self._pool(table.device_at(j)).decref(b):
                freed += 1
        del self._live[table.table_id]
        table.block_ids = []
        table.num_tokens = 0
        table.on_cpu = None
        return freed

    def free_for_recompute(self, tables: Iterable[BlockTable]) -> int:
        return sum(self.free(t) for t in tables)

    # -- swapping ----------------------------------------------------------

    def _exclusive_blocks(self, tables: list[BlockTable], device: Device) -> tuple[list[int], Counter]:
        """Blocks on ``device`` referenced only from ``tables``, in first-seen order."""
        refs: Counter = Counter()
        order: list[int] = []
        for t in tables:
            for j, b in enumerate(t.block_ids):
                if t.device_at(j) is device:
                    if b not in refs:
                        order.append(b)
                    refs[b] += 1
        pool = self._pool(device)
        return [b for b in order if pool.ref_counts[b] == refs[b]], refs

    def swap_out_demand(self, tables: list[BlockTable]) -> int:
        return len(self._exclusive_blocks(tables, Device.GPU)[0])

    def swap_in_demand(self, tables: list[BlockTable]) -> int:
        return len(self._exclusive_blocks(tables, Device.CPU)[0])

    def swap_out(self, tables: list[BlockTable]) -> SwapDirective:
        for t in tables:
            self._check_live(t)
            if not t.is_resident:
                raise RuntimeError("swap_out of a table already swapped")
        movable, refs = self._exclusive_blocks(tables, Device.GPU)
        if len(movable) > self.cpu.num_free:
            raise CpuPoolExhausted(f"need {len(movable)} cpu blocks, {self.cpu.num_free} free")
        mapping = {}
        for b in movable:
            c = self.cpu.allocate(filled=self.gpu.filled[b])
            self.cpu.ref_counts[c] = refs[b]
            mapping[b] = c
        for t in tables:
            t.on_cpu = [False] * len(t.block_ids)
            for j, b in enumerate(t.block_ids):
                c = mapping.get(b)
                if c is not None:
                    t.block_ids[j] = c
                    t.on_cpu[j] = True
        for b in movable:
            self.gpu.release(b)
        self.stats.swapped_out_blocks += len(movable)
        return SwapDirective(SwapDirection.OUT, tuple((b, mapping[b]) for b in movable))

    def swap_in(self, tables: list[BlockTable]) -> SwapDirective:
        for t in tables:
            self._check_live(t)
        movable, refs = self._exclusive_blocks(tables, Device.CPU)
        if len(movable) > self.gpu.num_free:
            raise OutOfBlocks(f"swap-in needs {len(movable)} gpu blocks, {self.gpu.num_free} free")
        mapping = {}
        for c in movable:
            g = self.gpu.allocate(filled=self.cpu.filled[c])
            self.gpu.ref_counts[g] = refs[c]
            mapping[c] = g
        for t in tables:
            if t.on_cpu is None:
                continue
            for j, c in enumerate(t.block_ids):
                if t.on_cpu[j]:
                    t.block_ids[j] = mapping[c]
            t.on_cpu = None
        for c in movable:
            self.cpu.release(c)
        self.stats.swapped_in_blocks += len(movable)
        return SwapDirective(SwapDirection.IN, tuple((mapping[c], c) for c in movable))

    # -- scheduling support ------------------------------------------------

    def blocks_needed_for_append(self, tables: Iterable[BlockTable]) -> int:
        """Exact number of fresh gpu blocks one ``append_slot`` per table will take."""
        B = self.block_size
        need = 0
        sharers: Counter = Counter()
        for t in tables:
            if t.num_tokens % B == 0:
                need += 1
            else:
                j = len(t.block_ids) - 1
                sharers[(t.device_at(j), t.block_ids[j])] += 1
        for (device, b), m in sharers.items():
            rc = self._pool(device).ref_counts[b]
            need += m if rc > m else m - 1
        return need

    # -- inspection --------------------------------------------------------

    def waste_breakdown(self) -> WasteBreakdown:
        gpu = self.gpu
        return WasteBreakdown(
            token_states=gpu.filled_total,
            reserved=0,
            internal_frag=gpu.num_used * self.block_size - gpu.filled_total,
            external_frag=0,
            free=gpu.num_free * self.block_size,
        )

    def logical_blocks(self) -> int:
        """Blocks the live (unpinned, gpu-resident) tables would use without sharing."""
        return sum(len(t.block_ids) for t in self._live.values() if not t.pinned and t.is_resident)

    def check_invariants(self) -> None:
        """Full walk of every live table; raises AssertionError on any violation."""
        # index 0: gpu, 1: cpu
        refs = ([0] * self.gpu.num_blocks, [0] * self.cpu.num_blocks)
        fills: tuple[dict[int, int], dict[int, int]] = ({}, {})
        B = self.block_size
        for t in self._live.values():
            n = len(t.block_ids)
            assert t.num_tokens <= n * B, "table holds more tokens than slots"
            assert t.num_tokens > (n - 1) * B or not n, "non-last block not full"
            on_cpu = t.on_cpu or (False,) * n
            last = n - 1
            for j, b in enumerate(t.block_ids):
                d = 1 if on_cpu[j] else 0
                refs[d][b] += 1
                f = B if j < last else t.num_tokens - last * B
                prev = fills[d].setdefault(b, f)
                assert prev == f, f"{('gpu', 'cpu')[d]} block {b} seen with fill {prev} and {f}"
        for d, pool in enumerate((self.gpu, self.cpu)):
            name = pool.device.value
            free = set(pool.free_list)
            assert len(free) == len(pool.free_list), f"{name} free list has duplicates"
            assert pool.ref_counts == refs[d], f"{name} refcounts disagree with table references"
            for b, rc in enumerate(pool.ref_counts):
                assert (rc == 0) == (b in free), f"{name} block {b}: free-list mismatch"
                if rc:
                    assert pool.filled[b] == fills[d][b], f"{name} block {b}: fill mismatch"
            assert pool.num_free + sum(1 for rc in pool.ref_counts if rc > 0) == pool.num_blocks
            assert pool.filled_total == sum(pool.filled), f"{name} filled_total drifted"
        assert self.cpu.num_used <= self.gpu.num_blocks, "swap bound violated"

    def dump(self) -> dict[str, Any]:
        """JSON-serializable snapshot of pools and tables."""

        def pool_state(pool: PhysicalBlockPool) -> dict[str, Any]:
            return {
                "num_blocks": pool.num_blocks,
                "block_size": pool.block_size,
                "free_list": list(pool.free_list),
                "ref_counts": list(pool.ref_counts),
                "filled": list(pool.filled),
            }

        return {
            "watermark_blocks": self.watermark_blocks,
            "gpu": pool_state(self.gpu),
            "cpu": pool_state(self.cpu),
            "tables": [
                {
                    "table_id": t.table_id,
                    "num_tokens": t.num_tokens,
                    "pinned": t.pinned,
                    "entries": [
                        {"block": e.physical_block_id, "filled": e.filled, "device": e.device.value}
                        for e in t.entries
                    ],
                }
                for t in sorted(self._live.values(), key=lambda t: t.table_id)
            ],
        }
