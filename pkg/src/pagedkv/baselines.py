"""Contiguous-reservation baselines.

Each sequence gets one contiguous extent sized up front by a
:class:`ReservationPolicy` and placed by a :class:`BuddyAllocator`:

* ``oracle`` reserves exactly ``prompt + output`` slots,
* ``pow2`` reserves ``prompt + next_pow2(output)``,
* ``max`` reserves the model's maximum sequence length.

Nothing is shared: parallel samples copy the prompt KV into their own
extent and beam candidates copy a parent's KV whenever they branch.  The
waste of an extent is classified with hindsight (the final length is known
from the trace): slots the sequence will still fill are *reserved*, slots it
will never fill are *internal* fragmentation, and buddy rounding above the
reservation is *external* fragmentation.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence as Seq

import numpy as np

from .block_manager import WasteBreakdown
from .core import SequenceGroup, Sequence
from .memory import CopyStats
from .model import ModelConfig


class ArenaFull(RuntimeError):
    pass


def next_pow2(n: int) -> int:
    if n < 1:
        raise ValueError("next_pow2 needs n >= 1")
    return 1 << (n - 1).bit_length()


class BuddyAllocator:
    """Binary buddy allocator over ``arena_size`` slots.

    A size that is not a power of two is covered by its binary decomposition
    (largest chunk first), so every top-level chunk is aligned to its size
    and buddies never cross chunk boundaries.
    """

    def __init__(self, arena_size: int):
        if arena_size < 1:
            raise ValueError("arena must hold at least one slot")
        self.arena_size = arena_size
        self.max_order = arena_size.bit_length() - 1
        self.free_lists: list[set[int]] = [set() for _ in range(self.max_order + 1)]
        self.allocated: dict[int, int] = {}  # offset -> order
        self.top: list[tuple[int, int]] = []  # (offset, order)
        off = 0
        for o in range(self.max_order, -1, -1):
            if arena_size >> o & 1:
                self.top.append((off, o))
                self.free_lists[o].add(off)
                off += 1 << o
        self._top_order = {}
        for base, o in self.top:
            self._top_order[base] = o

    @staticmethod
    def order_for(size: int) -> int:
        return (size - 1).bit_length() if size > 1 else 0

    def _chunk_order(self, offset: int) -> int:
        for base, o in self.top:
            if base <= offset < base + (1 << o):
                return o
        raise ValueError(f"offset {offset} outside the arena")

    def can_alloc(self, size: int) -> bool:
        order = self.order_for(size)
        return any(self.free_lists[o] for o in range(order, self.max_order + 1))

    def alloc(self, size: int) -> int:
        """Lowest-addressed block of the smallest sufficient order; returns its offset."""
        order = self.order_for(size)
        for o in range(order, self.max_order + 1):
            if self.free_lists[o]:
                break
        else:
            raise ArenaFull(f"no free extent of {1 << order} slots")
        off = min(self.free_lists[o])
        self.free_lists[o].remove(off)
        while o > order:
            o -= 1
            self.free_lists[o].add(off + (1 << o))
        self.allocated[off] = order
        return off

    def free(self, offset: int) -> None:
        try:
            o = self.allocated.pop(offset)
        except KeyError:
            raise ValueError(f"no extent allocated at offset {offset}") from None
        limit = self._chunk_order(offset)
        while o < limit:
            buddy = offset ^ (1 << o)
            if buddy not in self.free_lists[o]:
                break
            self.free_lists[o].remove(buddy)
            offset = min(offset, buddy)
            o += 1
        self.free_lists[o].add(offset)

    def block_size_at(self, offset: int) -> int:
        return 1 << self.allocated[offset]

    @property
    def free_slots(self) -> int:
        return sum(len(fl) << o for o, fl in enumerate(self.free_lists))

    @property
    def largest_free(self) -> int:
        for o in range(self.max_order, -1, -1):
            if self.free_lists[o]:
                return 1 << o
        return 0

    def check_invariants(self) -> None:
        used = sum(1 << o for o in self.allocated.values())
        assert used + self.free_slots == self.arena_size, "buddy slots not conserved"
        for o, fl in enumerate(self.free_lists):
            for off in fl:
                assert off % (1 << o) == 0, "misaligned free block"
                if o < self._chunk_order(off):
                    assert off ^ (1 << o) not in fl, f"unmerged free buddies at order {o}"


class ReservationPolicy(str, enum.Enum):
    ORACLE = "oracle"
    POW2 = "pow2"
    MAX = "max"


def reservation_size(prompt_len: int, output_len: int, policy: ReservationPolicy, max_seq_len: int) -> int:
    """Slots reserved for one sequence. Pow2 is capped at the model maximum."""
    policy = ReservationPolicy(policy)
    if policy is ReservationPolicy.ORACLE:
        return prompt_len + output_len
    if policy is ReservationPolicy.POW2:
        return min(prompt_len + next_pow2(output_len), max(max_seq_len, prompt_len + output_len))
    return max(max_seq_len, prompt_len + output_len)


@dataclass(eq=False)
class Extent:
    offset: int
    size: int  # buddy block size
    reservation: int
    final_len: int
    group_id: int
    filled: int = 0


class ContiguousBatch:
    __slots__ = ("rows", "row", "starts", "write_slots")

    def __init__(self, rows, row, starts, write_slots):
        self.rows = rows
        self.row = row
        self.starts = starts
        self.write_slots = write_slots


class ContiguousKvCache:
    """KV arena laid out as ``[slot][layer][head][key|value][head_dim]``."""

    def __init__(self, arena_size: int, cfg: ModelConfig):
        self.data = np.zeros((arena_size, cfg.num_layers, cfg.num_heads, 2, cfg.head_dim))
        self.num_layers = cfg.num_layers
        self.num_heads = cfg.num_heads
        self.head_dim = cfg.head_dim

    def _check(self, ext: Extent, end: int) -> None:
        if end > ext.reservation:
            raise IndexError(f"position {end - 1} outside a reservation of {ext.reservation}")

    def prepare(self, extents: Seq[Extent], positions: Seq[int]) -> ContiguousBatch:
        pos = np.asarray(positions, dtype=np.intp)
        for e, p in zip(extents, pos.tolist()):
            self._check(e, p + 1)
        base = np.array([e.offset for e in extents], dtype=np.intp)
        lens = pos + 1
        starts = np.concatenate(([0], np.cumsum(lens)[:-1]))
        row = np.repeat(np.arange(len(lens)), lens)
        slot = np.repeat(base - starts, lens) + np.arange(int(lens.sum()))
        H = self.num_heads
        rows = (slot * self.num_layers * H)[:, None] + np.arange(H)[None, :]
        return ContiguousBatch(rows, row, starts, base + pos)

    def write_batch(self, layer: int, batch: ContiguousBatch, k: np.ndarray, v: np.ndarray) -> None:
        self.data[batch.write_slots, layer, :, 0, :] = k
        self.data[batch.write_slots, layer, :, 1, :] = v

    def attend_batch(self, layer: int, q: np.ndarray, batch: ContiguousBatch) -> np.ndarray:
        d = self.head_dim
        flat = self.data.reshape(-1, 2 * d)
        KV = np.take(flat, batch.rows + layer * self.num_heads, axis=0)  # [T, H, 2d]
        row, starts = batch.row, batch.starts
        scores = np.einsum("thd,thd->th", KV[:, :, :d], q[row]) * (1.0 / math.sqrt(d))
        m = np.maximum.reduceat(scores, starts, axis=0)
        e = np.exp(scores - m[row])
        den = np.add.reduceat(e, starts, axis=0)
        num = np.add.reduceat(e[:, :, None] * KV[:, :, d:], starts, axis=0)
        return num / den[..., None]

    def write_range(self, layer: int, ext: Extent, start: int, k: np.ndarray, v: np.ndarray) -> None:
        end = start + k.shape[0]
        self._check(ext, end)
        sl = slice(ext.offset + start, ext.offset + end)
        self.data[sl, layer, :, 0, :] = k
        self.data[sl, layer, :, 1, :] = v

    def gather(self, layer: int, ext: Extent, length: int) -> tuple[np.ndarray, np.ndarray]:
        g = self.data[ext.offset : ext.offset + length, layer]  # [n, H, 2, d]
        return g[:, :, 0, :].transpose(1, 0, 2), g[:, :, 1, :].transpose(1, 0, 2)


class ContiguousMemory:
    """Memory backend with per-sequence contiguous reservations.

    All ``n`` (sampling) or ``k`` (beam) extents of a group are reserved at
    admission, so a running group never runs out of room and is never
    preempted.  Extents released by dropped beam candidates stay with the
    group and are reused by the next branching candidate.
    """

    preemptible = False

    def __init__(self, model_config: ModelConfig, arena_slots: int, policy: ReservationPolicy):
        self.policy = ReservationPolicy(policy)
        self.name = self.policy.value
        self.max_seq_len = model_config.max_seq_len
        self.buddy = BuddyAllocator(arena_slots)
        self.cache = ContiguousKvCache(arena_slots, model_config)
        self.copy_stats = CopyStats()
        self._spares: dict[int, list[Extent]] = {}
        self._live: dict[int, list[Extent]] = {}  # group_id -> every extent it owns

    @property
    def capacity_slots(self) -> int:
        return self.buddy.arena_size

    def _reservation(self, group: SequenceGroup) -> int:
        return reservation_size(len(group.prompt), group.decoding.max_new_tokens, self.policy, self.max_seq_len)

    def _try_reserve(self, buddy: BuddyAllocator, group: SequenceGroup) -> Optional[list[int]]:
        r = self._reservation(group)
        offs = []
        for _ in range(group.decoding.num_seqs):
            if not buddy.can_alloc(r):
                for o in offs:
                    buddy.free(o)
                return None
            offs.append(buddy.alloc(r))
        return offs

    def fits_ever(self, group: SequenceGroup) -> bool:
        return self._try_reserve(BuddyAllocator(self.buddy.arena_size), group) is not None

    def can_admit(self, group: SequenceGroup, reserve: int = 0) -> bool:
        offs = self._try_reserve(self.buddy, group)
        if offs is None:
            return False
        for o in offs:
            self.buddy.free(o)
        return True

    def num_free(self) -> int:
        return self.buddy.free_slots

    def admit(self, group: SequenceGroup) -> int:
        offs = self._try_reserve(self.buddy, group)
        if offs is None:
            raise ArenaFull(f"group {group.group_id} does not fit")
        r = self._reservation(group)
        final = len(group.prompt) + group.decoding.max_new_tokens
        exts = [Extent(o, self.buddy.block_size_at(o), r, final, group.group_id) for o in offs]
        self._live[group.group_id] = exts
        (seq,) = group.sequences
        seq.kv = exts[0]
        seq.kv.filled = len(group.prompt)
        self._spares[group.group_id] = exts[1:]
        return 0

    def fork(self, parent: Sequence) -> Extent:
        src: Extent = parent.kv
        dst = self._spares[src.group_id].pop()
        n = src.filled
        self.cache.data[dst.offset : dst.offset + n] = self.cache.data[src.offset : src.offset + n]
        dst.filled = n
        self.copy_stats.copy_slots += n
        self.copy_stats.copy_blocks += 1
        return dst

    def free(self, seq: Sequence) -> None:
        ext = seq.kv
        if ext is not None:
            ext.filled = 0
            self._spares[ext.group_id].append(ext)
            seq.kv = None

    def finish_group(self, group: SequenceGroup) -> None:
        for ext in self._live.pop(group.group_id, []):
            self.buddy.free(ext.offset)
        self._spares.pop(group.group_id, None)

    def append_demand(self, groups) -> int:
        return 0

    def append(self, group: SequenceGroup) -> None:
        for s in group.sequences:
            if s.kv.filled >= s.kv.reservation:
                raise ArenaFull("sequence outgrew its reservation")
            s.kv.filled += 1

    def swap_out(self, group):
        raise NotImplementedError("contiguous baselines never preempt")

    swap_in = release = swap_out

    def can_swap_out(self, group) -> bool:
        return False

    def can_swap_in(self, group, reserve: int = 0) -> bool:
        return False

    def can_restore(self, group, reserve: int = 0) -> bool:
        return False

    def waste(self) -> WasteBreakdown:
        tok = res = internal = external = 0
        for gid, exts in self._live.items():
            spare = {id(e) for e in self._spares.get(gid, ())}
            for e in exts:
                external += e.size - e.reservation
                if id(e) in spare:
                    res += e.reservation
                    continue
                will_fill = min(e.reservation, e.final_len)
                tok += e.filled
                res += will_fill - e.filled
                internal += e.reservation - will_fill
        return WasteBreakdown(tok, res, internal, external, self.buddy.free_slots)

    def sharing_counts(self) -> tuple[int, int]:
        used = self.buddy.arena_size - self.buddy.free_slots
        return used, used

    def check_invariants(self) -> None:
        self.buddy.check_invariants()

    def dump(self) -> dict:
        return {
            "policy": self.policy.value,
            "arena_size": self.buddy.arena_size,
            "free_lists": {str(o): sorted(fl) for o, fl in enumerate(self.buddy.free_lists) if fl},
            "extents": [
                {"group": gid, "offset": e.offset, "size": e.size, "reservation": e.reservation, "filled": e.filled}
                for gid, exts in sorted(self._live.items())
                for e in exts
            ],
        }
