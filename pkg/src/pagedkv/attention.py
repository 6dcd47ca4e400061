"""Exact attention over contiguous and paged KV storage (float64 throughout).

``contiguous_attention`` is the textbook softmax-weighted average of value
vectors.  ``paged_attention`` computes the same quantity block by block from
physical blocks that need not be adjacent: pass one finds the global score
maximum over all blocks, pass two accumulates the per-block exponential sums
(denominator) and value-weighted sums (numerator).  Scores are scaled by
``1/sqrt(head_dim)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence as Seq, Union

import numpy as np

from .block_manager import BlockTable, CowDirective, SwapDirection, SwapDirective


class CowViolation(RuntimeError):
    """A write targeted a physical block shared by more than one table."""


class DanglingBlock(RuntimeError):
    pass


class KvStorage:
    """Dense slab laid out as ``[block][layer][head][slot][key|value][head_dim]``.

    ``ref_counts`` (optional) is the owning pool's reference-count list; when
    present, writes into shared blocks and reads of free blocks are rejected.
    """

    def __init__(
        self,
        num_blocks: int,
        num_layers: int,
        num_heads: int,
        head_dim: int,
        block_size: int,
        ref_counts: Optional[list[int]] = None,
    ):
        self.num_blocks = num_blocks
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.head_dim = head_dim
        self.block_size = block_size
        self.ref_counts = ref_counts
        self.data = np.zeros((num_blocks, num_layers, num_heads, block_size, 2, head_dim))

    @property
    def hidden_size(self) -> int:
        return self.num_heads * self.head_dim

    def _check_writable(self, block_id: int) -> None:
        if self.ref_counts is not None and self.ref_counts[block_id] != 1:
            raise CowViolation(
                f"write to block {block_id} with refcount {self.ref_counts[block_id]}"
            )

    def _check_readable(self, block_id: int) -> None:
        if self.ref_counts is not None and self.ref_counts[block_id] < 1:
            raise DanglingBlock(f"block {block_id} is not allocated")

    def write(self, blocks: np.ndarray, slots: np.ndarray, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        """Batched write of ``k, v`` (shape ``[N, H, d_h]``) at ``(blocks[i], slots[i])``."""
        if self.ref_counts is not None:
            for b in blocks.tolist():
                self._check_writable(b)
        self.data[blocks, layer, :, slots, 0, :] = k
        self.data[blocks, layer, :, slots, 1, :] = v

    def gather(self, block_ids: Seq[int], context_len: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Keys and values of the first ``context_len`` positions, each ``[H, n, d_h]``."""
        if self.ref_counts is not None:
            for b in block_ids:
                self._check_readable(b)
        g = self.data[np.asarray(block_ids, dtype=np.intp), layer]  # [nb, H, B, 2, d]
        g = g.transpose(1, 0, 2, 3, 4).reshape(self.num_heads, -1, 2, self.head_dim)
        g = g[:, :context_len]
        return g[:, :, 0, :], g[:, :, 1, :]


@dataclass
class AttentionQuery:
    q: np.ndarray
    context_len: int
    block_table: Union[BlockTable, Seq[int]]

    @property
    def block_ids(self) -> Seq[int]:
        bt = self.block_table
        return bt.block_ids if isinstance(bt, BlockTable) else bt


def contiguous_attention(q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if K.shape[0] == 0:
        raise ValueError("attention over an empty context")
    scores = K @ q / math.sqrt(q.shape[-1])
    scores -= scores.max()
    w = np.exp(scores)
    w /= w.sum()
    return w @ V


def attention_weights(q: np.ndarray, K: np.ndarray) -> np.ndarray:
    scores = np.asarray(K) @ np.asarray(q) / math.sqrt(len(q))
    w = np.exp(scores - scores.max())
    return w / w.sum()


def _paged_scores(query: AttentionQuery, storage: KvStorage, layer: int, head: int):
    n = query.context_len
    if n < 1:
        raise ValueError("context_len must be >= 1")
    B = storage.block_size
    ids = query.block_ids
    nblk = -(-n // B)
    if nblk > len(ids):
        raise ValueError(f"context_len {n} exceeds the {len(ids)} mapped blocks")
    scale = 1.0 / math.sqrt(storage.head_dim)
    q = np.asarray(query.q, dtype=np.float64)
    blocks = []
    for j in range(nblk):
        b = ids[j]
        storage._check_readable(b)
        cnt = min(B, n - j * B)
        Kj = storage.data[b, layer, head, :cnt, 0, :]
        Vj = storage.data[b, layer, head, :cnt, 1, :]
        blocks.append((Kj @ q * scale, Vj))
    return blocks


def paged_attention(query: AttentionQuery, storage: KvStorage, layer: int = 0, head: int = 0) -> np.ndarray:
    """Block-wise attention for one query and one head (two-pass softmax)."""
    blocks = _paged_scores(query, storage, layer, head)
    m = max(float(s.max()) for s, _ in blocks)
    num = np.zeros(storage.head_dim)
    den = 0.0
    for s, Vj in blocks:
        e = np.exp(s - m)
        den += e.sum()
        num += e @ Vj
    return num / den


def paged_attention_weights(query: AttentionQuery, storage: KvStorage, layer: int = 0, head: int = 0) -> list[np.ndarray]:
    """Per-block rows of attention weights; concatenated they sum to one."""
    blocks = _paged_scores(query, storage, layer, head)
    m = max(float(s.max()) for s, _ in blocks)
    exps = [np.exp(s - m) for s, _ in blocks]
    den = sum(e.sum() for e in exps)
    return [e / den for e in exps]


def _ragged_index(block_ids: np.ndarray, context_lens: np.ndarray, storage: KvStorage):
    """Row indices (into the ``[..., 2 * d_h]`` view of the slab, layer 0) of every
    valid context position of a batch, plus the owning batch row of each position."""
    B, H = storage.block_size, storage.num_heads
    lens = np.asarray(context_lens, dtype=np.intp)
    starts = np.concatenate(([0], np.cumsum(lens)[:-1]))
    row = np.repeat(np.arange(len(lens)), lens)
    pos = np.arange(int(lens.sum())) - np.repeat(starts, lens)
    blk = block_ids[row, pos // B]
    base = blk * (storage.num_layers * H * B) + pos % B
    rows = base[:, None] + (np.arange(H) * B)[None, :]  # [T, H]
    return rows, row, starts


def paged_attention_batch(
    q: np.ndarray,
    block_ids: np.ndarray,
    context_lens: np.ndarray,
    storage: KvStorage,
    layer: int,
    index=None,
) -> np.ndarray:
    """Vectorised block-wise attention for a decode batch.

    ``q``: ``[N, H, d_h]``; ``block_ids``: ``[N, nb]`` (rows padded with any
    valid id); ``context_lens``: ``[N]``.  Returns ``[N, H, d_h]``.  Only the
    valid positions are gathered; the max, the exponential sums and the
    value-weighted sums are then reduced per sequence.
    """
    if index is None:
        index = _ragged_index(block_ids, context_lens, storage)
    rows, row, starts = index
    d = storage.head_dim
    H, B = storage.num_heads, storage.block_size
    flat = storage.data.reshape(-1, 2 * d)
    KV = np.take(flat, rows + layer * H * B, axis=0)  # [T, H, 2d]
    K = KV[:, :, :d]
    V = KV[:, :, d:]
    scores = np.einsum("thd,thd->th", K, q[row]) * (1.0 / math.sqrt(d))
    m = np.maximum.reduceat(scores, starts, axis=0)  # [N, H]
    e = np.exp(scores - m[row])
    den = np.add.reduceat(e, starts, axis=0)
    num = np.add.reduceat(e[:, :, None] * V, starts, axis=0)
    return num / den[..., None]


def write_kv(
    storage: KvStorage, block_id: int, slot: int, layer: int, head: int, k: np.ndarray, v: np.ndarray
) -> None:
    if not 0 <= slot < storage.block_size:
        raise IndexError(f"slot {slot} outside block of size {storage.block_size}")
    storage._check_writable(block_id)
    storage.data[block_id, layer, head, slot, 0, :] = k
    storage.data[block_id, layer, head, slot, 1, :] = v


def read_kv(storage: KvStorage, block_id: int, slot: int, layer: int, head: int) -> tuple[np.ndarray, np.ndarray]:
    d = storage.data[block_id, layer, head, slot]
    return d[0].copy(), d[1].copy()


def execute_copy(
    directive: Union[CowDirective, SwapDirective],
    gpu: KvStorage,
    cpu: Optional[KvStorage] = None,
) -> None:
    """Carry out a block copy. Whole blocks are copied (all layers, heads and slots)."""
    if isinstance(directive, CowDirective):
        gpu.data[directive.dst_block] = gpu.data[directive.src_block]
        return
    if not directive.pairs:
        return
    if cpu is None:
        raise ValueError("swap directives need the cpu storage")
    g = np.fromiter((p[0] for p in directive.pairs), dtype=np.intp)
    c = np.fromiter((p[1] for p in directive.pairs), dtype=np.intp)
    if directive.direction is SwapDirection.OUT:
        cpu.data[c] = gpu.data[g]
    else:
        gpu.data[g] = cpu.data[c]


class PagedBatch:
    """Index arrays for one decode batch, built once and reused for every layer."""

    __slots__ = ("block_ids", "context_lens", "write_blocks", "write_slots", "index")

    def __init__(self, block_ids, context_lens, write_blocks, write_slots, index):
        self.block_ids = block_ids
        self.context_lens = context_lens
        self.write_blocks = write_blocks
        self.write_slots = write_slots
        self.index = index


class PagedKvCache:
    """Model-facing view of :class:`KvStorage` addressed through block tables."""

    def __init__(self, storage: KvStorage):
        self.storage = storage
        self.block_size = storage.block_size

    def prepare(self, tables: Seq[BlockTable], positions: Seq[int]) -> PagedBatch:
        """Batch for writing position ``positions[i]`` and attending over ``positions[i] + 1`` tokens."""
        B = self.block_size
        n = len(tables)
        pos = np.asarray(positions, dtype=np.intp)
        nb = max(len(t.block_ids) for t in tables)
        ids = np.zeros((n, nb), dtype=np.intp)
        wb = np.empty(n, dtype=np.intp)
        for i, t in enumerate(tables):
            row = t.block_ids
            ids[i, : len(row)] = row
            ids[i, len(row):] = row[-1]
            wb[i] = row[pos[i] // B]
        lens = pos + 1
        return PagedBatch(ids, lens, wb, pos % B, _ragged_index(ids, lens, self.storage))

    def write_batch(self, layer: int, batch: PagedBatch, k: np.ndarray, v: np.ndarray) -> None:
        self.storage.write(batch.write_blocks, batch.write_slots, layer, k, v)

    def attend_batch(self, layer: int, q: np.ndarray, batch: PagedBatch) -> np.ndarray:
        return paged_attention_batch(q, batch.block_ids, batch.context_lens, self.storage, layer, batch.index)

    def write_range(self, layer: int, table: BlockTable, start: int, k: np.ndarray, v: np.ndarray) -> None:
        B = self.block_size
        pos = np.arange(start, start + k.shape[0])
        blocks = np.asarray(table.block_ids, dtype=np.intp)[pos // B]
        self.storage.write(blocks, pos % B, layer, k, v)

    def gather(self, layer: int, table: BlockTable, length: int) -> tuple[np.ndarray, np.ndarray]:
        nb = -(-length // self.block_size)
        return self.storage.gather(table.block_ids[:nb], length, layer)
