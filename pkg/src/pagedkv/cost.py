"""Virtual-time cost model for one serving iteration.

    t = c0 + c_prompt * prompt_tokens + c_decode * decode_tokens
        + c_kv_read * kv_positions_read + c_copy * slots_copied
        + sum over swap transfers of (swap_latency * blocks + bytes / pcie_bw)

Only decode tokens are charged for KV reads; a recomputation is charged as
prompt tokens.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Any, Iterable, Optional


def kv_bytes_per_token(hidden_size: int, num_layers: int, elem_bytes: int = 2) -> int:
    """Key and value vectors of every layer for one token."""
    return 2 * hidden_size * num_layers * elem_bytes


@dataclass(frozen=True)
class CostModel:
    c0: float = 2e-3
    c_prompt: float = 5e-6
    c_decode: float = 20e-6
    c_kv_read: float = 0.1e-6
    c_copy: float = 0.02e-6
    swap_latency: float = 50e-6
    pcie_bw: float = 16e9
    elem_bytes: int = 2
    # None: derived from the model dimensions.
    bytes_per_token: Optional[int] = None

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and v < 0:
                raise ValueError(f"{f.name} must be >= 0")

    def resolved(self, hidden_size: int, num_layers: int) -> CostModel:
        if self.bytes_per_token is not None:
            return self
        bpt = kv_bytes_per_token(hidden_size, num_layers, self.elem_bytes)
        return CostModel(**{**asdict(self), "bytes_per_token": bpt})

    def _bpt(self) -> int:
        if self.bytes_per_token is None:
            raise ValueError("bytes_per_token unresolved; call resolved() first")
        return self.bytes_per_token

    def swap_time(self, num_blocks: int, block_size: int) -> float:
        """One transfer of ``num_blocks`` blocks in one direction."""
        if num_blocks == 0:
            return 0.0
        return num_blocks * self.swap_latency + num_blocks * block_size * self._bpt() / self.pcie_bw

    def swap_bytes(self, num_blocks: int, block_size: int) -> int:
        return num_blocks * block_size * self._bpt()

    def recompute_time(self, num_tokens: int) -> float:
        return self.c_prompt * num_tokens

    def swap_roundtrip_time(self, num_tokens: int, block_size: int) -> float:
        """Swap a ``num_tokens`` sequence out and back in."""
        return 2 * self.swap_time(math.ceil(num_tokens / block_size), block_size)

    def iteration_time(
        self,
        prompt_tokens: int = 0,
        decode_tokens: int = 0,
        kv_read: int = 0,
        copy_slots: int = 0,
        swap_ops: Iterable[int] = (),
        block_size: int = 1,
    ) -> float:
        t = (
            self.c0
            + self.c_prompt * prompt_tokens
            + self.c_decode * decode_tokens
            + self.c_kv_read * kv_read
            + self.c_copy * copy_slots
        )
        return t + sum(self.swap_time(n, block_size) for n in swap_ops)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> CostModel:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cost keys: {sorted(unknown)}")
        return cls(**d)
