"""Engine configuration (JSON file + CLI overrides) and engine construction."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np

from .baselines import ContiguousMemory, ReservationPolicy
from .cost import CostModel
from .engine import Engine
from .memory import PagedMemory
from .model import ModelConfig, TinyModel
from .scheduler import Policy

ALLOCATORS = ("paged", "oracle", "pow2", "max")


@dataclass(frozen=True)
class EngineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    block_size: int = 16
    gpu_pool_blocks: int = 1024
    cpu_pool_blocks: Optional[int] = None
    # When set, the gpu pool holds this many token slots whatever the block size.
    kv_slots: Optional[int] = None
    allocator: str = "paged"
    policy: str = "recompute"
    watermark: float = 0.01
    enable_sharing: bool = True
    max_batched_tokens: Optional[int] = None
    force_preempt_every: Optional[int] = None
    shared_prefix_len: int = 0
    seed: int = 0
    cost: CostModel = field(default_factory=CostModel)

    def __post_init__(self) -> None:
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.num_gpu_blocks < 1:
            raise ValueError("the gpu pool needs at least one block")
        if self.cpu_pool_blocks is not None and self.cpu_pool_blocks < 1:
            raise ValueError("the cpu pool needs at least one block")
        if self.allocator not in ALLOCATORS:
            raise ValueError(f"allocator must be one of {ALLOCATORS}")
        Policy(self.policy)
        if not 0 <= self.watermark < 1:
            raise ValueError("watermark must be in [0, 1)")
        if self.shared_prefix_len < 0:
            raise ValueError("shared_prefix_len must be >= 0")

    @property
    def num_gpu_blocks(self) -> int:
        if self.kv_slots is not None:
            return self.kv_slots // self.block_size
        return self.gpu_pool_blocks

    @property
    def capacity_slots(self) -> int:
        return self.num_gpu_blocks * self.block_size

    def with_overrides(self, **kw: Any) -> EngineConfig:
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["model"] = asdict(self.model)
        d["cost"] = self.cost.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EngineConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            mk = {f.name for f in fields(ModelConfig)}
            bad = set(d["model"]) - mk
            if bad:
                raise ValueError(f"unknown model keys: {sorted(bad)}")
            d["model"] = ModelConfig(**d["model"])
        if "cost" in d:
            d["cost"] = CostModel.from_dict(d["cost"])
        return cls(**d)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> EngineConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_memory(cfg: EngineConfig):
    if cfg.allocator == "paged":
        return PagedMemory(
            cfg.model,
            cfg.num_gpu_blocks,
            cfg.block_size,
            cfg.cpu_pool_blocks,
            cfg.watermark,
            enable_sharing=cfg.enable_sharing,
        )
    return ContiguousMemory(cfg.model, cfg.capacity_slots, ReservationPolicy(cfg.allocator))


def prefix_tokens(cfg: EngineConfig) -> list[int]:
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(2,)))
    return rng.integers(0, cfg.model.vocab_size, cfg.shared_prefix_len).tolist()


def build_engine(cfg: EngineConfig, model: Optional[TinyModel] = None, snapshot_recompute: bool = False) -> Engine:
    model = model if model is not None else TinyModel(cfg.model)
    return Engine(
        model,
        build_memory(cfg),
        cfg.policy,
        max_batched_tokens=cfg.max_batched_tokens,
        force_preempt_every=cfg.force_preempt_every,
        snapshot_recompute=snapshot_recompute,
    )
