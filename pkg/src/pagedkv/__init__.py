"""Paged KV-cache management, block-wise attention and a serving simulator on CPU."""

from .attention import KvStorage, PagedKvCache, contiguous_attention, paged_attention
from .baselines import BuddyAllocator, ContiguousMemory, ReservationPolicy, reservation_size
from .block_manager import BlockManager, BlockTable, WasteBreakdown
from .config import EngineConfig, build_engine
from .core import DecodingConfig, DecodingKind, Sequence, SequenceGroup, SequenceStatus
from .cost import CostModel, kv_bytes_per_token
from .engine import Engine
from .memory import PagedMemory
from .model import ModelConfig, TinyModel
from .scheduler import Policy, Scheduler
from .simulator import SimMetrics, memory_saving_from_sharing, run_simulation, sweep
from .workload import TraceRecord, generate_trace, get_profile, read_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "BlockManager",
    "BlockTable",
    "BuddyAllocator",
    "ContiguousMemory",
    "CostModel",
    "DecodingConfig",
    "DecodingKind",
    "Engine",
    "EngineConfig",
    "KvStorage",
    "ModelConfig",
    "PagedKvCache",
    "PagedMemory",
    "Policy",
    "ReservationPolicy",
    "Scheduler",
    "Sequence",
    "SequenceGroup",
    "SequenceStatus",
    "SimMetrics",
    "TinyModel",
    "TraceRecord",
    "WasteBreakdown",
    "build_engine",
    "contiguous_attention",
    "generate_trace",
    "get_profile",
    "kv_bytes_per_token",
    "memory_saving_from_sharing",
    "paged_attention",
    "read_trace",
    "reservation_size",
    "run_simulation",
    "sweep",
    "write_trace",
]
