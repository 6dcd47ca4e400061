import json

import pytest

from pagedkv.config import EngineConfig, build_engine, prefix_tokens
from pagedkv.core import DecodingConfig
from pagedkv.model import ModelConfig
from pagedkv.simulator import (
    TICK_FIELDS,
    memory_saving_from_sharing,
    rescale_rate,
    run_simulation,
    sweep,
    trace_rate,
)
from pagedkv.workload import TraceRecord, generate_trace, get_profile

MIX = get_profile("short").with_decoding(
    (DecodingConfig.greedy(), 2.0), (DecodingConfig.sample(3), 1.0), (DecodingConfig.beam(3), 1.0)
)
TRACE = generate_trace(6, 3, MIX, 11)
CFG = EngineConfig(kv_slots=1024, block_size=8)


@pytest.fixture(scope="module")
def base():
    return run_simulation(TRACE, CFG, check_invariants=True)


def test_every_request_completes(base):
    assert len(base.completed) == len(TRACE)
    for r, rec in zip(base.requests, TRACE):
        assert r.finish_time > r.arrival_time == rec.arrival_time
        assert all(len(o) == rec.output_len for o in r.outputs)


def test_ticks_partition_the_pool(base):
    for t in base.ticks:
        assert set(TICK_FIELDS) == set(t)
        total = t["token_states"] + t["reserved"] + t["internal_frag"] + t["external_frag"] + t["free"]
        assert total == base.capacity_slots
        assert t["reserved"] == 0 and t["external_frag"] == 0
        assert t["dt"] > 0


def test_time_is_cost_model_sum(base):
    assert base.duration == pytest.approx(base.ticks[-1]["time"] + base.ticks[-1]["dt"])
    for a, b in zip(base.ticks, base.ticks[1:]):
        assert b["time"] >= a["time"] + a["dt"] - 1e-12


def test_deterministic(base):
    again = run_simulation(TRACE, CFG)
    assert again.outputs() == base.outputs()
    assert json.dumps(again.to_json()) == json.dumps(base.to_json())


def test_outputs_match_every_allocator(base):
    for alloc in ("oracle", "pow2", "max"):
        m = run_simulation(TRACE, CFG.with_overrides(allocator=alloc, kv_slots=16384), check_invariants=True)
        assert m.outputs() == base.outputs()
        assert m.summary()["allocator"] == alloc and m.preemptions == 0


@pytest.mark.parametrize("policy", ["swap", "recompute"])
def test_pressure_keeps_outputs(base, policy):
    burst = rescale_rate(TRACE, 100.0)
    m = run_simulation(burst, CFG.with_overrides(kv_slots=336, policy=policy), snapshot_recompute=True, check_invariants=True)
    assert m.preemptions > 0 and not any(r.rejected for r in m.requests)
    assert m.outputs() == base.outputs()
    assert m.recompute_max_err <= 1e-12
    if policy == "swap":
        assert m.swap_blocks > 0 and m.swap_time > 0
    else:
        assert m.recompute_tokens > 0 and m.swap_blocks == 0


def test_sharing_saving_positive_for_parallel_decoding(base):
    assert memory_saving_from_sharing(base) > 0
    off = run_simulation(TRACE, CFG.with_overrides(enable_sharing=False))
    assert memory_saving_from_sharing(off) == 0.0
    assert off.outputs() == base.outputs()


def test_shared_prefix_run(base):
    cfg = CFG.with_overrides(shared_prefix_len=20)
    m = run_simulation(TRACE, cfg, check_invariants=True)
    assert len(m.completed) == len(TRACE) and m.sharing_saving > base.sharing_saving
    assert len(prefix_tokens(cfg)) == 20


def test_oversized_request_rejected():
    trace = [TraceRecord(0.0, 10, 5), TraceRecord(0.1, 1000, 900)]
    m = run_simulation(trace, EngineConfig(kv_slots=256))
    assert [r.rejected for r in m.requests] == [False, True]
    assert m.summary()["num_rejected"] == 1


def test_idle_gap_is_skipped():
    trace = [TraceRecord(0.0, 4, 2), TraceRecord(100.0, 4, 2)]
    m = run_simulation(trace, EngineConfig())
    assert len(m.ticks) == 4 and m.duration > 100
    assert m.requests[1].latency < 0.1


def test_empty_trace():
    m = run_simulation([], EngineConfig())
    assert m.duration == 0 and m.summary()["mean_latency"] == 0.0


def test_sweep_rows():
    rows = sweep("block_size", [4, 16], TRACE, CFG)
    assert [r["value"] for r in rows] == [4, 16] and all(r["param"] == "block_size" for r in rows)
    assert rows[0]["tokens_generated"] == rows[1]["tokens_generated"]
    with pytest.raises(ValueError):
        sweep("colour", [1], TRACE, CFG)
    with pytest.raises(ValueError):
        sweep("block_size", [], TRACE, CFG)


def test_rescale_rate():
    r = trace_rate(TRACE)
    fast = rescale_rate(TRACE, 2 * r)
    assert trace_rate(fast) == pytest.approx(2 * r)
    assert [x.prompt_len for x in fast] == [x.prompt_len for x in TRACE]


def test_stop_at_dumps_state():
    m = run_simulation(TRACE, CFG, stop_at=5)
    assert len(m.ticks) == 5 and m.state["iteration"] == 5
    json.dumps(m.state)


def test_config_roundtrip(tmp_path):
    cfg = EngineConfig(model=ModelConfig(num_layers=3), block_size=4, policy="swap")
    p = tmp_path / "c.json"
    cfg.save(p)
    assert EngineConfig.load(p) == cfg
    with pytest.raises(ValueError):
        EngineConfig.from_dict({"model": {"depth": 3}})
    with pytest.raises(ValueError):
        EngineConfig(allocator="slab")
    with pytest.raises(ValueError):
        EngineConfig(policy="drop")
    assert EngineConfig(kv_slots=1000, block_size=16).num_gpu_blocks == 62


def test_build_engine_backends():
    assert build_engine(EngineConfig()).memory.name == "paged"
    assert build_engine(EngineConfig(allocator="pow2")).memory.name == "pow2"
