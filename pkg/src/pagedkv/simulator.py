"""Discrete-event replay of a trace through the engine in virtual time.

At every iteration boundary arrivals up to ``now`` are queued, the engine
runs one iteration (computing real tokens with the toy model) and ``now``
advances by the cost model.  Nothing sleeps.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence as Seq, Union

import numpy as np

from .config import EngineConfig, build_engine, prefix_tokens
from .scheduler import GroupTooLarge
from .workload import TraceRecord, prompt_tokens

TICK_FIELDS = (
    "iteration",
    "time",
    "dt",
    "batch_seqs",
    "prompt_tokens",
    "decode_tokens",
    "running",
    "waiting",
    "swapped",
    "token_states",
    "reserved",
    "internal_frag",
    "external_frag",
    "free",
    "logical_blocks",
    "physical_blocks",
)

SUMMARY_FIELDS = (
    "allocator",
    "policy",
    "block_size",
    "num_requests",
    "num_rejected",
    "duration",
    "iterations",
    "mean_latency",
    "mean_normalized_latency",
    "throughput",
    "tokens_generated",
    "utilization",
    "token_fraction",
    "reserved_fraction",
    "internal_fraction",
    "external_fraction",
    "mean_batch_seqs",
    "preemptions",
    "swap_blocks",
    "swap_bytes",
    "swap_time",
    "recompute_tokens",
    "recompute_time",
    "copy_slots",
    "sharing_saving",
)


@dataclass
class RequestRecord:
    index: int
    group_id: int
    arrival_time: float
    prompt_len: int
    output_len: int
    decoding: str
    first_scheduled: Optional[float] = None
    finish_time: Optional[float] = None
    num_preemptions: int = 0
    outputs: list[list[int]] = field(default_factory=list)
    rejected: bool = False

    @property
    def latency(self) -> float:
        return self.finish_time - self.arrival_time

    @property
    def normalized_latency(self) -> float:
        return self.latency / self.output_len


@dataclass
class SimMetrics:
    allocator: str
    policy: str
    block_size: int
    capacity_slots: int
    requests: list[RequestRecord] = field(default_factory=list)
    ticks: list[dict[str, float]] = field(default_factory=list)
    duration: float = 0.0
    preemptions: int = 0
    swap_blocks: int = 0
    swap_bytes: int = 0
    swap_time: float = 0.0
    recompute_tokens: int = 0
    recompute_time: float = 0.0
    copy_slots: int = 0
    recompute_max_err: float = 0.0
    state: Optional[dict[str, Any]] = None

    # -- aggregates ---------------------------------------------------------------

    @property
    def completed(self) -> list[RequestRecord]:
        return [r for r in self.requests if not r.rejected]

    def _mean(self, xs: list[float]) -> float:
        return float(np.mean(xs)) if xs else 0.0

    @property
    def mean_latency(self) -> float:
        return self._mean([r.latency for r in self.completed])

    @property
    def mean_normalized_latency(self) -> float:
        return self._mean([r.normalized_latency for r in self.completed])

    @property
    def tokens_generated(self) -> int:
        return sum(len(o) for r in self.completed for o in r.outputs)

    def _tw(self, key: str) -> float:
        return sum(t["dt"] * t[key] for t in self.ticks)

    def _elapsed(self) -> float:
        return sum(t["dt"] for t in self.ticks)

    def _frac(self, key: str) -> float:
        total = self._elapsed() * self.capacity_slots
        return self._tw(key) / total if total else 0.0

    @property
    def utilization(self) -> float:
        """Time-averaged share of occupied (non-free) slots that hold token states."""
        occ = sum(t["dt"] * (self.capacity_slots - t["free"]) for t in self.ticks)
        return self._tw("token_states") / occ if occ else 0.0

    @property
    def sharing_saving(self) -> float:
        logical = self._tw("logical_blocks")
        return (logical - self._tw("physical_blocks")) / logical if logical else 0.0

    def summary(self) -> dict[str, Any]:
        dt = self._elapsed()
        return {
            "allocator": self.allocator,
            "policy": self.policy,
            "block_size": self.block_size,
            "num_requests": len(self.requests),
            "num_rejected": sum(r.rejected for r in self.requests),
            "duration": self.duration,
            "iterations": len(self.ticks),
            "mean_latency": self.mean_latency,
            "mean_normalized_latency": self.mean_normalized_latency,
            "throughput": len(self.completed) / self.duration if self.duration else 0.0,
            "tokens_generated": self.tokens_generated,
            "utilization": self.utilization,
            "token_fraction": self._frac("token_states"),
            "reserved_fraction": self._frac("reserved"),
            "internal_fraction": self._frac("internal_frag"),
            "external_fraction": self._frac("external_frag"),
            "mean_batch_seqs": self._tw("batch_seqs") / dt if dt else 0.0,
            "preemptions": self.preemptions,
            "swap_blocks": self.swap_blocks,
            "swap_bytes": self.swap_bytes,
            "swap_time": self.swap_time,
            "recompute_tokens": self.recompute_tokens,
            "recompute_time": self.recompute_time,
            "copy_slots": self.copy_slots,
            "sharing_saving": self.sharing_saving,
        }

    def outputs(self) -> dict[int, list[list[int]]]:
        return {r.index: r.outputs for r in self.requests if not r.rejected}

    # -- files ----------------------------------------------------------------------

    def ticks_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, TICK_FIELDS, lineterminator="\n")
        w.writeheader()
        for t in self.ticks:
            w.writerow(t)
        return buf.getvalue()

    def to_json(self, include_tokens: bool = False) -> dict[str, Any]:
        reqs = []
        for r in self.requests:
            d = {k: v for k, v in asdict(r).items() if k != "outputs"}
            if not r.rejected:
                d["latency"] = r.latency
                d["normalized_latency"] = r.normalized_latency
            if include_tokens:
                d["outputs"] = r.outputs
            reqs.append(d)
        return {"summary": self.summary(), "requests": reqs}

    def write(self, path: Union[str, Path], per_tick: bool = False, include_tokens: bool = False) -> None:
        """``path`` gets a one-row CSV summary (or per-tick CSV); ``path`` + ``.json`` the full summary."""
        path = Path(path)
        if per_tick:
            path.write_text(self.ticks_csv())
        else:
            path.write_text(rows_to_csv([self.summary()], SUMMARY_FIELDS))
        Path(str(path) + ".json").write_text(
            json.dumps(self.to_json(include_tokens), indent=2, sort_keys=True) + "\n"
        )


def rows_to_csv(rows: Iterable[dict[str, Any]], header: Seq[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, list(header), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def run_simulation(
    trace: Seq[TraceRecord],
    cfg: EngineConfig,
    snapshot_recompute: bool = False,
    check_invariants: bool = False,
    stop_at: Optional[int] = None,
) -> SimMetrics:
    """Replay ``trace`` under ``cfg``.

    With ``stop_at`` the run halts after that iteration and ``metrics.state``
    holds a dump of the memory backend and the scheduler queues.
    """
    engine = build_engine(cfg, snapshot_recompute=snapshot_recompute)
    mem = engine.memory
    cost = cfg.cost.resolved(cfg.model.hidden_size, cfg.model.num_layers)
    B = cfg.block_size
    metrics = SimMetrics(cfg.allocator, cfg.policy, B, mem.capacity_slots)

    prefix: list[int] = []
    if cfg.shared_prefix_len:
        prefix = prefix_tokens(cfg)
        if cfg.allocator == "paged":
            engine.register_prefix(prefix)

    by_group: dict[int, RequestRecord] = {}
    groups = {}
    now = 0.0
    i = 0
    n = len(trace)
    while i < n or engine.has_work:
        while i < n and trace[i].arrival_time <= now:
            rec = trace[i]
            rr = RequestRecord(i, -1, rec.arrival_time, rec.prompt_len, rec.output_len, rec.decoding.kind.value)
            metrics.requests.append(rr)
            try:
                g = engine.add_request(
                    prefix + prompt_tokens(rec, cfg.model.vocab_size),
                    rec.decoding,
                    rec.seed,
                    rec.arrival_time,
                    prefix=prefix or None,
                )
            except (GroupTooLarge, ValueError):
                rr.rejected = True
            else:
                rr.group_id = g.group_id
                by_group[g.group_id] = rr
                groups[g.group_id] = g
            i += 1
        if not engine.has_work:
            if i < n:
                now = max(now, trace[i].arrival_time)
            continue

        st = engine.step()
        plan = st.plan
        # An iteration whose only action was a preemption is legal (e.g. the
        # sole running group was force-preempted); anything else is a stall.
        if plan.is_empty and not plan.preempted:
            raise RuntimeError("scheduler made no progress with work queued")
        for g in plan.prompt_groups:
            by_group[g.group_id].first_scheduled = now
        dt = cost.iteration_time(
            st.prompt_tokens, st.decode_tokens, st.kv_read, st.copy_slots, st.swap_ops, B
        )
        swap_blocks = sum(st.swap_ops)
        metrics.preemptions += len(plan.preempted)
        metrics.swap_blocks += swap_blocks
        metrics.swap_bytes += cost.swap_bytes(swap_blocks, B) if swap_blocks else 0
        metrics.swap_time += sum(cost.swap_time(k, B) for k in st.swap_ops)
        metrics.recompute_tokens += st.recompute_tokens
        metrics.recompute_time += cost.recompute_time(st.recompute_tokens)
        metrics.copy_slots += st.copy_slots

        w = mem.waste()
        logical, physical = mem.sharing_counts()
        sch = engine.scheduler
        metrics.ticks.append(
            {
                "iteration": plan.iteration,
                "time": now,
                "dt": dt,
                "batch_seqs": st.decode_tokens + sum(len(g.sequences) + len(g.finished) for g in plan.prompt_groups + plan.recompute_groups),
                "prompt_tokens": st.prompt_tokens,
                "decode_tokens": st.decode_tokens,
                "running": len(sch.running),
                "waiting": len(sch.waiting),
                "swapped": len(sch.swapped),
                **w.as_dict(),
                "logical_blocks": logical,
                "physical_blocks": physical,
            }
        )
        if check_invariants:
            mem.check_invariants()
            sch.check_invariants()
        now += dt
        for g in st.finished:
            rr = by_group[g.group_id]
            rr.finish_time = now
            rr.num_preemptions = g.num_preemptions
            rr.outputs = g.outputs()
            g.finish_time = now
        if stop_at is not None and plan.iteration >= stop_at:
            metrics.state = _state_dump(engine, now)
            break

    metrics.duration = now
    metrics.recompute_max_err = engine.recompute_max_err
    return metrics


def _state_dump(engine, now: float) -> dict[str, Any]:
    sch = engine.scheduler

    def groups(q):
        return [
            {
                "group": g.group_id,
                "status": g.status.value,
                "sequences": [
                    {"seq": s.seq_id, "len": len(s), "table": getattr(s.kv, "table_id", None)} for s in g.sequences
                ],
            }
            for g in q
        ]

    return {
        "iteration": sch.iteration,
        "time": now,
        "memory": engine.memory.dump(),
        "running": groups(sch.running),
        "waiting": groups(sch.waiting),
        "swapped": groups(sch.swapped),
    }


def memory_saving_from_sharing(metrics: SimMetrics) -> float:
    """Time-averaged ``(blocks without sharing - blocks used) / blocks without sharing``."""
    return metrics.sharing_saving


SWEEP_PARAMS = ("block_size", "request_rate", "allocator", "policy")


def _run_one(args: tuple[Seq[TraceRecord], EngineConfig]) -> dict[str, Any]:
    trace, cfg = args
    return run_simulation(trace, cfg).summary()


def sweep(
    param: str,
    values: Seq[Any],
    trace: Seq[TraceRecord],
    cfg: EngineConfig,
    parallel: int = 1,
) -> list[dict[str, Any]]:
    """One run per value on the same trace and seeds; returns one summary row per run.

    ``request_rate`` values rescale the trace's arrival times relative to
    ``base_rate = len(trace) / last arrival``.
    """
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {SWEEP_PARAMS}")
    if not values:
        raise ValueError("sweep needs at least one value")
    jobs = []
    for v in values:
        t = trace
        c = cfg
        if param == "block_size":
            c = replace(cfg, block_size=int(v))
        elif param == "allocator":
            c = replace(cfg, allocator=str(v))
        elif param == "policy":
            c = replace(cfg, policy=str(v))
        else:
            t = rescale_rate(trace, float(v))
        jobs.append((t, c))
    if parallel > 1:
        with ProcessPoolExecutor(parallel) as ex:
            rows = list(ex.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    for v, r in zip(values, rows):
        r["param"] = param
        r["value"] = v
    return rows


def trace_rate(trace: Seq[TraceRecord]) -> float:
    if not trace or trace[-1].arrival_time == 0:
        return 0.0
    return len(trace) / trace[-1].arrival_time


def rescale_rate(trace: Seq[TraceRecord], rate: float) -> list[TraceRecord]:
    base = trace_rate(trace)
    if base == 0:
        return list(trace)
    f = base / rate
    return [replace(r, arrival_time=r.arrival_time * f) for r in trace]
