"""Command-line entry point: ``pagedkv <command> ...``.

Exit codes: 0 success, 1 runtime failure (bad trace, bad config, I/O), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence as Seq

from .config import ALLOCATORS, EngineConfig
from .core import DecodingConfig
from .simulator import SUMMARY_FIELDS, SWEEP_PARAMS, rows_to_csv, run_simulation, sweep
from .workload import PROFILES, generate_trace, get_profile, read_trace, write_trace

TIDY_FIELDS = ("param", "value", "metric", "result")
POLICY_FIELDS = ("block_size", "policy", "metric", "result")
_LABELS = {"allocator", "policy", "block_size"}


class UsageError(Exception):
    pass


def _decoding_spec(text: str) -> tuple[DecodingConfig, float]:
    """``greedy``, ``sample:N[:TEMP]`` or ``beam:K``, optionally suffixed ``@WEIGHT``."""
    spec, _, weight = text.partition("@")
    parts = spec.split(":")
    try:
        w = float(weight) if weight else 1.0
        if parts[0] == "greedy" and len(parts) == 1:
            return DecodingConfig.greedy(), w
        if parts[0] == "sample" and len(parts) in (2, 3):
            temp = float(parts[2]) if len(parts) == 3 else 1.0
            return DecodingConfig.sample(int(parts[1]), temp), w
        if parts[0] == "beam" and len(parts) == 2:
            return DecodingConfig.beam(int(parts[1])), w
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad decoding spec {text!r}: {e}") from None
    raise argparse.ArgumentTypeError(f"bad decoding spec {text!r}; use greedy, sample:N[:T] or beam:K")


def _add_engine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="engine config JSON; flags below override it")
    p.add_argument("--allocator", choices=ALLOCATORS)
    p.add_argument("--policy", choices=("swap", "recompute"))
    p.add_argument("--block-size", type=int)
    p.add_argument("--gpu-blocks", type=int, dest="gpu_pool_blocks")
    p.add_argument("--cpu-blocks", type=int, dest="cpu_pool_blocks")
    p.add_argument("--kv-slots", type=int, help="gpu pool size in token slots (overrides --gpu-blocks)")
    p.add_argument("--watermark", type=float)
    p.add_argument("--shared-prefix-len", type=int)
    p.add_argument("--force-preempt-every", type=int)
    p.add_argument("--max-batched-tokens", type=int)
    p.add_argument("--no-sharing", action="store_true", help="deep-copy on fork instead of sharing blocks")
    p.add_argument("--seed", type=int, help="seed for the shared-prefix tokens")


def _engine_config(args: argparse.Namespace) -> EngineConfig:
    cfg = EngineConfig.load(args.config) if args.config else EngineConfig()
    over = {
        k: getattr(args, k)
        for k in (
            "allocator",
            "policy",
            "block_size",
            "gpu_pool_blocks",
            "cpu_pool_blocks",
            "kv_slots",
            "watermark",
            "shared_prefix_len",
            "force_preempt_every",
            "max_batched_tokens",
            "seed",
        )
    }
    if args.no_sharing:
        over["enable_sharing"] = False
    return cfg.with_overrides(**over)


def _load_trace(args: argparse.Namespace, cfg: EngineConfig):
    return read_trace(args.trace, max_seq_len=cfg.model.max_seq_len)


def _parse_values(param: str, raw: str) -> list[Any]:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if not items:
        raise UsageError("--values needs at least one value")
    try:
        if param == "block_size":
            return [int(v) for v in items]
        if param == "request_rate":
            return [float(v) for v in items]
    except ValueError as e:
        raise UsageError(f"bad --values for {param}: {e}") from None
    allowed = ALLOCATORS if param == "allocator" else ("swap", "recompute")
    bad = [v for v in items if v not in allowed]
    if bad:
        raise UsageError(f"bad --values for {param}: {bad}; choose from {allowed}")
    return items


def _tidy(rows: Seq[dict[str, Any]], key_fields: Seq[str]) -> list[dict[str, Any]]:
    out = []
    for r in rows:
        for m in SUMMARY_FIELDS:
            if m in _LABELS:
                continue
            out.append({**{k: r[k] for k in key_fields}, "metric": m, "result": r[m]})
    return out


# -- commands ---------------------------------------------------------------------


def cmd_generate_trace(args: argparse.Namespace) -> int:
    profile = get_profile(args.profile)
    if args.decoding:
        profile = profile.with_decoding(*args.decoding)
    if args.length_scale != 1.0:
        profile = profile.scaled(args.length_scale)
    trace = generate_trace(args.rate, args.duration, profile, args.seed, args.max_seq_len)
    write_trace(trace, args.out)
    print(f"wrote {len(trace)} records to {args.out}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _engine_config(args)
    trace = _load_trace(args, cfg)
    metrics = run_simulation(trace, cfg)
    metrics.write(args.out_metrics, per_tick=args.per_tick, include_tokens=args.include_tokens)
    s = metrics.summary()
    print(
        f"{s['allocator']}: {len(metrics.completed)} requests, "
        f"mean normalized latency {s['mean_normalized_latency']:.6g} s/token, "
        f"utilization {s['utilization']:.4f}"
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    values = _parse_values(args.param, args.values)
    cfg = _engine_config(args)
    trace = _load_trace(args, cfg)
    rows = sweep(args.param, values, trace, cfg, parallel=args.parallel_sweeps)
    Path(args.out).write_text(rows_to_csv(_tidy(rows, ("param", "value")), TIDY_FIELDS))
    print(f"wrote {len(rows)} runs to {args.out}")
    return 0


def cmd_compare_policies(args: argparse.Namespace) -> int:
    cfg = _engine_config(args)
    trace = _load_trace(args, cfg)
    sizes = _parse_values("block_size", args.block_sizes)
    rows = []
    for B in sizes:
        c = cfg.with_overrides(block_size=B)
        for r in sweep("policy", ["swap", "recompute"], trace, c, parallel=args.parallel_sweeps):
            n = r["preemptions"]
            overhead = r["swap_time"] if r["policy"] == "swap" else r["recompute_time"]
            r["overhead_per_preemption"] = overhead / n if n else 0.0
            rows.append(r)
    out = []
    for r in rows:
        for m in ("preemptions", "swap_blocks", "swap_time", "recompute_tokens", "recompute_time",
                  "overhead_per_preemption", "mean_latency", "mean_normalized_latency", "duration"):
            out.append({"block_size": r["block_size"], "policy": r["policy"], "metric": m, "result": r[m]})
    Path(args.out).write_text(rows_to_csv(out, POLICY_FIELDS))
    print(f"wrote {len(rows)} runs to {args.out}")
    return 0


def cmd_dump_state(args: argparse.Namespace) -> int:
    cfg = _engine_config(args)
    trace = _load_trace(args, cfg)
    metrics = run_simulation(trace, cfg, stop_at=args.iteration)
    state = metrics.state
    if state is None:
        raise RuntimeError(f"the run finished after {len(metrics.ticks)} iterations, before iteration {args.iteration}")
    text = json.dumps(state, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pagedkv", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-trace", help="write a Poisson JSON-lines trace")
    p.add_argument("--rate", type=float, required=True, help="mean requests per second")
    p.add_argument("--duration", type=float, required=True, help="seconds of arrivals")
    p.add_argument("--profile", choices=sorted(PROFILES), required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--decoding", type=_decoding_spec, action="append",
                   help="greedy | sample:N[:T] | beam:K, with optional @WEIGHT; repeat for a mix")
    p.add_argument("--length-scale", type=float, default=1.0, help="multiply prompt and output lengths")
    p.add_argument("--max-seq-len", type=int, default=2048)
    p.set_defaults(func=cmd_generate_trace)

    p = sub.add_parser("simulate", help="replay a trace and write metrics")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--out-metrics", type=Path, required=True, help="summary CSV; a .json twin is written beside it")
    p.add_argument("--per-tick", action="store_true", help="write per-iteration rows instead of the summary row")
    p.add_argument("--include-tokens", action="store_true", help="put generated tokens in the JSON")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="one run per value of a parameter; tidy CSV")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", required=True, help="comma-separated")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--parallel-sweeps", type=int, default=1, metavar="N")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare-policies", help="swap vs recompute across block sizes; tidy CSV")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--block-sizes", default="16", help="comma-separated")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--parallel-sweeps", type=int, default=1, metavar="N")
    _add_engine_flags(p)
    p.set_defaults(func=cmd_compare_policies)

    p = sub.add_parser("dump-state", help="run to an iteration and print pools, tables and queues")
    p.add_argument("--trace", type=Path, required=True)
    p.add_argument("--iteration", type=int, required=True)
    p.add_argument("--out", type=Path)
    _add_engine_flags(p)
    p.set_defaults(func=cmd_dump_state)
    return ap


def main(argv: Optional[Seq[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "parallel_sweeps", 1) < 1:
        parser.error("--parallel-sweeps must be >= 1")
    try:
        return args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except (ValueError, KeyError, OSError, RuntimeError, json.JSONDecodeError) as e:
        print(f"pagedkv: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
