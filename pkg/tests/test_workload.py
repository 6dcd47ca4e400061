import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pagedkv.core import DecodingConfig
from pagedkv.workload import (
    LengthDistribution,
    TraceError,
    TraceRecord,
    WorkloadProfile,
    generate_trace,
    get_profile,
    mean_lengths,
    prompt_tokens,
    read_trace,
    write_trace,
)


def test_trace_is_pure_function_of_arguments():
    a = generate_trace(3.0, 50, get_profile("short"), 4)
    b = generate_trace(3.0, 50, get_profile("short"), 4)
    assert a == b
    assert a != generate_trace(3.0, 50, get_profile("short"), 5)


def test_poisson_count_and_gaps():
    t = generate_trace(2.0, 600, get_profile("short"), 0)
    assert abs(len(t) - 1200) < 4 * np.sqrt(1200)
    gaps = np.diff([0.0] + [r.arrival_time for r in t])
    assert abs(gaps.mean() - 0.5) < 0.05
    assert all(r.arrival_time < 600 for r in t)


def test_profile_ratios():
    long_p, long_o = mean_lengths(generate_trace(20, 200, get_profile("long"), 1))
    short_p, short_o = mean_lengths(generate_trace(20, 200, get_profile("short"), 1))
    assert 7.4 < long_p / short_p < 9.4
    assert 5.0 < long_o / short_o < 6.7


def test_lengths_respect_context_limit():
    for r in generate_trace(30, 100, get_profile("long"), 2, max_seq_len=512):
        assert r.prompt_len >= 1 and r.output_len >= 1 and r.prompt_len + r.output_len <= 512


def test_length_distributions():
    rng = np.random.default_rng(0)
    assert LengthDistribution.fixed(7).draw(rng) == 7
    xs = [LengthDistribution.uniform(3, 5).draw(rng) for _ in range(200)]
    assert set(xs) == {3, 4, 5}
    h = LengthDistribution.histogram([(1, 1, 0.0), (10, 12, 1.0)])
    assert all(10 <= h.draw(rng) <= 12 for _ in range(50))
    ln = LengthDistribution.lognormal(100.0, 0.5)
    assert abs(np.mean([ln.draw(rng) for _ in range(20000)]) - 100) < 2
    assert LengthDistribution.fixed(10).scaled(0.5).value == 5


def test_decoding_mix_and_normalisation():
    prof = get_profile("short").with_decoding(
        (DecodingConfig.greedy(), 1.0), (DecodingConfig.beam(2), 1.0)
    )
    t = generate_trace(10, 50, prof, 3)
    kinds = {r.decoding.kind.value for r in t}
    assert kinds == {"greedy", "beam"}
    assert all(r.decoding.max_new_tokens == r.output_len for r in t)


def test_roundtrip_file(tmp_path):
    prof = get_profile("short").with_decoding(DecodingConfig.sample(3, 0.7), DecodingConfig.beam(2))
    t = generate_trace(5, 20, prof, 8)
    p = tmp_path / "t.jsonl"
    write_trace(t, p)
    assert read_trace(p) == t
    line = json.loads(p.read_text().splitlines()[0])
    assert set(line) == {"arrival_time", "prompt_len", "output_len", "decoding", "seed"}


def _write(tmp_path, rows):
    p = tmp_path / "bad.jsonl"
    p.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return p


GOOD = {"arrival_time": 0.0, "prompt_len": 3, "output_len": 4, "decoding": {"kind": "greedy", "max_new_tokens": 4}, "seed": 1}


@pytest.mark.parametrize(
    "bad",
    [
        {**GOOD, "extra": 1},
        {k: v for k, v in GOOD.items() if k != "seed"},
        {**GOOD, "prompt_len": 0},
        {**GOOD, "prompt_len": 2000, "output_len": 100},
        {**GOOD, "decoding": {"kind": "nope", "max_new_tokens": 4}},
    ],
)
def test_bad_record_reports_line(tmp_path, bad):
    with pytest.raises(TraceError, match=":2:"):
        read_trace(_write(tmp_path, [GOOD, bad]))


def test_arrivals_must_not_decrease(tmp_path):
    with pytest.raises(TraceError):
        read_trace(_write(tmp_path, [{**GOOD, "arrival_time": 2.0}, GOOD]))


def test_prompt_tokens_deterministic_and_in_vocab():
    r = TraceRecord(0.0, 30, 5, seed=17)
    a = prompt_tokens(r, 256)
    assert a == prompt_tokens(r, 256) and len(a) == 30 and max(a) < 256
    assert a != prompt_tokens(TraceRecord(0.0, 30, 5, seed=18), 256)


def test_record_validation():
    with pytest.raises(ValueError):
        TraceRecord(-1.0, 3, 3)
    with pytest.raises(ValueError):
        generate_trace(0, 10, get_profile("short"), 0)
    with pytest.raises(KeyError):
        get_profile("medium")


@settings(max_examples=25)
@given(rate=st.floats(0.5, 20), dur=st.floats(0, 30), seed=st.integers(0, 2**20))
def test_arrivals_sorted_and_bounded(rate, dur, seed):
    t = generate_trace(rate, dur, WorkloadProfile("u", LengthDistribution.uniform(1, 50), LengthDistribution.uniform(1, 50)), seed)
    times = [r.arrival_time for r in t]
    assert times == sorted(times) and all(0 < x < dur for x in times)
