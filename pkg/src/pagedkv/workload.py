"""Synthetic request traces and their JSON-lines file format.

One record per line with exactly the keys ``arrival_time``, ``prompt_len``,
``output_len``, ``decoding`` and ``seed``.  ``output_len`` is authoritative:
generation stops after that many tokens, and the record's decoding config is
normalised to it.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence as Seq, Union

import numpy as np

from .core import DecodingConfig

RECORD_KEYS = frozenset({"arrival_time", "prompt_len", "output_len", "decoding", "seed"})


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    arrival_time: float
    prompt_len: int
    output_len: int
    decoding: DecodingConfig = field(default_factory=DecodingConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.prompt_len < 1:
            raise ValueError("prompt_len must be >= 1")
        if self.output_len < 1:
            raise ValueError("output_len must be >= 1")
        if self.arrival_time < 0:
            raise ValueError("arrival_time must be >= 0")
        if self.decoding.max_new_tokens != self.output_len:
            object.__setattr__(self, "decoding", self.decoding.with_max_new_tokens(self.output_len))

    def to_dict(self) -> dict[str, Any]:
        return {
            "arrival_time": self.arrival_time,
            "prompt_len": self.prompt_len,
            "output_len": self.output_len,
            "decoding": self.decoding.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TraceRecord:
        keys = set(d)
        if keys != RECORD_KEYS:
            missing = sorted(RECORD_KEYS - keys)
            extra = sorted(keys - RECORD_KEYS)
            raise ValueError(f"bad keys (missing {missing}, unexpected {extra})")
        return cls(
            float(d["arrival_time"]),
            int(d["prompt_len"]),
            int(d["output_len"]),
            DecodingConfig.from_dict(d["decoding"]),
            int(d["seed"]),
        )


class LengthKind(str, enum.Enum):
    FIXED = "fixed"
    UNIFORM = "uniform"
    LOGNORMAL = "lognormal"
    HISTOGRAM = "histogram"


@dataclass(frozen=True)
class LengthDistribution:
    """One length variable.

    ``fixed``: ``value``; ``uniform``: integers in ``[low, high]``;
    ``lognormal``: ``round(exp(N(mu, sigma)))``; ``histogram``: ``bins`` of
    ``(low, high, weight)`` with a uniform draw inside the chosen bin.
    """

    kind: LengthKind = LengthKind.FIXED
    value: int = 1
    low: int = 1
    high: int = 1
    mu: float = 0.0
    sigma: float = 1.0
    bins: tuple[tuple[int, int, float], ...] = ()

    @classmethod
    def fixed(cls, value: int) -> LengthDistribution:
        return cls(LengthKind.FIXED, value=value)

    @classmethod
    def uniform(cls, low: int, high: int) -> LengthDistribution:
        return cls(LengthKind.UNIFORM, low=low, high=high)

    @classmethod
    def lognormal(cls, mean: float, sigma: float) -> LengthDistribution:
        """Parameterised by the mean of the (unrounded) distribution."""
        return cls(LengthKind.LOGNORMAL, mu=math.log(mean) - sigma**2 / 2, sigma=sigma)

    @classmethod
    def histogram(cls, bins: Iterable[tuple[int, int, float]]) -> LengthDistribution:
        return cls(LengthKind.HISTOGRAM, bins=tuple((int(a), int(b), float(w)) for a, b, w in bins))

    def draw(self, rng: np.random.Generator) -> int:
        k = LengthKind(self.kind)
        if k is LengthKind.FIXED:
            return self.value
        if k is LengthKind.UNIFORM:
            return int(rng.integers(self.low, self.high + 1))
        if k is LengthKind.LOGNORMAL:
            return int(round(math.exp(rng.normal(self.mu, self.sigma))))
        w = np.array([b[2] for b in self.bins])
        i = int(rng.choice(len(self.bins), p=w / w.sum()))
        lo, hi, _ = self.bins[i]
        return int(rng.integers(lo, hi + 1))

    def scaled(self, factor: float) -> LengthDistribution:
        k = LengthKind(self.kind)
        if k is LengthKind.FIXED:
            return LengthDistribution.fixed(max(1, round(self.value * factor)))
        if k is LengthKind.UNIFORM:
            return LengthDistribution.uniform(max(1, round(self.low * factor)), max(1, round(self.high * factor)))
        if k is LengthKind.LOGNORMAL:
            return LengthDistribution(LengthKind.LOGNORMAL, mu=self.mu + math.log(factor), sigma=self.sigma)
        return LengthDistribution.histogram(
            (max(1, round(a * factor)), max(1, round(b * factor)), w) for a, b, w in self.bins
        )


@dataclass(frozen=True)
class WorkloadProfile:
    """Independent prompt and output length distributions plus a decoding mix."""

    name: str
    prompt: LengthDistribution
    output: LengthDistribution
    decoding: tuple[tuple[DecodingConfig, float], ...] = ((DecodingConfig(), 1.0),)

    def with_decoding(self, *mix: Union[DecodingConfig, tuple[DecodingConfig, float]]) -> WorkloadProfile:
        items = tuple(m if isinstance(m, tuple) else (m, 1.0) for m in mix)
        return WorkloadProfile(self.name, self.prompt, self.output, items)

    def scaled(self, factor: float) -> WorkloadProfile:
        return WorkloadProfile(
            f"{self.name}x{factor:g}", self.prompt.scaled(factor), self.output.scaled(factor), self.decoding
        )


# Shape statistics of two instruction/chat-style workloads: the long profile
# has about 8.4x longer prompts and 5.8x longer outputs than the short one.
PROFILES: dict[str, WorkloadProfile] = {
    "short": WorkloadProfile(
        "short", LengthDistribution.lognormal(19.3, 0.6), LengthDistribution.lognormal(58.5, 0.6)
    ),
    "long": WorkloadProfile(
        "long", LengthDistribution.lognormal(162.0, 1.0), LengthDistribution.lognormal(351.0, 0.9)
    ),
}


def get_profile(name: str) -> WorkloadProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def _clip_pair(p: int, o: int, max_seq_len: int) -> tuple[int, int]:
    p = min(max(p, 1), max_seq_len - 1)
    o = min(max(o, 1), max_seq_len - 1)
    return p, min(o, max_seq_len - p)


def generate_trace(
    rate: float,
    duration: float,
    profile: WorkloadProfile,
    seed: int,
    max_seq_len: int = 2048,
) -> list[TraceRecord]:
    """Poisson arrivals on ``[0, duration)`` with iid lengths; a pure function of its arguments.

    Per request the generator consumes, in order: one exponential gap, the
    prompt length, the output length, the decoding choice and the seed.
    """
    if not rate > 0:
        raise ValueError("rate must be > 0")
    if duration < 0:
        raise ValueError("duration must be >= 0")
    rng = np.random.default_rng(seed)
    weights = np.array([w for _, w in profile.decoding], dtype=np.float64)
    weights /= weights.sum()
    out = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / rate)
        if t >= duration:
            break
        p, o = _clip_pair(profile.prompt.draw(rng), profile.output.draw(rng), max_seq_len)
        dec = profile.decoding[int(rng.choice(len(weights), p=weights))][0] if len(weights) > 1 else profile.decoding[0][0]
        out.append(TraceRecord(t, p, o, dec, int(rng.integers(0, 2**31 - 1))))
    return out


def write_trace(records: Iterable[TraceRecord], path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_trace(path: Union[str, Path], max_seq_len: int = 2048) -> list[TraceRecord]:
    records: list[TraceRecord] = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = TraceRecord.from_dict(json.loads(line))
            except (ValueError, TypeError, KeyError) as e:
                raise TraceError(f"{path}:{lineno}: {e}") from None
            if rec.prompt_len + rec.output_len > max_seq_len:
                raise TraceError(
                    f"{path}:{lineno}: prompt_len + output_len = {rec.prompt_len + rec.output_len} exceeds {max_seq_len}"
                )
            if records and rec.arrival_time < records[-1].arrival_time:
                raise TraceError(f"{path}:{lineno}: arrival times must be nondecreasing")
            records.append(rec)
    return records


def prompt_tokens(record: TraceRecord, vocab_size: int) -> list[int]:
    """Deterministic prompt token ids for a record (a stream separate from sampling)."""
    rng = np.random.default_rng(np.random.SeedSequence(record.seed, spawn_key=(1,)))
    return rng.integers(0, vocab_size, record.prompt_len).tolist()


def mean_lengths(records: Seq[TraceRecord]) -> tuple[float, float]:
    if not records:
        return 0.0, 0.0
    return (
        float(np.mean([r.prompt_len for r in records])),
        float(np.mean([r.output_len for r in records])),
    )
