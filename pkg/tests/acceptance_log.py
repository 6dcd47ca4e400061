"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

import time
from contextlib import contextmanager

RESULTS: list[str] = []


@contextmanager
def criterion(number: int, title: str, budget_s: float):
    t0 = time.perf_counter()
    detail: dict = {}
    try:
        yield detail
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s:.0f}s"
    except BaseException as e:
        elapsed = time.perf_counter() - t0
        line = f"[FAIL] criterion {number:2d}: {title} ({elapsed:.1f}s) {type(e).__name__}: {e}"
        RESULTS.append(line)
        print(line)
        raise
    extra = " ".join(f"{k}={v}" for k, v in detail.items())
    line = f"[PASS] criterion {number:2d}: {title} ({elapsed:.1f}s) {extra}".rstrip()
    RESULTS.append(line)
    print(line)
