"""Shared fixtures: hand-built profiles and small run configs."""

from __future__ import annotations

import numpy as np
import pytest

from agentsim.config import default_config, from_data
from agentsim.profiles import COLD, DECODE, PHASES, RESUME, bundle_from_data


def bundle_data(decode, cold, resume, granularity=32):
    """Profile document with one rate list per phase on the grid {g, 2g, ...}."""
    n = len(decode)
    assert len(cold) == len(resume) == n
    rates = {DECODE: decode, COLD: cold, RESUME: resume}
    return {
        "total_sms": n * granularity,
        "granularity": granularity,
        "phases": {
            name: [{"sms": (i + 1) * granularity, "tokens_per_second": float(r)} for i, r in enumerate(rates[name])]
            for name in PHASES
        },
    }


def make_bundle(decode, cold, resume, granularity=32):
    return bundle_from_data(bundle_data(decode, cold, resume, granularity))


def random_monotone(rng, n, lo=1.0, hi=500.0, flat_prob=0.2):
    """Non-decreasing positive rates; some steps are exactly flat."""
    steps = rng.uniform(0.0, hi / n, size=n)
    steps[rng.random(n) < flat_prob] = 0.0
    return list(np.round(lo + np.cumsum(steps), 3))


def random_bundle(rng, max_levels=16):
    n = int(rng.integers(1, max_levels + 1))
    g = int(rng.choice([1, 4, 8, 12, 32]))
    return make_bundle(random_monotone(rng, n), random_monotone(rng, n), random_monotone(rng, n), g)


def tiny_config(cold_tokens=3000, concurrency=1, policy="mixed_fcfs", decode_tokens=5, steps=1, **over):
    """Four-slot device: decode 50 tok/s and cold 600 tok/s at the full GPU.

    Lengths are pinned so that timings have closed forms.
    """
    data = {
        "policy": policy,
        "profile": bundle_data([20, 35, 45, 50], [150, 300, 450, 600], [100, 200, 300, 400]),
        "executor": {"total_slots": 4},
        "workload": {
            "concurrency": concurrency,
            "stagger_ms": [0.0, 0.0],
            "steps_per_session": steps,
            "tool_delay": 100.0,
            "cold": {"min_tokens": cold_tokens, "max_tokens": cold_tokens, "mean_tokens": cold_tokens},
            "decode": {"min_tokens": decode_tokens, "max_tokens": decode_tokens, "mean_tokens": decode_tokens},
            "resume": {"min_tokens": 56, "max_tokens": 56, "mean_tokens": 56},
        },
    }
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return from_data(data)


@pytest.fixture
def small_bundle():
    """Decode {30, 55, 70, 78} on SMs {32, 64, 96, 128}."""
    return make_bundle([30, 55, 70, 78], [40, 80, 110, 130], [80, 120, 150, 160])


@pytest.fixture(scope="session")
def default_cfg():
    return default_config()


# -- acceptance report ---------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request):
    """Record the one-line verdict of an acceptance criterion."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
