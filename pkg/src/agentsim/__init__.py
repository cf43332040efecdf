"""Discrete-event simulator for phase-aware single-GPU serving of LLM agents."""

from .analysis import BoundParams, verify_trace
from .config import RunConfig, default_config, load_config, loads_config
from .engine import run
from .metrics import slo_attainment, summary, tpot_percentiles, ttft
from .profiles import ProfileBundle, default_bundle, load_profiles
from .replay import replay_check
from .trace import Trace

__all__ = [
    "BoundParams",
    "ProfileBundle",
    "RunConfig",
    "Trace",
    "default_bundle",
    "default_config",
    "load_config",
    "load_profiles",
    "loads_config",
    "replay_check",
    "run",
    "slo_attainment",
    "summary",
    "tpot_percentiles",
    "ttft",
    "verify_trace",
]
