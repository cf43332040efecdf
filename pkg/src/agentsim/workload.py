"""Agent sessions and their cold-prefill / decode / tool / resume-prefill loop.

A session issues one cold prefill, then alternates decode streams, tool waits
and resume prefills, and finishes with a decode stream. All phase lengths are
pre-sampled when the session is generated, so a run is a pure function of the
config and seed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .errors import ProtocolError, ValidationError

# request kinds
COLD_PREFILL = "ColdPrefill"
RESUME_PREFILL = "ResumePrefill"
DECODE_STREAM = "DecodeStream"
REQUEST_KINDS = (COLD_PREFILL, RESUME_PREFILL, DECODE_STREAM)

# session phases
AWAITING_COLD = "AwaitingColdPrefill"
DECODING = "Decoding"
AWAITING_TOOL = "AwaitingTool"
AWAITING_RESUME = "AwaitingResumePrefill"
DONE = "Done"

# completion events fed to next_phase
COLD_DONE = "cold_prefill_done"
RESUME_DONE = "resume_prefill_done"
DECODE_DONE = "decode_done"
TOOL_RETURNED = "tool_returned"


@dataclass(frozen=True)
class TokenDistribution:
    min_tokens: int
    max_tokens: int
    mean_tokens: float

    def __post_init__(self):
        if not 1 <= self.min_tokens <= self.mean_tokens <= self.max_tokens:
            raise ValidationError(
                f"token distribution needs 1 <= min <= mean <= max, got "
                f"({self.min_tokens}, {self.mean_tokens}, {self.max_tokens})"
            )


@dataclass(frozen=True)
class ToolDelay:
    kind: str = "fixed"  # "fixed" or "uniform"
    ms: float = 100.0
    low: float = 0.0
    high: float = 0.0

    def __post_init__(self):
        if self.kind == "fixed":
            if self.ms < 0:
                raise ValidationError("tool delay must be >= 0")
        elif self.kind == "uniform":
            if not 0 <= self.low <= self.high:
                raise ValidationError("uniform tool delay needs 0 <= low <= high")
        else:
            raise ValidationError(f"unknown tool delay kind '{self.kind}'")

    def sample(self, rng) -> float:
        if self.kind == "fixed":
            return float(self.ms)
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class ParadigmSpec:
    name: str
    cold: TokenDistribution
    resume: TokenDistribution
    decode: TokenDistribution
    steps_per_session: int
    tool_delay: ToolDelay = ToolDelay()

    def __post_init__(self):
        if self.steps_per_session < 1:
            raise ValidationError("steps_per_session must be >= 1")


# Token table per paradigm. Cold prefills are reported only as a 2.5k-3.5k
# range; the midpoint stands in for the missing average.
_COLD = TokenDistribution(2500, 3500, 3000)
DECODE_TABLE = {
    "ReAct": {
        "qwen2.5-3b": TokenDistribution(27, 99, 37),
        "qwen2.5-7b": TokenDistribution(21, 127, 45),
        "llama3-8b": TokenDistribution(32, 101, 38),
    },
    "PlanAndExecute": {
        "qwen2.5-3b": TokenDistribution(41, 125, 55),
        "qwen2.5-7b": TokenDistribution(33, 141, 62),
        "llama3-8b": TokenDistribution(22, 116, 64),
    },
}
RESUME_TABLE = {
    "ReAct": TokenDistribution(30, 127, 56),
    "PlanAndExecute": TokenDistribution(125, 421, 251),
}
DEFAULT_STEPS = {"ReAct": 4, "PlanAndExecute": 2}
DEFAULT_MODEL = "qwen2.5-7b"


def paradigm(name: str, model: str = DEFAULT_MODEL, **overrides) -> ParadigmSpec:
    """Built-in paradigm spec; keyword overrides replace individual fields."""
    if name not in DECODE_TABLE:
        raise ValidationError(f"unknown paradigm '{name}' (choose from {sorted(DECODE_TABLE)})")
    if model not in DECODE_TABLE[name]:
        raise ValidationError(f"unknown model '{model}' (choose from {sorted(DECODE_TABLE[name])})")
    spec = ParadigmSpec(
        name=name,
        cold=_COLD,
        resume=RESUME_TABLE[name],
        decode=DECODE_TABLE[name][model],
        steps_per_session=DEFAULT_STEPS[name],
    )
    return replace(spec, **overrides) if overrides else spec


# -- sampling ------------------------------------------------------------------

def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose.

    The stream depends only on (seed, name), so introducing a new name never
    shifts the draws of an existing one.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),)))


def _geometric_mean(q: float, n: int) -> float:
    # mean of P(k) ~ q**k on k = 0..n
    k = np.arange(n + 1, dtype=float)
    w = np.exp(k * np.log(q) - max(0.0, n * np.log(q)))
    return float((k * w).sum() / w.sum())


@lru_cache(maxsize=256)
def _offset_cdf(dist: TokenDistribution) -> np.ndarray:
    """CDF over offsets 0..(max-min) of a truncated geometric law with the target mean.

    P(k) is proportional to q**k. q < 1 skews toward short lengths (the usual
    case: averages sit well below the midpoint), q > 1 toward long ones, and
    q = 1 is uniform. q is found by bisection on log q, so the law's mean
    matches ``mean_tokens`` to within 1e-9 tokens.
    """
    n = dist.max_tokens - dist.min_tokens
    if n == 0:
        return np.ones(1)
    target = dist.mean_tokens - dist.min_tokens
    lo, hi = -60.0, 60.0  # log q; at the extremes nearly all mass sits on 0 or n
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _geometric_mean(np.exp(mid), n) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    q = np.exp(0.5 * (lo + hi))
    k = np.arange(n + 1, dtype=float)
    w = np.exp(k * np.log(q) - max(0.0, n * np.log(q)))
    cdf = np.cumsum(w / w.sum())
    cdf[-1] = 1.0
    return cdf


def law_mean(dist: TokenDistribution) -> float:
    """Exact mean of the sampling law (for checking the fit)."""
    cdf = _offset_cdf(dist)
    pmf = np.diff(np.concatenate(([0.0], cdf)))
    return dist.min_tokens + float((np.arange(len(pmf)) * pmf).sum())


def sample_length(dist: TokenDistribution, rng: np.random.Generator, size=None):
    """Draw token length(s) in ``[min_tokens, max_tokens]``."""
    cdf = _offset_cdf(dist)
    u = rng.random(size)
    k = np.searchsorted(cdf, u, side="right")
    k = np.minimum(k, len(cdf) - 1)
    if size is None:
        return int(dist.min_tokens + k)
    return (dist.min_tokens + k).astype(int)


# -- sessions ------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseRequest:
    session_id: int
    kind: str
    length_tokens: int
    issue_time: float
    index: int = 0  # which decode/resume of the session this is

    def __post_init__(self):
        if self.kind not in REQUEST_KINDS:
            raise ProtocolError(f"unknown request kind {self.kind}")
        if self.length_tokens < 1:
            raise ProtocolError(f"request length must be >= 1, got {self.length_tokens}")

    @property
    def rid(self) -> str:
        return f"{self.session_id}:{self.kind}:{self.index}"


@dataclass
class SessionState:
    session_id: int
    paradigm: str
    arrival_time: float
    cold_tokens: int
    decode_tokens: tuple  # steps + 1 entries
    resume_tokens: tuple  # steps entries
    tool_delays: tuple  # steps entries, ms
    phase: str = AWAITING_COLD
    cached_prefix: int = 0
    remaining_rounds: int = field(default=-1)
    round: int = 0  # number of decode streams completed

    def __post_init__(self):
        if self.remaining_rounds < 0:
            self.remaining_rounds = len(self.resume_tokens)

    def first_request(self) -> PhaseRequest:
        return PhaseRequest(self.session_id, COLD_PREFILL, self.cold_tokens, self.arrival_time, 0)

    def describe(self) -> dict:
        return {
            "session_id": self.session_id,
            "paradigm": self.paradigm,
            "arrival_time": self.arrival_time,
            "cold_tokens": self.cold_tokens,
            "decode_tokens": list(self.decode_tokens),
            "resume_tokens": list(self.resume_tokens),
            "tool_delays": list(self.tool_delays),
        }


def generate_sessions(
    concurrency: int,
    spec: ParadigmSpec,
    seed: int,
    stagger_ms: tuple = (0.0, 500.0),
) -> list:
    """Pre-sample ``concurrency`` sessions, arrivals uniform over the stagger window."""
    if concurrency < 1:
        raise ValidationError("concurrency must be >= 1")
    lo, hi = stagger_ms
    if not 0 <= lo <= hi:
        raise ValidationError("stagger window needs 0 <= low <= high")
    lengths = substream(seed, "workload")
    arrivals = substream(seed, "stagger")
    tools = substream(seed, "tool_delay")
    sessions = []
    for sid in range(concurrency):
        n = spec.steps_per_session
        cold = sample_length(spec.cold, lengths)
        decode = tuple(sample_length(spec.decode, lengths) for _ in range(n + 1))
        resume = tuple(sample_length(spec.resume, lengths) for _ in range(n))
        delays = tuple(spec.tool_delay.sample(tools) for _ in range(n))
        arrival = float(arrivals.uniform(lo, hi)) if hi > lo else float(lo)
        sessions.append(SessionState(sid, spec.name, arrival, cold, decode, resume, delays))
    return sessions


def next_phase(session: SessionState, event: str, now: float):
    """Advance the session's state machine on a completion event.

    Returns the next :class:`PhaseRequest` to issue, or ``None`` when the
    session must wait (tool call in flight) or has finished.
    """
    ph = session.phase
    if event == COLD_DONE and ph == AWAITING_COLD:
        session.cached_prefix = session.cold_tokens
        session.phase = DECODING
        return PhaseRequest(session.session_id, DECODE_STREAM, session.decode_tokens[0], now, 0)
    if event == DECODE_DONE and ph == DECODING:
        session.cached_prefix += session.decode_tokens[session.round]
        session.round += 1
        if session.remaining_rounds == 0:
            session.phase = DONE
        else:
            session.phase = AWAITING_TOOL
        return None
    if event == TOOL_RETURNED and ph == AWAITING_TOOL:
        session.phase = AWAITING_RESUME
        i = session.round - 1
        return PhaseRequest(session.session_id, RESUME_PREFILL, session.resume_tokens[i], now, i)
    if event == RESUME_DONE and ph == AWAITING_RESUME:
        i = session.round - 1
        session.cached_prefix += session.resume_tokens[i]
        session.remaining_rounds -= 1
        session.phase = DECODING
        return PhaseRequest(session.session_id, DECODE_STREAM, session.decode_tokens[session.round], now, session.round)
    raise ProtocolError(f"session {session.session_id}: event '{event}' does not match phase '{ph}'")


def tool_delay_of(session: SessionState) -> float:
    """Tool latency that follows the decode stream just completed."""
    return session.tool_delays[session.round - 1]
