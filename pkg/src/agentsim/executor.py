"""Execution-layer model: slot contexts, rebinding, KV hand-off and step timing.

The GPU is carved into ``total_slots`` pre-built contexts (10%, 20%, ..., 100%
of the SMs by default). Decode binds to one level and prefill to the
complement. Switching levels costs a small fixed overhead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import DomainError, ProtocolError
from .profiles import ProfileBundle, rate_at

DEFAULT_REBIND_OVERHEAD_MS = 0.05
DEFAULT_RESUME_CHUNK_TOKENS = 64


@dataclass
class SlotSet:
    total_slots: int = 10
    current_decode_binding: int = 1

    def __post_init__(self):
        if self.total_slots < 1:
            raise DomainError("total_slots must be >= 1")
        if not 0 <= self.current_decode_binding <= self.total_slots:
            raise DomainError("decode binding outside the slot menu")

    @property
    def slot_levels(self) -> tuple:
        return tuple(range(1, self.total_slots + 1))

    @property
    def current_prefill_binding(self) -> int:
        return self.total_slots - self.current_decode_binding


@dataclass(frozen=True)
class RebindEvent:
    time: float
    from_level: int
    to_level: int
    overhead: float


def select_slot(target_slots: float, slot_set: SlotSet) -> int:
    """Smallest bindable level at or above ``target_slots`` (may be fractional)."""
    if target_slots > slot_set.total_slots + 1e-9:
        raise DomainError(
            f"reservation of {target_slots} slots exceeds the {slot_set.total_slots}-slot device"
        )
    if target_slots <= 0:
        raise DomainError(f"reservation must be positive, got {target_slots}")
    # absorb float noise such as 0.3 * 10 = 3.0000000000000004
    return max(1, math.ceil(target_slots - 1e-9))


def select_slot_for_share(share: float, slot_set: SlotSet) -> int:
    """Level for a target fraction of SMs, e.g. 0.37 -> 4 of 10."""
    return select_slot(share * slot_set.total_slots, slot_set)


def rebind(slot_set: SlotSet, new_decode_level: int, now: float, overhead_ms: float = DEFAULT_REBIND_OVERHEAD_MS):
    """Switch the decode context (prefill takes the complement).

    Returns a :class:`RebindEvent`, or ``None`` when the level is unchanged.
    """
    if new_decode_level not in slot_set.slot_levels:
        raise DomainError(f"level {new_decode_level} is not in the slot menu {slot_set.slot_levels}")
    if new_decode_level == slot_set.current_decode_binding:
        return None
    event = RebindEvent(now, slot_set.current_decode_binding, new_decode_level, overhead_ms)
    slot_set.current_decode_binding = new_decode_level
    return event


@dataclass
class KvEntry:
    prefix_tokens: int = 0
    sealed: bool = False


@dataclass
class KvCacheRegistry:
    entries: dict = field(default_factory=dict)

    def open(self, session_id: int):
        """A prefill begins writing this session's KV region."""
        entry = self.entries.setdefault(session_id, KvEntry())
        entry.sealed = False

    def require_sealed(self, session_id: int):
        entry = self.entries.get(session_id)
        if entry is None or not entry.sealed:
            raise ProtocolError(f"decode step for session {session_id} on an unsealed KV region")

    def prefix(self, session_id: int) -> int:
        entry = self.entries.get(session_id)
        return 0 if entry is None else entry.prefix_tokens


def kv_commit(registry: KvCacheRegistry, session_id: int, new_prefix: int) -> KvCacheRegistry:
    """Publish a finished prefix read-only; decode may use it at once."""
    entry = registry.entries.setdefault(session_id, KvEntry())
    if new_prefix < entry.prefix_tokens:
        raise ProtocolError(
            f"session {session_id}: KV prefix cannot shrink ({entry.prefix_tokens} -> {new_prefix})"
        )
    entry.prefix_tokens = new_prefix
    entry.sealed = True
    return registry


def decode_step_ms(bundle: ProfileBundle, decode_sms: int, streams: int, resume_tokens: int = 0) -> float:
    """Duration of one decode step.

    Active streams share the aggregate decode rate (one token each), then any
    admitted resume-prefill chunk runs on the same SMs.
    """
    if streams < 0 or resume_tokens < 0:
        raise DomainError("negative work in a decode step")
    mu_d = rate_at(bundle.decode, decode_sms)
    mu_r = rate_at(bundle.resume, decode_sms)
    if (streams and mu_d == 0) or (resume_tokens and mu_r == 0):
        raise DomainError("decode step scheduled on an empty context")
    ms = 0.0
    if streams:
        ms += 1000.0 * streams / mu_d
    if resume_tokens:
        ms += 1000.0 * resume_tokens / mu_r
    return ms


def prefill_rate(bundle: ProfileBundle, kind_is_cold: bool, sms: int) -> float:
    return rate_at(bundle.cold if kind_is_cold else bundle.resume, sms)


@dataclass
class ActiveJob:
    request: object
    remaining_tokens: float

    @classmethod
    def start(cls, request) -> "ActiveJob":
        return cls(request, float(request.length_tokens))


@dataclass(frozen=True)
class Progress:
    steps: int
    step_end_times: tuple  # ms offsets of each completed step
    tokens_emitted: int
    resume_tokens_in_decode: int
    prefill_tokens: float
    prefill_finished_at: float | None  # ms offset, or None


def advance(
    bundle: ProfileBundle,
    slot_set: SlotSet,
    dt: float,
    streams: int,
    prefill_job: ActiveJob | None = None,
    admitted_resume_tokens: int = 0,
    chunk_tokens: int = DEFAULT_RESUME_CHUNK_TOKENS,
) -> Progress:
    """Progress of both contexts over ``dt`` ms with a fixed batch.

    Whole decode steps only: a step that would end after ``dt`` is not started.
    The prefill job advances at its phase rate on the complementary SMs.
    Reference model for tests; the event loop applies the same arithmetic.
    """
    if dt <= 0:
        raise DomainError("dt must be positive")
    g = bundle.granularity
    dsms = slot_set.current_decode_binding * g
    psms = slot_set.current_prefill_binding * g
    t, steps, ends, pending = 0.0, 0, [], admitted_resume_tokens
    emitted = resumed = 0
    while streams or pending:
        chunk = min(pending, chunk_tokens)
        d = decode_step_ms(bundle, dsms, streams, chunk)
        if t + d > dt + 1e-12:
            break
        t += d
        steps += 1
        ends.append(t)
        emitted += streams
        resumed += chunk
        pending -= chunk
    done_at = None
    ptoks = 0.0
    if prefill_job is not None:
        rate = prefill_rate(bundle, prefill_job.request.kind == "ColdPrefill", psms)
        capacity = rate * dt / 1000.0
        if rate > 0 and capacity >= prefill_job.remaining_tokens:
            ptoks = prefill_job.remaining_tokens
            done_at = 1000.0 * ptoks / rate
        else:
            ptoks = capacity
    return Progress(steps, tuple(ends), emitted, resumed, ptoks, done_at)
