"""Slot selection, rebinding, KV hand-off and step timing."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from agentsim.errors import DomainError, ProtocolError
from agentsim.executor import (
    ActiveJob,
    KvCacheRegistry,
    RebindEvent,
    SlotSet,
    advance,
    decode_step_ms,
    kv_commit,
    rebind,
    select_slot,
    select_slot_for_share,
)
from agentsim.workload import COLD_PREFILL, PhaseRequest

from conftest import make_bundle

BUNDLE = make_bundle([50, 80], [600, 900], [200, 300])


def test_select_slot_examples():
    menu = SlotSet(10)
    assert select_slot_for_share(0.37, menu) == 4
    assert select_slot_for_share(0.50, menu) == 5
    assert select_slot_for_share(0.30, menu) == 3  # 0.3 * 10 is not exactly 3.0 in floats
    with pytest.raises(DomainError):
        select_slot_for_share(1.01, menu)
    with pytest.raises(DomainError):
        select_slot(0, menu)


@given(st.floats(0.001, 10.0))
def test_select_slot_over_reserves_by_less_than_one_slot(target):
    level = select_slot(target, SlotSet(10))
    assert level in SlotSet(10).slot_levels
    assert target - 1e-9 <= level < target + 1


def test_rebind_same_level_is_noop():
    s = SlotSet(10, 4)
    assert rebind(s, 4, 500.0) is None
    assert s.current_decode_binding == 4


def test_rebind_event():
    s = SlotSet(10, 4)
    assert rebind(s, 5, 1000.0) == RebindEvent(1000.0, 4, 5, 0.05)
    assert (s.current_decode_binding, s.current_prefill_binding) == (5, 5)


def test_rebind_rejects_unknown_level():
    with pytest.raises(DomainError):
        rebind(SlotSet(10, 4), 11, 0.0)


def test_kv_commit_examples():
    reg = KvCacheRegistry()
    reg.open(7)
    with pytest.raises(ProtocolError):
        reg.require_sealed(7)
    kv_commit(reg, 7, 3000)
    reg.require_sealed(7)
    kv_commit(reg, 7, 3056)
    assert reg.prefix(7) == 3056
    with pytest.raises(ProtocolError):
        kv_commit(reg, 7, 2999)


def test_decode_step_durations():
    assert decode_step_ms(BUNDLE, 32, 1) == 20.0
    assert decode_step_ms(BUNDLE, 64, 4) == 50.0
    # a 64-token resume chunk at 200 tok/s adds 320 ms
    assert decode_step_ms(BUNDLE, 32, 1, 64) == 20.0 + 320.0
    assert decode_step_ms(BUNDLE, 32, 0) == 0.0


def test_advance_decode_steps():
    p = advance(BUNDLE, SlotSet(2, 2), 1000.0, streams=4)
    assert p.steps == 20
    assert p.tokens_emitted == 80
    assert p.step_end_times[:3] == (50.0, 100.0, 150.0)


def test_advance_cold_prefill_closed_form():
    job = ActiveJob.start(PhaseRequest(0, COLD_PREFILL, 3000, 0.0))
    p = advance(BUNDLE, SlotSet(2, 1), 6000.0, streams=0, prefill_job=job)
    assert p.prefill_finished_at == 5000.0
    assert p.prefill_tokens == 3000
    partial = advance(BUNDLE, SlotSet(2, 1), 1000.0, streams=0, prefill_job=job)
    assert partial.prefill_finished_at is None
    assert partial.prefill_tokens == 600.0


def test_advance_admitted_resume_chunks():
    p = advance(BUNDLE, SlotSet(2, 1), 10_000.0, streams=1, admitted_resume_tokens=100)
    # chunks of 64 then 36, then plain steps
    assert p.resume_tokens_in_decode == 100
    assert p.step_end_times[0] == 20.0 + 320.0
    assert p.step_end_times[1] == p.step_end_times[0] + 20.0 + 180.0


def test_advance_rejects_non_positive_dt():
    with pytest.raises(DomainError):
        advance(BUNDLE, SlotSet(2, 1), 0.0, streams=1)
