"""Controller update, step-level TPOT, request routing and policy partitions."""

from dataclasses import replace

import pytest
from hypothesis import given
from hypothesis import strategies as st

from agentsim.errors import ValidationError
from agentsim.scheduler import (
    POLICIES,
    Q_D,
    Q_P,
    ControllerConfig,
    ControllerState,
    Queues,
    classify,
    classify_and_enqueue,
    controller_update,
    decide,
    get_policy,
    measure_tpot_step,
)
from agentsim.workload import COLD_PREFILL, DECODE_STREAM, RESUME_PREFILL, PhaseRequest

CFG = ControllerConfig(theta_low=5.0, theta_high=10.0, delta_R=1, delta_B=64, B_min=64, B_max=1024,
                       R_base=2, initial_B=256, initial_R=4)


def test_tpot_step_ratio():
    s = ControllerState(256, 4)
    for _ in range(50):
        s = s.record_step(2.0)
    tpot, reset = measure_tpot_step(s)
    assert tpot == 2.0
    assert (reset.interval_decode_time, reset.interval_decode_steps) == (0.0, 0)


def test_tpot_absent_without_steps():
    tpot, _ = measure_tpot_step(ControllerState(256, 4))
    assert tpot is None


def test_protect_decode_above_high():
    s = controller_update(ControllerState(256, 4), 12.0, CFG, 10)
    assert (s.B_prefill, s.R_min) == (192, 5)


def test_relax_below_low_clamps():
    s = controller_update(ControllerState(1024, 3), 3.0, CFG, 10)
    assert (s.B_prefill, s.R_min) == (1024, 2)
    s = controller_update(s, 3.0, CFG, 10)
    assert (s.B_prefill, s.R_min) == (1024, 2)


def test_protect_clamps_at_floor_and_ceiling():
    cfg = replace(CFG, R_max=5)
    s = controller_update(ControllerState(64, 5), 50.0, cfg, 10)
    assert (s.B_prefill, s.R_min) == (64, 5)


@pytest.mark.parametrize("tpot", [5.0, 7.5, 10.0])
def test_dead_band_is_inclusive(tpot):
    s = ControllerState(256, 4)
    assert controller_update(s, tpot, CFG, 10) == s


@given(st.integers(64, 1024), st.integers(2, 10), st.floats(0.0, 100.0, allow_nan=False))
def test_update_stays_in_bounds_and_moves_the_right_way(b, r, tpot):
    s = controller_update(ControllerState(b, r), tpot, CFG, 10)
    assert CFG.B_min <= s.B_prefill <= CFG.B_max
    assert CFG.R_base <= s.R_min <= 10
    if tpot > CFG.theta_high:
        assert s.B_prefill <= b and s.R_min >= r
    elif tpot < CFG.theta_low:
        assert s.B_prefill >= b and s.R_min <= r
    else:
        assert (s.B_prefill, s.R_min) == (b, r)


def test_controller_validation():
    with pytest.raises(ValidationError):
        replace(CFG, theta_low=10.0).validate(10)
    with pytest.raises(ValidationError):
        replace(CFG, R_base=5).validate(10)
    with pytest.raises(ValidationError):
        replace(CFG, initial_B=2000).validate(10)
    CFG.validate(10)


def _req(kind, n):
    return PhaseRequest(0, kind, n, 0.0)


def test_classification_examples():
    assert classify(_req(RESUME_PREFILL, 56), 256) == Q_D
    assert classify(_req(RESUME_PREFILL, 421), 256) == Q_P
    assert classify(_req(RESUME_PREFILL, 256), 256) == Q_D
    assert classify(_req(DECODE_STREAM, 5000), 64) == Q_D
    for budget in (64, 3000, 10**6):
        assert classify(_req(COLD_PREFILL, 3000), budget) == Q_P


def test_enqueue_uses_current_budget():
    q = Queues()
    classify_and_enqueue(_req(RESUME_PREFILL, 100), ControllerState(64, 1), q)
    classify_and_enqueue(_req(RESUME_PREFILL, 100), ControllerState(128, 1), q)
    assert (len(q.q_d), len(q.q_p), len(q)) == (1, 1, 2)


def test_decide_adaptive():
    d = decide(get_policy("agentserve"), ControllerState(256, 4), 10)
    assert (d.decode_slots, d.prefill_slots, d.shared) == (4, 6, False)


def test_decide_static_ignores_state():
    for r in (1, 4, 9):
        d = decide(get_policy("static_partition"), ControllerState(256, r), 10, static_decode_slots=5)
        assert (d.decode_slots, d.prefill_slots) == (5, 5)


def test_decide_shared():
    for name in ("mixed_fcfs", "chunked_prefill", "no_green"):
        d = decide(get_policy(name), ControllerState(256, 3), 10)
        assert (d.decode_slots, d.prefill_slots, d.shared) == (10, 10, True)


def test_decide_errors():
    with pytest.raises(ValidationError):
        decide(get_policy("static_partition"), ControllerState(256, 3), 10)
    with pytest.raises(ValidationError):
        decide(get_policy("agentserve"), ControllerState(256, 11), 10)
    with pytest.raises(ValidationError):
        get_policy("round_robin")


def test_policy_table():
    assert set(POLICIES) == {"agentserve", "static_partition", "process_pd", "no_green", "mixed_fcfs",
                             "chunked_prefill"}
    assert [n for n, p in POLICIES.items() if p.adaptive] == ["agentserve", "no_green"]
