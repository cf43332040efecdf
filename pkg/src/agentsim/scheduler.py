"""TPOT-driven feedback controller, request classification and partition policies.

The controller owns two knobs: the resume-prefill admission budget ``B`` and
the decode SM reservation ``R`` (in slots). Once per control interval it reads
the step-level TPOT (decode time / decode steps), tightens both knobs above
``theta_high``, relaxes them below ``theta_low``, and leaves them alone in the
dead band between.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, replace

from .errors import ValidationError
from .workload import COLD_PREFILL, DECODE_STREAM, RESUME_PREFILL

Q_D = "Q_D"
Q_P = "Q_P"


@dataclass(frozen=True)
class ControllerConfig:
    theta_low: float  # ms/step
    theta_high: float  # ms/step
    delta_R: int = 1  # slots
    delta_B: int = 64  # tokens
    delta_t: float = 250.0  # ms
    B_min: int = 64
    B_max: int = 1024
    R_base: int = 1  # slots
    initial_B: int = 256
    initial_R: int = 1
    # Ceiling for R. None means every slot, as the update rule is written;
    # the engine defaults it to total_slots - 1 so the prefill context is
    # never left without SMs.
    R_max: int | None = None

    def validate(self, total_slots: int):
        if not 0 < self.theta_low < self.theta_high:
            raise ValidationError("controller needs 0 < theta_low < theta_high", "controller.theta_low")
        if self.delta_t <= 0:
            raise ValidationError("delta_t must be positive", "controller.delta_t")
        if self.delta_R < 0 or self.delta_B < 0:
            raise ValidationError("step sizes must be non-negative", "controller.delta_R")
        if not self.B_min <= self.initial_B <= self.B_max:
            raise ValidationError("controller needs B_min <= initial_B <= B_max", "controller.initial_B")
        r_max = self.r_ceiling(total_slots)
        if not 1 <= self.R_base <= self.initial_R <= r_max <= total_slots:
            raise ValidationError(
                f"controller needs 1 <= R_base <= initial_R <= R_max <= {total_slots} slots "
                f"(got R_base={self.R_base}, initial_R={self.initial_R}, R_max={r_max})",
                "controller.R_base",
            )

    def r_ceiling(self, total_slots: int) -> int:
        return total_slots if self.R_max is None else self.R_max


@dataclass(frozen=True)
class ControllerState:
    B_prefill: int
    R_min: int
    interval_decode_time: float = 0.0  # ms accumulated this interval
    interval_decode_steps: int = 0

    @classmethod
    def initial(cls, cfg: ControllerConfig) -> "ControllerState":
        return cls(cfg.initial_B, cfg.initial_R)

    def record_step(self, duration_ms: float) -> "ControllerState":
        return replace(
            self,
            interval_decode_time=self.interval_decode_time + duration_ms,
            interval_decode_steps=self.interval_decode_steps + 1,
        )


def measure_tpot_step(state: ControllerState):
    """Return ``(tpot, reset_state)``; tpot is None when no decode step completed."""
    reset = replace(state, interval_decode_time=0.0, interval_decode_steps=0)
    if state.interval_decode_steps == 0:
        return None, reset
    return state.interval_decode_time / state.interval_decode_steps, reset


def controller_update(state: ControllerState, tpot: float, cfg: ControllerConfig, total_slots: int) -> ControllerState:
    r_max = cfg.r_ceiling(total_slots)
    if tpot > cfg.theta_high:
        return replace(
            state,
            B_prefill=max(cfg.B_min, state.B_prefill - cfg.delta_B),
            R_min=min(r_max, state.R_min + cfg.delta_R),
        )
    if tpot < cfg.theta_low:
        return replace(
            state,
            B_prefill=min(cfg.B_max, state.B_prefill + cfg.delta_B),
            R_min=max(cfg.R_base, state.R_min - cfg.delta_R),
        )
    return state


class Queues:
    """FIFO decode queue (streams plus admitted resume prefills) and prefill queue."""

    def __init__(self):
        self.q_d = deque()
        self.q_p = deque()

    def __len__(self):
        return len(self.q_d) + len(self.q_p)


def classify(request, budget: int) -> str:
    if request.kind == DECODE_STREAM:
        return Q_D
    if request.kind == COLD_PREFILL:
        # uncached system prompts always take the dedicated prefill queue
        return Q_P
    return Q_D if request.length_tokens <= budget else Q_P


def classify_and_enqueue(request, state: ControllerState, queues: Queues) -> str:
    where = classify(request, state.B_prefill)
    (queues.q_d if where == Q_D else queues.q_p).append(request)
    return where


# -- policies ------------------------------------------------------------------

@dataclass(frozen=True)
class Policy:
    name: str
    executor: str  # "partitioned": two concurrent contexts; "shared": one timeline
    adaptive: bool  # controller updates B and R each interval
    routing: str  # "budget" | "prefill_engine" | "single_queue"
    shared_prefill: str = ""  # shared executor only: "whole" | "chunk" | "timeslice"
    description: str = ""


POLICIES = {
    "agentserve": Policy(
        "agentserve", "partitioned", True, "budget",
        description="TPOT-driven B/R control with isolated decode and prefill contexts",
    ),
    "static_partition": Policy(
        "static_partition", "partitioned", False, "budget",
        description="No-Alg ablation: fixed split and budget, no feedback",
    ),
    "process_pd": Policy(
        "process_pd", "partitioned", False, "prefill_engine",
        description="process-separated prefill/decode engines with a fixed split and KV hand-off delay",
    ),
    "no_green": Policy(
        "no_green", "shared", True, "budget", "timeslice",
        description="No-Green ablation: budget control, no SM isolation (time-sliced full GPU)",
    ),
    "mixed_fcfs": Policy(
        "mixed_fcfs", "shared", False, "single_queue", "whole",
        description="single FIFO queue; pending prefills run to completion inside each iteration",
    ),
    "chunked_prefill": Policy(
        "chunked_prefill", "shared", False, "single_queue", "chunk",
        description="prefills split into fixed chunks, one chunk per iteration alongside decode",
    ),
}


def get_policy(name: str) -> Policy:
    try:
        return POLICIES[name]
    except KeyError:
        raise ValidationError(f"unknown policy '{name}' (choose from {sorted(POLICIES)})", "policy") from None


@dataclass(frozen=True)
class PolicyDecision:
    decode_slots: int
    prefill_slots: int
    admitted_budget: int
    shared: bool = False


def decide(policy: Policy, state: ControllerState, total_slots: int, static_decode_slots: int | None = None) -> PolicyDecision:
    """Partition for the coming interval.

    Shared-GPU policies report both sides as owning every slot. Fixed-split
    policies use ``static_decode_slots``.
    """
    if policy.executor == "shared":
        return PolicyDecision(total_slots, total_slots, state.B_prefill, shared=True)
    decode = state.R_min if policy.adaptive else static_decode_slots
    if decode is None:
        raise ValidationError(f"policy '{policy.name}' needs a static decode split")
    if not 1 <= decode <= total_slots:
        raise ValidationError(f"decode slots must lie in [1, {total_slots}], got {decode}")
    return PolicyDecision(decode, total_slots - decode, state.B_prefill)
