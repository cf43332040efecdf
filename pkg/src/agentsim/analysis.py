"""Competitive-ratio machinery: the SLO-feasible offline optimum and the
per-interval bounds on realized prefill service.

Notation: ``S`` is the SM count, ``g`` the grid step, ``R*`` the smallest
decode reservation (slots) whose decode rate meets ``r_min``. The prefill
partition the offline optimum may use is ``S - R* g`` SMs; realized service is
compared with ``mu_P(S - R* g, eta)`` over the same busy time.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .errors import DegenerateCapacityError, DomainError, InfeasibleSLOError
from .profiles import ProfileBundle, lipschitz_estimate, lookup, mixed_prefill_rate
from .slo import SLOConfig, r_g_star, r_min_rate

__all__ = [
    "BoundParams",
    "IntervalReport",
    "VerificationReport",
    "r_min_rate",
    "r_g_star",
    "feasible_allocations",
    "offline_optimum",
    "brute_force_offline",
    "theorem1_bound",
    "corollary2_bound",
    "bound_window",
    "verify_trace",
]

REL_TOL = 1e-9


@dataclass(frozen=True)
class BoundParams:
    delta: float = 0.0  # SMs of decode over-reservation above R*
    eps_bar: float = 0.0  # relative service loss from context switching

    def __post_init__(self):
        if self.delta < 0 or math.isnan(self.delta):
            raise DomainError(f"delta must be >= 0, got {self.delta}")
        if not 0.0 <= self.eps_bar < 1.0:
            raise DomainError(f"eps_bar must lie in [0, 1), got {self.eps_bar}")


def _prefill_sms(bundle: ProfileBundle, r_star_slots: int) -> int:
    sms = bundle.total_sms - r_star_slots * bundle.granularity
    if sms < 0 or r_star_slots < 0:
        raise DomainError(f"R* = {r_star_slots} slots is outside the device")
    return sms


def feasible_allocations(bundle: ProfileBundle, r_min: float) -> list:
    """Every decode allocation (slots) on the grid whose decode rate reaches ``r_min``."""
    g = bundle.granularity
    return [sms // g for sms in bundle.grid if lookup(bundle.decode, sms) >= r_min]


def _durations(dt, n):
    if isinstance(dt, (int, float)):
        return [float(dt)] * n
    dt = list(dt)
    if len(dt) != n:
        raise DomainError(f"{len(dt)} interval lengths for {n} intervals")
    return [float(x) for x in dt]


def offline_optimum(bundle: ProfileBundle, eta_series, r_star_slots: int, dt) -> list:
    """Per-interval upper bound on prefill tokens under the decode SLO.

    ``dt`` is one interval length in ms or a sequence of per-interval lengths.
    """
    sms = _prefill_sms(bundle, r_star_slots)
    etas = list(eta_series)
    return [mixed_prefill_rate(bundle, eta, sms) * d / 1000.0 for eta, d in zip(etas, _durations(dt, len(etas)))]


def brute_force_offline(bundle: ProfileBundle, eta_series, r_min: float, dt) -> list:
    """Enumerate every SLO-feasible decode allocation in every interval."""
    feasible = feasible_allocations(bundle, r_min)
    if not feasible:
        raise InfeasibleSLOError(f"no allocation reaches r_min={r_min} tok/s")
    g, S = bundle.granularity, bundle.total_sms
    etas = list(eta_series)
    out = []
    for eta, d in zip(etas, _durations(dt, len(etas))):
        out.append(max(mixed_prefill_rate(bundle, eta, S - r * g) * d / 1000.0 for r in feasible))
    return out


def bound_window(bundle: ProfileBundle, r_star_slots: int, delta: float):
    """``(lo, hi)``: ``hi = S - R* g`` and ``lo`` is ``hi - delta`` rounded down to the grid."""
    g = bundle.granularity
    hi = _prefill_sms(bundle, r_star_slots)
    target = hi - delta
    if target < -1e-9:
        raise DomainError(f"delta={delta} SMs exceeds the prefill partition of {hi} SMs")
    lo = int(math.floor(target / g + 1e-12)) * g
    return max(lo, 0), hi


def theorem1_bound(bundle: ProfileBundle, eta: float, r_star_slots: int, params: BoundParams) -> float:
    """``(1 - eps_bar) * mu_P(S - R* - delta) / mu_P(S - R*)``."""
    lo, hi = bound_window(bundle, r_star_slots, params.delta)
    top = mixed_prefill_rate(bundle, eta, hi)
    if top == 0:
        raise DegenerateCapacityError("prefill partition S - R* has no capacity")
    return (1.0 - params.eps_bar) * mixed_prefill_rate(bundle, eta, lo) / top


def corollary2_bound(bundle: ProfileBundle, eta: float, r_star_slots: int, params: BoundParams,
                     lipschitz: float | None = None) -> float:
    """``(1 - eps_bar) * (1 - L_P * delta / mu_P(S - R*))``.

    ``delta`` is the same on-grid overshoot used by :func:`theorem1_bound`
    (``S - R* - delta`` rounded down), so the linearization is evaluated over
    exactly the window it relaxes. ``L_P`` defaults to the window's estimate.
    """
    lo, hi = bound_window(bundle, r_star_slots, params.delta)
    top = mixed_prefill_rate(bundle, eta, hi)
    if top == 0:
        raise DegenerateCapacityError("prefill partition S - R* has no capacity")
    span = hi - lo
    if lipschitz is None:
        lipschitz = lipschitz_estimate(bundle, eta, lo, hi) if span else 0.0
    return (1.0 - params.eps_bar) * (1.0 - lipschitz * span / top)


# -- trace verification --------------------------------------------------------

@dataclass(frozen=True)
class IntervalReport:
    index: int
    start: float
    end: float
    backlog_ms: float
    vacuous: bool
    eta: float | None  # share of prefill-busy time spent on cold prefill
    eta_tokens: float | None  # share of prefill tokens that were cold
    W_A: float
    W_star: float
    rho: float | None
    bound: float | None
    linearized_bound: float | None
    satisfied: bool | None
    eps: float  # stalled share of the backlog span
    delta_sms: int  # binding above R* (SMs)
    min_binding: int


@dataclass
class VerificationReport:
    intervals: list
    summary: dict
    flags: list = field(default_factory=list)

    @property
    def assumptions_met(self) -> bool:
        return not self.flags

    @property
    def violations(self) -> int:
        return self.summary["violations"]

    def to_data(self) -> dict:
        return {"summary": self.summary, "flags": list(self.flags),
                "intervals": [asdict(r) for r in self.intervals]}


def _interval_inputs(iv: dict):
    run = iv["busy_cold_ms"] + iv["busy_resume_ms"]
    backlog = run + iv["stall_ms"]
    eta = iv["busy_cold_ms"] / run if run > 0 else None
    prefill_tokens = iv["cold_tokens"] + iv["resume_tokens_prefill_ctx"] + iv["resume_tokens_decode_ctx"]
    eta_tokens = iv["cold_tokens"] / prefill_tokens if prefill_tokens > 0 else None
    w_a = prefill_tokens
    return run, backlog, eta, eta_tokens, w_a


def verify_trace(trace, bundle: ProfileBundle | None = None, slo: SLOConfig | None = None,
                 params: BoundParams | None = None) -> VerificationReport:
    """Check every non-vacuous interval against the realized-service bound.

    ``params`` defaults to the run's measured overshoot and context-switch
    loss. Precondition failures are reported as flags, not raised.
    """
    from .config import from_data  # local: config imports the scheduler stack

    cfg = from_data(trace.header["config"])
    bundle = bundle or cfg.bundle
    slo = slo or cfg.slo
    g = bundle.granularity
    r_star = r_g_star(bundle, r_min_rate(slo))
    flags = []
    if trace.policy != "agentserve":
        flags.append(f"policy is '{trace.policy}', the bound is stated for 'agentserve'")
    if cfg.controller.R_base < r_star:
        flags.append(f"R_base={cfg.controller.R_base} slots is below R*={r_star}")

    rows = []
    measured_delta = 0
    measured_eps = 0.0
    for iv in trace.intervals:
        run, backlog, eta, eta_tok, w_a = _interval_inputs(iv)
        if iv["decode_binding_min"] < r_star:
            flags.append(f"interval {iv['index']}: decode binding {iv['decode_binding_min']} below R*={r_star}")
        over = max(0, iv["decode_binding_max"] - r_star) * g
        eps = iv["stall_ms"] / backlog if backlog > 0 else 0.0
        if backlog > 0:
            measured_delta = max(measured_delta, over)
            measured_eps = max(measured_eps, eps)
        rows.append((iv, run, backlog, eta, eta_tok, w_a, over, eps))

    if params is None:
        params = BoundParams(delta=float(measured_delta), eps_bar=measured_eps if measured_eps < 1 else 0.0)
    else:
        if measured_delta > params.delta + 1e-9:
            flags.append(f"measured overshoot {measured_delta} SMs exceeds delta={params.delta}")
        if measured_eps > params.eps_bar * (1 + REL_TOL) + 1e-15:
            flags.append(f"measured context-switch loss {measured_eps:.3g} exceeds eps_bar={params.eps_bar}")
    if measured_eps >= 1:
        flags.append("an interval was stalled for its whole backlog span")

    reports = []
    for iv, run, backlog, eta, eta_tok, w_a, over, eps in rows:
        vacuous = backlog <= 0
        base = dict(index=iv["index"], start=iv["start"], end=iv["end"], backlog_ms=backlog, eta=eta,
                    eta_tokens=eta_tok, W_A=w_a, eps=eps, delta_sms=over, min_binding=iv["decode_binding_min"])
        if vacuous:
            reports.append(IntervalReport(vacuous=True, W_star=0.0, rho=None, bound=None, linearized_bound=None,
                                          satisfied=None, **base))
            continue
        # a backlog that was stalled throughout has no busy time to weight eta by
        e = eta if eta is not None else 0.0
        w_star = offline_optimum(bundle, [e], r_star, [backlog])[0]
        if w_star <= 0:
            reports.append(IntervalReport(vacuous=True, W_star=w_star, rho=None, bound=None,
                                          linearized_bound=None, satisfied=None, **base))
            continue
        b1 = theorem1_bound(bundle, e, r_star, params)
        b2 = corollary2_bound(bundle, e, r_star, params)
        rho = w_a / w_star
        ok = rho >= b1 * (1 - REL_TOL)
        reports.append(IntervalReport(vacuous=False, W_star=w_star, rho=rho, bound=b1, linearized_bound=b2,
                                      satisfied=ok, **base))

    live = [r for r in reports if not r.vacuous]
    summary = {
        "policy": trace.policy,
        "seed": trace.header["seed"],
        "r_g_star_slots": r_star,
        "delta_sms": params.delta,
        "eps_bar": params.eps_bar,
        "intervals": len(reports),
        "non_vacuous": len(live),
        "vacuous": len(reports) - len(live),
        "violations": sum(1 for r in live if not r.satisfied),
        "min_rho": min((r.rho for r in live), default=None),
        "min_bound": min((r.bound for r in live), default=None),
        "assumptions_met": not flags,
    }
    return VerificationReport(reports, summary, flags)
