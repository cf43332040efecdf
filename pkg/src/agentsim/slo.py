"""SLO thresholds and the decode-rate floor they imply."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DomainError, InfeasibleSLOError, ValidationError
from .profiles import ProfileBundle, lookup


@dataclass(frozen=True)
class SLOConfig:
    tau_ttft: float  # ms
    tau_tpot: float  # ms per token
    calibration_factor: float = 1.0
    tpot_statistic: str = "p95"  # per-session TPOT statistic compared to tau_tpot

    def __post_init__(self):
        if not (self.tau_ttft > 0 and self.tau_tpot > 0):
            raise ValidationError("SLO thresholds must be positive", "slo")
        if self.tpot_statistic not in ("p50", "p95", "p99", "mean", "max"):
            raise ValidationError(f"unknown TPOT statistic '{self.tpot_statistic}'", "slo.tpot_statistic")


def r_min_rate(slo: SLOConfig) -> float:
    """Decode rate (tokens/s) needed to keep one token per ``tau_tpot`` ms."""
    if slo.tau_tpot <= 0:
        raise DomainError("tau_tpot must be positive")
    return 1000.0 / slo.tau_tpot


def r_g_star(bundle: ProfileBundle, r_min: float) -> int:
    """Smallest grid allocation (in slots) whose decode rate reaches ``r_min``."""
    if lookup(bundle.decode, bundle.total_sms) < r_min:
        raise InfeasibleSLOError(
            f"decode rate at the full GPU ({bundle.decode.max_rate} tok/s) is below r_min={r_min} tok/s"
        )
    for sms in bundle.grid:
        if lookup(bundle.decode, sms) >= r_min:
            return sms // bundle.granularity
    raise AssertionError("unreachable: full GPU already checked")


def r_g_star_slots(bundle: ProfileBundle, slo: SLOConfig) -> int:
    return r_g_star(bundle, r_min_rate(slo))


def isolated_ttft_ms(bundle: ProfileBundle, cold_tokens: float) -> float:
    """Cold prefill on the full GPU followed by one single-stream decode step."""
    return 1000.0 * cold_tokens / bundle.cold.max_rate + 1000.0 / bundle.decode.max_rate


def isolated_tpot_ms(bundle: ProfileBundle) -> float:
    return 1000.0 / bundle.decode.max_rate


def calibrate_slo(bundle: ProfileBundle, factor: float, mean_cold_tokens: float = 3000.0, **kw) -> SLOConfig:
    """Thresholds = ``factor`` x isolated single-session performance on the full GPU."""
    if factor < 1:
        raise DomainError(f"calibration factor must be >= 1, got {factor}")
    return SLOConfig(
        tau_ttft=factor * isolated_ttft_ms(bundle, mean_cold_tokens),
        tau_tpot=factor * isolated_tpot_ms(bundle),
        calibration_factor=factor,
        **kw,
    )
