"""TTFT, TPOT, throughput and SLO attainment, all recomputed from a trace."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

from .errors import DomainError, NoDataError
from .slo import SLOConfig
from .trace import Trace


def nearest_rank(samples, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample."""
    if not 0 <= p <= 100:
        raise DomainError(f"percentile must be in [0, 100], got {p}")
    xs = sorted(samples)
    if not xs:
        raise NoDataError("no samples")
    rank = max(1, math.ceil(p / 100.0 * len(xs) - 1e-12))
    return xs[rank - 1]


def statistic(samples, name: str) -> float:
    if not samples:
        raise NoDataError("no samples")
    if name == "mean":
        return sum(samples) / len(samples)
    if name == "max":
        return max(samples)
    if name.startswith("p"):
        return nearest_rank(samples, float(name[1:]))
    raise DomainError(f"unknown statistic '{name}'")


def _arrivals(trace: Trace) -> dict:
    return {s["session_id"]: s["arrival_time"] for s in trace.sessions}


def ttft(trace: Trace, session_id) -> float:
    """First emitted token minus session arrival (ms)."""
    em = trace.emissions().get(session_id)
    if em is None:
        raise NoDataError(f"no session {session_id} in trace")
    if not em:
        raise NoDataError(f"session {session_id} emitted no tokens")
    return em[0][0] - _arrivals(trace)[session_id]


def _gaps(emissions) -> list:
    """Inter-token gaps inside each decode phase; tool-delay gaps are skipped."""
    out = []
    for (t0, i0), (t1, i1) in zip(emissions, emissions[1:]):
        if i0 == i1:
            out.append(t1 - t0)
    return out


def tpot_samples(trace: Trace, session_id=None) -> list:
    """Gaps for one session, or for every session when ``session_id`` is None."""
    em = trace.emissions()
    if session_id is not None:
        if session_id not in em:
            raise NoDataError(f"no session {session_id} in trace")
        return _gaps(em[session_id])
    out = []
    for sid in sorted(em):
        out.extend(_gaps(em[sid]))
    return out


def tpot_percentiles(trace: Trace, scope=None, ps=(50, 95)) -> dict:
    gaps = tpot_samples(trace, scope)
    if not gaps:
        raise NoDataError(f"no inter-token gaps in scope {scope if scope is not None else 'global'}")
    return {p: nearest_rank(gaps, p) for p in ps}


def throughput(trace: Trace, window=None) -> float:
    """Decode tokens emitted in the half-open window (a, b], per second."""
    if window is None:
        window = (0.0, trace.end["end_time"])
    a, b = window
    if not b > a:
        raise DomainError(f"window must have positive length, got {window}")
    n = sum(1 for em in trace.emissions().values() for t, _ in em if a < t <= b)
    return 1000.0 * n / (b - a)


@dataclass(frozen=True)
class SessionMetrics:
    session_id: int
    ttft: float | None
    tpot_samples: tuple
    tpot_stat: float | None
    completed: bool
    ttft_ok: bool
    tpot_ok: bool

    @property
    def slo_met(self) -> bool:
        return self.ttft_ok and self.tpot_ok


def session_metrics(trace: Trace, slo: SLOConfig) -> list:
    em = trace.emissions()
    unfinished = set(trace.end.get("unfinished_sessions", []))
    arrivals = _arrivals(trace)
    out = []
    for sid in sorted(em):
        tokens = em[sid]
        first = tokens[0][0] - arrivals[sid] if tokens else None
        gaps = _gaps(tokens)
        stat = statistic(gaps, slo.tpot_statistic) if gaps else None
        out.append(SessionMetrics(
            session_id=sid,
            ttft=first,
            tpot_samples=tuple(gaps),
            tpot_stat=stat,
            completed=sid not in unfinished,
            ttft_ok=first is not None and first <= slo.tau_ttft,
            # a session whose streams are all one token long has no gap to judge
            tpot_ok=stat is None or stat <= slo.tau_tpot,
        ))
    return out


def slo_attainment(trace: Trace, slo: SLOConfig, criterion: str = "joint") -> float:
    """Fraction of completed sessions meeting the SLO (``joint``, ``ttft`` or ``tpot``)."""
    done = [m for m in session_metrics(trace, slo) if m.completed]
    if not done:
        raise NoDataError("no completed sessions")
    test = {
        "joint": lambda m: m.slo_met,
        "ttft": lambda m: m.ttft_ok,
        "tpot": lambda m: m.tpot_ok,
    }[criterion]
    return sum(1 for m in done if test(m)) / len(done)


def summary(trace: Trace, slo: SLOConfig) -> dict:
    """Headline numbers for one run."""
    sm = session_metrics(trace, slo)
    ttfts = [m.ttft for m in sm if m.ttft is not None]
    gaps = tpot_samples(trace)
    steps = [e.data["duration"] for e in trace.of_kind("DecodeStepCompleted")]
    out = {
        "policy": trace.policy,
        "seed": trace.header["seed"],
        "concurrency": len(trace.sessions),
        "stream_hash": trace.header["stream_hash"],
        "end_time_ms": trace.end["end_time"],
        "truncated": trace.end["truncated"],
        "ttft_p50_ms": nearest_rank(ttfts, 50) if ttfts else None,
        "ttft_p95_ms": nearest_rank(ttfts, 95) if ttfts else None,
        "tpot_p50_ms": nearest_rank(gaps, 50) if gaps else None,
        "tpot_p95_ms": nearest_rank(gaps, 95) if gaps else None,
        "throughput_tok_s": throughput(trace) if trace.end["end_time"] > 0 else 0.0,
        "decode_steps": len(steps),
        "max_step_ms": max(steps) if steps else None,
        "median_step_ms": nearest_rank(steps, 50) if steps else None,
        "tau_ttft_ms": slo.tau_ttft,
        "tau_tpot_ms": slo.tau_tpot,
        "tpot_statistic": slo.tpot_statistic,
    }
    if any(m.completed for m in sm):
        for crit in ("joint", "ttft", "tpot"):
            out[f"slo_attainment_{crit}"] = slo_attainment(trace, slo, crit)
    else:
        for crit in ("joint", "ttft", "tpot"):
            out[f"slo_attainment_{crit}"] = None
    return out


SESSION_COLUMNS = ("session_id", "completed", "ttft_ms", "tpot_stat_ms", "tpot_p50_ms", "tpot_p95_ms",
                   "tokens", "ttft_ok", "tpot_ok", "slo_met")


def session_table(trace: Trace, slo: SLOConfig) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SESSION_COLUMNS)
    em = trace.emissions()
    for m in session_metrics(trace, slo):
        gaps = m.tpot_samples
        w.writerow([
            m.session_id, int(m.completed), _fmt(m.ttft), _fmt(m.tpot_stat),
            _fmt(nearest_rank(gaps, 50) if gaps else None), _fmt(nearest_rank(gaps, 95) if gaps else None),
            len(em[m.session_id]), int(m.ttft_ok), int(m.tpot_ok), int(m.slo_met),
        ])
    return buf.getvalue()


COMPARE_COLUMNS = ("concurrency", "policy", "ttft_p50_ms", "ttft_p95_ms", "tpot_p50_ms", "tpot_p95_ms",
                   "throughput_tok_s", "slo_attainment_joint", "stream_hash")


def compare_table(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) if isinstance(r[c], float) or r[c] is None else r[c] for c in COMPARE_COLUMNS])
    return buf.getvalue()


def _fmt(x):
    return "" if x is None else repr(float(x))
