"""Independent re-derivation of a trace's interval summaries.

The walker below reads only the header config and the raw event list. It
rebuilds prefill progress by integrating profiled rates over the recorded
bindings and pauses, recounts decode steps and tokens, and re-runs the
controller. Every field it can derive is compared with what the live run
recorded.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import trace as T
from .config import from_data
from .executor import decode_step_ms
from .profiles import rate_at
from .scheduler import ControllerState, controller_update, decide, get_policy
from .workload import COLD_PREFILL, DECODE_STREAM, RESUME_PREFILL

FLOAT_TOL = 1e-9
EXACT = {"index", "decode_steps", "decode_time", "tpot_step", "resume_tokens_decode_ctx", "rebinds",
         "decode_binding_start", "decode_binding_min", "decode_binding_max", "B", "R", "B_after",
         "R_after", "updated", "final", "start", "end"}
PHASE_ORDER = re.compile(r"C(DR)*D")
PHASE_PREFIX = re.compile(r"(C(DR)*D?)?")
LETTER = {COLD_PREFILL: "C", DECODE_STREAM: "D", RESUME_PREFILL: "R"}


@dataclass
class ReplayReport:
    mismatches: list = field(default_factory=list)  # (interval, field, recorded, recomputed)
    problems: list = field(default_factory=list)  # event-level findings
    intervals: list = field(default_factory=list)  # recomputed summaries

    @property
    def ok(self) -> bool:
        return not self.mismatches and not self.problems

    def __len__(self):
        return len(self.mismatches) + len(self.problems)


def _blank(index, start, binding, B, R):
    return {
        "index": index, "start": start, "end": None, "decode_time": 0.0, "decode_steps": 0, "tpot_step": None,
        "cold_tokens": 0.0, "resume_tokens_prefill_ctx": 0.0, "resume_tokens_decode_ctx": 0,
        "busy_cold_ms": 0.0, "busy_resume_ms": 0.0, "stall_ms": 0.0, "rebinds": 0, "rebind_overhead_ms": 0.0,
        "decode_binding_start": binding, "decode_binding_min": binding, "decode_binding_max": binding,
        "B": B, "R": R, "B_after": B, "R_after": R, "updated": False, "final": False,
    }


class _Walker:
    def __init__(self, trace):
        self.trace = trace
        cfg = from_data(trace.header["config"])
        self.cfg = cfg
        self.bundle = cfg.bundle
        self.g = cfg.bundle.granularity
        self.slots = cfg.total_slots
        self.policy = get_policy(trace.policy)
        self.shared = self.policy.executor == "shared"
        self.ctl = ControllerState.initial(cfg.controller)
        self.binding = decide(self.policy, self.ctl, self.slots, cfg.static_decode_slots).decode_slots
        self.problems = []
        self.out = []
        self.iv = _blank(0, 0.0, self.binding, self.ctl.B_prefill, self.ctl.R_min)
        self.steps_time = 0.0
        self.steps_n = 0
        self.job = None  # partitioned prefill context
        self.ticks = 0
        self.emitted = {}
        self.kinds = {s["session_id"]: [] for s in trace.sessions}

    # prefill context --------------------------------------------------------
    def rate(self, cold):
        return rate_at(self.bundle.cold if cold else self.bundle.resume, (self.slots - self.binding) * self.g)

    def settle(self, t, final=False):
        job = self.job
        if job is None:
            return
        a = job["last"]
        run_from = min(t, max(a, job["resume_at"]))
        run = t - run_from
        tokens = job["remaining"] if final else min(job["remaining"], job["rate"] * run / 1000.0)
        self.iv["stall_ms"] += run_from - a
        if job["cold"]:
            self.iv["busy_cold_ms"] += run
            self.iv["cold_tokens"] += tokens
        else:
            self.iv["busy_resume_ms"] += run
            self.iv["resume_tokens_prefill_ctx"] += tokens
        if final:
            # the completion time must be when the integrated rate covers the job
            expect = job["rate"] * run / 1000.0
            if abs(expect - tokens) > FLOAT_TOL * max(1.0, job["tokens"]):
                self.problems.append(
                    f"t={t}: prefill for session {job['session']} completed with {tokens:.9g} tokens left "
                    f"but the rate covers {expect:.9g}")
        job["remaining"] -= tokens
        job["last"] = t

    # intervals ----------------------------------------------------------------
    def close(self, t, final):
        self.settle(t)
        iv = self.iv
        iv["end"] = t
        iv["final"] = final
        tpot = self.steps_time / self.steps_n if self.steps_n else None
        if not final:
            iv["tpot_step"] = tpot
            before = self.ctl
            if self.policy.adaptive and tpot is not None:
                self.ctl = controller_update(self.ctl, tpot, self.cfg.controller, self.slots)
            iv["B_after"], iv["R_after"] = self.ctl.B_prefill, self.ctl.R_min
            iv["updated"] = (before.B_prefill, before.R_min) != (self.ctl.B_prefill, self.ctl.R_min)
        self.steps_time, self.steps_n = 0.0, 0
        self.out.append(iv)
        self.iv = _blank(iv["index"] + 1, t, self.binding, self.ctl.B_prefill, self.ctl.R_min)

    def walk(self):
        dt = self.cfg.controller.delta_t
        last_t, last_seq = -1.0, -1
        for e in self.trace.events:
            if e.time < last_t:
                self.problems.append(f"event {e.seq} at t={e.time} precedes t={last_t}")
            if e.seq != last_seq + 1:
                self.problems.append(f"event sequence jumps from {last_seq} to {e.seq}")
            last_t, last_seq = e.time, e.seq
            handler = getattr(self, "on_" + e.kind, None)
            if handler is not None:
                handler(e, dt)
        end = self.trace.end["end_time"]
        if end > self.iv["start"] or not self.out:
            self.close(end, final=True)
        return self.out

    def on_ControlTick(self, e, dt):
        self.ticks += 1
        if e.time != self.ticks * dt:
            self.problems.append(f"control tick {self.ticks} at t={e.time}, expected {self.ticks * dt}")
        self.close(e.time, final=False)

    def on_Rebind(self, e, dt):
        self.settle(e.time)
        if e.data["from_level"] != self.binding:
            self.problems.append(f"t={e.time}: rebind from {e.data['from_level']} but binding is {self.binding}")
        self.binding = e.data["to_level"]
        iv = self.iv
        iv["rebinds"] += 1
        iv["rebind_overhead_ms"] += e.data["overhead"]
        iv["decode_binding_min"] = min(iv["decode_binding_min"], self.binding)
        iv["decode_binding_max"] = max(iv["decode_binding_max"], self.binding)
        if self.job is not None:
            self.job["resume_at"] = max(self.job["resume_at"], e.time + e.data["overhead"])
            self.job["rate"] = self.rate(self.job["cold"])

    def on_RequestIssued(self, e, dt):
        self.kinds[e.data["session"]].append(e.data["request"])

    def on_PrefillStarted(self, e, dt):
        if self.job is not None:
            self.problems.append(f"t={e.time}: prefill started while another is running")
        cold = e.data["request"] == COLD_PREFILL
        self.job = {"session": e.data["session"], "cold": cold, "tokens": e.data["tokens"],
                    "remaining": float(e.data["tokens"]), "resume_at": e.data["resume_at"],
                    "last": e.time, "rate": self.rate(cold)}

    def on_PrefillCompleted(self, e, dt):
        if e.data["context"] != "prefill":
            return
        if self.job is None or self.job["session"] != e.data["session"]:
            self.problems.append(f"t={e.time}: completion of a prefill that was never started")
            return
        self.settle(e.time, final=True)
        self.job = None

    def on_DecodeStepCompleted(self, e, dt):
        d = e.data
        streams = d["streams"]
        chunk = d["chunk"][2] if d["chunk"] else 0
        if self.shared:
            expect = sum(w[4] for w in d["prefill"]) + decode_step_ms(self.bundle, self.bundle.total_sms,
                                                                      len(streams), chunk)
            for sid, kind, idx, toks, ms in d["prefill"]:
                if kind == COLD_PREFILL:
                    self.iv["cold_tokens"] += toks
                    self.iv["busy_cold_ms"] += ms
                else:
                    self.iv["resume_tokens_prefill_ctx"] += toks
                    self.iv["busy_resume_ms"] += ms
        else:
            if d["decode_slots"] != self.binding:
                self.problems.append(f"t={e.time}: step ran on {d['decode_slots']} slots, binding is {self.binding}")
            expect = decode_step_ms(self.bundle, self.binding * self.g, len(streams), chunk)
        if expect != d["duration"]:
            self.problems.append(f"t={e.time}: step duration {d['duration']} but the profile gives {expect}")
        if abs(d["start"] + d["duration"] - e.time) > FLOAT_TOL * max(1.0, e.time):
            self.problems.append(f"t={e.time}: step started at {d['start']} and lasted {d['duration']}")
        if streams:
            self.steps_time += d["duration"]
            self.steps_n += 1
            self.iv["decode_time"] += d["duration"]
            self.iv["decode_steps"] += 1
        self.iv["resume_tokens_decode_ctx"] += chunk
        for sid, idx in streams:
            key = (sid, idx)
            self.emitted[key] = self.emitted.get(key, 0) + 1

    def on_DecodeStreamCompleted(self, e, dt):
        key = (e.data["session"], e.data["index"])
        got = self.emitted.get(key, 0)
        if got != e.data["tokens"]:
            self.problems.append(f"session {key[0]} stream {key[1]}: emitted {got} of {e.data['tokens']} tokens")


def _same(name, a, b):
    if name in EXACT or a is None or b is None or isinstance(a, bool):
        return a == b
    return abs(a - b) <= FLOAT_TOL * max(1.0, abs(a), abs(b))


def recompute_intervals(trace) -> list:
    return _Walker(trace).walk()


def replay_check(trace) -> ReplayReport:
    """Recompute interval summaries and accounting from raw events and diff them."""
    w = _Walker(trace)
    ours = w.walk()
    report = ReplayReport(problems=list(w.problems), intervals=ours)
    recorded = trace.intervals
    if len(recorded) != len(ours):
        report.problems.append(f"{len(recorded)} recorded intervals, {len(ours)} recomputed")
    for rec, mine in zip(recorded, ours):
        for name, value in mine.items():
            if name not in rec:
                report.mismatches.append((mine["index"], name, None, value))
            elif not _same(name, rec[name], value):
                report.mismatches.append((mine["index"], name, rec[name], value))
    if w.ticks != trace.end.get("ticks"):
        report.problems.append(f"end record says {trace.end.get('ticks')} ticks, trace has {w.ticks}")

    unfinished = set(trace.end.get("unfinished_sessions", []))
    for sid, kinds in w.kinds.items():
        word = "".join(LETTER[k] for k in kinds)
        pattern = PHASE_PREFIX if sid in unfinished else PHASE_ORDER
        if not pattern.fullmatch(word):
            report.problems.append(f"session {sid}: request order {word} breaks the phase cycle")
    for s in trace.sessions:
        if s["session_id"] in unfinished:
            continue
        for idx, n in enumerate(s["decode_tokens"]):
            got = w.emitted.get((s["session_id"], idx), 0)
            if got != n:
                report.problems.append(f"session {s['session_id']} stream {idx}: {got} tokens, requested {n}")
    return report
