"""Deterministic discrete-event loop.

Time is in milliseconds (floats; the smallest modelled quantity, a 0.05 ms
rebind, is far above float resolution at run lengths of hours). Events are
popped in (time, priority, sequence) order, which is a total order, so a
config and seed fully determine the trace.

Two executor models sit behind the policy interface:

* partitioned -- a decode context and a prefill context run concurrently on
  complementary slot levels (agentserve, static_partition, process_pd);
* shared -- one GPU timeline of iterations, each carrying prefill work and one
  decode token per active stream (mixed_fcfs, chunked_prefill, no_green).
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass

from . import trace as T
from .config import RunConfig
from .errors import ProtocolError
from .executor import KvCacheRegistry, SlotSet, decode_step_ms, kv_commit, rebind, select_slot
from .profiles import rate_at
from .scheduler import (
    Q_D,
    Q_P,
    ControllerState,
    classify,
    controller_update,
    decide,
    get_policy,
    measure_tpot_step,
)
from .slo import r_g_star_slots
from .workload import (
    COLD_DONE,
    COLD_PREFILL,
    DECODE_DONE,
    DECODE_STREAM,
    DONE,
    RESUME_DONE,
    RESUME_PREFILL,
    TOOL_RETURNED,
    generate_sessions,
    next_phase,
    tool_delay_of,
)


class SimulationAborted(ProtocolError):
    """A protocol error stopped the run; ``trace`` holds everything up to it."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class Job:
    request: object
    remaining: float
    queue: str = ""
    resume_at: float = 0.0  # prefill context: no progress before this time
    started: float = 0.0

    @property
    def sid(self):
        return self.request.session_id

    @property
    def cold(self):
        return self.request.kind == COLD_PREFILL


def _new_interval(index, start, level, state):
    return {
        "index": index,
        "start": start,
        "end": None,
        "decode_time": 0.0,
        "decode_steps": 0,
        "tpot_step": None,
        "cold_tokens": 0.0,
        "resume_tokens_prefill_ctx": 0.0,
        "resume_tokens_decode_ctx": 0,
        "busy_cold_ms": 0.0,
        "busy_resume_ms": 0.0,
        "stall_ms": 0.0,
        "rebinds": 0,
        "rebind_overhead_ms": 0.0,
        "decode_binding_start": level,
        "decode_binding_min": level,
        "decode_binding_max": level,
        "B": state.B_prefill,
        "R": state.R_min,
        "B_after": state.B_prefill,
        "R_after": state.R_min,
        "updated": False,
        "final": False,
    }


class Simulation:
    def __init__(self, cfg: RunConfig, sessions=None):
        self.cfg = cfg
        self.policy = get_policy(cfg.policy)
        self.bundle = cfg.bundle
        self.g = cfg.bundle.granularity
        self.ex = cfg.executor
        self.ctl_cfg = cfg.controller
        self.total_slots = cfg.total_slots
        self.dt = cfg.controller.delta_t
        if sessions is None:
            sessions = generate_sessions(cfg.workload.concurrency, cfg.workload.spec(), cfg.seed, cfg.workload.stagger_ms)
        self.sessions = {s.session_id: s for s in sessions}
        described = [s.describe() for s in sessions]

        self.state = ControllerState.initial(cfg.controller)
        shared = self.policy.executor == "shared"
        first = decide(self.policy, self.state, self.total_slots, cfg.static_decode_slots)
        self.slots = SlotSet(self.total_slots, first.decode_slots)
        self.kv = KvCacheRegistry()

        self.now = 0.0
        self.heap = []
        self.hseq = 0
        self.eseq = 0
        self.trace = T.Trace(
            header={
                "schema": T.TRACE_SCHEMA,
                "policy": self.policy.name,
                "executor": self.policy.executor,
                "seed": cfg.seed,
                "config": cfg.to_data(),
                "r_g_star_slots": r_g_star_slots(cfg.bundle, cfg.slo),
                "sessions": described,
                "stream_hash": T.stream_hash(described),
            }
        )
        self.tick_index = 0
        self.iv = _new_interval(0, 0.0, self.slots.current_decode_binding, self.state)

        # partitioned executor state
        self.q_d = deque()  # Jobs: decode streams and admitted resume prefills
        self.q_p = deque()  # PhaseRequests awaiting the prefill context
        self.decode_busy = False
        self.pending_level = None
        self.pause_until = 0.0
        self.pjob = None  # Job on the prefill context
        self.p_last = 0.0
        self.p_rate = 0.0
        self.p_version = 0
        # shared executor state
        self.gpu_busy = False
        self.shared = shared

    # -- plumbing -------------------------------------------------------------
    def push(self, time, kind, data):
        heapq.heappush(self.heap, (time, T.PRIORITY[kind], self.hseq, kind, data))
        self.hseq += 1

    def record(self, kind, **data):
        self.trace.events.append(T.Event(self.eseq, self.now, kind, data))
        self.eseq += 1

    # -- main loop --------------------------------------------------------------
    def run(self) -> T.Trace:
        for s in self.sessions.values():
            self.push(s.arrival_time, T.SESSION_ARRIVAL, {"session": s.session_id})
        self.push(self.dt, T.CONTROL_TICK, {})
        horizon = self.cfg.horizon
        end = None
        try:
            while self.heap:
                t, _, _, kind, data = self.heap[0]
                if horizon is not None and t > horizon:
                    break
                if end is not None and (t > end or kind != T.CONTROL_TICK):
                    break
                heapq.heappop(self.heap)
                self.now = t
                self.dispatch(kind, data)
                if end is None and self.all_done():
                    end = self.now
        except ProtocolError as exc:
            self.finish(self.now, truncated=True, error=str(exc))
            raise SimulationAborted(str(exc), self.trace) from exc
        if end is None:
            end = horizon if horizon is not None else self.now
        self.finish(end, truncated=not self.all_done())
        return self.trace

    def all_done(self):
        return all(s.phase == DONE for s in self.sessions.values())

    def dispatch(self, kind, data):
        if kind == T.SESSION_ARRIVAL:
            sid = data["session"]
            self.record(T.SESSION_ARRIVAL, session=sid)
            self.issue(self.sessions[sid].first_request())
        elif kind == T.TOOL_RETURNED:
            sid = data["session"]
            self.record(T.TOOL_RETURNED, session=sid)
            self.issue(next_phase(self.sessions[sid], TOOL_RETURNED, self.now))
        elif kind == T.CONTROL_TICK:
            self.on_tick()
        elif kind == T.DECODE_STEP_COMPLETED:
            if self.shared:
                self.on_iteration_done(data)
            else:
                self.on_step_done(data)
        elif kind == T.PREFILL_COMPLETED:
            if data["version"] == self.p_version:
                self.on_prefill_done()
        else:  # pragma: no cover
            raise ProtocolError(f"unknown event kind {kind}")

    def finish(self, end, truncated, error=None):
        if not self.shared and self.pjob is not None:
            self.settle_prefill(max(end, self.p_last))
        self.iv["end"] = end
        self.iv["final"] = True
        if end > self.iv["start"] or not self.trace.intervals:
            self.trace.intervals.append(self.iv)
        self.trace.end = {
            "end_time": end,
            "truncated": truncated,
            "unfinished_sessions": sorted(s.session_id for s in self.sessions.values() if s.phase != DONE),
            "ticks": self.tick_index,
            "error": error,
        }

    # -- sessions ---------------------------------------------------------------
    def issue(self, req):
        if req is None:
            return
        if self.shared:
            queue = self.route_shared(req)
        else:
            queue = self.route_partitioned(req)
        self.record(T.REQUEST_ISSUED, session=req.session_id, request=req.kind, index=req.index,
                    tokens=req.length_tokens, queue=queue)
        self.kick()

    def prefill_finished(self, job, context):
        sid = job.sid
        s = self.sessions[sid]
        kv_commit(self.kv, sid, s.cached_prefix + job.request.length_tokens)
        self.record(T.PREFILL_COMPLETED, session=sid, request=job.request.kind, index=job.request.index,
                    tokens=job.request.length_tokens, context=context, started=job.started)
        event = COLD_DONE if job.cold else RESUME_DONE
        self.issue(next_phase(s, event, self.now))
        if self.kv.prefix(sid) != s.cached_prefix:
            raise ProtocolError(f"session {sid}: KV prefix {self.kv.prefix(sid)} != cached {s.cached_prefix}")

    def stream_finished(self, job):
        sid = job.sid
        s = self.sessions[sid]
        self.record(T.DECODE_STREAM_COMPLETED, session=sid, index=job.request.index, tokens=job.request.length_tokens)
        next_phase(s, DECODE_DONE, self.now)
        kv_commit(self.kv, sid, s.cached_prefix)
        if s.phase != DONE:
            self.push(self.now + tool_delay_of(s), T.TOOL_RETURNED, {"session": sid})

    def kick(self):
        if self.shared:
            self.start_iteration()
        else:
            self.start_step()
            self.start_prefill()

    # -- control ----------------------------------------------------------------
    def on_tick(self):
        if not self.shared and self.pjob is not None:
            self.settle_prefill(self.now)
        tpot, state = measure_tpot_step(self.state)
        before = state
        if self.policy.adaptive and tpot is not None:
            state = controller_update(state, tpot, self.ctl_cfg, self.total_slots)
        self.state = state
        self.tick_index += 1
        iv = self.iv
        iv.update(end=self.now, tpot_step=tpot, B_after=state.B_prefill, R_after=state.R_min,
                  updated=state != before)
        self.trace.intervals.append(iv)
        decision = decide(self.policy, state, self.total_slots, self.cfg.static_decode_slots)
        self.record(T.CONTROL_TICK, interval=iv["index"], tpot_step=tpot, B=state.B_prefill, R=state.R_min,
                    decode_slots=decision.decode_slots, prefill_slots=decision.prefill_slots)
        self.iv = _new_interval(self.tick_index, self.now, self.slots.current_decode_binding, state)
        if not self.shared:
            level = select_slot(decision.decode_slots, self.slots)
            if self.decode_busy:
                self.pending_level = level
            else:
                self.apply_level(level)
        self.push((self.tick_index + 1) * self.dt, T.CONTROL_TICK, {})

    def apply_level(self, level):
        self.pending_level = None
        ev = rebind(self.slots, level, self.now, self.ex.rebind_overhead_ms)
        if ev is None:
            return
        if self.pjob is not None:
            self.settle_prefill(self.now)
        self.pause_until = self.now + ev.overhead
        self.record(T.REBIND, from_level=ev.from_level, to_level=ev.to_level, overhead=ev.overhead)
        iv = self.iv
        iv["rebinds"] += 1
        iv["rebind_overhead_ms"] += ev.overhead
        iv["decode_binding_min"] = min(iv["decode_binding_min"], level)
        iv["decode_binding_max"] = max(iv["decode_binding_max"], level)
        if self.pjob is not None:
            self.pjob.resume_at = max(self.pjob.resume_at, self.pause_until)
            self.p_rate = self.prefill_rate(self.pjob)
            self.schedule_prefill_completion()

    # -- partitioned executor ---------------------------------------------------
    def route_partitioned(self, req):
        if req.kind == DECODE_STREAM:
            where = Q_D
        elif self.policy.routing == "prefill_engine":
            where = Q_P
        else:
            where = classify(req, self.state.B_prefill)
        if where == Q_D:
            job = Job(req, float(req.length_tokens), Q_D, started=self.now)
            if req.kind == RESUME_PREFILL:
                self.kv.open(req.session_id)
            self.q_d.append(job)
        else:
            self.q_p.append(req)
        return where

    def start_step(self):
        if self.decode_busy:
            return
        if self.pending_level is not None:
            self.apply_level(self.pending_level)
        streams = [j for j in self.q_d if j.request.kind == DECODE_STREAM]
        resume = next((j for j in self.q_d if j.request.kind == RESUME_PREFILL), None)
        chunk = min(int(resume.remaining), self.ex.resume_chunk_tokens) if resume else 0
        if not streams and not chunk:
            return
        for j in streams:
            self.kv.require_sealed(j.sid)
        level = self.slots.current_decode_binding
        start = max(self.now, self.pause_until)
        dur = decode_step_ms(self.bundle, level * self.g, len(streams), chunk)
        self.decode_busy = True
        self.push(start + dur, T.DECODE_STEP_COMPLETED, {
            "start": start,
            "duration": dur,
            "decode_slots": level,
            "streams": [[j.sid, j.request.index] for j in streams],
            "chunk": [resume.sid, resume.request.index, chunk] if chunk else None,
        })

    def on_step_done(self, data):
        self.decode_busy = False
        streams = data["streams"]
        self.record(T.DECODE_STEP_COMPLETED, **data)
        if streams:
            self.state = self.state.record_step(data["duration"])
            self.iv["decode_time"] += data["duration"]
            self.iv["decode_steps"] += 1
        finished = []
        live = {(j.sid, j.request.index, j.request.kind): j for j in self.q_d}
        for sid, idx in streams:
            job = live[(sid, idx, DECODE_STREAM)]
            job.remaining -= 1
            if job.remaining == 0:
                finished.append(job)
        resumed = None
        if data["chunk"]:
            sid, idx, n = data["chunk"]
            job = live[(sid, idx, RESUME_PREFILL)]
            job.remaining -= n
            self.iv["resume_tokens_decode_ctx"] += n
            if job.remaining == 0:
                resumed = job
        for job in finished:
            self.q_d.remove(job)
        if resumed is not None:
            self.q_d.remove(resumed)
        # hold the decode context while follow-up requests are issued
        self.decode_busy = True
        for job in finished:
            self.stream_finished(job)
        if resumed is not None:
            self.prefill_finished(resumed, "decode")
        self.decode_busy = False
        self.start_step()

    def prefill_rate(self, job):
        psms = self.slots.current_prefill_binding * self.g
        return rate_at(self.bundle.cold if job.cold else self.bundle.resume, psms)

    def start_prefill(self):
        if self.pjob is not None or not self.q_p:
            return
        req = self.q_p.popleft()
        job = Job(req, float(req.length_tokens), Q_P, started=self.now)
        job.resume_at = max(self.now, self.pause_until)
        if self.policy.routing == "prefill_engine":
            job.resume_at += self.ex.ipc_overhead_ms
        self.kv.open(req.session_id)
        self.pjob = job
        self.p_last = self.now
        self.p_rate = self.prefill_rate(job)
        self.record(T.PREFILL_STARTED, session=req.session_id, request=req.kind, index=req.index,
                    tokens=req.length_tokens, prefill_slots=self.slots.current_prefill_binding,
                    resume_at=job.resume_at)
        self.schedule_prefill_completion()

    def schedule_prefill_completion(self):
        self.p_version += 1
        job = self.pjob
        if self.p_rate > 0:
            t = max(self.now, job.resume_at) + 1000.0 * job.remaining / self.p_rate
            self.push(t, T.PREFILL_COMPLETED, {"version": self.p_version})

    def settle_prefill(self, t, final=False):
        """Account prefill-context progress from ``p_last`` up to ``t``."""
        job = self.pjob
        a = self.p_last
        if t < a:
            raise ProtocolError("prefill clock moved backwards")
        run_from = min(t, max(a, job.resume_at))
        stall = run_from - a
        run = t - run_from
        if final:
            tokens = job.remaining
        else:
            tokens = min(job.remaining, self.p_rate * run / 1000.0)
        iv = self.iv
        iv["stall_ms"] += stall
        if job.cold:
            iv["busy_cold_ms"] += run
            iv["cold_tokens"] += tokens
        else:
            iv["busy_resume_ms"] += run
            iv["resume_tokens_prefill_ctx"] += tokens
        job.remaining -= tokens
        self.p_last = t

    def on_prefill_done(self):
        job = self.pjob
        self.settle_prefill(self.now, final=True)
        self.pjob = None
        self.p_version += 1
        self.prefill_finished(job, "prefill")
        self.start_prefill()

    # -- shared executor ------------------------------------------------------------
    def route_shared(self, req):
        if req.kind == DECODE_STREAM:
            where = Q_D
        elif self.policy.routing == "budget":
            where = classify(req, self.state.B_prefill)
        else:
            where = Q_P
        if where == Q_D:
            if req.kind == RESUME_PREFILL:
                self.kv.open(req.session_id)
            self.q_d.append(Job(req, float(req.length_tokens), Q_D, started=self.now))
        else:
            self.q_p.append(Job(req, float(req.length_tokens), Q_P, started=self.now))
        return where

    def start_iteration(self):
        if self.gpu_busy:
            return
        S = self.bundle.total_sms
        mode = self.policy.shared_prefill
        work = []  # [sid, kind, index, tokens, ms]
        if self.q_p:
            if mode == "whole":
                batch = list(self.q_p)
            else:
                batch = [self.q_p[0]]
            for job in batch:
                rate = rate_at(self.bundle.cold if job.cold else self.bundle.resume, S)
                if mode == "whole":
                    toks = job.remaining
                elif mode == "chunk":
                    toks = min(job.remaining, float(self.ex.prefill_chunk_tokens))
                else:  # timeslice
                    toks = min(job.remaining, rate * self.ex.timeslice_ms / 1000.0)
                if job.remaining == job.request.length_tokens and job.started <= self.now:
                    self.kv.open(job.sid)
                work.append([job.sid, job.request.kind, job.request.index, toks, 1000.0 * toks / rate])
        streams = [j for j in self.q_d if j.request.kind == DECODE_STREAM]
        resume = next((j for j in self.q_d if j.request.kind == RESUME_PREFILL), None)
        chunk = min(int(resume.remaining), self.ex.resume_chunk_tokens) if resume else 0
        if not work and not streams and not chunk:
            return
        for j in streams:
            self.kv.require_sealed(j.sid)
        dur = sum(w[4] for w in work) + decode_step_ms(self.bundle, S, len(streams), chunk)
        self.gpu_busy = True
        self.push(self.now + dur, T.DECODE_STEP_COMPLETED, {
            "start": self.now,
            "duration": dur,
            "decode_slots": self.total_slots,
            "streams": [[j.sid, j.request.index] for j in streams],
            "chunk": [resume.sid, resume.request.index, chunk] if chunk else None,
            "prefill": work,
        })

    def on_iteration_done(self, data):
        self.gpu_busy = False
        self.record(T.DECODE_STEP_COMPLETED, **data)
        streams = data["streams"]
        if streams:
            self.state = self.state.record_step(data["duration"])
            self.iv["decode_time"] += data["duration"]
            self.iv["decode_steps"] += 1
        live_d = {(j.sid, j.request.index, j.request.kind): j for j in self.q_d}
        live_p = {(j.sid, j.request.index, j.request.kind): j for j in self.q_p}
        finished, prefilled = [], []
        for sid, idx in streams:
            job = live_d[(sid, idx, DECODE_STREAM)]
            job.remaining -= 1
            if job.remaining == 0:
                finished.append(job)
        if data["chunk"]:
            sid, idx, n = data["chunk"]
            job = live_d[(sid, idx, RESUME_PREFILL)]
            job.remaining -= n
            self.iv["resume_tokens_decode_ctx"] += n
            if job.remaining == 0:
                prefilled.append(job)
        for sid, kind, idx, toks, ms in data["prefill"]:
            job = live_p[(sid, idx, kind)]
            job.remaining -= toks
            if job.cold:
                self.iv["cold_tokens"] += toks
                self.iv["busy_cold_ms"] += ms
            else:
                self.iv["resume_tokens_prefill_ctx"] += toks
                self.iv["busy_resume_ms"] += ms
            if job.remaining <= 1e-9 * job.request.length_tokens:
                job.remaining = 0.0
                prefilled.append(job)
        for job in finished:
            self.q_d.remove(job)
        for job in prefilled:
            (self.q_d if job.queue == Q_D else self.q_p).remove(job)
        self.gpu_busy = True
        for job in finished:
            self.stream_finished(job)
        for job in prefilled:
            self.prefill_finished(job, "decode" if job.queue == Q_D else "shared")
        self.gpu_busy = False
        self.start_iteration()


def run(cfg: RunConfig, sessions=None) -> T.Trace:
    """Simulate one policy over the configured workload and return its trace."""
    return Simulation(cfg, sessions).run()
