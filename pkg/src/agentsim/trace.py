"""Trace records and their line-delimited JSON serialization.

A trace file is JSON Lines:

* line 1: ``{"record": "header", ...}`` with schema, policy, seed, the full
  resolved run config and the pre-sampled sessions;
* one ``{"record": "event", "seq", "t", "kind", ...payload}`` per event, in
  processing order;
* one ``{"record": "interval", ...}`` per control interval;
* last line: ``{"record": "end", ...}``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

TRACE_SCHEMA = "agentsim.trace/1"

# event kinds
SESSION_ARRIVAL = "SessionArrival"
REQUEST_ISSUED = "RequestIssued"
PREFILL_STARTED = "PrefillStarted"
PREFILL_COMPLETED = "PrefillCompleted"
DECODE_STEP_COMPLETED = "DecodeStepCompleted"
DECODE_STREAM_COMPLETED = "DecodeStreamCompleted"
TOOL_RETURNED = "ToolReturned"
CONTROL_TICK = "ControlTick"
REBIND = "Rebind"

# equal-time ordering: completions, then the control tick, then arrivals
PRIORITY = {
    PREFILL_COMPLETED: 0,
    DECODE_STEP_COMPLETED: 0,
    CONTROL_TICK: 1,
    SESSION_ARRIVAL: 2,
    TOOL_RETURNED: 2,
}


@dataclass(frozen=True)
class Event:
    seq: int
    time: float
    kind: str
    data: dict

    def to_record(self) -> dict:
        return {"record": "event", "seq": self.seq, "t": self.time, "kind": self.kind, **self.data}

    @classmethod
    def from_record(cls, rec: dict) -> "Event":
        data = {k: v for k, v in rec.items() if k not in ("record", "seq", "t", "kind")}
        return cls(rec["seq"], rec["t"], rec["kind"], data)


@dataclass
class Trace:
    header: dict
    events: list = field(default_factory=list)
    intervals: list = field(default_factory=list)
    end: dict = field(default_factory=dict)

    # -- convenience views --------------------------------------------------
    @property
    def policy(self) -> str:
        return self.header["policy"]

    @property
    def sessions(self) -> list:
        return self.header["sessions"]

    @property
    def delta_t(self) -> float:
        return self.header["config"]["controller"]["delta_t"]

    def of_kind(self, *kinds):
        return [e for e in self.events if e.kind in kinds]

    def emissions(self) -> dict:
        """session_id -> list of (time, stream index) for every emitted token."""
        out = {s["session_id"]: [] for s in self.sessions}
        for e in self.events:
            if e.kind == DECODE_STEP_COMPLETED:
                for sid, idx in e.data["streams"]:
                    out[sid].append((e.time, idx))
        return out

    # -- serialization --------------------------------------------------------
    def records(self):
        yield {"record": "header", **self.header}
        for e in self.events:
            yield e.to_record()
        for iv in self.intervals:
            yield {"record": "interval", **iv}
        yield {"record": "end", **self.end}

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records())

    def write(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Trace":
        header, events, intervals, end = None, [], [], {}
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("record", None)
            if kind == "header":
                header = rec
            elif kind == "event":
                events.append(Event.from_record({"record": "event", **rec}))
            elif kind == "interval":
                intervals.append(rec)
            elif kind == "end":
                end = rec
            else:
                raise ValueError(f"line {n}: unknown record type {kind!r}")
        if header is None:
            raise ValueError("trace has no header record")
        if header.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"unsupported trace schema {header.get('schema')!r}")
        return cls(header, events, intervals, end)

    @classmethod
    def read(cls, path) -> "Trace":
        return cls.loads(Path(path).read_text())

    def __eq__(self, other):
        return isinstance(other, Trace) and self.dumps() == other.dumps()


def stream_hash(sessions: list) -> str:
    """Digest of the pre-sampled request stream (identical across policies)."""
    blob = json.dumps(sessions, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
