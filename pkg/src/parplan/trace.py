"""Chrome trace-event export (chrome://tracing, Perfetto)."""
from __future__ import annotations

import json

from .errors import InputError


def trace_events(events) -> list:
    out = []
    for e in sorted(events, key=lambda e: (e.start, e.device_id, e.lane, e.name)):
        tid = e.device_id if e.lane == "compute" else f"{e.device_id}:{e.lane}"
        args = {"kind": e.kind}
        if e.stage is not None:
            args["stage"] = e.stage
        if e.micro is not None:
            args["micro"] = e.micro
        out.append({"name": e.name, "cat": e.kind, "ph": "X", "ts": e.start * 1e6, "dur": e.duration * 1e6,
                    "pid": e.replica, "tid": tid, "args": args})
    return out


def trace_document(events) -> dict:
    return {"traceEvents": trace_events(events), "displayTimeUnit": "ms"}


def dumps_trace(events) -> str:
    return json.dumps(trace_document(events), indent=1, sort_keys=True) + "\n"


def emit_trace(events, path) -> None:
    text = dumps_trace(events)
    try:
        with open(path, "w") as f:
            f.write(text)
    except OSError as e:
        raise InputError(f"cannot write trace {path}: {e.strerror}") from None
