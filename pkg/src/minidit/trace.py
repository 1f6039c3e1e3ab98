"""Step trace: timestamped stream events backing the overlap assertions.

Events follow the JSON Lines schema
    {ts, stream in {load, compute, offload, comm}, event in {issue, begin, end},
     tensor, bytes, worker}
where ts is seconds since the trace epoch. The trace is the substrate for
event-order tests (prefetch issued before compute begins, worker audits),
so recording must be cheap and safe from any thread.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass


@dataclass
class TraceEvent:
    ts: float
    stream: str
    event: str
    tensor: str
    bytes: int
    worker: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "ts": self.ts,
                "stream": self.stream,
                "event": self.event,
                "tensor": self.tensor,
                "bytes": self.bytes,
                "worker": self.worker,
            }
        )


class Trace:
    """Append-only event log; one instance per memory system / rank."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._events: list[TraceEvent] = []
        self._lock = threading.Lock()
        self._t0 = time.perf_counter()

    def record(self, stream: str, event: str, tensor: str, nbytes: int = 0) -> None:
        if not self.enabled:
            return
        ev = TraceEvent(
            ts=time.perf_counter() - self._t0,
            stream=stream,
            event=event,
            tensor=tensor,
            bytes=int(nbytes),
            worker=threading.current_thread().name,
        )
        with self._lock:
            self._events.append(ev)

    def events(self, stream: str | None = None, event: str | None = None) -> list[TraceEvent]:
        with self._lock:
            evs = list(self._events)
        if stream is not None:
            evs = [e for e in evs if e.stream == stream]
        if event is not None:
            evs = [e for e in evs if e.event == event]
        return evs

    def clear(self) -> None:
        with self._lock:
            self._events.clear()

    def intervals(self, stream: str) -> list[tuple[float, float, str]]:
        """Pair begin/end events per tensor label into (t_begin, t_end, tensor)."""
        out = []
        open_at: dict[str, float] = {}
        for ev in self.events(stream=stream):
            if ev.event == "begin":
                open_at[ev.tensor] = ev.ts
            elif ev.event == "end" and ev.tensor in open_at:
                out.append((open_at.pop(ev.tensor), ev.ts, ev.tensor))
        return out

    def dump_jsonl(self, path: str) -> None:
        with open(path, "w") as f:
            for ev in self.events():
                f.write(ev.to_json() + "\n")
