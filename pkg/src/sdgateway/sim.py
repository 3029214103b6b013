"""Deterministic discrete-event simulation core.

One seeded PRNG per simulation; every stochastic draw (link delay, loss,
MID seeding) pulls from it in event order, so identical scenario + seed
yields an identical event trace.
"""

from __future__ import annotations

import heapq
import itertools
import random
from typing import Callable, Optional


class Event:
    __slots__ = ("time", "seq", "fn", "args", "cancelled")

    def __init__(self, time: float, seq: int, fn: Callable, args: tuple) -> None:
        self.time = time
        self.seq = seq
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "Event") -> bool:
        return (self.time, self.seq) < (other.time, other.seq)


class TraceRecorder:
    """Collects (time, kind, fields) records and renders stable text lines."""

    def __init__(self, clock: Callable[[], float]) -> None:
        self._clock = clock
        self.records: list[tuple[float, str, dict]] = []

    def emit(self, kind: str, **fields) -> None:
        self.records.append((self._clock(), kind, fields))

    def lines(self) -> list[str]:
        out = []
        for t, kind, fields in self.records:
            rendered = " ".join(f"{k}={v}" for k, v in fields.items())
            out.append(f"{t:12.3f} {kind} {rendered}".rstrip())
        return out

    def text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def find(self, kind: str, **match) -> list[tuple[float, dict]]:
        hits = []
        for t, k, fields in self.records:
            if k != kind:
                continue
            if all(fields.get(key) == value for key, value in match.items()):
                hits.append((t, fields))
        return hits

    def contains(self, substring: str) -> bool:
        return any(substring in line for line in self.lines())

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.text())


class Simulator:
    """Event loop over simulated milliseconds.  Time never moves backward;
    ties pop in scheduling order."""

    def __init__(self, seed: int = 0) -> None:
        self.now = 0.0
        self.rng = random.Random(seed)
        self.seed = seed
        self._queue: list[Event] = []
        self._seq = itertools.count()
        self.trace = TraceRecorder(lambda: self.now)

    def schedule(self, delay: float, fn: Callable, *args) -> Event:
        return self.schedule_at(self.now + delay, fn, *args)

    def schedule_at(self, time: float, fn: Callable, *args) -> Event:
        assert time >= self.now, "cannot schedule into the past"
        event = Event(time, next(self._seq), fn, args)
        heapq.heappush(self._queue, event)
        return event

    def run(self, until: Optional[float] = None, max_events: int = 2_000_000) -> None:
        """Process events with time <= `until` (all pending when None)."""
        processed = 0
        while self._queue:
            if until is not None and self._queue[0].time > until:
                break
            event = heapq.heappop(self._queue)
            if event.cancelled:
                continue
            processed += 1
            if processed > max_events:
                raise RuntimeError("event budget exhausted; runaway simulation?")
            self.now = event.time
            event.fn(*event.args)
        if until is not None and until > self.now:
            self.now = until

    def pending(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)
