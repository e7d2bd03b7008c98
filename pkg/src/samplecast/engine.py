"""Deterministic discrete-event engine.

Events fire in strict (time, seqno) order at 1 microsecond resolution.
Identical schedules produce identical traces; all randomness lives in
the channel models, never here.
"""

from __future__ import annotations

import heapq


class SimulationError(RuntimeError):
    """Fatal scheduling fault, e.g. an event scheduled in the past."""


class Event:
    __slots__ = ("time", "seqno", "fn", "args", "cancelled")

    def __init__(self, time, seqno, fn, args):
        self.time = time
        self.seqno = seqno
        self.fn = fn
        self.args = args
        self.cancelled = False

    def __lt__(self, other):
        if self.time != other.time:
            return self.time < other.time
        return self.seqno < other.seqno

    def cancel(self) -> None:
        self.cancelled = True


class Engine:
    """Single-threaded event loop over integer-microsecond time."""

    def __init__(self):
        self.now = 0
        self._heap: list[Event] = []
        self._seqno = 0
        self.processed = 0
        # Called with the just-finished timestamp once all events at that
        # instant have drained; used by invariant checkers.
        self.instant_hooks: list = []

    def schedule_at(self, time: int, fn, *args) -> Event:
        if time < self.now:
            raise SimulationError(
                "event scheduled at %d, before current time %d" % (time, self.now)
            )
        ev = Event(time, self._seqno, fn, args)
        self._seqno += 1
        heapq.heappush(self._heap, ev)
        return ev

    def schedule_in(self, delay: int, fn, *args) -> Event:
        if delay < 0:
            raise SimulationError("negative delay %d" % delay)
        return self.schedule_at(self.now + delay, fn, *args)

    def _flush_instant(self, finished_time: int) -> None:
        for hook in self.instant_hooks:
            hook(finished_time)

    def run_until(self, t_end: int) -> None:
        """Drain all events with time <= t_end, then set now = t_end."""
        if t_end < self.now:
            raise SimulationError("run_until into the past")
        heap = self._heap
        hooks = self.instant_hooks
        while heap and heap[0].time <= t_end:
            ev = heapq.heappop(heap)
            if ev.cancelled:
                continue
            if hooks and ev.time > self.now and self.processed:
                self._flush_instant(self.now)
            self.now = ev.time
            self.processed += 1
            ev.fn(*ev.args)
        if hooks and self.processed:
            self._flush_instant(self.now)
        self.now = t_end

    def run(self) -> None:
        """Drain the queue completely."""
        heap = self._heap
        hooks = self.instant_hooks
        while heap:
            ev = heapq.heappop(heap)
            if ev.cancelled:
                continue
            if hooks and ev.time > self.now and self.processed:
                self._flush_instant(self.now)
            self.now = ev.time
            self.processed += 1
            ev.fn(*ev.args)
        if hooks and self.processed:
            self._flush_instant(self.now)

    def pending(self) -> int:
        return sum(1 for ev in self._heap if not ev.cancelled)
