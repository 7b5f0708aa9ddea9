"""Deterministic discrete-event core: simulation clock, event queue, run loop.

Simulation time is kept in integer milliseconds so that events scheduled at
the same nominal instant compare exactly equal on every platform.  Ties are
broken by insertion order, which makes every run with the same inputs
reproduce the same dispatch sequence byte for byte.
"""

from __future__ import annotations

import heapq
import logging
import time as _wallclock
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

LOG = logging.getLogger(__name__)

MS_PER_S = 1000


def ms(seconds: float) -> int:
    """Convert seconds to integer-millisecond simulation time."""
    return int(round(seconds * MS_PER_S))


def to_seconds(time_ms: int) -> float:
    return time_ms / MS_PER_S


def hour_of(time_ms: int) -> int:
    """Hour-of-day (0..23) for a simulation timestamp."""
    return (time_ms // (3600 * MS_PER_S)) % 24


class EventKind(Enum):
    VEHICLE_SPAWN = "VehicleSpawn"
    SEGMENT_COMPLETE = "SegmentComplete"
    ARRIVE_DESTINATION = "ArriveDestination"
    DWELL_COMPLETE = "DwellComplete"
    CHARGE_REQUEST = "ChargeRequest"
    SLOT_GRANTED = "SlotGranted"
    CHARGE_COMPLETE = "ChargeComplete"
    RANGE_EXTENDER_TOGGLE = "RangeExtenderToggle"
    STRANDED = "Stranded"
    METRICS_TICK = "MetricsTick"
    SIMULATION_END = "SimulationEnd"


@dataclass
class Event:
    """A timestamped simulation event.

    ``at`` and ``sequence`` are stamped by the engine when the event is
    scheduled; ``payload`` holds entity ids keyed by role, e.g.
    ``{"vehicle": "v003", "station": "st1"}``.
    """

    kind: EventKind
    payload: dict = field(default_factory=dict)
    at: int = -1
    sequence: int = -1

    def payload_str(self) -> str:
        return ";".join(f"{k}={self.payload[k]}" for k in sorted(self.payload))


@dataclass
class EventHandle:
    """Opaque reference to a scheduled event, valid until fired or cancelled."""

    event: Event
    cancelled: bool = False
    fired: bool = False


class SchedulingInPastError(ValueError):
    """Raised when an event is scheduled before the current clock."""


class SimulationAborted(RuntimeError):
    """A handler raised an unrecoverable model error; carries the event."""

    def __init__(self, event: Event, cause: BaseException):
        super().__init__(
            f"handler for {event.kind.value} at t={to_seconds(event.at):.3f}s "
            f"(seq={event.sequence}, {event.payload_str()}) failed: {cause}"
        )
        self.event = event
        self.cause = cause


@dataclass
class SimulationSummary:
    end_clock_ms: int
    dispatched: Counter
    dropped: int
    wall_clock_s: float

    @property
    def total_dispatched(self) -> int:
        return sum(self.dispatched.values())


class Engine:
    """Single-threaded event loop with a (time, insertion-order) priority queue."""

    def __init__(self, *, keep_event_log: bool = False):
        self._clock_ms = 0
        self._queue: list[tuple[int, int, EventHandle]] = []
        self._seq = 0
        self.handlers: dict[EventKind, Callable[[Event], None]] = {}
        self.keep_event_log = keep_event_log
        self.event_log: list[tuple[int, int, str, str]] = []

    @property
    def now_ms(self) -> int:
        return self._clock_ms

    @property
    def now_s(self) -> float:
        return to_seconds(self._clock_ms)

    def on(self, kind: EventKind, handler: Callable[[Event], None]) -> None:
        self.handlers[kind] = handler

    def schedule(self, event: Event, at: int) -> EventHandle:
        """Enqueue ``event`` to fire at ``at`` (ms). Same-time events fire in
        insertion order; scheduling in the past is a logic bug and raises."""
        if at < self._clock_ms:
            raise SchedulingInPastError(
                f"cannot schedule {event.kind.value} at t={at} ms: "
                f"clock is already at {self._clock_ms} ms"
            )
        event.at = at
        event.sequence = self._seq
        self._seq += 1
        handle = EventHandle(event)
        heapq.heappush(self._queue, (at, event.sequence, handle))
        return handle

    def schedule_in(self, event: Event, delay_ms: int) -> EventHandle:
        return self.schedule(event, self._clock_ms + delay_ms)

    def cancel(self, handle: EventHandle) -> bool:
        """Remove a pending event. Idempotent: returns False if the event
        already fired or was cancelled."""
        if handle.fired or handle.cancelled:
            return False
        handle.cancelled = True
        return True

    def pending(self) -> int:
        return sum(1 for _, _, h in self._queue if not h.cancelled)

    def run_until(self, end_ms: int) -> SimulationSummary:
        """Dispatch every event with ``at <= end_ms`` in (at, sequence) order,
        then advance the clock to ``end_ms``."""
        started = _wallclock.perf_counter()
        dispatched: Counter = Counter()
        dropped = 0
        while self._queue and self._queue[0][0] <= end_ms:
            at, _, handle = heapq.heappop(self._queue)
            if handle.cancelled:
                continue
            event = handle.event
            self._clock_ms = at
            handle.fired = True
            handler = self.handlers.get(event.kind)
            if handler is None:
                LOG.warning(
                    "no handler for %s at t=%.3fs; event dropped",
                    event.kind.value,
                    to_seconds(at),
                )
                dropped += 1
                continue
            if self.keep_event_log:
                self.event_log.append(
                    (at, event.sequence, event.kind.value, event.payload_str())
                )
            try:
                handler(event)
            except Exception as exc:  # abort with the offending event identified
                raise SimulationAborted(event, exc) from exc
            dispatched[event.kind] += 1
        if end_ms > self._clock_ms:
            self._clock_ms = end_ms
        return SimulationSummary(
            end_clock_ms=self._clock_ms,
            dispatched=dispatched,
            dropped=dropped,
            wall_clock_s=_wallclock.perf_counter() - started,
        )


def write_event_log_csv(engine: Engine, path) -> int:
    """Dump the engine's event log as ``time,sequence,kind,payload-ids`` CSV.

    Returns the number of data rows written.
    """
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "sequence", "kind", "payload"])
        for at, seq, kind, payload in engine.event_log:
            writer.writerow([f"{to_seconds(at):.3f}", seq, kind, payload])
    return len(engine.event_log)
