"""Inject a trace into the measurement and update topics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable

from ..engine.config import Topics
from ..log import PartitionedLog, wall_clock_ms
from ..model import AttributeUpdate, Measurement
from ..wire import encode_measurement, encode_update
from .generator import Trace, TraceEvent

SPEEDS = ("realtime", "max")
CLOCKS = ("wall", "trace")


@dataclass
class DriveReport:
    appended: int = 0
    per_topic: dict[str, int] = field(default_factory=dict)
    duration_s: float = 0.0
    complete: bool = True
    error: str | None = None


class DriveError(RuntimeError):
    def __init__(self, report: DriveReport) -> None:
        super().__init__(f"injection aborted after {report.appended} records: {report.error}")
        self.report = report


def drive(
    trace: Trace | Iterable[TraceEvent],
    log: PartitionedLog,
    topics: Topics = Topics(),
    *,
    speed: str = "max",
    clock: str = "wall",
    rate_scale: float = 1.0,
) -> DriveReport:
    """Append every event in trace order.

    ``speed="realtime"`` paces appends by arrival timestamps (divided by
    ``rate_scale``); ``"max"`` appends as fast as possible. ``clock`` picks
    the append timestamp: the wall clock, or the event's own arrival time,
    which makes the engine's input merge order a pure function of the
    trace.
    """
    if speed not in SPEEDS:
        raise ValueError(f"speed must be one of {SPEEDS}")
    if clock not in CLOCKS:
        raise ValueError(f"clock must be one of {CLOCKS}")
    events = trace.events if isinstance(trace, Trace) else trace
    m_topic = log.topic(topics.measurements)
    u_topic = log.topic(topics.updates)
    report = DriveReport(per_topic={m_topic.name: 0, u_topic.name: 0})
    counts = report.per_topic
    use_trace_clock = clock == "trace"
    paced = speed == "realtime"
    started = time.monotonic()
    first_arrival = None
    append = log.append
    try:
        for ev in events:
            if paced:
                if first_arrival is None:
                    first_arrival = ev.arrival
                due = started + (ev.arrival - first_arrival) / 1000.0 / rate_scale
                ahead = due - time.monotonic()
                if ahead > 0:
                    log.flush()
                    time.sleep(ahead)
            stamp = ev.arrival if use_trace_clock else wall_clock_ms()
            rec = ev.record
            if type(rec) is Measurement:
                payload = encode_measurement(rec._replace(ingest_time=stamp))
                append(m_topic, rec.device, payload, append_time=stamp)
                counts[m_topic.name] += 1
            elif type(rec) is AttributeUpdate:
                append(u_topic, rec.key.device, encode_update(rec), append_time=stamp)
                counts[u_topic.name] += 1
            else:
                raise TypeError(f"unexpected trace record {type(rec).__name__}")
            report.appended += 1
        log.flush()
    except OSError as exc:
        report.complete = False
        report.error = str(exc)
        report.duration_s = time.monotonic() - started
        raise DriveError(report) from exc
    report.duration_s = time.monotonic() - started
    return report
