"""Deterministic crash injection for recovery tests."""

from __future__ import annotations

from collections import Counter

# Named places in the worker loop where a crash can be injected.
FAULT_POINTS = (
    "worker.started",       # recovered and about to consume input
    "update.stored",        # update persisted to the store, cache not yet advanced
    "measurement.emitted",  # result appended, input offset not yet advanced
    "batch.done",           # a measurement batch finished, before any checkpoint
    "checkpoint.begin",     # sinks about to be flushed for a checkpoint
    "checkpoint.partial",   # half of the checkpoint temp file written
    "checkpoint.written",   # temp file complete, not yet renamed into place
    "checkpoint.renamed",   # checkpoint visible, older ones not yet pruned
)


class InjectedCrash(Exception):
    def __init__(self, point: str, occurrence: int) -> None:
        super().__init__(f"injected crash at {point} #{occurrence}")
        self.point = point
        self.occurrence = occurrence


class FaultPlan:
    """Raise :class:`InjectedCrash` the ``occurrence``-th time ``point`` is hit."""

    def __init__(self, point: str | None = None, occurrence: int = 1) -> None:
        if point is not None and point not in FAULT_POINTS:
            raise ValueError(f"unknown fault point {point!r}")
        self.point = point
        self.occurrence = occurrence
        self.hits: Counter[str] = Counter()
        self.fired = False

    def hit(self, point: str) -> None:
        self.hits[point] += 1
        if not self.fired and point == self.point and self.hits[point] == self.occurrence:
            self.fired = True
            raise InjectedCrash(point, self.occurrence)


NO_FAULTS = FaultPlan()
