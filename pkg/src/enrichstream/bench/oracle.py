"""Brute-force reference for the enrichment join.

Scans a trace in injection order keeping every version ever announced per
key, and answers each measurement by a linear scan of that history. It
shares no code with the engine's cache or store, so agreement between the
two is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from ..engine.config import EngineConfig, MissingPolicy
from ..model import AttributeUpdate, EnrichedMeasurement, Measurement, Provenance
from ..workload.generator import TraceEvent

# (attribute name, value, provenance code) in configured attribute order
CanonicalAttrs = tuple[tuple[str, str, int], ...]


class CanonicalRecord(NamedTuple):
    """The comparable part of an enriched record.

    Timing fields that depend on when the engine ran (ingest, enrich and
    latency) are left out.
    """

    device: str
    seq: int
    event_time: int
    observable: str
    value: float
    attributes: CanonicalAttrs


def canonical(e: EnrichedMeasurement, attribute_order: Iterable[str] | None = None) -> CanonicalRecord:
    m = e.measurement
    names = e.attributes.keys() if attribute_order is None else attribute_order
    attrs = tuple((n, e.attributes[n][0], int(e.attributes[n][1])) for n in names)
    return CanonicalRecord(m.device, m.seq, m.event_time, m.observable, m.value, attrs)


@dataclass
class JoinOutput:
    results: list[CanonicalRecord] = field(default_factory=list)
    dead_letters: list[CanonicalRecord] = field(default_factory=list)

    def sort(self) -> "JoinOutput":
        self.results.sort(key=_order)
        self.dead_letters.sort(key=_order)
        return self

    def __len__(self) -> int:
        return len(self.results) + len(self.dead_letters)


def _order(r: CanonicalRecord) -> tuple[str, int]:
    return (r.device, r.seq)


class OracleError(ValueError):
    pass


def _lookup(history: list[tuple[int, str]], t: int) -> tuple[str, Provenance]:
    best = None
    top = second = None
    for valid_from, value in history:
        if valid_from <= t and (best is None or valid_from > best[0]):
            best = (valid_from, value)
        if top is None or valid_from > top:
            top, second = valid_from, top
        elif second is None or valid_from > second:
            second = valid_from
    if best is None:
        return "", Provenance.MISSING
    # the engine keeps the two newest versions locally; anything older is remote
    if t >= top:
        return best[1], Provenance.CURRENT
    if second is not None and t >= second:
        return best[1], Provenance.PREVIOUS
    return best[1], Provenance.HISTORICAL


def oracle(events: Iterable[TraceEvent], config: EngineConfig) -> JoinOutput:
    """Reference output for ``events`` under ``config``, sorted by (device, seq)."""
    histories: dict[tuple[str, str], list[tuple[int, str]]] = {}
    out = JoinOutput()
    names = config.enrichment_attributes
    dead_letter = config.missing_policy is MissingPolicy.DEAD_LETTER
    seen: set[tuple[str, int]] = set()
    for ev in events:
        rec = ev.record
        if isinstance(rec, AttributeUpdate):
            key = (rec.key.device, rec.key.attribute)
            hist = histories.setdefault(key, [])
            v = rec.version
            clash = [val for vf, val in hist if vf == v.valid_from]
            if clash:
                if clash[0] != v.value:
                    raise OracleError(f"conflicting versions for {key} at {v.valid_from}")
                continue
            hist.append((v.valid_from, v.value))
        elif isinstance(rec, Measurement):
            if (rec.device, rec.seq) in seen:
                continue  # a redelivered reading is emitted once
            seen.add((rec.device, rec.seq))
            attrs = []
            missing = False
            for name in names:
                value, prov = _lookup(histories.get((rec.device, name), []), rec.event_time)
                missing |= prov is Provenance.MISSING
                attrs.append((name, value, int(prov)))
            row = CanonicalRecord(rec.device, rec.seq, rec.event_time, rec.observable,
                                  rec.value, tuple(attrs))
            (out.dead_letters if missing and dead_letter else out.results).append(row)
        else:
            raise OracleError(f"malformed trace event: {type(rec).__name__}")
    return out.sort()


@dataclass
class Divergence:
    stream: str
    index: int
    expected: CanonicalRecord | None
    actual: CanonicalRecord | None

    def describe(self) -> str:
        return (f"first divergence in {self.stream} at #{self.index}:\n"
                f"  expected {self.expected}\n  actual   {self.actual}")


def first_divergence(expected: JoinOutput, actual: JoinOutput) -> Divergence | None:
    for stream in ("results", "dead_letters"):
        a = getattr(expected, stream)
        b = getattr(actual, stream)
        for i in range(max(len(a), len(b))):
            x = a[i] if i < len(a) else None
            y = b[i] if i < len(b) else None
            if x != y:
                return Divergence(stream, i, x, y)
    return None
