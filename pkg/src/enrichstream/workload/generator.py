"""Seeded telemetry traces for a fleet of water-grid sensors.

Every device reports one observable on a regular grid with small jitter.
Each reading reaches the platform after a lognormal transmission delay and
is lost with a fixed probability. Attribute values per device are
commissioned before the first reading and then updated at exponentially
distributed intervals; updates travel over a reliable channel and arrive
at their commissioning time, unless picked for late commissioning, in
which case they arrive ``late_commission_lag_ms`` after the moment they
became valid.

Random draws happen in a fixed order (per device: phase, then attributes
in declaration order, then per reading jitter, loss, delay, value), so a
seed fully determines the trace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Union

from ..model import AttributeKey, AttributeUpdate, AttributeVersion, Measurement
from .rng import Xoshiro256

DEFAULT_START_MS = 1_600_000_000_000
OBSERVABLES = ("water_level", "flow_rate", "temperature", "pressure", "conductivity")


@dataclass(frozen=True)
class AttributeSpec:
    """How one attribute's values are drawn and how often they change.

    ``kind`` is ``"choice"`` (uniform over ``values``), ``"geo"`` (a
    lat,lon pair inside a city-sized box) or ``"serial"`` (a running
    revision label).
    """

    name: str
    kind: str = "choice"
    values: tuple[str, ...] = ()
    update_interval_s: float = 600.0

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("attribute name must be non-empty")
        if self.kind not in ("choice", "geo", "serial"):
            raise ValueError(f"unknown attribute kind {self.kind!r}")
        if self.kind == "choice" and not self.values:
            raise ValueError(f"attribute {self.name!r}: choice needs values")
        if self.update_interval_s <= 0:
            raise ValueError("update_interval_s must be positive")


DEFAULT_ATTRIBUTES = (
    AttributeSpec("geolocation", kind="geo", update_interval_s=600.0),
    AttributeSpec("unit", values=("m", "cm", "mm", "l/s", "m3/h", "degC", "bar", "uS/cm"),
                  update_interval_s=900.0),
    AttributeSpec("device_type", values=("level-radar", "flow-ultrasonic", "pressure-piezo",
                                         "temp-pt100", "conductivity-4e"),
                  update_interval_s=1200.0),
)


@dataclass(frozen=True)
class FleetConfig:
    devices: int = 100
    rate_per_device_hz: float = 1.0
    duration_s: float = 60.0
    attributes: tuple[AttributeSpec, ...] = DEFAULT_ATTRIBUTES
    delay_mu: float = math.log(200.0)
    delay_sigma: float = 1.0
    loss_probability: float = 0.02
    seed: int = 0
    start_ms: int = DEFAULT_START_MS
    jitter_fraction: float = 0.1
    late_commission_fraction: float = 0.0
    late_commission_lag_ms: int = 5_000
    device_prefix: str = "sensor"

    def __post_init__(self) -> None:
        if self.devices < 0:
            raise ValueError("devices must be >= 0")
        if not self.rate_per_device_hz > 0:
            raise ValueError("rate_per_device_hz must be positive")
        if not self.duration_s > 0:
            raise ValueError("duration_s must be positive")
        if not 0.0 <= self.loss_probability < 1.0:
            raise ValueError("loss_probability must be in [0, 1)")
        if self.delay_sigma < 0:
            raise ValueError("delay_sigma must be >= 0")
        if not 0.0 <= self.jitter_fraction < 1.0:
            raise ValueError("jitter_fraction must be in [0, 1)")
        if not 0.0 <= self.late_commission_fraction <= 1.0:
            raise ValueError("late_commission_fraction must be in [0, 1]")
        if self.late_commission_lag_ms < 0:
            raise ValueError("late_commission_lag_ms must be >= 0")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate attribute names")
        if not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    @property
    def period_ms(self) -> float:
        return 1000.0 / self.rate_per_device_hz

    @property
    def readings_per_device(self) -> int:
        return int(self.duration_s * self.rate_per_device_hz + 1e-9)


Record = Union[Measurement, AttributeUpdate]


class TraceEvent(NamedTuple):
    arrival: int
    record: Record

    @property
    def is_update(self) -> bool:
        return type(self.record) is AttributeUpdate


@dataclass
class Trace:
    """Injection events ordered by arrival time; updates first on a tie."""

    events: list[TraceEvent]
    generated: int = 0
    dropped: int = 0
    late_updates: int = 0
    config: FleetConfig | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def measurements(self) -> list[Measurement]:
        return [e.record for e in self.events if type(e.record) is Measurement]

    def updates(self) -> list[AttributeUpdate]:
        return [e.record for e in self.events if type(e.record) is AttributeUpdate]

    def counts(self) -> dict[str, int]:
        n_upd = sum(1 for e in self.events if type(e.record) is AttributeUpdate)
        return {"measurements": len(self.events) - n_upd, "updates": n_upd}


def device_name(prefix: str, index: int) -> str:
    return f"{prefix}-{index:06d}"


def _draw_value(rng: Xoshiro256, spec: AttributeSpec, revision: int) -> str:
    if spec.kind == "geo":
        lat = 52.34 + 0.33 * rng.random()
        lon = 13.09 + 0.67 * rng.random()
        return f"{lat:.6f},{lon:.6f}"
    if spec.kind == "serial":
        return f"{spec.name}-rev{revision}"
    return spec.values[rng.below(len(spec.values))]


def generate_trace(config: FleetConfig) -> Trace:
    rng = Xoshiro256(config.seed)
    period = config.period_ms
    n_readings = config.readings_per_device
    start = config.start_ms
    end = start + int(config.duration_s * 1000)
    commissioned = start - int(period) - 1000
    half_jitter = config.jitter_fraction * period / 2.0
    mu, sigma, p_loss = config.delay_mu, config.delay_sigma, config.loss_probability
    late_frac, late_lag = config.late_commission_fraction, config.late_commission_lag_ms

    keyed: list[tuple[tuple, TraceEvent]] = []
    dropped = 0
    late = 0
    for d in range(config.devices):
        device = device_name(config.device_prefix, d)
        phase = rng.random() * period
        observable = OBSERVABLES[d % len(OBSERVABLES)]

        for a_idx, spec in enumerate(config.attributes):
            key = AttributeKey(device, spec.name)
            valid_from = commissioned
            arrival = commissioned
            revision = 0
            value = _draw_value(rng, spec, revision)
            while True:
                update = AttributeUpdate(key, AttributeVersion(valid_from, value))
                keyed.append(((arrival, 0, d, a_idx, valid_from), TraceEvent(arrival, update)))
                step = max(1, int(rng.exponential(spec.update_interval_s * 1000.0)))
                valid_from += step
                if valid_from >= end:
                    break
                revision += 1
                value = _draw_value(rng, spec, revision)
                next_arrival = valid_from
                if late_frac and rng.random() < late_frac:
                    next_arrival += late_lag
                    late += 1
                # keep each key's updates in valid_from order on the wire
                arrival = max(next_arrival, arrival)

        level = 100.0 * rng.random()
        for seq in range(n_readings):
            jitter = (2.0 * rng.random() - 1.0) * half_jitter
            event_time = start + int(phase + seq * period + jitter)
            lost = rng.random() < p_loss
            delay = rng.lognormal(mu, sigma)
            value = level + rng.normal()
            if lost:
                dropped += 1
                continue
            arrival = event_time + int(delay)
            m = Measurement(device, seq, event_time, observable, value, 0)
            keyed.append(((arrival, 1, d, seq, 0), TraceEvent(arrival, m)))

    keyed.sort(key=lambda kv: kv[0])
    return Trace(
        events=[ev for _, ev in keyed],
        generated=config.devices * n_readings,
        dropped=dropped,
        late_updates=late,
        config=config,
    )


def count_inversions(trace: Trace) -> int:
    """Adjacent-in-arrival pairs whose event times run backwards, per device."""
    last: dict[str, int] = {}
    inversions = 0
    for ev in trace.events:
        m = ev.record
        if type(m) is not Measurement:
            continue
        prev = last.get(m.device)
        if prev is not None and m.event_time < prev:
            inversions += 1
        last[m.device] = m.event_time
    return inversions


def out_of_order_fraction(trace: Trace) -> float:
    """Share of readings that arrive after a later reading of the same device."""
    newest: dict[str, int] = {}
    late = 0
    total = 0
    for ev in trace.events:
        m = ev.record
        if type(m) is not Measurement:
            continue
        total += 1
        seen = newest.get(m.device, -1)
        if m.seq < seen:
            late += 1
        else:
            newest[m.device] = m.seq
    return late / total if total else 0.0
