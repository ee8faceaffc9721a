"""Domain records shared by the log, the store, the engine and the harness.

All timestamps are integer milliseconds since the Unix epoch. Hot-path
records are ``NamedTuple`` so they hash and compare as plain tuples.
"""

from __future__ import annotations

import enum
import functools
from typing import NamedTuple

MAX_DEVICE_ID_BYTES = 64
MAX_ATTRIBUTE_VALUE_BYTES = 256

_FNV_OFFSET_BASIS = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class Measurement(NamedTuple):
    device: str
    seq: int
    event_time: int
    observable: str
    value: float
    ingest_time: int = 0


class AttributeKey(NamedTuple):
    device: str
    attribute: str


class AttributeVersion(NamedTuple):
    valid_from: int
    value: str


class AttributeUpdate(NamedTuple):
    key: AttributeKey
    version: AttributeVersion


class StreamOffset(NamedTuple):
    topic: str
    partition: int
    offset: int


class Provenance(enum.IntEnum):
    """Where an enrichment value came from."""

    CURRENT = 0
    PREVIOUS = 1
    HISTORICAL = 2
    MISSING = 3

    def __str__(self) -> str:
        return self.name.lower()


class EnrichedMeasurement(NamedTuple):
    measurement: Measurement
    # attribute name -> (value, provenance); value is "" when missing
    attributes: dict[str, tuple[str, Provenance]]
    enrich_time: int
    latency_ms: int

    @property
    def dedup_key(self) -> tuple[str, int]:
        return (self.measurement.device, self.measurement.seq)

    @property
    def has_missing(self) -> bool:
        return any(p is Provenance.MISSING for _, p in self.attributes.values())


def validate_device_id(device: str) -> str:
    if not device:
        raise ValueError("device id must be non-empty")
    if len(device.encode("utf-8")) > MAX_DEVICE_ID_BYTES:
        raise ValueError(f"device id longer than {MAX_DEVICE_ID_BYTES} bytes: {device!r}")
    return device


def validate_attribute_key(key: AttributeKey) -> AttributeKey:
    validate_device_id(key.device)
    if not key.attribute:
        raise ValueError("attribute name must be non-empty")
    return key


def validate_attribute_version(version: AttributeVersion) -> AttributeVersion:
    if len(version.value.encode("utf-8")) > MAX_ATTRIBUTE_VALUE_BYTES:
        raise ValueError(f"attribute value longer than {MAX_ATTRIBUTE_VALUE_BYTES} bytes")
    return version


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET_BASIS
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


@functools.lru_cache(maxsize=1 << 16)
def _partition_for_str(key: str, partitions: int) -> int:
    return fnv1a_64(key.encode("utf-8")) % partitions


def partition_for(key: str | bytes, partitions: int) -> int:
    """Map a device id to a partition index.

    Measurements and attribute updates are both routed through this
    function with the device id as key, so they always co-locate.
    """
    if partitions < 1:
        raise ValueError("partitions must be >= 1")
    if isinstance(key, bytes):
        return fnv1a_64(key) % partitions
    return _partition_for_str(key, partitions)


