"""The per-record enrichment procedure and its local two-version cache.

For every configured attribute the cache is consulted first: the current
version if the measurement is not older than it, otherwise the previous
version if the measurement is not older than that. Anything older goes to
the versioned store for a point-in-time lookup.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

from ..log import wall_clock_ms
from ..model import (
    AttributeKey,
    AttributeUpdate,
    AttributeVersion,
    EnrichedMeasurement,
    Measurement,
    Provenance,
)
from ..store import Latest, VersionedStore
from .config import EngineConfig, MissingPolicy

CURRENT = Provenance.CURRENT
PREVIOUS = Provenance.PREVIOUS
HISTORICAL = Provenance.HISTORICAL
MISSING = Provenance.MISSING


class DeadLetter(NamedTuple):
    enriched: EnrichedMeasurement
    missing: tuple[str, ...]


class LocalAttributeState:
    """Current and previous version per attribute key, held in memory."""

    __slots__ = ("slots",)

    def __init__(self) -> None:
        self.slots: dict[AttributeKey, Latest] = {}

    def get(self, key: AttributeKey) -> Latest:
        return self.slots.get(key, (None, None))

    def set(self, key: AttributeKey, current: Optional[AttributeVersion],
            previous: Optional[AttributeVersion]) -> None:
        if current is not None and previous is not None and not previous.valid_from < current.valid_from:
            raise ValueError(f"{key}: previous {previous} not older than current {current}")
        self.slots[key] = (current, previous)

    def __len__(self) -> int:
        return len(self.slots)

    def __contains__(self, key: AttributeKey) -> bool:
        return key in self.slots

    def keys(self):
        return self.slots.keys()

    def snapshot(self) -> dict[AttributeKey, Latest]:
        return dict(self.slots)


def load_state(store: VersionedStore, partition: int, partitions: int) -> LocalAttributeState:
    """Rebuild the cache from the store for every key of ``partition``."""
    state = LocalAttributeState()
    for key in store.scan_keys(partition, partitions):
        current, previous = store.get_latest_two(key)
        state.set(key, current, previous)
    return state


def apply_update(state: LocalAttributeState, update: AttributeUpdate,
                 store: VersionedStore) -> Latest:
    """Persist ``update`` to the store, then advance the cached slot.

    A store error propagates before the cache is touched. An update that is
    not newer than the cached current version re-reads the slot from the
    store instead of shifting it.
    """
    key, version = update
    inserted = store.put_version(key, version)
    current, _ = state.slots.get(key, (None, None))
    if current is None and inserted:
        slot = (version, None)
    elif current is not None and version.valid_from > current.valid_from:
        slot = (version, current)
    else:
        slot = store.get_latest_two(key)
    state.slots[key] = slot
    return slot


def enrich(state: LocalAttributeState, m: Measurement, config: EngineConfig,
           store: VersionedStore, enrich_time: int | None = None) -> EnrichedMeasurement | DeadLetter:
    slots = state.slots
    t = m.event_time
    attrs: dict[str, tuple[str, Provenance]] = {}
    missing: list[str] = []
    device = m.device
    for name in config.enrichment_attributes:
        # plain tuple hashes and compares equal to the AttributeKey it mirrors
        slot = slots.get((device, name))
        if slot is not None:
            current, previous = slot
            if current is not None and t >= current.valid_from:
                attrs[name] = (current.value, CURRENT)
                continue
            if previous is not None and t >= previous.valid_from:
                attrs[name] = (previous.value, PREVIOUS)
                continue
        found = store.get_at(AttributeKey(device, name), t)
        if found is None:
            attrs[name] = ("", MISSING)
            missing.append(name)
        else:
            attrs[name] = (found.value, HISTORICAL)
    if enrich_time is None:
        enrich_time = wall_clock_ms()
    e = EnrichedMeasurement(m, attrs, enrich_time, enrich_time - m.ingest_time)
    if missing and config.missing_policy is MissingPolicy.DEAD_LETTER:
        return DeadLetter(e, tuple(missing))
    return e
