"""Time-versioned attribute store.

Each :class:`AttributeKey` owns a history of :class:`AttributeVersion`
sorted by ``valid_from``. Point-in-time reads return the version with the
greatest ``valid_from`` not after the requested time. Every accepted write
is appended to a journal before it is acknowledged; the journal is replayed
on open.

:class:`ShardedAttributeStore` splits keys over one journal per partition
so that engine workers running in separate processes each own the shard of
their partition. :class:`RemoteStore` is the handle the engine goes through
for reads; it adds a fixed simulated access latency per call.
"""

from __future__ import annotations

import bisect
import os
import threading
import time
from pathlib import Path
from typing import Optional, Protocol

from .model import (
    AttributeKey,
    AttributeUpdate,
    AttributeVersion,
    partition_for,
    validate_attribute_key,
    validate_attribute_version,
)
from .wire import WireError, encode_update, read_update, unframe

Latest = tuple[Optional[AttributeVersion], Optional[AttributeVersion]]


class StoreError(Exception):
    pass


class StoreConflictError(StoreError):
    """A different value is already stored at the same ``valid_from``."""


class StoreUnavailableError(StoreError):
    """The store could not be reached; the caller should retry."""


class VersionedStore(Protocol):
    def put_version(self, key: AttributeKey, version: AttributeVersion) -> bool: ...

    def get_at(self, key: AttributeKey, t: int) -> Optional[AttributeVersion]: ...

    def get_latest_two(self, key: AttributeKey) -> Latest: ...

    def scan_keys(self, partition: int, partitions: int) -> list[AttributeKey]: ...


class _History:
    __slots__ = ("froms", "versions")

    def __init__(self) -> None:
        self.froms: list[int] = []
        self.versions: list[AttributeVersion] = []


class AttributeStore:
    """Single-journal versioned store, safe for concurrent callers."""

    def __init__(self, journal_path: str | os.PathLike, *, fsync: bool = False) -> None:
        self.path = Path(journal_path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fsync = fsync
        self._lock = threading.RLock()
        self._histories: dict[AttributeKey, _History] = {}
        self._fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        self._replay()

    def _replay(self) -> None:
        data = b""
        with open(self.path, "rb") as fh:
            data = fh.read()
        pos = 0
        while pos < len(data):
            try:
                r = unframe(data, pos)
                update = read_update(r)
                r.done()
            except WireError:
                break  # torn tail from an interrupted write
            self._insert(update.key, update.version)
            pos = r.end
        if pos != len(data):
            os.ftruncate(self._fd, pos)
        os.lseek(self._fd, 0, os.SEEK_END)

    def _insert(self, key: AttributeKey, version: AttributeVersion) -> bool:
        hist = self._histories.get(key)
        if hist is None:
            hist = self._histories[key] = _History()
        i = bisect.bisect_left(hist.froms, version.valid_from)
        if i < len(hist.froms) and hist.froms[i] == version.valid_from:
            existing = hist.versions[i]
            if existing.value != version.value:
                raise StoreConflictError(
                    f"{key}: valid_from={version.valid_from} already holds "
                    f"{existing.value!r}, refusing {version.value!r}"
                )
            return False
        hist.froms.insert(i, version.valid_from)
        hist.versions.insert(i, version)
        return True

    def put_version(self, key: AttributeKey, version: AttributeVersion) -> bool:
        """Insert ``version``; returns False when it was already present."""
        validate_attribute_key(key)
        validate_attribute_version(version)
        with self._lock:
            hist = self._histories.get(key)
            if hist is not None:
                i = bisect.bisect_left(hist.froms, version.valid_from)
                if i < len(hist.froms) and hist.froms[i] == version.valid_from:
                    return self._insert(key, version)  # no-op or conflict
            frame = encode_update(AttributeUpdate(key, version))
            view = memoryview(frame)
            while view:
                view = view[os.write(self._fd, view) :]
            if self.fsync:
                os.fsync(self._fd)
            return self._insert(key, version)

    def get_at(self, key: AttributeKey, t: int) -> Optional[AttributeVersion]:
        with self._lock:
            hist = self._histories.get(key)
            if hist is None:
                return None
            i = bisect.bisect_right(hist.froms, t)
            return hist.versions[i - 1] if i else None

    def get_latest_two(self, key: AttributeKey) -> Latest:
        with self._lock:
            hist = self._histories.get(key)
            if hist is None or not hist.versions:
                return (None, None)
            v = hist.versions
            return (v[-1], v[-2] if len(v) > 1 else None)

    def history(self, key: AttributeKey) -> list[AttributeVersion]:
        with self._lock:
            hist = self._histories.get(key)
            return list(hist.versions) if hist else []

    def keys(self) -> list[AttributeKey]:
        with self._lock:
            return sorted(self._histories)

    def scan_keys(self, partition: int, partitions: int) -> list[AttributeKey]:
        if partitions < 1:
            raise ValueError("partitions must be >= 1")
        with self._lock:
            keys = list(self._histories)
        return sorted(k for k in keys if partition_for(k.device, partitions) == partition)

    def close(self) -> None:
        with self._lock:
            if self._fd >= 0:
                os.close(self._fd)
                self._fd = -1

    def __enter__(self) -> "AttributeStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def shard_path(journal_path: str | os.PathLike, shard: int) -> Path:
    p = Path(journal_path)
    return p.with_name(f"{p.stem}.p{shard}{p.suffix}")


class ShardedAttributeStore:
    """Keys spread over ``shards`` journals by device partition.

    Shards open lazily, so a worker that only touches its own partition's
    keys never loads the other journals.
    """

    def __init__(self, journal_path: str | os.PathLike, shards: int, *, fsync: bool = False) -> None:
        if shards < 1:
            raise ValueError("shards must be >= 1")
        self.journal_path = Path(journal_path)
        self.shards = shards
        self.fsync = fsync
        self._open: dict[int, AttributeStore] = {}
        self._lock = threading.Lock()

    def shard(self, index: int) -> AttributeStore:
        store = self._open.get(index)
        if store is None:
            with self._lock:
                store = self._open.get(index)
                if store is None:
                    store = AttributeStore(shard_path(self.journal_path, index), fsync=self.fsync)
                    self._open[index] = store
        return store

    def _for(self, key: AttributeKey) -> AttributeStore:
        return self.shard(partition_for(key.device, self.shards))

    def put_version(self, key: AttributeKey, version: AttributeVersion) -> bool:
        return self._for(key).put_version(key, version)

    def get_at(self, key: AttributeKey, t: int) -> Optional[AttributeVersion]:
        return self._for(key).get_at(key, t)

    def get_latest_two(self, key: AttributeKey) -> Latest:
        return self._for(key).get_latest_two(key)

    def history(self, key: AttributeKey) -> list[AttributeVersion]:
        return self._for(key).history(key)

    def keys(self) -> list[AttributeKey]:
        return sorted(k for i in range(self.shards) for k in self.shard(i).keys())

    def scan_keys(self, partition: int, partitions: int) -> list[AttributeKey]:
        if partitions < 1:
            raise ValueError("partitions must be >= 1")
        if partitions == self.shards:
            return self.shard(partition).scan_keys(partition, partitions)
        return sorted(
            k for i in range(self.shards) for k in self.shard(i).scan_keys(partition, partitions)
        )

    def close(self) -> None:
        with self._lock:
            for store in self._open.values():
                store.close()
            self._open.clear()


class RemoteStore:
    """Client handle that charges a fixed delay on every read round trip."""

    def __init__(self, store: VersionedStore, simulated_latency_ms: float = 1.0) -> None:
        self.store = store
        self.latency_s = max(0.0, simulated_latency_ms) / 1000.0
        self.calls = 0

    def _wait(self) -> None:
        self.calls += 1
        if self.latency_s:
            time.sleep(self.latency_s)

    def put_version(self, key: AttributeKey, version: AttributeVersion) -> bool:
        return self.store.put_version(key, version)

    def get_at(self, key: AttributeKey, t: int) -> Optional[AttributeVersion]:
        self._wait()
        return self.store.get_at(key, t)

    def get_latest_two(self, key: AttributeKey) -> Latest:
        self._wait()
        return self.store.get_latest_two(key)

    def scan_keys(self, partition: int, partitions: int) -> list[AttributeKey]:
        self._wait()
        return self.store.scan_keys(partition, partitions)
