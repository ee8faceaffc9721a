"""File-backed partitioned append-only log.

Layout under the log root::

    <root>/<topic>/topic.json
    <root>/<topic>/<partition>/segment.dat   frames: u32 length, u32 crc32c, body
    <root>/<topic>/<partition>/segment.idx   one u64 byte position per offset

A frame body is ``u64 offset, i64 append_time, u16 key_len, key, payload``.
Appends are buffered and written in groups (every ``flush_records`` records
or ``flush_interval_ms`` milliseconds, whichever comes first, or on an
explicit :meth:`PartitionedLog.flush`). An offset is acknowledged once the
group holding it has been written; readers only ever see written groups.

Within one process appends to a partition are serialized by a lock. Across
processes, each partition must have a single writing process; any number of
processes may read.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

from crc32c import crc32c

from .model import StreamOffset, partition_for

SEGMENT_FILE = "segment.dat"
INDEX_FILE = "segment.idx"
TOPIC_META = "topic.json"

_FRAME_HEADER = struct.Struct("<II")
_BODY_HEADER = struct.Struct("<QqH")
_IDX = struct.Struct("<Q")


class LogError(Exception):
    pass


class TopicExistsError(LogError):
    pass


class UnknownTopicError(LogError):
    pass


class PartitionOutOfRange(LogError, IndexError):
    pass


class CorruptRecordError(LogError):
    pass


class LogRecord(NamedTuple):
    offset: int
    key: bytes
    payload: bytes
    append_time: int


@dataclass(frozen=True)
class Topic:
    name: str
    partitions: int
    path: Path


def wall_clock_ms() -> int:
    return time.time_ns() // 1_000_000


def _write_all(fd: int, data: bytes | bytearray) -> None:
    view = memoryview(data)
    while view:
        n = os.write(fd, view)
        view = view[n:]


def _parse_frame(blob: bytes, pos: int, expected_offset: int) -> tuple[LogRecord, int]:
    if pos + 8 > len(blob):
        raise CorruptRecordError(f"truncated frame header at offset {expected_offset}")
    length, crc = _FRAME_HEADER.unpack_from(blob, pos)
    start = pos + 8
    end = start + length
    if end > len(blob) or length < _BODY_HEADER.size:
        raise CorruptRecordError(f"truncated frame body at offset {expected_offset}")
    body = blob[start:end]
    if crc32c(body) != crc:
        raise CorruptRecordError(f"checksum mismatch at offset {expected_offset}")
    offset, append_time, klen = _BODY_HEADER.unpack_from(body, 0)
    if offset != expected_offset:
        raise CorruptRecordError(f"frame holds offset {offset}, expected {expected_offset}")
    kend = _BODY_HEADER.size + klen
    return LogRecord(offset, body[_BODY_HEADER.size : kend], body[kend:], append_time), end


class _PartitionWriter:
    def __init__(self, path: Path, fsync: bool) -> None:
        self.lock = threading.Lock()
        self.fsync = fsync
        seg_path = path / SEGMENT_FILE
        idx_path = path / INDEX_FILE
        self.seg_fd = os.open(seg_path, os.O_RDWR | os.O_CREAT, 0o644)
        self.idx_fd = os.open(idx_path, os.O_RDWR | os.O_CREAT, 0o644)
        self.next_offset, self.seg_size, self.last_append_time = self._recover_tail()
        os.lseek(self.seg_fd, 0, os.SEEK_END)
        os.lseek(self.idx_fd, 0, os.SEEK_END)
        self.pending_seg = bytearray()
        self.pending_idx = bytearray()
        self.pending_count = 0
        self.pending_since = 0.0

    def _recover_tail(self) -> tuple[int, int, int]:
        """Drop torn or unindexed bytes left behind by a crashed writer."""
        entries = os.fstat(self.idx_fd).st_size // _IDX.size
        seg_size = os.fstat(self.seg_fd).st_size
        seg_end = 0
        last_time = 0
        while entries > 0:
            (pos,) = _IDX.unpack(os.pread(self.idx_fd, _IDX.size, (entries - 1) * _IDX.size))
            head = os.pread(self.seg_fd, 8, pos)
            if len(head) == 8:
                length, _ = _FRAME_HEADER.unpack(head)
                blob = os.pread(self.seg_fd, 8 + length, pos)
                try:
                    rec, _ = _parse_frame(blob, 0, entries - 1)
                except CorruptRecordError:
                    pass
                else:
                    seg_end = pos + 8 + length
                    last_time = rec.append_time
                    break
            entries -= 1
        os.ftruncate(self.idx_fd, entries * _IDX.size)
        if seg_size != seg_end:
            os.ftruncate(self.seg_fd, seg_end)
        return entries, seg_end, last_time

    def append(self, key: bytes, payload: bytes, append_time: int) -> tuple[int, bool]:
        if append_time < self.last_append_time:
            append_time = self.last_append_time
        self.last_append_time = append_time
        offset = self.next_offset
        body = _BODY_HEADER.pack(offset, append_time, len(key)) + key + payload
        frame = _FRAME_HEADER.pack(len(body), crc32c(body)) + body
        if not self.pending_count:
            self.pending_since = time.monotonic()
        self.pending_idx += _IDX.pack(self.seg_size)
        self.pending_seg += frame
        self.seg_size += len(frame)
        self.pending_count += 1
        self.next_offset = offset + 1
        return offset, append_time

    def due(self, flush_records: int, flush_interval_s: float) -> bool:
        return self.pending_count >= flush_records or (
            self.pending_count > 0 and time.monotonic() - self.pending_since >= flush_interval_s
        )

    def flush(self) -> None:
        if not self.pending_count:
            return
        # segment bytes first: an index entry must never point past written data
        _write_all(self.seg_fd, self.pending_seg)
        if self.fsync:
            os.fsync(self.seg_fd)
        _write_all(self.idx_fd, self.pending_idx)
        if self.fsync:
            os.fsync(self.idx_fd)
        self.pending_seg = bytearray()
        self.pending_idx = bytearray()
        self.pending_count = 0

    def close(self, flush: bool = True) -> None:
        if flush:
            self.flush()
        os.close(self.seg_fd)
        os.close(self.idx_fd)


class _PartitionReader:
    def __init__(self, path: Path) -> None:
        self.seg_fd = os.open(path / SEGMENT_FILE, os.O_RDONLY)
        self.idx_fd = os.open(path / INDEX_FILE, os.O_RDONLY)

    def end(self) -> int:
        # A writer adds index entries only after their frames, so an entry
        # whose frame overruns the segment is a torn tail from a crash; it
        # stays invisible here until a writer reopens and truncates it.
        n = os.fstat(self.idx_fd).st_size // _IDX.size
        seg_size = os.fstat(self.seg_fd).st_size
        while n > 0:
            (pos,) = _IDX.unpack(os.pread(self.idx_fd, _IDX.size, (n - 1) * _IDX.size))
            head = os.pread(self.seg_fd, 4, pos)
            if len(head) == 4 and pos + 8 + int.from_bytes(head, "little") <= seg_size:
                break
            n -= 1
        return n

    def read(self, start: int, max_records: int) -> list[LogRecord]:
        end = self.end()
        if start >= end or max_records <= 0:
            return []
        n = min(max_records, end - start)
        raw = os.pread(self.idx_fd, (n + 1) * _IDX.size if start + n < end else n * _IDX.size,
                       start * _IDX.size)
        count = len(raw) // _IDX.size
        positions = struct.unpack(f"<{count}Q", raw[: count * _IDX.size])
        first = positions[0]
        stop = positions[n] if count > n else os.fstat(self.seg_fd).st_size
        blob = os.pread(self.seg_fd, stop - first, first)
        out = []
        pos = 0
        for i in range(n):
            rec, pos = _parse_frame(blob, pos, start + i)
            out.append(rec)
        return out

    def close(self) -> None:
        os.close(self.seg_fd)
        os.close(self.idx_fd)


class PartitionedLog:
    """A directory of topics, each split into independently ordered partitions."""

    def __init__(
        self,
        root: str | os.PathLike,
        *,
        flush_records: int = 1000,
        flush_interval_ms: float = 10.0,
        fsync: bool = False,
    ) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.flush_records = flush_records
        self.flush_interval_s = flush_interval_ms / 1000.0
        self.fsync = fsync
        self._topics: dict[str, Topic] = {}
        self._writers: dict[tuple[str, int], _PartitionWriter] = {}
        self._readers: dict[tuple[str, int], _PartitionReader] = {}
        self._lock = threading.Lock()

    # -- topics --------------------------------------------------------------

    def create_topic(self, name: str, partitions: int) -> Topic:
        if partitions < 1:
            raise ValueError("partitions must be >= 1")
        if not name or "/" in name or name.startswith("."):
            raise ValueError(f"invalid topic name {name!r}")
        path = self.root / name
        with self._lock:
            if (path / TOPIC_META).exists():
                raise TopicExistsError(f"topic {name!r} already exists")
            for p in range(partitions):
                pdir = path / str(p)
                pdir.mkdir(parents=True, exist_ok=True)
                (pdir / SEGMENT_FILE).touch()
                (pdir / INDEX_FILE).touch()
            tmp = path / (TOPIC_META + ".tmp")
            tmp.write_text(json.dumps({"name": name, "partitions": partitions}))
            os.replace(tmp, path / TOPIC_META)
            topic = Topic(name, partitions, path)
            self._topics[name] = topic
            return topic

    def topic(self, name: str) -> Topic:
        topic = self._topics.get(name)
        if topic is not None:
            return topic
        meta = self.root / name / TOPIC_META
        try:
            info = json.loads(meta.read_text())
        except FileNotFoundError:
            raise UnknownTopicError(f"no topic {name!r} under {self.root}") from None
        topic = Topic(info["name"], int(info["partitions"]), self.root / name)
        self._topics[name] = topic
        return topic

    def ensure_topic(self, name: str, partitions: int) -> Topic:
        try:
            topic = self.topic(name)
        except UnknownTopicError:
            return self.create_topic(name, partitions)
        if topic.partitions != partitions:
            raise LogError(f"topic {name!r} has {topic.partitions} partitions, wanted {partitions}")
        return topic

    def has_topic(self, name: str) -> bool:
        return (self.root / name / TOPIC_META).exists()

    def _resolve(self, topic: Topic | str) -> Topic:
        return self.topic(topic) if isinstance(topic, str) else topic

    def _check(self, topic: Topic, partition: int) -> None:
        if not 0 <= partition < topic.partitions:
            raise PartitionOutOfRange(
                f"partition {partition} out of range for {topic.name!r} ({topic.partitions})"
            )

    def _writer(self, topic: Topic, partition: int) -> _PartitionWriter:
        w = self._writers.get((topic.name, partition))
        if w is None:
            with self._lock:
                w = self._writers.get((topic.name, partition))
                if w is None:
                    w = _PartitionWriter(topic.path / str(partition), self.fsync)
                    self._writers[(topic.name, partition)] = w
        return w

    def _reader(self, topic: Topic, partition: int) -> _PartitionReader:
        r = self._readers.get((topic.name, partition))
        if r is None:
            with self._lock:
                r = self._readers.get((topic.name, partition))
                if r is None:
                    r = _PartitionReader(topic.path / str(partition))
                    self._readers[(topic.name, partition)] = r
        return r

    # -- data ----------------------------------------------------------------

    def append(
        self,
        topic: Topic | str,
        key: bytes | str,
        payload: bytes,
        *,
        append_time: int | None = None,
        durable: bool = False,
    ) -> StreamOffset:
        """Append to the partition chosen by hashing ``key``.

        ``append_time`` defaults to the wall clock; it is clamped so that it
        never decreases within a partition. Records are written in groups;
        one is acknowledged once its group is flushed, which ``durable=True``
        forces before returning.
        """
        topic = self._resolve(topic)
        partition = partition_for(key, topic.partitions)
        if isinstance(key, str):
            key = key.encode("utf-8")
        w = self._writer(topic, partition)
        with w.lock:
            offset, _ = w.append(key, payload, wall_clock_ms() if append_time is None else append_time)
            if durable or w.due(self.flush_records, self.flush_interval_s):
                w.flush()
        return StreamOffset(topic.name, partition, offset)

    def read(
        self, topic: Topic | str, partition: int, from_offset: int, max_records: int
    ) -> list[LogRecord]:
        topic = self._resolve(topic)
        self._check(topic, partition)
        if from_offset < 0:
            raise ValueError("offset must be >= 0")
        return self._reader(topic, partition).read(from_offset, max_records)

    def end_offset(self, topic: Topic | str, partition: int) -> int:
        topic = self._resolve(topic)
        self._check(topic, partition)
        w = self._writers.get((topic.name, partition))
        if w is not None:
            return w.next_offset
        return self._reader(topic, partition).end()

    def flushed_end_offset(self, topic: Topic | str, partition: int) -> int:
        topic = self._resolve(topic)
        self._check(topic, partition)
        return self._reader(topic, partition).end()

    def flush(self, topic: Topic | str | None = None, partition: int | None = None) -> None:
        name = None if topic is None else self._resolve(topic).name
        for (tname, p), w in list(self._writers.items()):
            if (name is None or tname == name) and (partition is None or p == partition):
                with w.lock:
                    w.flush()

    def flush_due(self) -> None:
        """Write out any group whose flush deadline has passed."""
        for w in list(self._writers.values()):
            if w.due(self.flush_records, self.flush_interval_s):
                with w.lock:
                    w.flush()

    def close(self) -> None:
        self._shutdown(flush=True)

    def abandon(self) -> None:
        """Close without writing buffered groups, as a crashed process would."""
        self._shutdown(flush=False)

    def _shutdown(self, flush: bool) -> None:
        with self._lock:
            for w in self._writers.values():
                w.close(flush=flush)
            for r in self._readers.values():
                r.close()
            self._writers.clear()
            self._readers.clear()

    def __enter__(self) -> "PartitionedLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
