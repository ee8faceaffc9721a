"""One worker per partition: merge inputs, enrich, emit, checkpoint, recover."""

from __future__ import annotations

import logging
import threading
import time
from array import array
from collections import deque
from typing import Callable, Optional

from ..log import LogRecord, PartitionedLog, wall_clock_ms
from ..model import Provenance, StreamOffset
from ..store import RemoteStore, ShardedAttributeStore, StoreUnavailableError, VersionedStore
from ..wire import decode_measurement, decode_update
from .checkpoint import Checkpoint, CheckpointStore
from .config import EngineConfig
from .enrichment import DeadLetter, LocalAttributeState, apply_update, enrich, load_state
from .faults import NO_FAULTS, FaultPlan
from .sink import DedupSink

logger = logging.getLogger(__name__)

_UPDATE_READ_CHUNK = 4096


class PartitionStats:
    """Counters kept by a worker; merged across partitions after a run."""

    def __init__(self, t0_ms: int | None = None) -> None:
        self.t0_ms = t0_ms
        self.latencies = array("q")
        # per 1 s window since t0: [records, attribute lookups, remote lookups]
        self.windows: list[list[int]] = []
        self.provenance = [0, 0, 0, 0]
        self.updates_applied = 0
        self.dead_letters = 0

    def record(self, enrich_time: int, latency: int, attrs: dict) -> None:
        if self.t0_ms is None:
            self.t0_ms = enrich_time
        self.latencies.append(latency)
        remote = 0
        prov = self.provenance
        for _, p in attrs.values():
            prov[p] += 1
            if p >= 2:
                remote += 1
        w = (enrich_time - self.t0_ms) // 1000
        if w < 0:
            w = 0
        windows = self.windows
        while len(windows) <= w:
            windows.append([0, 0, 0])
        row = windows[w]
        row[0] += 1
        row[1] += len(attrs)
        row[2] += remote

    def as_dict(self) -> dict:
        return {
            "t0_ms": self.t0_ms,
            "windows": self.windows,
            "provenance": {str(p): self.provenance[p] for p in Provenance},
            "updates_applied": self.updates_applied,
            "dead_letters": self.dead_letters,
        }


class PartitionWorker:
    """Owns one partition's cache, offsets and output sinks.

    Inputs are merged by log append time, with an update winning a tie
    against a measurement: before each measurement, every already-read
    update appended no later than it is applied. When the measurement
    stream is exhausted all remaining read updates are applied.
    """

    def __init__(
        self,
        partition: int,
        config: EngineConfig,
        log: PartitionedLog,
        store: VersionedStore,
        *,
        state: LocalAttributeState | None = None,
        checkpoint: Checkpoint | None = None,
        sink: DedupSink | None = None,
        dead_letters: DedupSink | None = None,
        faults: FaultPlan = NO_FAULTS,
        clock: Callable[[], int] = wall_clock_ms,
        stats: PartitionStats | None = None,
    ) -> None:
        if not 0 <= partition < config.partitions:
            raise ValueError(f"partition {partition} outside 0..{config.partitions - 1}")
        self.partition = partition
        self.config = config
        self.log = log
        self.store = store
        self.faults = faults
        self.clock = clock
        self.state = state if state is not None else LocalAttributeState()
        topics = config.topics
        self.measurements = log.topic(topics.measurements)
        self.updates = log.topic(topics.updates)
        results = log.topic(topics.results)
        dlq = log.topic(topics.dead_letter)
        for t in (self.measurements, self.updates, results, dlq):
            if t.partitions != config.partitions:
                raise ValueError(
                    f"topic {t.name!r} has {t.partitions} partitions, engine expects {config.partitions}"
                )
        self.sink = sink or DedupSink(log, results, partition)
        self.dead_letters = dead_letters or DedupSink(log, dlq, partition)
        self.checkpoints = CheckpointStore(config.checkpoint_dir, partition, config.checkpoints_kept)
        if checkpoint is None:
            self.m_offset = 0
            self.u_offset = 0
            self.epoch = 0
        else:
            self.m_offset = checkpoint.measurement_offset.offset
            self.u_offset = checkpoint.update_offset.offset
            self.epoch = checkpoint.epoch + 1
        self.restored_from = checkpoint
        self._u_read = self.u_offset
        self._pending: deque[LogRecord] = deque()
        self._last_checkpoint = self.clock()
        self.stats = stats or PartitionStats()
        self.processed = 0

    # -- recovery --------------------------------------------------------------

    @classmethod
    def recover(
        cls,
        partition: int,
        config: EngineConfig,
        log: PartitionedLog,
        store: VersionedStore,
        **kwargs,
    ) -> "PartitionWorker":
        """Resume from the newest valid checkpoint, or cold-start without one.

        The cache is re-read from the store rather than restored from the
        checkpoint; the output dedup index is rebuilt from the output
        offsets recorded in the checkpoint.
        """
        ckpts = CheckpointStore(config.checkpoint_dir, partition, config.checkpoints_kept)
        ckpt = ckpts.load_latest()
        topics = config.topics
        res_from = ckpt.results_offset.offset if ckpt and ckpt.results_offset else 0
        dlq_from = ckpt.dead_letter_offset.offset if ckpt and ckpt.dead_letter_offset else 0
        sink = DedupSink.rebuild(log, log.topic(topics.results), partition, res_from)
        dlq = DedupSink.rebuild(log, log.topic(topics.dead_letter), partition, dlq_from)
        state = load_state(store, partition, config.partitions)
        worker = cls(partition, config, log, store, state=state, checkpoint=ckpt, sink=sink,
                     dead_letters=dlq, **kwargs)
        logger.info(
            "partition %d recovered: checkpoint=%s offsets=(%d,%d) cached_keys=%d",
            partition, None if ckpt is None else ckpt.epoch, worker.m_offset, worker.u_offset,
            len(state),
        )
        return worker

    # -- processing --------------------------------------------------------------

    def _read_updates(self) -> None:
        while True:
            recs = self.log.read(self.updates, self.partition, self._u_read, _UPDATE_READ_CHUNK)
            self._pending.extend(recs)
            self._u_read += len(recs)
            if len(recs) < _UPDATE_READ_CHUNK:
                return

    def _apply(self, rec: LogRecord) -> None:
        update = decode_update(rec.payload)
        # emitted results must be durable before the store can hold anything newer
        self.sink.flush()
        self.dead_letters.flush()
        apply_update(self.state, update, self.store)
        self.faults.hit("update.stored")
        self.u_offset += 1
        self.stats.updates_applied += 1

    def _process(self, rec: LogRecord) -> None:
        payload = rec.payload
        m = decode_measurement(payload)
        raw = payload[4:]
        if m.ingest_time != rec.append_time:
            m = m._replace(ingest_time=rec.append_time)
            raw = None
        out = enrich(self.state, m, self.config, self.store, self.clock())
        if type(out) is DeadLetter:
            e = out.enriched
            self.dead_letters.emit(e, raw)
            self.stats.dead_letters += 1
        else:
            e = out
            self.sink.emit(e, raw)
        self.faults.hit("measurement.emitted")
        self.m_offset += 1
        self.processed += 1
        self.stats.record(e.enrich_time, e.latency_ms, e.attributes)

    def step(self) -> int:
        """Consume at most one measurement batch; returns records consumed."""
        self._read_updates()
        pending = self._pending
        batch = self.log.read(self.measurements, self.partition, self.m_offset,
                              self.config.batch_size)
        consumed = 0
        for rec in batch:
            at = rec.append_time
            while pending and pending[0].append_time <= at:
                self._apply(pending.popleft())
                consumed += 1
            self._process(rec)
            consumed += 1
        if len(batch) < self.config.batch_size:
            while pending:
                self._apply(pending.popleft())
                consumed += 1
        if batch:
            self.faults.hit("batch.done")
        return consumed

    def caught_up(self) -> bool:
        return (
            not self._pending
            and self.m_offset >= self.log.flushed_end_offset(self.measurements, self.partition)
            and self.u_offset >= self.log.flushed_end_offset(self.updates, self.partition)
        )

    # -- checkpointing -------------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        self.faults.hit("checkpoint.begin")
        self.sink.flush()
        self.dead_letters.flush()
        p = self.partition
        ckpt = Checkpoint(
            partition=p,
            measurement_offset=StreamOffset(self.measurements.name, p, self.m_offset),
            update_offset=StreamOffset(self.updates.name, p, self.u_offset),
            epoch=self.epoch,
            emitted_high_watermark=dict(self.sink.high_watermark),
            results_offset=StreamOffset(self.sink.topic.name, p, self.sink.end_offset()),
            dead_letter_offset=StreamOffset(self.dead_letters.topic.name, p,
                                            self.dead_letters.end_offset()),
        )
        self.checkpoints.write(ckpt, self.faults)
        self.epoch += 1
        self._last_checkpoint = self.clock()
        return ckpt

    def maybe_checkpoint(self) -> Optional[Checkpoint]:
        if self.clock() - self._last_checkpoint >= self.config.checkpoint_interval_ms:
            return self.checkpoint()
        return None

    # -- loops ---------------------------------------------------------------------

    def run_until_caught_up(self) -> None:
        """Process everything currently in the log, then checkpoint."""
        self.faults.hit("worker.started")
        while True:
            n = self.step()
            self.maybe_checkpoint()
            if n == 0 and self.caught_up():
                break
        self.checkpoint()

    def run(
        self,
        stop: threading.Event,
        *,
        exit_when_idle: bool = False,
        idle_sleep_s: float = 0.001,
    ) -> None:
        self.faults.hit("worker.started")
        while not stop.is_set():
            n = self.step()
            self.maybe_checkpoint()
            if n == 0:
                if exit_when_idle and self.caught_up():
                    break
                self.sink.flush()
                self.dead_letters.flush()
                time.sleep(idle_sleep_s)
        self.checkpoint()


class RetryingStore:
    """Retries reads that fail with :class:`StoreUnavailableError`.

    After ``retries`` failed attempts the error propagates and the worker
    halts; its supervisor restarts it through recovery.
    """

    def __init__(self, store: VersionedStore, retries: int = 5, backoff_ms: float = 5.0) -> None:
        self.store = store
        self.retries = retries
        self.backoff_s = backoff_ms / 1000.0
        self.retried = 0

    def _call(self, fn, *args):
        attempt = 0
        while True:
            try:
                return fn(*args)
            except StoreUnavailableError:
                attempt += 1
                if attempt > self.retries:
                    raise
                self.retried += 1
                time.sleep(self.backoff_s * attempt)

    def put_version(self, key, version):
        return self._call(self.store.put_version, key, version)

    def get_at(self, key, t):
        return self._call(self.store.get_at, key, t)

    def get_latest_two(self, key):
        return self._call(self.store.get_latest_two, key)

    def scan_keys(self, partition, partitions):
        return self._call(self.store.scan_keys, partition, partitions)


def open_store(config: EngineConfig) -> ShardedAttributeStore:
    return ShardedAttributeStore(config.store_journal, config.partitions, fsync=config.log_fsync)


def remote_handle(store: VersionedStore, config: EngineConfig) -> RetryingStore:
    return RetryingStore(RemoteStore(store, config.simulated_latency_ms),
                         config.store_retries, config.store_retry_backoff_ms)


def open_log(config: EngineConfig) -> PartitionedLog:
    return PartitionedLog(
        config.log_root,
        flush_records=config.log_flush_records,
        flush_interval_ms=config.log_flush_interval_ms,
        fsync=config.log_fsync,
    )


def ensure_topics(log: PartitionedLog, config: EngineConfig) -> None:
    t = config.topics
    for name in (t.measurements, t.updates, t.results, t.dead_letter):
        log.ensure_topic(name, config.partitions)
