"""Run the engine over a trace inside this process and collect its output."""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ..engine import (
    EngineConfig,
    FaultPlan,
    InjectedCrash,
    PartitionStats,
    PartitionWorker,
    ensure_topics,
    open_log,
    open_store,
    remote_handle,
)
from ..log import PartitionedLog
from ..wire import decode_enriched
from ..workload.driver import DriveReport, drive
from ..workload.generator import TraceEvent
from .oracle import CanonicalRecord, JoinOutput, canonical

logger = logging.getLogger(__name__)


def inject(events: Iterable[TraceEvent], config: EngineConfig, *, clock: str = "trace",
           speed: str = "max") -> DriveReport:
    """Create the engine's topics and append the whole trace."""
    with open_log(config) as log:
        ensure_topics(log, config)
        return drive(events, log, config.topics, speed=speed, clock=clock)


def reset_outputs(config: EngineConfig) -> None:
    """Empty results, dead letters, checkpoints and the store, keeping inputs."""
    topics = config.topics
    for name in (topics.results, topics.dead_letter):
        shutil.rmtree(Path(config.log_root) / name, ignore_errors=True)
    shutil.rmtree(config.checkpoint_dir, ignore_errors=True)
    journal = Path(config.store_journal)
    if journal.parent.exists():
        for f in journal.parent.glob(journal.stem + "*"):
            f.unlink()
    with open_log(config) as log:
        ensure_topics(log, config)


def _read_topic(log: PartitionedLog, name: str) -> tuple[list[CanonicalRecord], int]:
    topic = log.topic(name)
    rows: list[CanonicalRecord] = []
    for p in range(topic.partitions):
        offset = 0
        while True:
            recs = log.read(topic, p, offset, 4096)
            rows.extend(canonical(decode_enriched(r.payload)) for r in recs)
            offset += len(recs)
            if len(recs) < 4096:
                break
    raw = len(rows)
    unique = sorted(set(rows), key=lambda r: (r.device, r.seq))
    return unique, raw - len(unique)


@dataclass
class Collected:
    output: JoinOutput
    duplicates: int


def collect(config: EngineConfig) -> Collected:
    """Read every output partition, de-duplicate and sort by (device, seq)."""
    with open_log(config) as log:
        ensure_topics(log, config)
        results, d1 = _read_topic(log, config.topics.results)
        dead, d2 = _read_topic(log, config.topics.dead_letter)
    return Collected(JoinOutput(results, dead), d1 + d2)


@dataclass
class CrashReport:
    partition: int
    point: str
    occurrence: int
    offset_at_crash: int
    resumed_from: int
    suppressed: int = 0

    @property
    def replayed(self) -> int:
        return self.offset_at_crash - self.resumed_from


@dataclass
class InProcessRun:
    stats: dict[int, PartitionStats] = field(default_factory=dict)
    processed: dict[int, int] = field(default_factory=dict)
    crash: CrashReport | None = None


def run_inprocess(config: EngineConfig, faults: dict[int, FaultPlan] | None = None) -> InProcessRun:
    """Run every partition to the end of its input, one after another.

    A worker that hits an injected crash loses its unflushed output buffers,
    exactly as a killed process would; it is then recovered from its last
    checkpoint and run to completion without further faults.
    """
    faults = faults or {}
    run = InProcessRun()
    log = open_log(config)
    store = open_store(config)
    ensure_topics(log, config)
    try:
        for p in range(config.partitions):
            plan = faults.get(p)
            kwargs = {"faults": plan} if plan is not None else {}
            worker = PartitionWorker.recover(p, config, log, remote_handle(store, config), **kwargs)
            try:
                worker.run_until_caught_up()
            except InjectedCrash as crash:
                log.abandon()
                store.close()
                log = open_log(config)
                store = open_store(config)
                at = worker.m_offset
                worker = PartitionWorker.recover(p, config, log, remote_handle(store, config))
                worker.run_until_caught_up()
                resumed = worker.restored_from.measurement_offset.offset if worker.restored_from else 0
                run.crash = CrashReport(p, crash.point, crash.occurrence, at, resumed,
                                        worker.sink.suppressed + worker.dead_letters.suppressed)
                logger.info("partition %d crashed at %s#%d; replayed %d records", p, crash.point,
                            crash.occurrence, run.crash.replayed)
            run.stats[p] = worker.stats
            run.processed[p] = worker.processed
    finally:
        log.close()
        store.close()
    return run
