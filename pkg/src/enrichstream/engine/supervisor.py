"""Multi-process execution: one OS process per partition worker."""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
import signal
import threading
import time
from pathlib import Path

import numpy as np

from ..log import wall_clock_ms
from .config import EngineConfig
from .faults import NO_FAULTS, FaultPlan
from .worker import PartitionWorker, open_log, open_store, remote_handle

logger = logging.getLogger(__name__)


def run_partition(
    partition: int,
    config: EngineConfig,
    stop: threading.Event | None = None,
    *,
    exit_when_idle: bool = False,
    ready=None,
    go=None,
    t0=None,
    stats_dir: str | os.PathLike | None = None,
    faults: FaultPlan = NO_FAULTS,
) -> PartitionWorker:
    """Recover the worker for ``partition`` and run it until ``stop`` is set.

    With ``exit_when_idle`` the worker also returns once every input record
    currently in the log has been consumed.
    """
    log = open_log(config)
    store = open_store(config)
    try:
        worker = PartitionWorker.recover(partition, config, log, remote_handle(store, config),
                                         faults=faults)
        if ready is not None:
            ready.set()
        if go is not None:
            go.wait()
        if t0 is not None:
            worker.stats.t0_ms = t0.value
        worker.run(stop or threading.Event(), exit_when_idle=exit_when_idle)
        if stats_dir is not None:
            write_stats(worker, Path(stats_dir))
        return worker
    finally:
        log.close()
        store.close()


def write_stats(worker: PartitionWorker, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    p = worker.partition
    info = worker.stats.as_dict()
    resumed = worker.restored_from
    info.update(
        partition=p,
        processed=worker.processed,
        suppressed=worker.sink.suppressed + worker.dead_letters.suppressed,
        resumed_from=None if resumed is None else resumed.measurement_offset.offset,
    )
    np.save(directory / f"p{p}.latency.npy", np.frombuffer(worker.stats.latencies, dtype=np.int64))
    (directory / f"p{p}.json").write_text(json.dumps(info))


def _worker_main(partition, config, stop, exit_when_idle, ready, go, t0, stats_dir) -> None:
    logging.basicConfig(level=logging.WARNING)
    signal.signal(signal.SIGINT, signal.SIG_IGN)
    run_partition(partition, config, stop, exit_when_idle=exit_when_idle, ready=ready, go=go,
                  t0=t0, stats_dir=stats_dir)


class Supervisor:
    """Starts, watches and restarts partition worker processes."""

    def __init__(
        self,
        config: EngineConfig,
        *,
        exit_when_idle: bool = False,
        stats_dir: str | os.PathLike | None = None,
    ) -> None:
        self.config = config
        self.exit_when_idle = exit_when_idle
        self.stats_dir = None if stats_dir is None else str(stats_dir)
        # workers start from a clean server process, not a copy of a parent that
        # may be holding a multi-gigabyte trace
        self.ctx = mp.get_context("forkserver")
        self.stop_event = self.ctx.Event()
        self.go = self.ctx.Event()
        self.t0 = self.ctx.Value("q", 0)
        self.procs: dict[int, mp.process.BaseProcess] = {}
        self.ready: dict[int, object] = {}
        self.restarts = {p: 0 for p in range(config.partitions)}
        self.finished: set[int] = set()

    def _spawn(self, partition: int):
        ready = self.ctx.Event()
        proc = self.ctx.Process(
            target=_worker_main,
            args=(partition, self.config, self.stop_event, self.exit_when_idle, ready, self.go,
                  self.t0, self.stats_dir),
            name=f"partition-{partition}",
            daemon=True,
        )
        proc.start()
        self.procs[partition] = proc
        self.ready[partition] = ready
        return proc

    def start(self, timeout: float = 120.0) -> int:
        """Spawn all workers, wait for recovery, release them together.

        Returns the common start time in epoch milliseconds.
        """
        for p in range(self.config.partitions):
            self._spawn(p)
        deadline = time.monotonic() + timeout
        for p, ready in self.ready.items():
            while not ready.wait(0.05):
                if not self.procs[p].is_alive():
                    raise RuntimeError(f"worker {p} died during recovery")
                if time.monotonic() > deadline:
                    raise TimeoutError(f"worker {p} not ready after {timeout}s")
        self.t0.value = wall_clock_ms()
        self.go.set()
        return self.t0.value

    def kill(self, partition: int) -> None:
        proc = self.procs[partition]
        if proc.is_alive():
            os.kill(proc.pid, signal.SIGKILL)
        proc.join()

    def supervise_once(self) -> None:
        for p, proc in list(self.procs.items()):
            if p in self.finished or proc.is_alive():
                continue
            proc.join()
            if proc.exitcode == 0:
                self.finished.add(p)
            elif not self.stop_event.is_set():
                logger.warning("worker %d exited with %s; restarting", p, proc.exitcode)
                self.restarts[p] += 1
                self._spawn(p)

    def wait(self, timeout: float | None = None, poll_s: float = 0.02) -> bool:
        """Block until every worker exits cleanly (restarting crashed ones)."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while len(self.finished) < len(self.procs):
            self.supervise_once()
            if deadline is not None and time.monotonic() > deadline:
                return False
            time.sleep(poll_s)
        return True

    def stop(self, timeout: float = 60.0) -> None:
        self.stop_event.set()
        for p, proc in self.procs.items():
            proc.join(timeout)
            if proc.is_alive():
                logger.error("worker %d did not stop; killing", p)
                os.kill(proc.pid, signal.SIGKILL)
                proc.join()
            elif proc.exitcode == 0:
                self.finished.add(p)

    def __enter__(self) -> "Supervisor":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
