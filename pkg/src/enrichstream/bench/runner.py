"""Throughput and latency runs over supervised multi-process workers."""

from __future__ import annotations

import dataclasses
import logging
import os
import shutil
import tempfile
import threading
import time
from pathlib import Path
from typing import Callable, Sequence

from ..engine import EngineConfig, Supervisor, ensure_topics, open_log
from ..workload.driver import drive
from ..workload.generator import FleetConfig, Trace, generate_trace
from .harness import inject, reset_outputs, run_inprocess
from .metrics import RunMetrics, build_metrics, metrics_from_stats_dir

logger = logging.getLogger(__name__)


class RunFailed(RuntimeError):
    """A benchmark run could not complete; the message carries diagnostics."""


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover - non-Linux
        return os.cpu_count() or 1


def with_attributes(config: EngineConfig, count: int, names: Sequence[str]) -> EngineConfig:
    if not 1 <= count <= len(names):
        raise ValueError(f"attribute count {count} outside 1..{len(names)}")
    return config.with_changes(enrichment_attributes=tuple(names[:count]))


def calibrate(config: EngineConfig, fleet: FleetConfig, measurements: int = 40_000) -> float:
    """Single-worker records/s over a small backlog, measured in-process."""
    devices = max(1, min(fleet.devices, measurements // 20))
    duration = measurements / (devices * fleet.rate_per_device_hz)
    small = dataclasses.replace(fleet, devices=devices, duration_s=duration)
    trace = generate_trace(small)
    with tempfile.TemporaryDirectory(prefix="calibrate-") as tmp:
        cfg = config.with_changes(partitions=1).rooted_at(tmp)
        inject(trace.events, cfg, clock="wall")
        started = time.perf_counter()
        run = run_inprocess(cfg)
        elapsed = time.perf_counter() - started
    return sum(run.processed.values()) / elapsed


def backlog_fleet(fleet: FleetConfig, measurements: int) -> FleetConfig:
    """``fleet`` stretched in time so it yields about ``measurements`` readings."""
    per_s = fleet.devices * fleet.rate_per_device_hz * (1.0 - fleet.loss_probability)
    return dataclasses.replace(fleet, duration_s=max(1.0, measurements / per_s))


def _supervised(config: EngineConfig, stats_dir: Path, duration_s: float,
                during: Callable[[], None] | None = None,
                drain: Callable[[], bool] | None = None) -> tuple[float, bool]:
    """Run workers for ``duration_s``; returns (elapsed, finished_early)."""
    sup = Supervisor(config, exit_when_idle=during is None, stats_dir=stats_dir)
    started = time.monotonic()
    try:
        sup.start()
        if during is None:
            finished = sup.wait(timeout=duration_s)
        else:
            during()
            deadline = started + duration_s + 30.0
            while drain is not None and not drain() and time.monotonic() < deadline:
                sup.supervise_once()
                time.sleep(0.05)
            finished = False
        restarts = sum(sup.restarts.values())
    finally:
        sup.stop()
    elapsed = time.monotonic() - started
    if restarts:
        raise RunFailed(f"{restarts} worker restart(s) during run; see worker logs")
    missing = [p for p in range(config.partitions) if not (stats_dir / f"p{p}.json").exists()]
    if missing:
        raise RunFailed(f"partitions {missing} produced no stats (worker crashed)")
    return elapsed, finished


def run_backlogged(config: EngineConfig, trace: Trace | None, workdir: Path, *, duration_s: float,
                   runs: int, seed: int, inject_inputs: bool = True) -> list[RunMetrics]:
    """Pre-inject ``trace`` then let ``config.partitions`` workers drain it.

    Every run starts from the same injected inputs with fresh outputs,
    checkpoints and store.
    """
    cfg = config.rooted_at(workdir)
    if inject_inputs:
        if trace is None:
            raise ValueError("trace required when injecting")
        shutil.rmtree(cfg.log_root, ignore_errors=True)
        inject(trace.events, cfg, clock="wall")
    out = []
    for r in range(runs):
        reset_outputs(cfg)
        stats_dir = workdir / f"stats-k{len(cfg.enrichment_attributes)}-r{r}"
        shutil.rmtree(stats_dir, ignore_errors=True)
        elapsed, early = _supervised(cfg, stats_dir, duration_s)
        m = metrics_from_stats_dir(stats_dir, partitions=cfg.partitions,
                                   attribute_names=cfg.enrichment_attributes, seed=seed,
                                   duration_s=duration_s, run=r, load="max",
                                   backlog_exhausted=early, elapsed_s=elapsed)
        if early:
            logger.warning("run %d drained its backlog after %.1fs", r, elapsed)
        logger.info("N=%d K=%d run %d: %.0f rec/s", cfg.partitions, m.attributes, r, m.mean_tps)
        out.append(m)
    reset_outputs(cfg)
    return out


def _ends(log, name: str, partitions: int) -> int:
    return sum(log.flushed_end_offset(name, p) for p in range(partitions))


@dataclasses.dataclass
class LiveRun:
    stats_dir: Path
    elapsed_s: float
    measurements: int
    # wall seconds from the first append until every measurement was emitted
    completion_s: float


def run_live(config: EngineConfig, trace: Trace, run_dir: Path, *, speed: str,
             duration_s: float, rate_scale: float = 1.0) -> LiveRun:
    """Inject ``trace`` while the workers run, and wait until it is all enriched."""
    shutil.rmtree(run_dir, ignore_errors=True)
    cfg = config.rooted_at(run_dir)
    with open_log(cfg) as log:
        ensure_topics(log, cfg)
    topics = cfg.topics
    n_meas = sum(1 for ev in trace.events if not ev.is_update)
    stats_dir = run_dir / "stats"
    failure: list[Exception] = []
    marks: dict[str, float] = {}
    reader = open_log(cfg)

    def during() -> None:
        writer = open_log(cfg)
        marks["start"] = time.monotonic()
        try:
            drive(trace.events, writer, topics, speed=speed, clock="wall", rate_scale=rate_scale)
        except Exception as exc:  # surfaced after the workers stop
            failure.append(exc)
        finally:
            writer.close()

    def drained() -> bool:
        done = (_ends(reader, topics.results, cfg.partitions)
                + _ends(reader, topics.dead_letter, cfg.partitions))
        if done >= n_meas:
            marks.setdefault("done", time.monotonic())
            return True
        return False

    try:
        elapsed, _ = _supervised(cfg, stats_dir, duration_s, during=during, drain=drained)
    finally:
        reader.close()
    if failure:
        raise RunFailed(f"injection failed: {failure[0]}")
    if "done" not in marks:
        raise RunFailed(f"only part of {n_meas} measurements were enriched before the deadline")
    shutil.rmtree(run_dir / "log", ignore_errors=True)
    return LiveRun(stats_dir, elapsed, n_meas, marks["done"] - marks["start"])


def measure_max(config: EngineConfig, fleet: FleetConfig, workdir: Path, duration_s: float) -> float:
    """Capacity of the live pipeline in measurements/s.

    The injector appends at full speed while the workers run; capacity is
    the number of measurements divided by the wall time until the last one
    was enriched. Where the injector and workers share cores this counts
    the injector's own cost, which is part of the load the host carries.
    """
    per_worker = calibrate(config, fleet)
    wanted = int(per_worker * min(config.partitions, cpu_count()) * duration_s)
    trace = generate_trace(backlog_fleet(fleet, wanted))
    live = run_live(config, trace, workdir, speed="max", duration_s=duration_s * 4)
    shutil.rmtree(workdir, ignore_errors=True)
    return live.measurements / live.completion_s


def run_paced(config: EngineConfig, fleet: FleetConfig, workdir: Path, *, target_tps: float,
              duration_s: float, runs: int, load: float) -> list[RunMetrics]:
    """Inject in real time at ``target_tps`` while workers run; latency focus."""
    per_device = target_tps / (fleet.devices * (1.0 - fleet.loss_probability))
    paced = dataclasses.replace(fleet, rate_per_device_hz=per_device, duration_s=duration_s)
    # stragglers delayed past the end of the run are left out
    cutoff = paced.start_ms + int(duration_s * 1000)
    trace = Trace([ev for ev in generate_trace(paced).events if ev.arrival < cutoff])
    out = []
    for r in range(runs):
        live = run_live(config, trace, workdir / f"paced-r{r}", speed="realtime",
                        duration_s=duration_s)
        out.append(metrics_from_stats_dir(live.stats_dir, partitions=config.partitions,
                                          attribute_names=config.enrichment_attributes,
                                          seed=fleet.seed, duration_s=duration_s, run=r,
                                          load=f"{load:g}", elapsed_s=live.elapsed_s))
    return out


def metrics_inprocess(config: EngineConfig, seed: int = 0) -> RunMetrics:
    """Run in-process to completion and summarise, for quick checks."""
    started = time.monotonic()
    run = run_inprocess(config)
    stats = list(run.stats.values())
    return build_metrics(
        windows_per_partition=[s.windows for s in stats],
        latencies=[s.latencies for s in stats],
        provenance_per_partition=[s.provenance for s in stats],
        partitions=config.partitions,
        attribute_names=config.enrichment_attributes,
        seed=seed,
        duration_s=0.0,
        updates_applied=sum(s.updates_applied for s in stats),
        dead_letters=sum(s.dead_letters for s in stats),
        backlog_exhausted=True,
        elapsed_s=time.monotonic() - started,
    )


@dataclasses.dataclass
class SweepPlan:
    partitions: Sequence[int] = (1,)
    attribute_counts: Sequence[int] = (1,)
    duration_s: float = 60.0
    runs: int = 3
    load: float | None = None  # None: backlogged at max speed
    max_tps: float | None = None
    backlog_margin: float = 2.0  # calibration on a small in-process run is noisy
    probe_s: float = 20.0  # backlogged run that measures max throughput for paced runs


def cmd_run(config: EngineConfig, fleet: FleetConfig, workdir: str | os.PathLike, plan: SweepPlan,
            attribute_pool: Sequence[str], trace: Trace | None = None,
            on_result: Callable[[RunMetrics], None] | None = None,
            stop: threading.Event | None = None) -> list[RunMetrics]:
    """Run every (partitions, attributes) combination of ``plan``."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    results: list[RunMetrics] = []

    def emit(ms: list[RunMetrics]) -> None:
        for m in ms:
            results.append(m)
            if on_result:
                on_result(m)

    if plan.load is not None:
        for n in plan.partitions:
            for k in plan.attribute_counts:
                cfg = with_attributes(config.with_changes(partitions=n), k, attribute_pool)
                max_tps = plan.max_tps
                if max_tps is None:
                    max_tps = measure_max(cfg, fleet, workdir / f"probe-n{n}-k{k}",
                                          min(plan.duration_s, plan.probe_s))
                    logger.info("N=%d K=%d measured max %.0f rec/s", n, k, max_tps)
                emit(run_paced(cfg, fleet, workdir / f"n{n}-k{k}", target_tps=plan.load * max_tps,
                               duration_s=plan.duration_s, runs=plan.runs, load=plan.load))
        return results

    if trace is None:
        rate = calibrate(config, fleet)
        parallel = min(max(plan.partitions), cpu_count())
        wanted = int(rate * parallel * plan.duration_s * plan.backlog_margin)
        logger.info("calibrated %.0f rec/s per worker; generating %d-record backlog", rate, wanted)
        trace = generate_trace(backlog_fleet(fleet, wanted))
    for n in plan.partitions:
        injected = False
        for k in plan.attribute_counts:
            if stop is not None and stop.is_set():
                return results
            cfg = with_attributes(config.with_changes(partitions=n), k, attribute_pool)
            emit(run_backlogged(cfg, trace, workdir / f"n{n}", duration_s=plan.duration_s,
                                runs=plan.runs, seed=fleet.seed, inject_inputs=not injected))
            injected = True
        shutil.rmtree(workdir / f"n{n}" / "log", ignore_errors=True)
    return results
