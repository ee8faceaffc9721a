"""Differential crash testing: crashed-and-recovered output vs. crash-free output."""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from ..engine import EngineConfig, FaultPlan, Supervisor
from ..model import partition_for
from ..workload.generator import TraceEvent
from .harness import collect, inject, reset_outputs, run_inprocess
from .oracle import Divergence, JoinOutput, first_divergence

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KillPoint:
    partition: int
    point: str
    occurrence: int

    def __str__(self) -> str:
        return f"p{self.partition}:{self.point}#{self.occurrence}"


@dataclass
class Trial:
    label: str
    fired: bool
    identical: bool
    replayed: int = 0
    suppressed: int = 0
    restarts: int = 0
    divergence: Divergence | None = None

    def line(self) -> str:
        verdict = "PASS" if self.identical else "FAIL"
        state = "crashed" if self.fired else "not reached"
        return (f"{verdict} {self.label:<36} {state:<11} replayed={self.replayed} "
                f"suppressed={self.suppressed} restarts={self.restarts}")


@dataclass
class CrashTestReport:
    baseline_records: int
    trials: list[Trial] = field(default_factory=list)

    @property
    def crashes(self) -> int:
        return sum(t.fired for t in self.trials)

    @property
    def passed(self) -> bool:
        return bool(self.trials) and all(t.identical for t in self.trials)

    def summary(self) -> str:
        lines = [t.line() for t in self.trials]
        for t in self.trials:
            if t.divergence is not None:
                lines.append(f"{t.label}: {t.divergence.describe()}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'}: {self.crashes} crash(es) over "
                     f"{len(self.trials)} trial(s), baseline {self.baseline_records} records")
        return "\n".join(lines)


def _partition_sizes(events: Sequence[TraceEvent], partitions: int) -> tuple[list[int], list[int]]:
    meas = [0] * partitions
    upd = [0] * partitions
    for ev in events:
        if ev.is_update:
            upd[partition_for(ev.record.key.device, partitions)] += 1
        else:
            meas[partition_for(ev.record.device, partitions)] += 1
    return meas, upd


def default_kill_points(events: Sequence[TraceEvent], config: EngineConfig) -> list[KillPoint]:
    """A spread of crash sites covering every phase of the worker loop.

    Assumes checkpoints after every batch (``checkpoint_interval_ms=0``) so
    the checkpoint sites are reached a predictable number of times.
    """
    meas, upd = _partition_sizes(events, config.partitions)
    p = max(range(config.partitions), key=lambda i: meas[i])
    m, u = meas[p], upd[p]
    batches = max(1, -(-m // config.batch_size))
    points = [
        KillPoint(p, "worker.started", 1),
        KillPoint(p, "update.stored", 1),
        KillPoint(p, "measurement.emitted", 1),
        KillPoint(p, "measurement.emitted", max(1, config.batch_size // 2)),
        KillPoint(p, "batch.done", 1),
        KillPoint(p, "checkpoint.begin", min(2, batches)),
        KillPoint(p, "checkpoint.partial", min(2, batches)),
        KillPoint(p, "checkpoint.written", min(3, batches)),
        KillPoint(p, "checkpoint.renamed", min(3, batches)),
        KillPoint(p, "measurement.emitted", m // 2 + 17),
        KillPoint(p, "update.stored", max(1, u // 2)),
        KillPoint(p, "checkpoint.partial", max(1, batches // 2)),
        KillPoint(p, "measurement.emitted", max(1, m - 3)),
    ]
    for q in range(config.partitions):
        if q != p and meas[q]:
            points.append(KillPoint(q, "measurement.emitted", meas[q] // 3 + 1))
            break
    return list(dict.fromkeys(points))


def sweep(events: Sequence[TraceEvent], config: EngineConfig, workdir: str | Path,
          points: Iterable[KillPoint] | None = None, *,
          baseline: JoinOutput | None = None) -> CrashTestReport:
    """Crash once at each kill point (in-process) and compare with a clean run."""
    workdir = Path(workdir)
    cfg = config.rooted_at(workdir)
    if points is None:
        cfg = cfg.with_changes(checkpoint_interval_ms=0)
        points = default_kill_points(events, cfg)
    shutil.rmtree(workdir, ignore_errors=True)
    inject(events, cfg)
    if baseline is None:
        run_inprocess(cfg)
        baseline = collect(cfg).output
    report = CrashTestReport(len(baseline))
    for kp in points:
        reset_outputs(cfg)
        run = run_inprocess(cfg, {kp.partition: FaultPlan(kp.point, kp.occurrence)})
        got = collect(cfg)
        div = first_divergence(baseline, got.output)
        crash = run.crash
        report.trials.append(Trial(
            label=str(kp),
            fired=crash is not None,
            identical=div is None and got.duplicates == 0,
            replayed=crash.replayed if crash else 0,
            suppressed=crash.suppressed if crash else 0,
            divergence=div,
        ))
        logger.info("%s", report.trials[-1].line())
    return report


def process_trials(events: Sequence[TraceEvent], config: EngineConfig, workdir: str | Path, *,
                   kill_after_s: float, runs: int = 1, spacing_s: float = 0.5,
                   timeout_s: float = 300.0) -> CrashTestReport:
    """Kill a live worker process with SIGKILL and let the supervisor recover it.

    Trial ``i`` kills partition ``i % partitions`` after
    ``kill_after_s + i * spacing_s`` seconds.
    """
    workdir = Path(workdir)
    cfg = config.rooted_at(workdir)
    shutil.rmtree(workdir, ignore_errors=True)
    inject(events, cfg)
    run_inprocess(cfg)
    baseline = collect(cfg).output
    report = CrashTestReport(len(baseline))
    for i in range(runs):
        reset_outputs(cfg)
        stats_dir = workdir / f"stats-{i}"
        shutil.rmtree(stats_dir, ignore_errors=True)
        victim = i % cfg.partitions
        delay = kill_after_s + i * spacing_s
        sup = Supervisor(cfg, exit_when_idle=True, stats_dir=stats_dir)
        try:
            sup.start()
            time.sleep(delay)
            fired = sup.procs[victim].is_alive()
            sup.kill(victim)
            if not sup.wait(timeout=timeout_s):
                raise TimeoutError(f"trial {i} did not finish within {timeout_s}s")
            restarts = sup.restarts[victim]
        finally:
            sup.stop()
        info = json.loads((stats_dir / f"p{victim}.json").read_text())
        got = collect(cfg)
        div = first_divergence(baseline, got.output)
        report.trials.append(Trial(
            label=f"p{victim}:SIGKILL@{delay:.2f}s",
            fired=fired,
            identical=div is None and got.duplicates == 0,
            replayed=info["suppressed"],
            suppressed=info["suppressed"],
            restarts=restarts,
            divergence=div,
        ))
        logger.info("%s", report.trials[-1].line())
    return report
