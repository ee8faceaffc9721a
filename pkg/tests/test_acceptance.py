"""Acceptance checks for the engine and its benchmark harness.

Each test prints exactly one ``PASS`` or ``FAIL`` line naming its criterion,
then asserts. The throughput and latency runs take tens of minutes and are
marked ``slow``; deselect them with ``-m "not slow"``.

Running this file directly (``python3 tests/test_acceptance.py``) goes
through pytest with capture disabled.
"""

from __future__ import annotations

import math
import statistics
import sys
import time
from pathlib import Path

import pytest

import properties
from enrichstream.bench.crashtest import process_trials, sweep
from enrichstream.bench.harness import collect, inject, run_inprocess
from enrichstream.bench.metrics import write_metrics
from enrichstream.bench.oracle import first_divergence, oracle
from enrichstream.bench.report import summarize, text_summary
from enrichstream.bench.runner import (
    backlog_fleet,
    calibrate,
    cpu_count,
    measure_max,
    run_backlogged,
    run_paced,
    with_attributes,
)
from enrichstream.engine import EngineConfig, MissingPolicy
from enrichstream.model import Provenance
from enrichstream.workload.generator import FleetConfig, generate_trace, out_of_order_fraction

ATTRS = ("geolocation", "unit", "device_type")

# oracle equivalence
ORACLE_SEEDS = 20
ORACLE_DEVICES = 225
ORACLE_SECONDS = 500.0
ORACLE_SIGMA_MAX = 3.7  # about 30% of measurements arrive behind a newer one
MIN_MEASUREMENTS = 100_000
MIN_UPDATES = 1_000
ORACLE_BUDGET_S = 300.0

# exactly-once under crash
MIN_KILL_POINTS = 10
CRASH_BUDGET_S = 300.0

# throughput
RUNS = 3
RUN_SECONDS = 60.0
BACKLOG_MARGIN = 2.0
MIN_SCALING = 1.7
SCALING_CORES = 4

# latency at half load
LOAD = 0.5
STORE_LATENCY_MS = 1.0
P50_BOUND_MS = 200.0
P99_BOUND_MS = 1000.0
PROBE_SECONDS = 20.0

# substrate properties
SUBSTRATE_CASES = 10_000
SUBSTRATE_BUDGET_S = 120.0


@pytest.fixture
def report(capsys):
    """Print one verdict line past pytest's capture, then assert it."""

    def emit(criterion: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} [{criterion}] {detail}", flush=True)
        assert ok, f"{criterion}: {detail}"

    return emit


def _config(root: Path, **changes) -> EngineConfig:
    changes.setdefault("enrichment_attributes", ATTRS)
    return EngineConfig(**changes).rooted_at(root)


# -- 1. engine output equals the reference join ----------------------------------------


def test_oracle_equivalence(tmp_path, report):
    started = time.monotonic()
    failures, fractions, totals = [], [], [0, 0]
    for i in range(ORACLE_SEEDS):
        fleet = FleetConfig(
            devices=ORACLE_DEVICES,
            duration_s=ORACLE_SECONDS,
            delay_sigma=ORACLE_SIGMA_MAX * i / (ORACLE_SEEDS - 1),
            late_commission_fraction=0.2 if i % 2 else 0.0,
            seed=1000 + i,
        )
        trace = generate_trace(fleet)
        counts = trace.counts()
        if counts["measurements"] < MIN_MEASUREMENTS or counts["updates"] < MIN_UPDATES:
            failures.append(f"seed {fleet.seed}: trace too small {counts}")
            continue
        totals[0] += counts["measurements"]
        totals[1] += counts["updates"]
        fractions.append(out_of_order_fraction(trace))
        policy = MissingPolicy.EMIT_FLAGGED if i % 4 == 3 else MissingPolicy.DEAD_LETTER
        # store latency only changes timing, never the join result
        cfg = _config(tmp_path / f"seed{i}", partitions=1 + i % 4, missing_policy=policy,
                      simulated_latency_ms=0.0)
        expected = oracle(trace.events, cfg)
        inject(trace.events, cfg)
        run_inprocess(cfg)
        got = collect(cfg)
        div = first_divergence(expected, got.output)
        if div is not None or got.duplicates:
            failures.append(f"seed {fleet.seed}: {got.duplicates} duplicates; "
                            f"{div.describe() if div else 'no divergence'}")
    elapsed = time.monotonic() - started
    ok = not failures and elapsed < ORACLE_BUDGET_S
    detail = (f"oracle equivalence: {ORACLE_SEEDS - len(failures)}/{ORACLE_SEEDS} traces identical, "
              f"{totals[0]} measurements, {totals[1]} updates, out-of-order "
              f"{min(fractions, default=0):.1%}..{max(fractions, default=0):.1%}, {elapsed:.0f}s "
              f"(budget {ORACLE_BUDGET_S:.0f}s)")
    if failures:
        detail += "; " + "; ".join(failures[:3])
    report("1", ok, detail)


# -- 2. exactly-once output across crashes ---------------------------------------------


def test_exactly_once_under_crash(tmp_path, report):
    started = time.monotonic()
    fleet = FleetConfig(devices=100, duration_s=200.0, delay_sigma=2.0,
                        late_commission_fraction=0.2, seed=77)
    events = generate_trace(fleet).events
    cfg = _config(tmp_path / "cfg", partitions=2, simulated_latency_ms=0.0,
                  checkpoint_interval_ms=2_000, batch_size=256)
    rep = sweep(events, cfg, tmp_path / "sweep")
    fired = [t for t in rep.trials if t.fired]
    mid_checkpoint = any("checkpoint.partial" in t.label or "checkpoint.written" in t.label
                         for t in fired)
    killed = process_trials(events, cfg, tmp_path / "process", kill_after_s=0.5, runs=3)
    elapsed = time.monotonic() - started
    ok = (rep.passed and killed.passed and rep.crashes >= MIN_KILL_POINTS and mid_checkpoint
          and elapsed < CRASH_BUDGET_S)
    replayed = sum(t.replayed for t in fired)
    detail = (f"exactly-once: {sum(t.identical for t in fired)}/{len(fired)} injected crashes and "
              f"{sum(t.identical for t in killed.trials)}/{len(killed.trials)} SIGKILL trials "
              f"identical to the crash-free run ({len(rep.trials) - len(fired)} points not reached), "
              f"mid-checkpoint kills {'yes' if mid_checkpoint else 'NO'}, {replayed} records replayed, "
              f"{elapsed:.0f}s (budget {CRASH_BUDGET_S:.0f}s)")
    if not (rep.passed and killed.passed):
        detail += "\n" + rep.summary() + "\n" + killed.summary()
    report("2", ok, detail)


# -- 3 and 4. backlogged throughput over partitions and attribute counts ----------------


@pytest.fixture(scope="module")
def throughput_runs(tmp_path_factory):
    """Backlogged runs: N=1 at K=1 and K=2, N=2 and N=4 at K=1."""
    work = tmp_path_factory.mktemp("throughput")
    base = _config(work / "cfg")
    fleet = FleetConfig(devices=1_000, seed=11)
    rate = calibrate(with_attributes(base, 2, ATTRS), fleet)
    # every worker shares the available cores, so the backlog needs no more
    # than that many workers' worth of records
    wanted = int(rate * min(4, cpu_count()) * RUN_SECONDS * BACKLOG_MARGIN)
    trace = generate_trace(backlog_fleet(fleet, wanted))
    results = []
    for n, counts in ((1, (1, 2)), (2, (1,)), (4, (1,))):
        injected = False
        for k in counts:
            cfg = with_attributes(base.with_changes(partitions=n), k, ATTRS)
            results += run_backlogged(cfg, trace, work / f"n{n}", duration_s=RUN_SECONDS,
                                      runs=RUNS, seed=fleet.seed, inject_inputs=not injected)
            injected = True
    write_metrics(work / "metrics.jsonl", results)
    return results


def _tps(runs, n: int, k: int) -> list[float]:
    return [m.mean_tps for m in runs if m.partitions == n and m.attributes == k]


@pytest.mark.slow
def test_throughput_scales_with_partitions(throughput_runs, report):
    means = {n: statistics.fmean(_tps(throughput_runs, n, 1)) for n in (1, 2, 4)}
    r21, r42 = means[2] / means[1], means[4] / means[2]
    drained = [m for m in throughput_runs if m.backlog_exhausted]
    cores = cpu_count()
    ok = r21 >= MIN_SCALING and r42 >= MIN_SCALING and not drained
    detail = (f"scaling: mean rec/s N=1 {means[1]:.0f}, N=2 {means[2]:.0f}, N=4 {means[4]:.0f}; "
              f"N2/N1 {r21:.2f}x, N4/N2 {r42:.2f}x (need {MIN_SCALING}x each), "
              f"{RUNS} runs x {RUN_SECONDS:.0f}s, {cores} usable core(s)")
    if cores < SCALING_CORES:
        detail += f"; host has fewer than the {SCALING_CORES} cores this needs"
    if drained:
        detail += f"; {len(drained)} run(s) drained the backlog early"
    print(text_summary(summarize(throughput_runs)))
    report("3", ok, detail)


@pytest.mark.slow
def test_attribute_count_within_run_noise(throughput_runs, report):
    k1, k2 = _tps(throughput_runs, 1, 1), _tps(throughput_runs, 1, 2)
    pooled = math.sqrt((statistics.variance(k1) + statistics.variance(k2)) / 2)
    diff = abs(statistics.fmean(k1) - statistics.fmean(k2))
    ok = diff <= pooled
    report("4", ok, f"attribute count: N=1 K=1 {statistics.fmean(k1):.0f} rec/s, "
                    f"K=2 {statistics.fmean(k2):.0f} rec/s, |diff| {diff:.0f} vs pooled stddev "
                    f"{pooled:.0f} over {RUNS} runs each")


# -- 5. latency at half of measured capacity -------------------------------------------


@pytest.mark.slow
def test_latency_at_half_load(tmp_path, report):
    cfg = _config(tmp_path / "cfg", partitions=1, simulated_latency_ms=STORE_LATENCY_MS)
    fleet = FleetConfig(devices=1_000, seed=21)
    capacity = measure_max(cfg, fleet, tmp_path / "probe", PROBE_SECONDS)
    runs = run_paced(cfg, fleet, tmp_path / "paced", target_tps=LOAD * capacity,
                     duration_s=RUN_SECONDS, runs=RUNS, load=LOAD)
    p50 = max(m.p50_ms for m in runs)
    p99 = max(m.p99_ms for m in runs)
    ok = all(m.latency_count > 0 for m in runs) and p50 <= P50_BOUND_MS and p99 <= P99_BOUND_MS
    per_run = ", ".join(f"{m.p50_ms:.0f}/{m.p99_ms:.0f}" for m in runs)
    report("5", ok, f"latency: capacity {capacity:.0f} rec/s, paced at {LOAD * capacity:.0f} rec/s "
                    f"with {STORE_LATENCY_MS:g} ms store latency; worst p50 {p50:.0f} ms "
                    f"(bound {P50_BOUND_MS:.0f}), worst p99 {p99:.0f} ms (bound {P99_BOUND_MS:.0f}); "
                    f"per run p50/p99 {per_run}")


# -- 6. no historical lookups after warm-up on an in-order trace -----------------------


def test_no_historical_lookups_after_warmup(tmp_path, report):
    fleet = FleetConfig(devices=700, duration_s=300.0, delay_sigma=0.0, seed=31)
    trace = generate_trace(fleet)
    disorder = out_of_order_fraction(trace)
    cfg = _config(tmp_path / "cfg", partitions=1)
    runs = run_backlogged(cfg, trace, tmp_path / "run", duration_s=RUN_SECONDS, runs=1,
                          seed=fleet.seed)
    m = runs[0]
    historical = m.provenance[str(Provenance.HISTORICAL)]
    ok = disorder == 0.0 and m.warmup_s is not None and m.remote_after_warmup == 0
    report("6", ok, f"warm-up: {m.emitted} records, out-of-order {disorder:.1%}, "
                    f"warm-up {m.warmup_s} s, remote lookups after warm-up {m.remote_after_warmup}, "
                    f"historical provenance {historical} overall")


# -- 7. substrate invariants over seeded random cases ----------------------------------


def test_substrate_properties(report):
    started = time.monotonic()
    lines, failed = [], []
    for name, check, make_case in properties.SUBSTRATE:
        try:
            run = properties.run_randomized(name, check, make_case, cases=SUBSTRATE_CASES)
            lines.append(f"{name} {run.cases} cases {run.seconds:.1f}s")
        except AssertionError as exc:
            failed.append(f"{name}: {exc}")
    elapsed = time.monotonic() - started
    ok = not failed and elapsed < SUBSTRATE_BUDGET_S
    detail = (f"substrate: {len(properties.SUBSTRATE) - len(failed)}/{len(properties.SUBSTRATE)} "
              f"invariants held ({'; '.join(lines)}), {elapsed:.0f}s (budget "
              f"{SUBSTRATE_BUDGET_S:.0f}s)")
    if failed:
        detail += "; " + "; ".join(failed)
    report("7", ok, detail)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s", *sys.argv[1:]]))
