"""``enrichstream`` command line: generate, run, oracle, crashtest, report."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import tempfile
from pathlib import Path

from ..engine.config import DEFAULT_ATTRIBUTE_NAMES, EngineConfig, MissingPolicy, load_config
from ..workload.generator import FleetConfig, Trace, generate_trace, out_of_order_fraction
from ..workload.tracefile import read_trace, write_trace

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_ERROR = 3

# -- argument groups ---------------------------------------------------------------


def _engine_args(p: argparse.ArgumentParser, *, many_partitions: bool = False) -> None:
    g = p.add_argument_group("engine")
    g.add_argument("--config", type=Path, help="TOML engine config; flags override it")
    g.add_argument("--workdir", type=Path, help="directory for logs, checkpoints and store")
    if many_partitions:
        g.add_argument("-p", "--partitions", type=int, nargs="+", default=[1],
                       help="partition counts to sweep")
    else:
        g.add_argument("-p", "--partitions", type=int)
    g.add_argument("--attributes", nargs="+", metavar="NAME", help="enrichment attribute names")
    g.add_argument("--checkpoint-interval-ms", type=int)
    g.add_argument("--missing-policy", choices=[m.value for m in MissingPolicy])
    g.add_argument("--batch-size", type=int)
    g.add_argument("--simulated-latency-ms", type=float)


def _fleet_args(p: argparse.ArgumentParser, *, duration: bool = True) -> None:
    g = p.add_argument_group("workload")
    g.add_argument("--trace", type=Path, help="read this trace file instead of generating one")
    g.add_argument("--devices", type=int, default=100)
    g.add_argument("--rate", type=float, default=1.0, help="readings per device per second")
    if duration:
        g.add_argument("--duration", type=float, default=60.0, help="trace length in seconds")
    g.add_argument("--delay-median-ms", type=float, default=200.0)
    g.add_argument("--delay-sigma", type=float, default=1.0)
    g.add_argument("--loss", type=float, default=0.02)
    g.add_argument("--jitter", type=float, default=0.1, help="event-time jitter, fraction of period")
    g.add_argument("--late-fraction", type=float, default=0.0,
                   help="share of devices that get a back-dated commissioning update")
    g.add_argument("--late-lag-ms", type=int, default=5000)
    g.add_argument("--seed", type=int, default=0)


def fleet_from(args, duration: float | None = None) -> FleetConfig:
    return FleetConfig(
        devices=args.devices,
        rate_per_device_hz=args.rate,
        duration_s=duration if duration is not None else args.duration,
        delay_mu=math.log(args.delay_median_ms),
        delay_sigma=args.delay_sigma,
        loss_probability=args.loss,
        jitter_fraction=args.jitter,
        late_commission_fraction=args.late_fraction,
        late_commission_lag_ms=args.late_lag_ms,
        seed=args.seed,
    )


def engine_from(args) -> EngineConfig:
    single = args.partitions if isinstance(args.partitions, int) else None
    overrides = dict(
        partitions=single,
        enrichment_attributes=tuple(args.attributes) if args.attributes else None,
        checkpoint_interval_ms=args.checkpoint_interval_ms,
        missing_policy=MissingPolicy(args.missing_policy) if args.missing_policy else None,
        batch_size=args.batch_size,
        simulated_latency_ms=args.simulated_latency_ms,
    )
    if args.config is not None:
        cfg = load_config(args.config, **overrides)
    else:
        if overrides["enrichment_attributes"] is None:
            overrides["enrichment_attributes"] = DEFAULT_ATTRIBUTE_NAMES
        cfg = EngineConfig(**{k: v for k, v in overrides.items() if v is not None})
    if args.workdir is not None:
        cfg = cfg.rooted_at(args.workdir)
    return cfg


def _trace(args, duration: float | None = None) -> Trace:
    if getattr(args, "trace", None) is not None:
        return read_trace(args.trace)
    return generate_trace(fleet_from(args, duration))


def _workdir(args, prefix: str) -> Path:
    if args.workdir is not None:
        return args.workdir
    return Path(tempfile.mkdtemp(prefix=prefix))


# -- subcommands ----------------------------------------------------------------------


def cmd_generate(args) -> int:
    trace = generate_trace(fleet_from(args))
    n = write_trace(args.out, trace)
    counts = trace.counts()
    print(f"wrote {n} events to {args.out}: {counts['measurements']} measurements, "
          f"{counts['updates']} updates, {trace.dropped} dropped, "
          f"{trace.late_updates} late commissioning updates, "
          f"{out_of_order_fraction(trace):.1%} out of order")
    return EXIT_OK


def cmd_oracle(args) -> int:
    from .harness import collect, inject, run_inprocess
    from .oracle import first_divergence, oracle

    cfg = engine_from(args)
    trace = _trace(args)
    expected = oracle(trace.events, cfg)
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            for stream in ("results", "dead_letters"):
                for r in getattr(expected, stream):
                    fh.write(json.dumps({"stream": stream, **r._asdict()}) + "\n")
    print(f"oracle: {len(expected.results)} enriched, {len(expected.dead_letters)} dead-lettered")
    if not args.verify:
        return EXIT_OK
    work = _workdir(args, "oracle-")
    cfg = cfg.rooted_at(work)
    inject(trace.events, cfg)
    run_inprocess(cfg)
    got = collect(cfg)
    div = first_divergence(expected, got.output)
    if div is None and got.duplicates == 0:
        print(f"PASS: engine output equals the oracle ({len(expected)} records)")
        return EXIT_OK
    print("FAIL: engine output differs from the oracle")
    if got.duplicates:
        print(f"  {got.duplicates} duplicate records in the output topics")
    if div is not None:
        print(div.describe())
    return EXIT_FAIL


def cmd_run(args) -> int:
    from .metrics import write_metrics
    from .report import summarize, text_summary, to_csv
    from .runner import RunFailed, SweepPlan
    from .runner import cmd_run as run

    cfg = engine_from(args)
    pool = cfg.enrichment_attributes
    counts = args.attribute_counts or [len(pool)]
    plan = SweepPlan(partitions=args.partitions, attribute_counts=counts, duration_s=args.duration,
                     runs=args.runs, load=args.load, max_tps=args.max_tps)
    fleet = fleet_from(args, duration=args.duration)
    trace = read_trace(args.trace) if args.trace else None
    work = _workdir(args, "run-")

    def on_result(m) -> None:
        print(f"N={m.partitions} K={m.attributes} run {m.run}: {m.mean_tps:.0f} rec/s, "
              f"p50={m.p50_ms:.0f}ms p99={m.p99_ms:.0f}ms warmup={m.warmup_s}s"
              + (" (backlog drained early)" if m.backlog_exhausted and m.load == "max" else ""),
              flush=True)
        if args.metrics:
            write_metrics(args.metrics, [m])

    try:
        results = run(cfg, fleet, work, plan, pool, trace=trace, on_result=on_result)
    except RunFailed as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_ERROR
    rows = summarize(results)
    if args.csv:
        Path(args.csv).write_text(to_csv(rows))
    print(text_summary(rows))
    return EXIT_OK


def cmd_crashtest(args) -> int:
    from .crashtest import process_trials, sweep

    cfg = engine_from(args)
    trace = _trace(args)
    work = _workdir(args, "crashtest-")
    ok = True
    if args.mode in ("sweep", "both"):
        rep = sweep(trace.events, cfg, work / "sweep")
        print(rep.summary())
        ok &= rep.passed
    if args.mode in ("process", "both"):
        rep = process_trials(trace.events, cfg, work / "process", kill_after_s=args.kill_after,
                             runs=args.runs)
        print(rep.summary())
        ok &= rep.passed
    print("crashtest:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_report(args) -> int:
    from .metrics import read_metrics
    from .report import plot, summarize, text_summary, to_csv

    try:
        rows = summarize(read_metrics(args.metrics))
    except (OSError, ValueError) as exc:
        print(f"cannot read metrics: {exc}", file=sys.stderr)
        return EXIT_ERROR
    csv_text = to_csv(rows)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    print()
    print(text_summary(rows))
    if args.plot:
        print(f"plot written to {plot(rows, args.plot)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enrichstream",
                                     description="Stream enrichment engine benchmark harness")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a seeded telemetry trace")
    _fleet_args(p)
    p.add_argument("-o", "--out", type=Path, required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("oracle", help="compute the reference join; --verify checks the engine")
    _engine_args(p)
    _fleet_args(p)
    p.add_argument("-o", "--out", type=Path, help="write reference records as JSON lines")
    p.add_argument("--verify", action="store_true")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("run", help="throughput / latency runs")
    _engine_args(p, many_partitions=True)
    _fleet_args(p, duration=False)
    p.add_argument("-k", "--attribute-counts", type=int, nargs="+",
                   help="use the first K configured attributes (default: all)")
    p.add_argument("--duration", type=float, default=60.0, help="seconds per run")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--load", type=float,
                   help="pace injection at this fraction of max throughput (default: backlogged)")
    p.add_argument("--max-tps", type=float, help="max throughput for --load; measured if omitted")
    p.add_argument("--metrics", type=Path, help="append run metrics (JSON lines)")
    p.add_argument("--csv", type=Path)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("crashtest", help="crash, recover, compare with a crash-free run")
    _engine_args(p)
    _fleet_args(p)
    p.add_argument("--mode", choices=("sweep", "process", "both"), default="both")
    p.add_argument("--kill-after", type=float, default=0.5, help="seconds before SIGKILL")
    p.add_argument("--runs", type=int, default=3, help="SIGKILL trials")
    p.set_defaults(func=cmd_crashtest)

    p = sub.add_parser("report", help="tables and CSV from metrics files")
    p.add_argument("metrics", nargs="+", type=Path)
    p.add_argument("--csv", type=Path)
    p.add_argument("--plot", type=Path, help="write a throughput plot (needs matplotlib)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
