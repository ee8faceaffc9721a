"""Aggregate run metrics into the per-(partitions, attributes) tables."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass
from itertools import groupby
from pathlib import Path
from typing import Sequence

from .metrics import RunMetrics

COLUMNS = ("partitions", "attributes", "mean_tps", "std_tps", "p50_ms", "p95_ms", "p99_ms", "warmup_s")


@dataclass
class Row:
    partitions: int
    attributes: int
    mean_tps: float
    std_tps: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    warmup_s: float | None
    runs: int
    load: str

    def values(self) -> list:
        return [getattr(self, c) for c in COLUMNS]


def _mean(xs: Sequence[float]) -> float:
    return float(statistics.fmean(xs))


def summarize(metrics: Sequence[RunMetrics]) -> list[Row]:
    """One row per (partitions, attributes); stddev is the sample stddev (0 for one run)."""
    if not metrics:
        raise ValueError("no metrics to report")
    key = lambda m: (m.partitions, m.attributes)  # noqa: E731
    rows = []
    for (n, k), group in groupby(sorted(metrics, key=key), key=key):
        runs = list(group)
        loads = {m.load for m in runs}
        if len(loads) > 1:
            raise ValueError(f"N={n} K={k} mixes loads {sorted(loads)}; report them separately")
        tps = [m.mean_tps for m in runs]
        warm = [m.warmup_s for m in runs]
        rows.append(Row(
            partitions=n,
            attributes=k,
            mean_tps=_mean(tps),
            std_tps=statistics.stdev(tps) if len(tps) > 1 else 0.0,
            p50_ms=_mean([m.p50_ms for m in runs]),
            p95_ms=_mean([m.p95_ms for m in runs]),
            p99_ms=_mean([m.p99_ms for m in runs]),
            warmup_s=None if any(w is None for w in warm) else _mean(warm),
            runs=len(runs),
            load=loads.pop(),
        ))
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def to_csv(rows: Sequence[Row]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()


def text_summary(rows: Sequence[Row]) -> str:
    out = ["throughput (records/s, steady state)",
           f"{'N':>3} {'K':>3} {'runs':>4} {'load':>5} {'mean':>12} {'stddev':>10}"]
    for r in rows:
        out.append(f"{r.partitions:>3} {r.attributes:>3} {r.runs:>4} {r.load:>5} "
                   f"{r.mean_tps:>12.1f} {r.std_tps:>10.1f}")
    out += ["", "latency (ms, ingest to enrich)",
            f"{'N':>3} {'K':>3} {'p50':>10} {'p95':>10} {'p99':>10}"]
    for r in rows:
        out.append(f"{r.partitions:>3} {r.attributes:>3} {r.p50_ms:>10.1f} {r.p95_ms:>10.1f} "
                   f"{r.p99_ms:>10.1f}")
    out += ["", "warm-up (s until remote lookups stay below threshold)",
            f"{'N':>3} {'K':>3} {'warmup':>8}"]
    for r in rows:
        w = "never" if r.warmup_s is None else f"{r.warmup_s:.0f}"
        out.append(f"{r.partitions:>3} {r.attributes:>3} {w:>8}")
    return "\n".join(out)


def plot(rows: Sequence[Row], path: str | Path) -> Path:
    """Throughput against partition count, one line per attribute count."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for k in sorted({r.attributes for r in rows}):
        sel = sorted((r for r in rows if r.attributes == k), key=lambda r: r.partitions)
        ax.errorbar([r.partitions for r in sel], [r.mean_tps for r in sel],
                    yerr=[r.std_tps for r in sel], marker="o", capsize=3, label=f"{k} attribute(s)")
    ax.set_xlabel("partitions (workers)")
    ax.set_ylabel("records/s")
    ax.set_xticks(sorted({r.partitions for r in rows}))
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
