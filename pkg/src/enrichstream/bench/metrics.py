"""Per-run benchmark metrics: windowed throughput, latency, warm-up."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..model import Provenance

DEFAULT_WARMUP_THRESHOLD = 0.01


def percentile(sorted_samples: np.ndarray, q: float) -> float:
    """Nearest-rank percentile of an already sorted array."""
    n = len(sorted_samples)
    if n == 0:
        return float("nan")
    rank = max(1, math.ceil(q / 100.0 * n))
    return float(sorted_samples[rank - 1])


def merge_windows(per_partition: Iterable[Sequence[Sequence[int]]]) -> list[list[int]]:
    """Element-wise sum of ``[records, lookups, remote]`` rows on a shared t0."""
    merged: list[list[int]] = []
    for windows in per_partition:
        for i, row in enumerate(windows):
            while len(merged) <= i:
                merged.append([0, 0, 0])
            for j in range(3):
                merged[i][j] += row[j]
    return merged


def warmup_window(windows: Sequence[Sequence[int]], threshold: float = DEFAULT_WARMUP_THRESHOLD) -> int | None:
    """Index of the first window after which the remote-lookup rate stays below
    ``threshold``; None if the final window is still above it."""
    start = 0
    seen_any = False
    for i, (_, lookups, remote) in enumerate(windows):
        if lookups == 0:
            continue
        seen_any = True
        if remote / lookups >= threshold:
            start = i + 1
    if not seen_any:
        return 0
    last_active = max(i for i, row in enumerate(windows) if row[1] > 0)
    return None if start > last_active else start


def steady_windows(windows: Sequence[Sequence[int]], warmup: int | None) -> list[int]:
    """Record counts of the full windows after warm-up.

    The first and last windows holding records are partial (ramp-up, and
    the stop signal or drained backlog), so both are dropped when enough
    windows remain.
    """
    active = [i for i, row in enumerate(windows) if row[0] > 0]
    if not active:
        return []
    first, end = active[0], active[-1]
    begin = max(warmup or 0, first + 1)
    counts = [windows[i][0] for i in range(begin, end)]
    if not counts:
        counts = [windows[i][0] for i in range(first, end)] or [windows[end][0]]
    return counts


@dataclass
class RunMetrics:
    partitions: int
    attributes: int
    seed: int
    duration_s: float
    run: int = 0
    load: str = "max"
    attribute_names: list[str] = field(default_factory=list)
    throughput: list[tuple[int, int]] = field(default_factory=list)
    mean_tps: float = 0.0
    emitted: int = 0
    latency_count: int = 0
    latency_mean_ms: float = 0.0
    p50_ms: float = float("nan")
    p95_ms: float = float("nan")
    p99_ms: float = float("nan")
    latency_max_ms: float = float("nan")
    warmup_s: float | None = None
    warmup_threshold: float = DEFAULT_WARMUP_THRESHOLD
    remote_after_warmup: int = 0
    provenance: dict[str, int] = field(default_factory=dict)
    updates_applied: int = 0
    dead_letters: int = 0
    backlog_exhausted: bool = False
    elapsed_s: float = 0.0

    def to_json(self) -> str:
        # NaN is not valid JSON; unmeasured percentiles are written as null
        data = {k: None if isinstance(v, float) and math.isnan(v) else v
                for k, v in asdict(self).items()}
        return json.dumps(data, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunMetrics":
        data = json.loads(line)
        data["throughput"] = [tuple(x) for x in data.get("throughput", [])]
        for name in _NAN_WHEN_EMPTY:
            if data.get(name, 0) is None:
                data[name] = float("nan")
        return cls(**data)


_NAN_WHEN_EMPTY = ("p50_ms", "p95_ms", "p99_ms", "latency_max_ms", "latency_mean_ms")


def build_metrics(
    *,
    windows_per_partition: Iterable[Sequence[Sequence[int]]],
    latencies: Iterable[np.ndarray],
    provenance_per_partition: Iterable[Sequence[int]],
    partitions: int,
    attribute_names: Sequence[str],
    seed: int,
    duration_s: float,
    run: int = 0,
    load: str = "max",
    updates_applied: int = 0,
    dead_letters: int = 0,
    backlog_exhausted: bool = False,
    elapsed_s: float = 0.0,
    threshold: float = DEFAULT_WARMUP_THRESHOLD,
) -> RunMetrics:
    windows = merge_windows(windows_per_partition)
    lat = np.sort(np.concatenate([np.asarray(x, dtype=np.int64) for x in latencies] or
                                 [np.empty(0, dtype=np.int64)]))
    prov = [0, 0, 0, 0]
    for counts in provenance_per_partition:
        for i, c in enumerate(counts):
            prov[i] += c
    warm = warmup_window(windows, threshold)
    steady = steady_windows(windows, warm)
    remote_after = sum(row[2] for row in windows[warm:]) if warm is not None else sum(r[2] for r in windows)
    return RunMetrics(
        partitions=partitions,
        attributes=len(attribute_names),
        attribute_names=list(attribute_names),
        seed=seed,
        duration_s=duration_s,
        run=run,
        load=load,
        throughput=[(i, row[0]) for i, row in enumerate(windows)],
        mean_tps=float(np.mean(steady)) if steady else 0.0,
        emitted=int(sum(row[0] for row in windows)),
        latency_count=int(len(lat)),
        latency_mean_ms=float(lat.mean()) if len(lat) else float("nan"),
        p50_ms=percentile(lat, 50),
        p95_ms=percentile(lat, 95),
        p99_ms=percentile(lat, 99),
        latency_max_ms=float(lat[-1]) if len(lat) else float("nan"),
        warmup_s=None if warm is None else float(warm),
        warmup_threshold=threshold,
        remote_after_warmup=int(remote_after),
        provenance={str(p): prov[p] for p in Provenance},
        updates_applied=updates_applied,
        dead_letters=dead_letters,
        backlog_exhausted=backlog_exhausted,
        elapsed_s=elapsed_s,
    )


def metrics_from_stats_dir(directory: str | Path, **meta) -> RunMetrics:
    """Merge the per-partition stats files a supervised run leaves behind."""
    directory = Path(directory)
    infos = [json.loads(f.read_text()) for f in sorted(directory.glob("p*.json"))]
    lats = [np.load(directory / f"p{i['partition']}.latency.npy") for i in infos]
    return build_metrics(
        windows_per_partition=[i["windows"] for i in infos],
        latencies=lats,
        provenance_per_partition=[[i["provenance"][str(p)] for p in Provenance] for i in infos],
        updates_applied=sum(i["updates_applied"] for i in infos),
        dead_letters=sum(i["dead_letters"] for i in infos),
        **meta,
    )


def write_metrics(path: str | Path, runs: Iterable[RunMetrics]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for m in runs:
            fh.write(m.to_json() + "\n")


def read_metrics(paths: Iterable[str | Path]) -> list[RunMetrics]:
    out = []
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            for n, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    out.append(RunMetrics.from_json(line))
                except (ValueError, TypeError) as exc:
                    raise ValueError(f"{p}:{n}: not a metrics record ({exc})") from exc
    return out
