import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from enrichstream.bench.cli import EXIT_ERROR, EXIT_FAIL, EXIT_OK, main
from enrichstream.bench.crashtest import default_kill_points, process_trials, sweep
from enrichstream.bench.harness import inject
from enrichstream.bench.metrics import (
    RunMetrics,
    build_metrics,
    percentile,
    read_metrics,
    steady_windows,
    warmup_window,
    write_metrics,
)
from enrichstream.bench.oracle import JoinOutput, OracleError, first_divergence, oracle
from enrichstream.bench.report import COLUMNS, summarize, to_csv
from enrichstream.bench.runner import metrics_inprocess
from enrichstream.model import AttributeKey, AttributeUpdate, AttributeVersion, Measurement, Provenance
from enrichstream.workload.generator import FleetConfig, TraceEvent, generate_trace

CUR, PREV, HIST, MISS = (int(p) for p in Provenance)


def upd(arrival, valid_from, value, device="d1"):
    return TraceEvent(arrival, AttributeUpdate(AttributeKey(device, "unit"), AttributeVersion(valid_from, value)))


def meas(arrival, t, seq=0, device="d1"):
    return TraceEvent(arrival, Measurement(device, seq, t, "flow_rate", 2.0))


# -- oracle ------------------------------------------------------------------------


def test_oracle_update_then_measurement(make_config):
    out = oracle([upd(100, 100, "A"), meas(160, 150)], make_config(enrichment_attributes=("unit",)))
    (rec,) = out.results
    assert rec.attributes == (("unit", "A", CUR),)


def test_oracle_measurement_before_any_update(make_config):
    cfg = make_config(enrichment_attributes=("unit",), missing_policy="emit_flagged")
    out = oracle([meas(50, 40), upd(100, 100, "A")], cfg)
    assert out.results[0].attributes == (("unit", "", MISS),)
    dl = oracle([meas(50, 40)], cfg.with_changes(missing_policy="dead_letter"))
    assert dl.results == [] and len(dl.dead_letters) == 1


def test_oracle_provenance_mirrors_two_newest_versions(make_config):
    cfg = make_config(enrichment_attributes=("unit",))
    events = [upd(1, 100, "Z"), upd(2, 500, "A"), upd(3, 1000, "B"),
              meas(4, 1200, 0), meas(5, 700, 1), meas(6, 300, 2)]
    got = [r.attributes[0][1:] for r in oracle(events, cfg).results]
    assert got == [("B", CUR), ("A", PREV), ("Z", HIST)]


def test_oracle_update_order_only_counts_prefix(make_config):
    # the late update arrives after the measurement, so it cannot be used
    cfg = make_config(enrichment_attributes=("unit",))
    out = oracle([upd(1, 100, "A"), meas(300, 250), upd(400, 200, "B")], cfg)
    assert out.results[0].attributes == (("unit", "A", CUR),)


def test_oracle_dedups_redelivery_and_rejects_conflicts(make_config):
    cfg = make_config(enrichment_attributes=("unit",))
    out = oracle([upd(1, 1, "A"), upd(2, 1, "A"), meas(3, 5), meas(4, 5)], cfg)
    assert len(out.results) == 1
    with pytest.raises(OracleError):
        oracle([upd(1, 1, "A"), upd(2, 1, "B")], cfg)


def test_first_divergence_points_at_record(make_config):
    cfg = make_config(enrichment_attributes=("unit",))
    a = oracle([upd(1, 1, "A"), meas(2, 5, 0), meas(3, 6, 1)], cfg)
    b = JoinOutput(list(a.results), [])
    assert first_divergence(a, b) is None
    b.results[1] = b.results[1]._replace(value=9.0)
    div = first_divergence(a, b)
    assert (div.stream, div.index) == ("results", 1)
    assert "expected" in div.describe()


# -- metrics -----------------------------------------------------------------------


def test_nearest_rank_percentile():
    xs = np.arange(1, 101)
    assert percentile(xs, 50) == 50
    assert percentile(xs, 99) == 99
    assert percentile(xs, 100) == 100
    assert percentile(np.array([7]), 95) == 7
    assert np.isnan(percentile(np.array([]), 50))


def test_warmup_window():
    w = [[10, 30, 30], [10, 30, 3], [10, 30, 0], [10, 30, 0]]
    assert warmup_window(w) == 2
    assert warmup_window([[5, 0, 0]]) == 0
    assert warmup_window([[10, 30, 0], [10, 30, 5]]) is None


def test_steady_windows_drop_partial_edges():
    w = [[0, 0, 0], [3, 0, 0], [10, 0, 0], [11, 0, 0], [12, 0, 0], [2, 0, 0]]
    assert steady_windows(w, 0) == [10, 11, 12]
    assert steady_windows(w, 4) == [12]


@given(st.lists(st.integers(0, 5000), min_size=1, max_size=300), st.integers(1, 3))
def test_metrics_invariants(latencies, k):
    n = len(latencies)
    windows = [[n, n * k, 0]]
    prov = [n * k, 0, 0, 0]
    m = build_metrics(windows_per_partition=[windows], latencies=[np.array(latencies)],
                      provenance_per_partition=[prov], partitions=1,
                      attribute_names=[f"a{i}" for i in range(k)], seed=0, duration_s=1)
    assert m.p50_ms <= m.p95_ms <= m.p99_ms <= m.latency_max_ms
    assert m.latency_count == m.emitted == n
    assert sum(m.provenance.values()) == m.emitted * m.attributes


def test_tiny_inprocess_run_is_consistent(make_config):
    cfg = make_config(partitions=1, missing_policy="emit_flagged")
    trace = generate_trace(FleetConfig(devices=5, duration_s=20, seed=1))
    inject(trace.events, cfg)
    m = metrics_inprocess(cfg)
    assert m.emitted == len(trace.measurements()) == m.latency_count
    assert sum(m.provenance.values()) == m.emitted * 3
    assert m.p50_ms <= m.p95_ms <= m.p99_ms


def test_metrics_file_round_trip(tmp_path):
    m = RunMetrics(partitions=2, attributes=1, seed=3, duration_s=60, throughput=[(0, 5)], mean_tps=5.0)
    write_metrics(tmp_path / "m.jsonl", [m, m])
    text = (tmp_path / "m.jsonl").read_text()
    assert "NaN" not in text
    back = read_metrics([tmp_path / "m.jsonl"])
    assert len(back) == 2 and np.isnan(back[0].p99_ms)
    done = RunMetrics(partitions=2, attributes=1, seed=3, duration_s=60, p50_ms=1.0, p95_ms=2.0,
                      p99_ms=3.0, latency_max_ms=4.0)
    write_metrics(tmp_path / "n.jsonl", [done])
    assert read_metrics([tmp_path / "n.jsonl"]) == [done]
    (tmp_path / "bad.jsonl").write_text('{"partitions": 1}\n')
    with pytest.raises(ValueError):
        read_metrics([tmp_path / "bad.jsonl"])


# -- report ------------------------------------------------------------------------


def run(n, k, tps, r=0, load="max"):
    return RunMetrics(partitions=n, attributes=k, seed=0, duration_s=60, run=r, mean_tps=tps,
                      p50_ms=1.0, p95_ms=2.0, p99_ms=3.0, warmup_s=4.0, load=load)


def test_single_run_has_zero_stddev():
    (row,) = summarize([run(1, 1, 100.0)])
    assert row.std_tps == 0.0 and row.mean_tps == 100.0


def test_three_runs_average():
    (row,) = summarize([run(2, 1, 90.0, 0), run(2, 1, 100.0, 1), run(2, 1, 140.0, 2)])
    assert row.mean_tps == pytest.approx(110.0)
    assert row.std_tps == pytest.approx(26.4575, rel=1e-4)
    assert row.runs == 3


def test_csv_column_contract():
    text = to_csv(summarize([run(4, 2, 50.0), run(1, 1, 10.0)]))
    lines = text.splitlines()
    assert lines[0] == "partitions,attributes,mean_tps,std_tps,p50_ms,p95_ms,p99_ms,warmup_s"
    assert tuple(lines[0].split(",")) == COLUMNS
    assert lines[1].startswith("1,1,10.000,0.000,")
    assert lines[2].startswith("4,2,50.000,")


def test_mixed_loads_refused():
    with pytest.raises(ValueError):
        summarize([run(1, 1, 10.0, load="max"), run(1, 1, 5.0, load="0.5")])


# -- crash testing -----------------------------------------------------------------


def test_kill_points_cover_checkpoint_writes(make_config):
    cfg = make_config(partitions=2, checkpoint_interval_ms=0)
    trace = generate_trace(FleetConfig(devices=20, duration_s=60, seed=2))
    points = default_kill_points(trace.events, cfg)
    names = {p.point for p in points}
    assert len(points) >= 10
    assert {"checkpoint.partial", "checkpoint.written"} <= names


def test_crash_sweep_small(tmp_path, make_config):
    cfg = make_config(partitions=2, batch_size=64)
    trace = generate_trace(FleetConfig(devices=20, duration_s=60, seed=2, delay_sigma=2.0,
                                       late_commission_fraction=0.2))
    report = sweep(trace.events, cfg, tmp_path / "sweep")
    assert report.passed, report.summary()
    assert report.crashes >= 10
    assert any(t.replayed > 0 for t in report.trials)


def test_sigkill_trial(tmp_path, make_config):
    cfg = make_config(partitions=2, checkpoint_interval_ms=50, simulated_latency_ms=0.2)
    trace = generate_trace(FleetConfig(devices=100, duration_s=200, seed=6, delay_sigma=1.5))
    report = process_trials(trace.events, cfg, tmp_path / "proc", kill_after_s=0.3, runs=1)
    assert report.passed, report.summary()


# -- command line --------------------------------------------------------------------


def test_cli_generate_and_oracle_verify(tmp_path, capsys):
    trace = tmp_path / "t.trace"
    assert main(["generate", "-o", str(trace), "--devices", "10", "--duration", "30"]) == EXIT_OK
    assert trace.stat().st_size > 0
    out = tmp_path / "ref.jsonl"
    code = main(["oracle", "--trace", str(trace), "--workdir", str(tmp_path / "w"), "-p", "2",
                 "--verify", "-o", str(out)])
    assert code == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert {r["stream"] for r in rows} <= {"results", "dead_letters"}


def test_cli_report(tmp_path, capsys):
    path = tmp_path / "m.jsonl"
    write_metrics(path, [run(1, 1, 10.0), run(1, 1, 12.0, 1)])
    assert main(["report", str(path), "--csv", str(tmp_path / "out.csv")]) == EXIT_OK
    assert (tmp_path / "out.csv").read_text().startswith("partitions,attributes")
    assert main(["report", str(tmp_path / "missing.jsonl")]) == EXIT_ERROR


def test_cli_crashtest_sweep(tmp_path, capsys):
    code = main(["crashtest", "--mode", "sweep", "--devices", "10", "--duration", "40",
                 "--workdir", str(tmp_path), "-p", "2", "--simulated-latency-ms", "0"])
    assert code == EXIT_OK
    assert "crashtest: PASS" in capsys.readouterr().out


def test_cli_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--nope"])
    assert exc.value.code == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[engine]\nattributes = []\n")
    assert main(["oracle", "--config", str(bad), "--devices", "2", "--duration", "5"]) == EXIT_ERROR
    assert EXIT_FAIL not in (EXIT_OK, EXIT_ERROR)
