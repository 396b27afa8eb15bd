import numpy as np
import pytest

from conftest import SMALL
from qctc.bench import (
    BenchReport,
    ErrorPropReport,
    ErrorPropRow,
    SweepRow,
    bench_latency,
    coordinate_errors,
    error_propagation,
    parse_sweep_csv,
    sweep_csv,
    sweep_queries,
)
from qctc.errors import UsageError
from qctc.model import Seq2Seq
from qctc.tasks import TaskSpec, box_tokens, generate
from qctc.training import TrainConfig, default_model_config

TINY = dict(d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1)


def pair(max_len=24):
    ds = generate(TaskSpec("copy", seed=1, n_train=20, n_test=5, max_len=12))
    ar = Seq2Seq(default_model_config(ds, "autoregressive", max_tgt_len=max_len, **TINY), seed=1)
    nar = Seq2Seq(default_model_config(ds, "lqt_parallel", n_queries=max_len, **TINY), seed=1)
    return ar, nar


def test_bench_pass_counts_and_report_round_trip():
    ar, nar = pair()
    r = bench_latency(ar, nar, lengths=(2, 5, 10, 20), n_timed=50, n_warmup=2)
    assert r.ar_passes == [3, 6, 11, 21]
    assert r.nar_passes == [1, 1, 1, 1]
    assert len(r.ar_mean_ms) == 4 and all(t > 0 for t in r.ar_mean_ms + r.nar_mean_ms)
    assert r.environment["threads"] == 1
    assert BenchReport.from_json(r.to_json()) == r


def test_bench_guards():
    ar, nar = pair()
    with pytest.raises(UsageError):
        bench_latency(ar, nar, n_timed=49)
    with pytest.raises(UsageError):
        bench_latency(nar, ar, n_timed=50)
    with pytest.raises(UsageError):
        bench_latency(ar, nar, lengths=(40,), n_timed=50)


def test_coordinate_errors():
    g = 16
    gold = box_tokens((1, 2, 5, 9), g)
    assert coordinate_errors(gold, gold, g) == [0, 0, 0, 0]
    assert coordinate_errors(box_tokens((4, 2, 5, 7), g), gold, g) == [3, 0, 0, 2]
    assert coordinate_errors(gold[:2], gold, g) == [0, 0, 15, 15]


def test_error_prop_bins_and_csv():
    ds = generate(TaskSpec("grounding", seed=0, n_train=10, n_test=40))
    ar = Seq2Seq(default_model_config(ds, "autoregressive", **TINY), seed=0)
    nar = Seq2Seq(default_model_config(ds, "lqt_parallel", n_queries=5, **TINY), seed=0)
    rep = error_propagation(ar, nar, ds, "test", min_bin_count=10)
    for name in ("ar", "nar"):
        rows = rep.curve(name, reliable_only=False)
        assert rows[0].threshold == 0 and rows[0].count == 40
        assert [r.threshold for r in rows] == list(range(len(rows)))
        assert all(a.count >= b.count for a, b in zip(rows, rows[1:]))
        assert all(r.reliable == (r.count >= 10) for r in rows)
        assert sum(r.bin_count for r in rows) == 40
        assert all(a.count - b.count == a.bin_count for a, b in zip(rows, rows[1:]))
    back = ErrorPropReport.from_csv(rep.to_csv())
    assert back.rows == rep.rows
    with pytest.raises(UsageError):
        error_propagation(ar, nar, generate(TaskSpec("copy", n_train=5, n_test=5)))


def test_sweep_csv_round_trip():
    rows = [SweepRow(3, False), SweepRow(6, True, 0.5, 0.75, 1.25)]
    assert parse_sweep_csv(sweep_csv(rows)) == rows


def test_sweep_marks_infeasible_counts():
    ds = generate(TaskSpec("copy", seed=0, n_train=64, n_test=16, max_len=4))
    rows = sweep_queries(ds, [3, 4], TrainConfig(epochs=1, lr=3e-3), n_timed=50, n_warmup=1, **TINY)
    assert [r.feasible for r in rows] == [False, True]
    assert rows[0].exact_match is None and rows[1].latency_ms > 0
