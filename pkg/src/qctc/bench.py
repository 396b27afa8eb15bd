"""Latency benchmark, query-count sweep and error-propagation analysis.

Wall-clock numbers are measurements and are labelled as such in every
report; everything else is deterministic given the inputs and seed.
"""

from __future__ import annotations

import csv
import io
import json
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from qctc.decoding import ar_greedy, nar_greedy
from qctc.errors import UsageError
from qctc.model import Seq2Seq
from qctc.numerics import Rng
from qctc.tasks import Dataset, coordinate_value
from qctc.training import TrainConfig, default_model_config, evaluate, predict, train_student

MIN_TIMED_DECODES = 50
DEFAULT_LENGTHS = (2, 5, 10, 20)


def limit_threads(n: int = 1):
    """Context manager pinning BLAS/OpenMP pools to ``n`` threads."""
    from threadpoolctl import threadpool_limits

    return threadpool_limits(n)


def _slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    return float(np.polyfit(np.asarray(xs, float), np.asarray(ys, float), 1)[0])


@dataclass
class BenchReport:
    lengths: list[int]
    ar_mean_ms: list[float]  # measurement
    nar_mean_ms: list[float]  # measurement
    ar_passes: list[float]
    nar_passes: list[float]
    speedup: list[float]  # measurement
    ar_slope_ms_per_token: float  # measurement
    nar_slope_ms_per_token: float  # measurement
    slope_ratio: float  # measurement
    n_timed: int
    n_warmup: int
    environment: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        return cls(**json.loads(text))


def bench_latency(ar: Seq2Seq, nar: Seq2Seq, lengths: Sequence[int] = DEFAULT_LENGTHS, n_timed: int = 200,
                  n_warmup: int = 10, src_len: int = 8, seed: int = 0, threads: int = 1) -> BenchReport:
    """Mean single-sequence decode time of an AR and a parallel model per output length.

    The AR model is forced to emit exactly ``T`` tokens plus EOS; the parallel
    model always runs one pass. Encoding happens outside the timed region.
    Lengths and models are interleaved per sample so drift affects all cells
    alike; the first ``n_warmup`` samples are discarded.
    """
    if n_timed < MIN_TIMED_DECODES:
        raise UsageError(f"refusing to average fewer than {MIN_TIMED_DECODES} timed decodes")
    if ar.config.decoder_kind != "autoregressive" or not nar.config.is_parallel:
        raise UsageError("bench needs one autoregressive and one parallel checkpoint")
    lengths = [int(t) for t in lengths]
    if max(lengths) > ar.config.max_tgt_len:
        raise UsageError(f"AR checkpoint supports outputs up to {ar.config.max_tgt_len} tokens")
    src_len = min(src_len, ar.config.max_src_len, nar.config.max_src_len)
    rng = Rng(seed)
    n_in = min(ar.config.vocab_in.size, nar.config.vocab_in.size)
    ar_t = np.zeros((len(lengths), n_timed))
    nar_t = np.zeros((len(lengths), n_timed))
    ar_p = np.zeros(len(lengths))
    nar_p = np.zeros(len(lengths))
    clock = time.perf_counter
    with limit_threads(threads):
        for i in range(n_warmup + n_timed):
            src = [int(t) for t in rng.integers(1, n_in, size=src_len)]
            enc_ar = ar.encode(src)
            enc_nar = nar.encode(src)
            for j, T in enumerate(lengths):
                t0 = clock()
                r_ar = ar_greedy(ar, enc_ar, max_len=T + 1, min_len=T)
                t1 = clock()
                grid = nar.decode_grid(enc_nar)
                nar_greedy(grid, nar.config.vocab_out)
                t2 = clock()
                if i >= n_warmup:
                    ar_t[j, i - n_warmup] = t1 - t0
                    nar_t[j, i - n_warmup] = t2 - t1
                    ar_p[j] += r_ar.passes
                    nar_p[j] += 1
    ar_ms = (ar_t.mean(axis=1) * 1e3).tolist()
    nar_ms = (nar_t.mean(axis=1) * 1e3).tolist()
    ar_slope = _slope(lengths, ar_ms)
    nar_slope = _slope(lengths, nar_ms)
    return BenchReport(
        lengths=lengths,
        ar_mean_ms=ar_ms,
        nar_mean_ms=nar_ms,
        ar_passes=(ar_p / n_timed).tolist(),
        nar_passes=(nar_p / n_timed).tolist(),
        speedup=[a / b for a, b in zip(ar_ms, nar_ms)],
        ar_slope_ms_per_token=ar_slope,
        nar_slope_ms_per_token=nar_slope,
        slope_ratio=nar_slope / ar_slope if ar_slope else float("inf"),
        n_timed=n_timed,
        n_warmup=n_warmup,
        environment=environment_note(threads),
    )


def environment_note(threads: int) -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": os.cpu_count(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": threads,
        "timing": "decoder only, encoder excluded; mean after warm-up discard",
    }


# --- error propagation -----------------------------------------------------

@dataclass
class ErrorPropRow:
    model: str
    threshold: int
    count: int  # samples with first-token error >= threshold; the mean runs over these
    bin_count: int  # samples with first-token error == threshold
    mean_remaining_error: float
    reliable: bool


@dataclass
class ErrorPropReport:
    rows: list[ErrorPropRow]
    min_bin_count: int = 10

    def curve(self, model: str, reliable_only: bool = True) -> list[ErrorPropRow]:
        return [r for r in self.rows if r.model == model and (r.reliable or not reliable_only)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "threshold", "count", "bin_count", "mean_remaining_error", "reliable"])
        for r in self.rows:
            w.writerow([r.model, r.threshold, r.count, r.bin_count, repr(r.mean_remaining_error), int(r.reliable)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, min_bin_count: int = 10) -> "ErrorPropReport":
        rows = [
            ErrorPropRow(d["model"], int(d["threshold"]), int(d["count"]), int(d["bin_count"]),
                         float(d["mean_remaining_error"]),
                         bool(int(d["reliable"])))
            for d in csv.DictReader(io.StringIO(text))
        ]
        return cls(rows, min_bin_count)


def coordinate_errors(pred: Sequence[int], gold: Sequence[int], grid: int) -> list[int]:
    """Absolute per-coordinate error of a 4-token box; a missing token costs ``grid - 1``."""
    out = []
    for i, g in enumerate(gold):
        if i < len(pred):
            out.append(abs(coordinate_value(pred[i], grid) - coordinate_value(g, grid)))
        else:
            out.append(grid - 1)
    return out


def error_propagation(ar: Seq2Seq, nar: Seq2Seq, ds: Dataset, split: str = "test",
                      min_bin_count: int = 10) -> ErrorPropReport:
    """Remaining-token error as a function of first-token error, for both decoders.

    For threshold ``k`` the curve value is the mean error over ``y1, x2, y2``
    of all samples whose ``x1`` error is at least ``k``. Thresholds whose mean
    rests on fewer than ``min_bin_count`` samples are kept but marked unreliable.
    """
    if ds.spec.kind != "grounding":
        raise UsageError("error propagation is defined on the grounding task")
    samples = ds.splits.get(split) or []
    if not samples:
        raise UsageError(f"split {split!r} is empty")
    rows = []
    for name, model in (("ar", ar), ("nar", nar)):
        preds = predict(model, [s.input for s in samples])
        first = np.empty(len(samples), dtype=np.int64)
        rest = np.empty(len(samples))
        for i, (p, s) in enumerate(zip(preds, samples)):
            errs = coordinate_errors(p, s.target, ds.spec.grid)
            first[i] = errs[0]
            rest[i] = np.mean(errs[1:])
        for k in range(0, int(first.max()) + 1):
            sel = first >= k
            n = int(sel.sum())
            rows.append(ErrorPropRow(name, k, n, int((first == k).sum()), float(rest[sel].mean()) if n else float("nan"),
                                     n >= min_bin_count))
    return ErrorPropReport(rows, min_bin_count)


# --- query-count sweep -----------------------------------------------------

@dataclass
class SweepRow:
    n_queries: int
    feasible: bool
    exact_match: float | None = None
    token_accuracy: float | None = None
    latency_ms: float | None = None  # measurement


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_queries", "feasible", "exact_match", "token_accuracy", "latency_ms"])
    for r in rows:
        w.writerow([r.n_queries, int(r.feasible)] + ["" if v is None else repr(v)
                                                      for v in (r.exact_match, r.token_accuracy, r.latency_ms)])
    return buf.getvalue()


def parse_sweep_csv(text: str) -> list[SweepRow]:
    def num(v):
        return None if v == "" else float(v)

    return [SweepRow(int(d["n_queries"]), bool(int(d["feasible"])), num(d["exact_match"]),
                     num(d["token_accuracy"]), num(d["latency_ms"]))
            for d in csv.DictReader(io.StringIO(text))]


def sweep_queries(ds: Dataset, n_list: Sequence[int], train_cfg: TrainConfig, n_timed: int = 200,
                  n_warmup: int = 10, threads: int = 1, **model_overrides) -> list[SweepRow]:
    """Train and evaluate one parallel model per query count; time their decodes.

    Counts below the dataset's minimum alignment length are reported as
    infeasible rows without training. Decodes of all trained models are
    timed round-robin on the same test inputs.
    """
    if n_timed < MIN_TIMED_DECODES:
        raise UsageError(f"refusing to average fewer than {MIN_TIMED_DECODES} timed decodes")
    need = ds.max_min_path_length()
    rows: list[SweepRow] = []
    models: dict[int, Seq2Seq] = {}
    for n in n_list:
        if n < need:
            rows.append(SweepRow(int(n), False))
            continue
        cfg = default_model_config(ds, "lqt_parallel", n_queries=int(n), **model_overrides)
        model, _ = train_student(ds, train_cfg, cfg)
        m = evaluate(model, ds, train_cfg.eval_split)
        rows.append(SweepRow(int(n), True, m["exact_match"], m["token_accuracy"]))
        models[int(n)] = model
    if models:
        srcs = [s.input for s in ds.splits[train_cfg.eval_split]]
        times = {n: [] for n in models}
        with limit_threads(threads):
            for i in range(n_warmup + n_timed):
                src = srcs[i % len(srcs)]
                for n, model in models.items():
                    enc = model.encode(src)
                    t0 = time.perf_counter()
                    nar_greedy(model.decode_parallel(enc), model.config.vocab_out)
                    dt = time.perf_counter() - t0
                    if i >= n_warmup:
                        times[n].append(dt)
        for r in rows:
            if r.feasible:
                r.latency_ms = float(np.mean(times[r.n_queries]) * 1e3)
    return rows
