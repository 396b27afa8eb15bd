"""Command-line entry point: ``qctc <command> [flags]``.

Commands: gen, train, distill, eval, bench, error-prop, sweep-queries.

Settings resolve as command-line flag > ``--config`` JSON file > built-in
default; the seed default may be overridden through ``QCTC_SEED``. The
effective settings are echoed into every report.

Exit codes: 0 success, 2 usage error, 3 infeasible configuration,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

from qctc.bench import bench_latency, error_propagation, sweep_csv, sweep_queries
from qctc.decoding import BeamConfig
from qctc.errors import QCTCError, UsageError
from qctc.model import load_checkpoint, save_checkpoint
from qctc.tasks import TaskSpec, generate, load_dataset, save_dataset
from qctc.training import (
    TrainConfig,
    default_model_config,
    distill_targets,
    evaluate,
    train_student,
    train_teacher,
)

log = logging.getLogger("qctc")

DECODERS = {"ar": "autoregressive", "nar": "lqt_parallel", "nar-enc": "encoder_output_parallel"}

GEN_DEFAULTS = dict(task="copy", train=2000, val=0, test=200, n_symbols=10, min_len=2, max_len=6,
                    allow_repeats=False, max_jitter=2, k_refs=4, grid=16, n_labels=8, min_records=2,
                    max_records=3, n_queries=None)
MODEL_DEFAULTS = dict(d_model=64, heads=4, enc_layers=2, dec_layers=2, ffn_mult=4, n_queries=None)
TRAIN_DEFAULTS = dict(epochs=30, batch_size=32, lr=3e-4, weight_decay=0.0, grad_clip=1.0, loss="qctc")


def default_seed() -> int:
    env = os.environ.get("QCTC_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"QCTC_SEED must be an integer, got {env!r}") from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge flags over the config file over ``defaults`` for the given keys."""
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        file_cfg = {k.replace("-", "_"): v for k, v in file_cfg.items()}
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else file_cfg.get(key, default)
    out["seed"] = args.seed if args.seed is not None else file_cfg.get("seed", default_seed())
    return out


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _model_overrides(cfg: dict) -> dict:
    kw = dict(d_model=cfg["d_model"], n_heads=cfg["heads"], n_enc_layers=cfg["enc_layers"],
              n_dec_layers=cfg["dec_layers"], ffn_mult=cfg["ffn_mult"])
    if cfg.get("n_queries") is not None:
        kw["n_queries"] = cfg["n_queries"]
    return kw


def _train_config(cfg: dict, distill: bool = False) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       weight_decay=cfg["weight_decay"], grad_clip=cfg["grad_clip"], seed=cfg["seed"],
                       loss_kind=cfg["loss"], distill=distill)


# --- commands --------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = resolve(args, GEN_DEFAULTS)
    spec = TaskSpec(kind=cfg["task"], seed=cfg["seed"], n_train=cfg["train"], n_val=cfg["val"],
                    n_test=cfg["test"], n_symbols=cfg["n_symbols"], min_len=cfg["min_len"],
                    max_len=cfg["max_len"], allow_repeats=cfg["allow_repeats"], max_jitter=cfg["max_jitter"],
                    k_refs=cfg["k_refs"], grid=cfg["grid"], n_labels=cfg["n_labels"],
                    min_records=cfg["min_records"], max_records=cfg["max_records"], n_queries=cfg["n_queries"])
    out = args.out or f"data/{spec.kind}-s{spec.seed}"
    ds = generate(spec)
    save_dataset(ds, out, force=args.force)
    counts = {k: len(v) for k, v in ds.splits.items()}
    print(json.dumps({"out": str(out), "counts": counts, "config": asdict(spec)}))
    return 0


def cmd_train(args) -> int:
    cfg = resolve(args, {**MODEL_DEFAULTS, **TRAIN_DEFAULTS, "decoder": "nar"})
    ds = load_dataset(args.data)
    if args.distilled and not ds.distilled:
        raise UsageError(f"{args.data} holds raw targets; run `qctc distill` first")
    kind = DECODERS[cfg["decoder"]]
    overrides = _model_overrides(cfg)
    if kind == "autoregressive":
        overrides.pop("n_queries", None)
        model, report = train_teacher(ds, _train_config(cfg), default_model_config(ds, kind, **overrides))
    else:
        tc = _train_config(cfg, distill=args.distilled)
        model, report = train_student(ds, tc, default_model_config(ds, kind, **overrides))
    report.config = {**report.config, **cfg, "data": str(args.data), "model": model.config.to_dict()}
    ckpt = save_checkpoint(model, args.out)
    report_path = args.report or str(Path(args.out).with_suffix(".report.json"))
    _write(report_path, report.to_json())
    print(json.dumps({"checkpoint": str(ckpt), "report": report_path, "metrics": report.metrics}))
    return 0


def cmd_distill(args) -> int:
    teacher = load_checkpoint(args.teacher)
    ds = load_dataset(args.data)
    beam = BeamConfig(args.beam) if args.beam else None
    out = distill_targets(teacher, ds, beam)
    save_dataset(out, args.out, force=args.force)
    distinct_before = sum(len({tuple(r) for r in s.valid_refs}) for s in ds.splits["train"])
    print(json.dumps({"out": args.out, "train": len(out.splits["train"]), "fallbacks": out.distill_fallbacks,
                      "distinct_targets_before": distinct_before if ds.resample_targets else len(ds.splits["train"]),
                      "distinct_targets_after": len(out.splits["train"])}))
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    method = args.method
    if method == "prefix-beam" and not model.config.is_parallel:
        raise UsageError("prefix-beam decoding needs a parallel checkpoint")
    metrics = evaluate(model, ds, args.split, method, args.width)
    metrics["config"] = {"ckpt": args.ckpt, "data": args.data, "split": args.split, "method": method,
                         "width": args.width}
    _write(args.out, json.dumps(metrics, indent=1))
    return 0


def cmd_bench(args) -> int:
    ar = load_checkpoint(args.ar)
    nar = load_checkpoint(args.nar)
    seed = args.seed if args.seed is not None else default_seed()
    report = bench_latency(ar, nar, args.lengths, args.n, args.warmup, args.src_len, seed, args.threads)
    report.environment["config"] = {"ar": args.ar, "nar": args.nar, "lengths": args.lengths, "n": args.n,
                                    "warmup": args.warmup, "src_len": args.src_len, "seed": seed}
    _write(args.out, report.to_json())
    return 0


def cmd_error_prop(args) -> int:
    ar = load_checkpoint(args.ar)
    nar = load_checkpoint(args.nar)
    ds = load_dataset(args.data)
    report = error_propagation(ar, nar, ds, args.split, args.min_bin)
    _write(args.out, report.to_csv())
    if args.out:
        _write(args.out + ".config.json", json.dumps(vars(args), default=str, indent=1))
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve(args, {**MODEL_DEFAULTS, **TRAIN_DEFAULTS})
    ds = load_dataset(args.data)
    overrides = _model_overrides(cfg)
    overrides.pop("n_queries", None)
    rows = sweep_queries(ds, args.n_list, _train_config(cfg), args.n, args.warmup, args.threads, **overrides)
    _write(args.out, sweep_csv(rows))
    if args.out:
        _write(args.out + ".config.json", json.dumps({**cfg, "n_list": args.n_list, "data": args.data}, indent=1))
    return 0


# --- parser ----------------------------------------------------------------

def _model_flags(p):
    p.add_argument("--d-model", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--enc-layers", type=int)
    p.add_argument("--dec-layers", type=int)
    p.add_argument("--ffn-mult", type=int)


def _train_flags(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--loss", choices=["qctc", "ce"])
    p.add_argument("--seed", type=int, help="default: $QCTC_SEED or 0")
    p.add_argument("--config", help="JSON file of default settings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qctc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--task", choices=["copy", "grounding", "jitter", "multiref"])
    p.add_argument("--seed", type=int, help="default: $QCTC_SEED or 0")
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--n-symbols", type=int)
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--allow-repeats", action="store_true", default=None)
    p.add_argument("--max-jitter", type=int)
    p.add_argument("--k-refs", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--n-labels", type=int)
    p.add_argument("--min-records", type=int)
    p.add_argument("--max-records", type=int)
    p.add_argument("--n-queries", type=int, help="reject targets that cannot fit this many queries")
    p.add_argument("--config")
    p.add_argument("--out", help="output directory (default data/<task>-s<seed>)")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a teacher (ar) or student (nar, nar-enc)")
    p.add_argument("--data", required=True)
    p.add_argument("--decoder", choices=sorted(DECODERS))
    p.add_argument("--distilled", action="store_true", help="require distilled training targets")
    p.add_argument("--n-queries", type=int)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint manifest path (.json)")
    p.add_argument("--report", help="TrainReport JSON path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="replace training targets with teacher decodes")
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--beam", type=int, help="beam width (default: greedy)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="exact match and token accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--method", choices=["greedy", "prefix-beam", "ar-beam"], default="greedy")
    p.add_argument("--width", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="AR vs parallel decode latency")
    p.add_argument("--ar", required=True)
    p.add_argument("--nar", required=True)
    p.add_argument("--lengths", type=_int_list, default=[2, 5, 10, 20])
    p.add_argument("--n", type=int, default=200, help="timed decodes per length")
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--src-len", type=int, default=8)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("error-prop", help="first-token error propagation on grounding")
    p.add_argument("--ar", required=True)
    p.add_argument("--nar", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--min-bin", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_error_prop)

    p = sub.add_parser("sweep-queries", help="accuracy and latency against the number of queries")
    p.add_argument("--data", required=True)
    p.add_argument("--n-list", type=_int_list, required=True)
    _model_flags(p)
    _train_flags(p)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(getattr(args, "threads", 1)):
            return args.func(args)
    except QCTCError as exc:
        print(f"qctc {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
