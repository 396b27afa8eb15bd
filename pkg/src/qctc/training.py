"""Training loops for the autoregressive teacher and the parallel student.

The student's logits feed the Q-CTC (or padded CE) loss; its gradient is
pushed back through the decoder, the learnable query tokens and the encoder
in a single reverse sweep.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from qctc import autograd as ag
from qctc.ctc import ce_loss_batch, min_path_length, qctc_loss_batch
from qctc.decoding import BeamConfig, ar_beam, ar_greedy_batch, nar_greedy, nar_prefix_beam
from qctc.errors import InfeasibleAlignmentError, NumericalError, UsageError
from qctc.model import (
    ModelConfig,
    Seq2Seq,
    ar_decoder_forward,
    encoder_forward,
    pad_batch,
    parallel_decoder_forward,
)
from qctc.numerics import Rng, log_softmax
from qctc.tasks import Dataset, Sample, check_feasible, with_targets

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-4
    adam_betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    loss_kind: str = "qctc"
    distill: bool = False
    eval_split: str = "test"

    def __post_init__(self):
        if self.lr <= 0:
            raise UsageError("lr must be positive")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.loss_kind not in ("qctc", "ce"):
            raise UsageError("loss_kind must be 'qctc' or 'ce'")
        self.adam_betas = tuple(self.adam_betas)


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0  # measurement, excluded from determinism checks
    decoder_passes: int = 0
    steps: int = 0
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TrainReport":
        return cls(**json.loads(text))


class Adam:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, betas=(0.9, 0.98),
                 weight_decay: float = 0.0, grad_clip: float = 0.0, eps: float = 1e-8):
        self.lr, self.betas, self.wd, self.clip, self.eps = lr, betas, weight_decay, grad_clip, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise NumericalError("non-finite gradient norm")
        factor = self.clip / norm if self.clip > 0 and norm > self.clip else 1.0
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, g in grads.items():
            g = g * factor
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.wd:
                update = update + self.wd * params[k]
            params[k] = params[k] - self.lr * update
        return norm


# --- losses ----------------------------------------------------------------

def student_loss(model: Seq2Seq, P, srcs: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
                 loss_kind: str = "qctc") -> ag.Tensor:
    """Mean per-example loss of a parallel decoder, as a differentiable scalar."""
    cfg = model.config
    src, lens = pad_batch(srcs)
    enc, mask = encoder_forward(P, cfg, src, lens)
    logits = parallel_decoder_forward(P, cfg, enc, mask)
    fn = qctc_loss_batch if loss_kind == "qctc" else ce_loss_batch
    B = len(srcs)
    if cfg.decoder_kind == "lqt_parallel":
        losses, grad = fn(logits.data, list(targets), cfg.vocab_out)
    else:
        # one grid row per source token: score each example on its own rows
        losses = np.zeros(B)
        grad = np.zeros_like(logits.data)
        for n in np.unique(lens):
            idx = np.flatnonzero(lens == n)
            sub_l, sub_g = fn(logits.data[idx, :n], [targets[i] for i in idx], cfg.vocab_out)
            losses[idx] = sub_l
            grad[idx, :n] = sub_g
    grad = grad / B
    return ag.custom(np.array(losses.mean()), (logits,), lambda g: (g * grad,))


def teacher_loss(model: Seq2Seq, P, srcs: Sequence[Sequence[int]], targets: Sequence[Sequence[int]]) -> ag.Tensor:
    """Teacher-forced next-token cross-entropy: per-example token mean, batch mean."""
    cfg = model.config
    v = cfg.vocab_out
    src, lens = pad_batch(srcs)
    enc, mask = encoder_forward(P, cfg, src, lens)
    B = len(targets)
    T = max(len(y) for y in targets) + 1
    tgt_in = np.zeros((B, T), dtype=np.int64)
    tgt_out = np.zeros((B, T), dtype=np.int64)
    weight = np.zeros((B, T))
    for b, y in enumerate(targets):
        tgt_in[b, : len(y) + 1] = [v.bos_id] + list(y)
        tgt_out[b, : len(y) + 1] = list(y) + [v.eos_id]
        weight[b, : len(y) + 1] = 1.0 / (len(y) + 1)
    logits = ar_decoder_forward(P, cfg, enc, mask, tgt_in)
    lp = log_softmax(logits.data)
    picked = np.take_along_axis(lp, tgt_out[:, :, None], axis=2)[:, :, 0]
    loss = -(picked * weight).sum() / B
    grad = np.exp(lp)
    np.put_along_axis(grad, tgt_out[:, :, None], np.take_along_axis(grad, tgt_out[:, :, None], axis=2) - 1.0, axis=2)
    grad *= (weight / B)[:, :, None]
    return ag.custom(np.array(loss), (logits,), lambda g: (g * grad,))


def loss_and_grads(model: Seq2Seq, srcs, targets, loss_kind: str = "qctc") -> tuple[float, dict[str, np.ndarray]]:
    P = model.tensors(requires_grad=True)
    if model.config.decoder_kind == "autoregressive":
        loss = teacher_loss(model, P, srcs, targets)
    else:
        loss = student_loss(model, P, srcs, targets, loss_kind)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return float(loss.data), grads


def flatten(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.values()])


def unflatten(vec: np.ndarray, like: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for k, v in like.items():
        out[k] = vec[i : i + v.size].reshape(v.shape)
        i += v.size
    return out


# --- loops -----------------------------------------------------------------

def default_model_config(ds: Dataset, kind: str, **overrides) -> ModelConfig:
    """A model sized for ``ds``: vocabularies and length limits taken from the data."""
    vocab_out = ds.vocab_out.with_bos_eos() if kind == "autoregressive" else ds.vocab_out
    kw = dict(vocab_in=ds.vocab_in, vocab_out=vocab_out, decoder_kind=kind,
              max_src_len=max(ds.max_src_len(), 1), max_tgt_len=max(ds.max_tgt_len(), 1) + 1,
              n_queries=max(2 * ds.max_min_path_length(), 1))
    kw.update(overrides)
    return ModelConfig(**kw)


def _epoch_targets(ds: Dataset, samples: list[Sample], rng: Rng) -> list[list[int]]:
    if not ds.resample_targets:
        return [s.target for s in samples]
    picks = rng.integers(0, 1 << 30, size=len(samples))
    return [s.valid_refs[int(p) % len(s.valid_refs)] for s, p in zip(samples, picks)]


def _fit(model: Seq2Seq, ds: Dataset, cfg: TrainConfig, loss_kind: str, eval_fn) -> TrainReport:
    train = ds.splits["train"]
    if not train:
        raise UsageError("dataset has no training samples")
    rng = Rng(cfg.seed)
    opt = Adam(model.params, cfg.lr, cfg.adam_betas, cfg.weight_decay, cfg.grad_clip)
    report = TrainReport(config=asdict(cfg))
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        erng = rng.child(epoch)
        order = erng.permutation(len(train))
        targets = _epoch_targets(ds, train, erng.child(1))
        total = 0.0
        for start in range(0, len(train), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(model, [train[i].input for i in idx], [targets[i] for i in idx], loss_kind)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {report.steps}")
            opt.step(model.params, grads)
            report.steps += 1
            total += loss * len(idx)
        report.epoch_losses.append(total / len(train))
        log.debug("epoch %d loss %.5f", epoch, report.epoch_losses[-1])
    report.wall_clock_s = time.perf_counter() - t0
    if eval_fn is not None and ds.splits.get(cfg.eval_split):
        report.metrics = eval_fn(model, ds, cfg.eval_split)
    report.decoder_passes = model.counters.passes
    return report


def train_teacher(ds: Dataset, train_cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                  init_seed: int | None = None) -> tuple[Seq2Seq, TrainReport]:
    """Teacher-forced training of an autoregressive model."""
    model_cfg = model_cfg or default_model_config(ds, "autoregressive")
    if model_cfg.decoder_kind != "autoregressive":
        raise UsageError("train_teacher needs an autoregressive model config")
    model = Seq2Seq(model_cfg, seed=train_cfg.seed if init_seed is None else init_seed)
    report = _fit(model, ds, train_cfg, "ce", evaluate)
    return model, report


def train_student(ds: Dataset, train_cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                  init_seed: int | None = None) -> tuple[Seq2Seq, TrainReport]:
    """Train a parallel decoder with Q-CTC (or the padded CE baseline)."""
    model_cfg = model_cfg or default_model_config(ds, "lqt_parallel")
    if not model_cfg.is_parallel:
        raise UsageError("train_student needs a parallel decoder config")
    if train_cfg.distill and not ds.distilled:
        raise UsageError("distill requested but the dataset targets were not distilled")
    if model_cfg.decoder_kind == "lqt_parallel":
        check_feasible(ds.splits["train"], model_cfg.n_queries)
    else:
        for i, smp in enumerate(ds.splits["train"]):
            need = max(min_path_length(r) for r in smp.valid_refs + [smp.target])
            if need > len(smp.input):
                raise InfeasibleAlignmentError(
                    f"sample #{i} needs {need} positions but its source has {len(smp.input)}",
                    sample_index=i, required=need, available=len(smp.input),
                )
    model = Seq2Seq(model_cfg, seed=train_cfg.seed if init_seed is None else init_seed)
    report = _fit(model, ds, train_cfg, train_cfg.loss_kind, evaluate)
    return model, report


def distill_targets(teacher: Seq2Seq, ds: Dataset, beam: BeamConfig | None = None,
                    batch_size: int = 256) -> Dataset:
    """Replace every training target with the teacher's decode of its input.

    Greedy by default; pass ``beam`` to use beam search. Empty teacher outputs
    keep the original target and are counted in ``distill_fallbacks``.
    """
    if teacher.config.decoder_kind != "autoregressive":
        raise UsageError("the distillation teacher must be autoregressive")
    train = ds.splits["train"]
    max_len = teacher.config.max_tgt_len
    if beam is None:
        outs = []
        for start in range(0, len(train), batch_size):
            outs += ar_greedy_batch(teacher, [s.input for s in train[start : start + batch_size]], max_len)
    else:
        outs = [ar_beam(teacher, teacher.encode(s.input), BeamConfig(beam.width, max_len)).sequence for s in train]
    fallbacks = 0
    targets = []
    for smp, out in zip(train, outs):
        if not out:
            fallbacks += 1
            targets.append(list(smp.target))
        else:
            targets.append(out)
    return with_targets(ds, "train", targets, fallbacks)


# --- evaluation ------------------------------------------------------------

def predict(model: Seq2Seq, srcs: Sequence[Sequence[int]], method: str = "greedy", width: int = 5,
            batch_size: int = 256) -> list[list[int]]:
    """Decode many sources. ``method`` is ``greedy``, ``prefix-beam`` or ``ar-beam``."""
    cfg = model.config
    preds: list[list[int]] = []
    if cfg.decoder_kind == "autoregressive":
        if method == "greedy":
            for start in range(0, len(srcs), batch_size):
                preds += ar_greedy_batch(model, srcs[start : start + batch_size], cfg.max_tgt_len)
        elif method == "ar-beam":
            beam = BeamConfig(width, cfg.max_tgt_len)
            preds = [ar_beam(model, model.encode(s), beam).sequence for s in srcs]
        else:
            raise UsageError(f"decode method {method!r} does not apply to an autoregressive model")
        return preds
    if method not in ("greedy", "prefix-beam"):
        raise UsageError(f"decode method {method!r} does not apply to a parallel model")
    P = model.tensors()
    for start in range(0, len(srcs), batch_size):
        chunk = srcs[start : start + batch_size]
        src, lens = pad_batch(chunk)
        with ag.no_grad():
            enc, mask = encoder_forward(P, cfg, src, lens)
            grids = parallel_decoder_forward(P, cfg, enc, mask).data
        model.counters.passes += len(chunk)
        for b, grid in enumerate(grids):
            if cfg.decoder_kind == "encoder_output_parallel":
                grid = grid[: lens[b]]
            if method == "greedy":
                preds.append(nar_greedy(grid, cfg.vocab_out).sequence)
            else:
                preds.append(nar_prefix_beam(grid, cfg.vocab_out, BeamConfig(width)).sequence)
    return preds


def token_accuracy(pred: Sequence[int], ref: Sequence[int]) -> float:
    n = max(len(pred), len(ref))
    if n == 0:
        return 1.0
    return sum(1 for a, b in zip(pred, ref) if a == b) / n


def evaluate(model: Seq2Seq, ds: Dataset, split: str = "test", method: str = "greedy", width: int = 5) -> dict:
    """Exact match (any reference, filler stripped) and mean per-token accuracy."""
    samples = ds.splits.get(split, [])
    if not samples:
        raise UsageError(f"split {split!r} is empty")
    if model.config.vocab_out.size - (2 if model.config.decoder_kind == "autoregressive" else 0) != ds.vocab_out.size:
        raise UsageError("model output vocabulary does not match the dataset")
    start_passes = model.counters.passes
    preds = predict(model, [s.input for s in samples], method, width)
    exact = 0
    tok = 0.0
    for p, s in zip(preds, samples):
        exact += ds.is_correct(p, s)
        np_ = ds.normalize(p)
        tok += max(token_accuracy(np_, ds.normalize(r)) for r in s.valid_refs)
    n = len(samples)
    return {
        "split": split,
        "method": method,
        "width": width if method != "greedy" else 1,
        "n": n,
        "exact_match": exact / n,
        "token_accuracy": tok / n,
        "decoder_passes": model.counters.passes - start_passes,
        "passes_per_sequence": (model.counters.passes - start_passes) / n,
    }
