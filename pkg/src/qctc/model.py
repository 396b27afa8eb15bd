"""Pre-norm transformer encoder with three decoder variants.

``autoregressive``
    causal decoder over ``[BOS, y1, ..., yt]``; one pass per emitted token.
``lqt_parallel``
    a fixed sequence of ``n_queries`` learnable query tokens attends
    bidirectionally to itself and to the encoder; one pass per sequence.
    A learned ``(N, N)`` table is added to every self-attention score matrix
    (shared by all heads and layers) to give the queries absolute order.
``encoder_output_parallel``
    same bidirectional decoder, but fed the encoder states themselves, so the
    output grid has one row per source token.

Forward functions work on batches of autograd tensors; the per-sequence
methods on :class:`Seq2Seq` wrap them for inference.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from qctc import autograd as ag
from qctc.autograd import Tensor
from qctc.ctc import Vocab
from qctc.errors import UsageError
from qctc.numerics import Rng

DECODER_KINDS = ("autoregressive", "lqt_parallel", "encoder_output_parallel")
MASK_VALUE = -1e30
INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_in: Vocab
    vocab_out: Vocab
    decoder_kind: str = "lqt_parallel"
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_mult: int = 4
    n_queries: int = 16
    max_src_len: int = 32
    max_tgt_len: int = 32

    def __post_init__(self):
        if self.decoder_kind not in DECODER_KINDS:
            raise UsageError(f"decoder_kind must be one of {DECODER_KINDS}")
        if self.d_model % self.n_heads:
            raise UsageError("d_model must be divisible by n_heads")
        if self.decoder_kind == "lqt_parallel" and self.n_queries < 1:
            raise UsageError("n_queries must be >= 1")
        if self.decoder_kind == "autoregressive" and (
            self.vocab_out.bos_id is None or self.vocab_out.eos_id is None
        ):
            raise UsageError("autoregressive decoder needs an output vocabulary with BOS/EOS")

    @property
    def is_parallel(self) -> bool:
        return self.decoder_kind != "autoregressive"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["vocab_in"] = self.vocab_in.to_dict()
        d["vocab_out"] = self.vocab_out.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vocab_in"] = Vocab.from_dict(d["vocab_in"])
        d["vocab_out"] = Vocab.from_dict(d["vocab_out"])
        return cls(**d)


@dataclass
class EncoderOutput:
    states: np.ndarray  # (L, D)

    @property
    def src_len(self) -> int:
        return self.states.shape[0]


@dataclass
class DecoderCounters:
    """Instrumentation: decoder forward passes and matmul FLOPs spent in them."""

    passes: int = 0
    flops: int = 0

    def reset(self):
        self.passes = 0
        self.flops = 0


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = Rng(seed)
    D = config.d_model
    F = D * config.ffn_mult
    p: dict[str, np.ndarray] = {}

    def w(name, shape):
        p[name] = rng.normal(shape, INIT_STD)

    def zeros(name, shape):
        p[name] = np.zeros(shape)

    def ln(prefix):
        p[prefix + ".g"] = np.ones(D)
        zeros(prefix + ".b", D)

    def attn(prefix):
        for m in "qkvo":
            w(f"{prefix}.w{m}", (D, D))
            zeros(f"{prefix}.b{m}", D)

    def ffn(prefix):
        w(prefix + ".w1", (D, F))
        zeros(prefix + ".b1", F)
        w(prefix + ".w2", (F, D))
        zeros(prefix + ".b2", D)

    w("enc.tok_emb", (config.vocab_in.size, D))
    w("enc.pos_emb", (config.max_src_len, D))
    for i in range(config.n_enc_layers):
        ln(f"enc.{i}.ln1")
        attn(f"enc.{i}.self")
        ln(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    ln("enc.ln_f")

    kind = config.decoder_kind
    if kind == "autoregressive":
        w("dec.tok_emb", (config.vocab_out.size, D))
        w("dec.pos_emb", (config.max_tgt_len + 1, D))
    elif kind == "lqt_parallel":
        w("dec.query_tokens", (config.n_queries, D))
        zeros("dec.query_pos_bias", (config.n_queries, config.n_queries))
    else:
        zeros("dec.query_pos_bias", (config.max_src_len, config.max_src_len))
    for i in range(config.n_dec_layers):
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    ln("dec.ln_f")
    w("dec.out.w", (D, config.vocab_out.size))
    zeros("dec.out.b", config.vocab_out.size)
    return p


def _linear(x: Tensor, P, prefix: str, m: str) -> Tensor:
    return ag.add(ag.matmul(x, P[f"{prefix}.w{m}"]), P[f"{prefix}.b{m}"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, n, D = x.shape
    return ag.transpose(ag.reshape(x, (B, n, n_heads, D // n_heads)), (0, 2, 1, 3))


def attention(P, prefix: str, xq: Tensor, xkv: Tensor, n_heads: int,
              mask: np.ndarray | None = None, bias: Tensor | None = None) -> Tensor:
    """Multi-head attention. ``mask`` is additive and broadcasts to (B, H, n, m)."""
    B, n, D = xq.shape
    dh = D // n_heads
    q = _split_heads(_linear(xq, P, prefix, "q"), n_heads)
    k = _split_heads(_linear(xkv, P, prefix, "k"), n_heads)
    v = _split_heads(_linear(xkv, P, prefix, "v"), n_heads)
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = ag.add(scores, bias)
    if mask is not None:
        scores = ag.add(scores, mask)
    probs = ag.softmax_last(scores)
    out = ag.reshape(ag.transpose(ag.matmul(probs, v), (0, 2, 1, 3)), (B, n, D))
    return _linear(out, P, prefix, "o")


def _ln(P, prefix: str, x: Tensor) -> Tensor:
    return ag.layer_norm(x, P[prefix + ".g"], P[prefix + ".b"])


def _ffn(P, prefix: str, x: Tensor) -> Tensor:
    h = ag.relu(ag.add(ag.matmul(x, P[prefix + ".w1"]), P[prefix + ".b1"]))
    return ag.add(ag.matmul(h, P[prefix + ".w2"]), P[prefix + ".b2"])


def key_padding_mask(lengths: Sequence[int], width: int) -> np.ndarray:
    """Additive mask of shape (B, 1, 1, width) hiding positions >= length."""
    lengths = np.asarray(lengths)
    pad = np.arange(width)[None, :] >= lengths[:, None]
    return np.where(pad, MASK_VALUE, 0.0)[:, None, None, :]


def causal_mask(n: int) -> np.ndarray:
    return np.where(np.triu(np.ones((n, n), dtype=bool), k=1), MASK_VALUE, 0.0)


def encoder_forward(P, cfg: ModelConfig, src: np.ndarray, src_len: Sequence[int]) -> tuple[Tensor, np.ndarray]:
    """Encode a padded (B, L) batch; returns states (B, L, D) and the key mask."""
    B, L = src.shape
    if L > cfg.max_src_len:
        raise UsageError(f"source length {L} exceeds max_src_len {cfg.max_src_len}")
    mask = key_padding_mask(src_len, L)
    x = ag.add(ag.embedding(P["enc.tok_emb"], src), ag.embedding(P["enc.pos_emb"], np.arange(L)))
    for i in range(cfg.n_enc_layers):
        h = _ln(P, f"enc.{i}.ln1", x)
        x = ag.add(x, attention(P, f"enc.{i}.self", h, h, cfg.n_heads, mask))
        x = ag.add(x, _ffn(P, f"enc.{i}.ffn", _ln(P, f"enc.{i}.ln2", x)))
    return _ln(P, "enc.ln_f", x), mask


def _decoder_stack(P, cfg: ModelConfig, x: Tensor, enc: Tensor, enc_mask: np.ndarray,
                   self_mask: np.ndarray | None, bias: Tensor | None) -> Tensor:
    for i in range(cfg.n_dec_layers):
        h = _ln(P, f"dec.{i}.ln1", x)
        x = ag.add(x, attention(P, f"dec.{i}.self", h, h, cfg.n_heads, self_mask, bias))
        h = _ln(P, f"dec.{i}.ln2", x)
        x = ag.add(x, attention(P, f"dec.{i}.cross", h, enc, cfg.n_heads, enc_mask))
        x = ag.add(x, _ffn(P, f"dec.{i}.ffn", _ln(P, f"dec.{i}.ln3", x)))
    x = _ln(P, "dec.ln_f", x)
    return ag.add(ag.matmul(x, P["dec.out.w"]), P["dec.out.b"])


def parallel_decoder_forward(P, cfg: ModelConfig, enc: Tensor, enc_mask: np.ndarray) -> Tensor:
    """Logits (B, R, d): R = n_queries (LQT) or the padded source length."""
    B, L, _ = enc.shape
    if cfg.decoder_kind == "lqt_parallel":
        x = ag.add(np.zeros((B, 1, 1)), P["dec.query_tokens"])
        bias = P["dec.query_pos_bias"]
        return _decoder_stack(P, cfg, x, enc, enc_mask, None, bias)
    if cfg.decoder_kind == "encoder_output_parallel":
        bias = ag.custom(
            P["dec.query_pos_bias"].data[:L, :L],
            (P["dec.query_pos_bias"],),
            lambda g: (np.pad(g.reshape(-1, L, L).sum(axis=0), ((0, cfg.max_src_len - L),) * 2),),
        )
        return _decoder_stack(P, cfg, enc, enc, enc_mask, enc_mask, bias)
    raise UsageError("parallel decoding requires a parallel decoder kind")


def ar_decoder_forward(P, cfg: ModelConfig, enc: Tensor, enc_mask: np.ndarray, tgt_in: np.ndarray) -> Tensor:
    """Teacher-forced logits (B, T, d) for inputs ``[BOS, y1, ...]`` under a causal mask."""
    if cfg.decoder_kind != "autoregressive":
        raise UsageError("autoregressive decoding requires an autoregressive model")
    T = tgt_in.shape[1]
    if T > cfg.max_tgt_len + 1:
        raise UsageError(f"prefix length {T} exceeds max_tgt_len + 1")
    x = ag.add(ag.embedding(P["dec.tok_emb"], tgt_in), ag.embedding(P["dec.pos_emb"], np.arange(T)))
    return _decoder_stack(P, cfg, x, enc, enc_mask, causal_mask(T), None)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(1, lengths.max(initial=0))), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


class Seq2Seq:
    """Configuration, parameters and decoder instrumentation for one model."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        self.counters = DecoderCounters()

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad) for k, v in self.params.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def _check_kind(self, kind: str):
        if self.config.decoder_kind != kind:
            raise UsageError(f"operation needs a {kind} model, this one is {self.config.decoder_kind}")

    def encode(self, src: Sequence[int]) -> EncoderOutput:
        src = list(src)
        if not 1 <= len(src) <= self.config.max_src_len:
            raise UsageError(f"source length {len(src)} outside [1, {self.config.max_src_len}]")
        with ag.no_grad():
            states, _ = encoder_forward(self.tensors(), self.config, np.array([src]), [len(src)])
        return EncoderOutput(states.data[0])

    def encode_batch(self, srcs: Sequence[Sequence[int]]) -> list[EncoderOutput]:
        src, lens = pad_batch(srcs)
        with ag.no_grad():
            states, _ = encoder_forward(self.tensors(), self.config, src, lens)
        return [EncoderOutput(states.data[i, :n]) for i, n in enumerate(lens)]

    def _parallel(self, enc: EncoderOutput) -> np.ndarray:
        with ag.no_grad(), ag.FlopCounter() as fc:
            logits = parallel_decoder_forward(
                self.tensors(), self.config, Tensor(enc.states[None]), key_padding_mask([enc.src_len], enc.src_len)
            )
        self.counters.passes += 1
        self.counters.flops += fc.flops
        return logits.data[0]

    def decode_parallel(self, enc: EncoderOutput) -> np.ndarray:
        """One decoder pass over the learnable queries: an (N, d) logit grid."""
        self._check_kind("lqt_parallel")
        return self._parallel(enc)

    def decode_parallel_encoder_input(self, enc: EncoderOutput) -> np.ndarray:
        """One decoder pass fed with the encoder states: an (L, d) logit grid."""
        self._check_kind("encoder_output_parallel")
        return self._parallel(enc)

    def decode_grid(self, enc: EncoderOutput) -> np.ndarray:
        if self.config.decoder_kind == "lqt_parallel":
            return self.decode_parallel(enc)
        return self.decode_parallel_encoder_input(enc)

    def ar_logits(self, enc: EncoderOutput, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """Next-token logits (K, d) for K equal-length prefixes in one decoder pass."""
        self._check_kind("autoregressive")
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim != 2 or prefixes.shape[1] < 1:
            raise UsageError("prefixes must be a non-empty (K, t) array")
        if np.any(prefixes[:, 0] != self.config.vocab_out.bos_id):
            raise UsageError("prefix must begin with BOS")
        K = prefixes.shape[0]
        states = np.broadcast_to(enc.states[None], (K,) + enc.states.shape)
        with ag.no_grad(), ag.FlopCounter() as fc:
            logits = ar_decoder_forward(
                self.tensors(), self.config, Tensor(states), key_padding_mask([enc.src_len] * K, enc.src_len), prefixes
            )
        self.counters.passes += 1
        self.counters.flops += fc.flops
        return logits.data[:, -1, :]

    def decode_ar_step(self, enc: EncoderOutput, prefix: Sequence[int]) -> np.ndarray:
        return self.ar_logits(enc, [list(prefix)])[0]


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_FORMAT = "qctc-checkpoint/1"


def save_checkpoint(model: Seq2Seq, path: str | Path) -> Path:
    """Write ``path`` (JSON manifest) and ``path.with_suffix('.bin')`` (float64 LE blob)."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    offset = 0
    chunks = []
    for name, arr in model.params.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "blob": blob_path.name,
        "tensors": entries,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_checkpoint(path: str | Path) -> Seq2Seq:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise UsageError(f"{path} is not a {CHECKPOINT_FORMAT} manifest")
    blob = (path.parent / manifest["blob"]).read_bytes()
    params = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return Seq2Seq(ModelConfig.from_dict(manifest["config"]), params)
