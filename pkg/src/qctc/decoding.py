"""Turning logits into token sequences.

Ties are always broken toward the lowest token id (and, between whole
sequences, the lexicographically smallest one).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from qctc.ctc import Vocab, collapse
from qctc.errors import UsageError
from qctc.model import EncoderOutput, Seq2Seq, pad_batch
from qctc.numerics import NEG_INF, log_softmax


@dataclass(frozen=True)
class BeamConfig:
    width: int = 5
    max_len: int = 32

    def __post_init__(self):
        if self.width < 1:
            raise UsageError("beam width must be >= 1")


@dataclass
class DecodeResult:
    sequence: list[int]
    score: float  # total log-probability of the returned hypothesis
    raw_path: list[int] | None = None
    passes: int = 1
    length: int = 0  # scored steps; for AR this counts EOS

    @property
    def normalized_score(self) -> float:
        return self.score / max(1, self.length)


# --- non-autoregressive ----------------------------------------------------

def nar_greedy(logits: np.ndarray, vocab: Vocab) -> DecodeResult:
    """Per-position argmax followed by the collapse rule."""
    logits = np.asarray(logits, dtype=np.float64)
    path = logits.argmax(axis=1)
    lp = log_softmax(logits)
    score = float(lp[np.arange(len(path)), path].sum())
    return DecodeResult(collapse(path, vocab), score, [int(t) for t in path], passes=1, length=len(path))


def _lae(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + float(np.log1p(np.exp(-abs(a - b))))


def nar_prefix_beam(logits: np.ndarray, vocab: Vocab, beam: BeamConfig) -> DecodeResult:
    """CTC prefix beam search ranking collapsed prefixes by their summed path mass.

    Each prefix tracks the log-mass of alignments ending in blank and in its
    last token. With a width no smaller than the number of reachable
    prefixes nothing is pruned and the result is the exact most probable
    collapsed sequence.
    """
    logits = np.asarray(logits, dtype=np.float64)
    lp = log_softmax(logits)
    blank = vocab.blank_id
    tokens = [c for c in range(lp.shape[1]) if c != blank]
    beams: dict[tuple, list[float]] = {(): [0.0, NEG_INF]}  # prefix -> [blank-ending, token-ending]
    for row in lp:
        nxt: dict[tuple, list[float]] = {}

        def acc(prefix, slot, value):
            if value == NEG_INF:
                return
            cell = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
            cell[slot] = _lae(cell[slot], value)

        for prefix, (pb, pnb) in beams.items():
            total = _lae(pb, pnb)
            acc(prefix, 0, total + row[blank])
            for c in tokens:
                if prefix and prefix[-1] == c:
                    acc(prefix, 1, pnb + row[c])
                    acc(prefix + (c,), 1, pb + row[c])
                else:
                    acc(prefix + (c,), 1, total + row[c])
        ranked = sorted(nxt.items(), key=lambda kv: (-_lae(*kv[1]), kv[0]))
        beams = dict(ranked[: beam.width])
    best, (pb, pnb) = min(beams.items(), key=lambda kv: (-_lae(*kv[1]), kv[0]))
    return DecodeResult(list(best), _lae(pb, pnb), None, passes=1, length=lp.shape[0])


def exhaustive_best(logits: np.ndarray, vocab: Vocab) -> tuple[list[int], float]:
    """Most probable collapsed sequence by enumerating every path (tiny grids only)."""
    import itertools

    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    N, d = lp.shape
    mass: dict[tuple, float] = {}
    for path in itertools.product(range(d), repeat=N):
        key = tuple(collapse(path, vocab))
        mass[key] = _lae(mass.get(key, NEG_INF), float(lp[np.arange(N), path].sum()))
    best = min(mass.items(), key=lambda kv: (-kv[1], kv[0]))
    return list(best[0]), best[1]


# --- autoregressive --------------------------------------------------------

def _ar_logprobs(model: Seq2Seq, logits: np.ndarray, n_emitted: int, min_len: int) -> np.ndarray:
    v = model.config.vocab_out
    logits = np.array(logits, dtype=np.float64)
    logits[..., v.blank_id] = NEG_INF
    logits[..., v.bos_id] = NEG_INF
    if n_emitted < min_len:
        logits[..., v.eos_id] = NEG_INF
    return log_softmax(logits)


def ar_greedy(model: Seq2Seq, enc: EncoderOutput, max_len: int, min_len: int = 0) -> DecodeResult:
    """Repeated argmax until EOS or ``max_len`` tokens (EOS included in the count).

    ``min_len`` suppresses EOS for that many steps; benchmarks use it to force
    a fixed output length.
    """
    v = model.config.vocab_out
    start = model.counters.passes
    prefix = [v.bos_id]
    score = 0.0
    while len(prefix) - 1 < max_len:
        lp = _ar_logprobs(model, model.decode_ar_step(enc, prefix), len(prefix) - 1, min_len)
        tok = int(lp.argmax())
        score += float(lp[tok])
        prefix.append(tok)
        if tok == v.eos_id:
            break
    emitted = prefix[1:]
    seq = emitted[:-1] if emitted and emitted[-1] == v.eos_id else emitted
    return DecodeResult(seq, score, None, model.counters.passes - start, len(emitted))


def ar_greedy_batch(model: Seq2Seq, srcs: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
    """Greedy decoding of many sources in lock-step; same tokens as :func:`ar_greedy`."""
    from qctc import autograd as ag
    from qctc.model import ar_decoder_forward, encoder_forward

    v = model.config.vocab_out
    cfg = model.config
    P = model.tensors()
    src, lens = pad_batch(srcs)
    with ag.no_grad():
        enc, mask = encoder_forward(P, cfg, src, lens)
        B = len(srcs)
        prefix = np.full((B, 1), v.bos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out: list[list[int]] = [[] for _ in range(B)]
        for _ in range(max_len):
            logits = ar_decoder_forward(P, cfg, enc, mask, prefix).data[:, -1, :]
            # one pass per still-running sequence, matching per-sequence ar_greedy
            model.counters.passes += int((~done).sum())
            lp = _ar_logprobs(model, logits, 1, 0)
            tok = lp.argmax(axis=1)
            for b in np.flatnonzero(~done):
                if tok[b] == v.eos_id:
                    done[b] = True
                else:
                    out[b].append(int(tok[b]))
            if done.all():
                break
            prefix = np.concatenate([prefix, tok[:, None]], axis=1)
    return out


def ar_beam(model: Seq2Seq, enc: EncoderOutput, beam: BeamConfig) -> DecodeResult:
    """Beam search over AR steps, ranking finished hypotheses by log-prob / length.

    Live hypotheses are ranked by cumulative log-probability; at each step the
    top ``width`` expansions are kept, and those ending in EOS leave the beam.
    Width 1 is exactly :func:`ar_greedy`.
    """
    v = model.config.vocab_out
    start = model.counters.passes
    live: list[tuple[tuple[int, ...], float]] = [((v.bos_id,), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    step = 0
    while live:
        step += 1
        lp = _ar_logprobs(model, model.ar_logits(enc, [p for p, _ in live]), step - 1, 0)
        cands = []
        for (p, s), row in zip(live, lp):
            top = np.argsort(-row, kind="stable")[: beam.width]
            cands.extend((s + float(row[t]), p + (int(t),)) for t in top)
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for s, p in cands[: beam.width]:
            if p[-1] == v.eos_id or step >= beam.max_len:
                finished.append((p, s))
            else:
                live.append((p, s))

    def key(item):
        p, s = item
        return (-s / (len(p) - 1), p)

    best, score = min(finished, key=key)
    emitted = list(best[1:])
    seq = emitted[:-1] if emitted[-1] == v.eos_id else emitted
    return DecodeResult(seq, score, None, model.counters.passes - start, len(emitted))
