"""Collapse rule, alignment enumeration and the Q-CTC / CE losses.

A length-``N`` grid of logits is scored against a shorter, blank-free target
by summing the probability of every alignment path that collapses onto it.
The sum is evaluated with the usual forward-backward recursion over the
blank-interleaved target ``[-, y1, -, y2, ..., yT, -]`` in log space.
``enumerate_valid_paths`` is the brute-force counterpart used as an oracle.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from qctc.errors import InfeasibleAlignmentError, UsageError
from qctc.numerics import NEG_INF, log_softmax, logsumexp_axis, softmax

BLANK_ID = 0
DEFAULT_ENUMERATION_CAP = 10**7


@dataclass(frozen=True)
class Vocab:
    """Token inventory. Id 0 is always the blank (or padding, for inputs)."""

    size: int
    names: tuple[str, ...] | None = None
    bos_id: int | None = None
    eos_id: int | None = None
    blank_id: int = field(default=BLANK_ID)

    def __post_init__(self):
        if self.size < 2:
            raise UsageError("vocabulary needs at least 2 entries")
        if self.blank_id != BLANK_ID:
            raise UsageError("blank_id is fixed to 0")
        if self.names is not None:
            if len(self.names) != self.size:
                raise UsageError("names must have one entry per token")
            if len(set(self.names)) != len(self.names):
                raise UsageError("vocabulary names must be unique")
        for special in (self.bos_id, self.eos_id):
            if special is not None and not 0 < special < self.size:
                raise UsageError("special token id out of range")

    @classmethod
    def from_names(cls, names: Sequence[str], **kw) -> "Vocab":
        return cls(size=len(names), names=tuple(names), **kw)

    def with_bos_eos(self) -> "Vocab":
        """Extend with BOS and EOS, as needed by the autoregressive decoder."""
        names = None if self.names is None else self.names + ("<bos>", "<eos>")
        return Vocab(self.size + 2, names, bos_id=self.size, eos_id=self.size + 1)

    def token(self, name: str) -> int:
        if self.names is None:
            raise UsageError("vocabulary has no names")
        return self.names.index(name)

    def render(self, ids: Sequence[int]) -> list[str]:
        if self.names is None:
            return [str(i) for i in ids]
        return [self.names[i] for i in ids]

    def to_dict(self) -> dict:
        return {"size": self.size, "names": list(self.names) if self.names else None,
                "bos_id": self.bos_id, "eos_id": self.eos_id, "blank_id": self.blank_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        names = tuple(d["names"]) if d.get("names") else None
        return cls(d["size"], names, d.get("bos_id"), d.get("eos_id"), d.get("blank_id", BLANK_ID))


def collapse(path: Sequence[int], vocab: Vocab | None = None) -> list[int]:
    """Merge runs of identical tokens, then drop blanks.

    A blank between two equal tokens keeps them apart:
    ``collapse([x, x, -, x]) == [x, x]``.
    """
    blank = BLANK_ID if vocab is None else vocab.blank_id
    out = []
    prev = None
    for tok in path:
        tok = int(tok)
        if tok != prev and tok != blank:
            out.append(tok)
        prev = tok
    return out


def min_path_length(target: Sequence[int]) -> int:
    """Fewest positions that can emit ``target``: one per token plus a blank per repeat."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def check_target(target: Sequence[int], vocab: Vocab) -> None:
    for t in target:
        if not 0 <= t < vocab.size:
            raise UsageError(f"token id {t} outside vocabulary of size {vocab.size}")
        if t == vocab.blank_id:
            raise UsageError("target sequences may not contain the blank token")


def enumerate_valid_paths(
    target: Sequence[int], n_positions: int, vocab: Vocab, cap: int = DEFAULT_ENUMERATION_CAP
) -> list[tuple[int, ...]]:
    """All length-``n_positions`` paths collapsing to ``target``, by brute force."""
    if n_positions < 1:
        raise UsageError("n_positions must be >= 1")
    if vocab.size**n_positions > cap:
        raise UsageError(
            f"{vocab.size}^{n_positions} candidate paths exceeds the enumeration cap {cap}; "
            "use qctc_loss (dynamic programming) instead"
        )
    target = [int(t) for t in target]
    if min_path_length(target) > n_positions:
        return []
    return [p for p in itertools.product(range(vocab.size), repeat=n_positions)
            if collapse(p, vocab) == target]


def enumeration_loss(logits: np.ndarray, target: Sequence[int], vocab: Vocab) -> float:
    """``-log`` of the summed probability of all valid paths, by enumeration."""
    logits = np.asarray(logits, dtype=np.float64)
    lp = log_softmax(logits)
    paths = enumerate_valid_paths(target, logits.shape[0], vocab)
    if not paths:
        return np.inf
    rows = np.arange(logits.shape[0])
    scores = np.array([lp[rows, list(p)].sum() for p in paths])
    return float(-logsumexp_axis(scores, axis=0))


def _extended(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def qctc_loss_batch(
    logits: np.ndarray, targets: Sequence[Sequence[int]], vocab: Vocab
) -> tuple[np.ndarray, np.ndarray]:
    """Per-example Q-CTC loss and its gradient w.r.t. ``logits``.

    ``logits`` has shape ``(B, N, d)``. Returns ``(loss (B,), grad (B, N, d))``
    where ``grad[b] = softmax(logits[b]) - posterior token occupancy``.
    Raises :class:`InfeasibleAlignmentError` naming the first target that
    needs more than ``N`` positions.
    """
    logits = np.asarray(logits, dtype=np.float64)
    B, N, d = logits.shape
    if len(targets) != B:
        raise UsageError("one target per batch row required")
    blank = vocab.blank_id
    for b, y in enumerate(targets):
        check_target(y, vocab)
        need = min_path_length(y)
        if need > N:
            raise InfeasibleAlignmentError(
                f"target #{b} needs {need} positions but only {N} are available",
                sample_index=b, required=need, available=N,
            )

    S = 2 * max(len(y) for y in targets) + 1
    ext = np.full((B, S), blank, dtype=np.int64)
    valid = np.zeros((B, S), dtype=bool)
    skip = np.zeros((B, S), dtype=bool)  # transition s-2 -> s allowed
    last = np.zeros(B, dtype=np.int64)
    for b, y in enumerate(targets):
        e = _extended(y, blank)
        ext[b, : e.size] = e
        valid[b, : e.size] = True
        last[b] = e.size - 1
        if e.size >= 3:
            s = np.arange(2, e.size)
            skip[b, 2 : e.size] = (e[s] != blank) & (e[s] != e[s - 2])

    lp = log_softmax(logits)
    # emission log-probs for each extended state; padded states are impossible
    em = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, N, S)), axis=2)
    em = np.where(valid[:, None, :], em, NEG_INF)
    skip_pen = np.where(skip, 0.0, NEG_INF)

    alpha = np.full((B, N, S), NEG_INF)
    alpha[:, 0, 0] = em[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = em[:, 0, 1]
    for t in range(1, N):
        prev = alpha[:, t - 1]
        s1 = np.full((B, S), NEG_INF)
        s1[:, 1:] = prev[:, :-1]
        s2 = np.full((B, S), NEG_INF)
        s2[:, 2:] = prev[:, :-2]
        s2 = s2 + skip_pen
        alpha[:, t] = logsumexp_axis(np.stack([prev, s1, s2]), axis=0) + em[:, t]

    beta = np.full((B, N, S), NEG_INF)
    rows = np.arange(B)
    beta[rows, N - 1, last] = 0.0
    has_prev = last >= 1
    beta[rows[has_prev], N - 1, last[has_prev] - 1] = 0.0
    for t in range(N - 2, -1, -1):
        nxt = beta[:, t + 1] + em[:, t + 1]
        n1 = np.full((B, S), NEG_INF)
        n1[:, :-1] = nxt[:, 1:]
        n2 = np.full((B, S), NEG_INF)
        n2[:, :-2] = nxt[:, 2:] + skip_pen[:, 2:]
        beta[:, t] = logsumexp_axis(np.stack([nxt, n1, n2]), axis=0)

    loglik = logsumexp_axis(alpha[:, 0] + beta[:, 0], axis=1)
    post = np.exp(alpha + beta - loglik[:, None, None])
    onehot = np.zeros((B, S, d))
    onehot[rows[:, None], np.arange(S)[None, :], ext] = valid
    gamma = post @ onehot
    grad = softmax(logits) - gamma
    return -loglik, grad


def qctc_loss(logits: np.ndarray, target: Sequence[int], vocab: Vocab) -> tuple[float, np.ndarray]:
    """Q-CTC loss of one ``(N, d)`` logit grid against a blank-free target."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise UsageError("logits must be an (N, d) grid")
    if logits.shape[1] != vocab.size:
        raise UsageError("logit width does not match the vocabulary")
    loss, grad = qctc_loss_batch(logits[None], [list(target)], vocab)
    return float(loss[0]), grad[0]


def pad_targets(targets: Sequence[Sequence[int]], n_positions: int, blank: int = BLANK_ID) -> np.ndarray:
    out = np.full((len(targets), n_positions), blank, dtype=np.int64)
    for b, y in enumerate(targets):
        if len(y) > n_positions:
            raise UsageError(f"target #{b} of length {len(y)} exceeds {n_positions} positions")
        out[b, : len(y)] = y
    return out


def ce_loss_batch(
    logits: np.ndarray, targets: Sequence[Sequence[int]], vocab: Vocab
) -> tuple[np.ndarray, np.ndarray]:
    """Position-wise cross-entropy with the target left-aligned and blank-padded.

    Returns the per-example mean over positions and its gradient.
    """
    logits = np.asarray(logits, dtype=np.float64)
    B, N, _ = logits.shape
    for y in targets:
        check_target(y, vocab)
    tgt = pad_targets(targets, N, vocab.blank_id)
    lp = log_softmax(logits)
    picked = np.take_along_axis(lp, tgt[:, :, None], axis=2)[:, :, 0]
    loss = -picked.mean(axis=1)
    grad = np.exp(lp)
    np.put_along_axis(grad, tgt[:, :, None], np.take_along_axis(grad, tgt[:, :, None], axis=2) - 1.0, axis=2)
    return loss, grad / N


def ce_loss(logits: np.ndarray, target: Sequence[int], vocab: Vocab) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    loss, grad = ce_loss_batch(logits[None], [list(target)], vocab)
    return float(loss[0]), grad[0]
