"""Brute-force reference implementations, written independently of the package."""

import itertools
import math

import numpy as np


def collapse_ref(path, blank=0):
    merged = [k for k, _ in itertools.groupby(path)]
    return [t for t in merged if t != blank]


def log_probs_ref(logits):
    out = []
    for row in np.asarray(logits, dtype=float):
        m = max(row)
        z = m + math.log(sum(math.exp(v - m) for v in row))
        out.append([v - z for v in row])
    return out


def ctc_nll_ref(logits, target, blank=0):
    """-log of the summed probability of every length-N path collapsing to ``target``."""
    lp = log_probs_ref(logits)
    n, d = len(lp), len(lp[0])
    total = 0.0
    for path in itertools.product(range(d), repeat=n):
        if collapse_ref(path, blank) == list(target):
            total += math.exp(sum(lp[i][c] for i, c in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def best_collapsed_ref(logits, blank=0):
    """Collapsed sequence with the largest total path mass; ties to the smaller sequence."""
    lp = log_probs_ref(logits)
    n, d = len(lp), len(lp[0])
    mass = {}
    for path in itertools.product(range(d), repeat=n):
        key = tuple(collapse_ref(path, blank))
        mass[key] = mass.get(key, 0.0) + math.exp(sum(lp[i][c] for i, c in enumerate(path)))
    return min(mass.items(), key=lambda kv: (-kv[1], kv[0]))


def central_diff(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def ctc_nll_vectorized(logits, target, blank=0):
    """Same quantity as :func:`ctc_nll_ref`, enumerating all d^N paths as one array."""
    logits = np.asarray(logits, dtype=float)
    n, d = logits.shape
    lp = logits - logits.max(axis=1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
    paths = np.stack(np.unravel_index(np.arange(d**n), (d,) * n), axis=1)
    prev = np.concatenate([np.full((paths.shape[0], 1), -1), paths[:, :-1]], axis=1)
    keep = (paths != blank) & (paths != prev)
    slot = np.cumsum(keep, axis=1) - 1
    t = np.asarray(list(target) + [-1], dtype=int)
    ok = keep.sum(axis=1) == len(target)
    ok &= np.all(~keep | (paths == t[np.clip(slot, 0, len(t) - 1)]), axis=1)
    if not ok.any():
        return math.inf
    scores = lp[np.arange(n), paths[ok]].sum(axis=1)
    m = scores.max()
    return -(m + math.log(np.exp(scores - m).sum()))
