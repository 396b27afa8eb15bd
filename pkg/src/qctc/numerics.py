"""Small-tensor math: stable log-space arithmetic, softmax, gradient checks, PRNG.

All values are float64. ``-inf`` is a legitimate log-probability (probability
zero) and propagates through :func:`log_sum_exp` without producing NaN.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from qctc.errors import NumericalError, UsageError

NEG_INF = -math.inf


def log_sum_exp(values: Iterable[float]) -> float:
    """Return ``log(sum(exp(v)))`` using a max shift.

    >>> log_sum_exp([0.0, 0.0])  # doctest: +ELLIPSIS
    0.6931471805599...
    """
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise UsageError("log_sum_exp of an empty list")
    m = arr.max()
    if m == NEG_INF:
        return NEG_INF
    return float(m + math.log(np.exp(arr - m).sum()))


def logsumexp_axis(a: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vectorised log-sum-exp along ``axis``; all ``-inf`` slices give ``-inf``."""
    m = np.max(a, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - safe), axis=axis, keepdims=True)) + safe
    return np.squeeze(out, axis=axis)


def softmax_row(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    """Softmax of a single finite vector."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise UsageError("softmax_row expects a non-empty 1-D vector")
    e = np.exp(x - x.max())
    return e / e.sum()


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    point: Sequence[float] | np.ndarray,
    step: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Compare the analytic gradient of ``f`` against central differences.

    ``f`` maps a flat parameter vector to ``(value, gradient)``. Only the
    coordinates listed in ``coords`` are perturbed (all of them by default),
    which keeps checks of large models affordable.

    Returns ``max_i |g_a - g_fd| / max(1, |g_a|, |g_fd|)``.
    """
    if step <= 0:
        raise UsageError("step must be positive")
    x = np.array(point, dtype=np.float64).ravel()
    _, analytic = f(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != x.shape:
        raise UsageError(f"gradient shape {analytic.shape} != point shape {x.shape}")
    idx = range(x.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        fp, _ = f(xp)
        fm, _ = f(xm)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"non-finite function value when perturbing coordinate {i}")
        fd = (fp - fm) / (2.0 * step)
        ga = analytic[i]
        worst = max(worst, abs(ga - fd) / max(1.0, abs(ga), abs(fd)))
    return worst


class Rng:
    """Seeded generator backed by numpy's PCG64 bit generator.

    PCG64 (O'Neill's permuted congruential generator, 128-bit state, XSL-RR
    output) produces the same stream on every platform for a given seed.
    ``child(key)`` derives an independent stream from ``(seed, key)`` so
    that, e.g., epoch ``k`` shuffling does not depend on how many draws
    earlier stages consumed.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise UsageError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._key = tuple(_key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self._key])))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self._key + tuple(int(k) for k in key))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        out = self._gen.integers(low, high, size=size)
        return int(out) if size is None else out

    def uniform(self, size=None):
        return self._gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
