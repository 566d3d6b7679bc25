"""Deterministic numerical substrate: splittable RNG and stable reductions.

All solver math runs in float64. Randomness flows through :class:`Rng`
values, which wrap a counter-based (Philox) bit generator keyed on
``(seed, stream)``: the same value always reproduces the same draws, and
child streams derived with :meth:`Rng.child` are independent of thread
scheduling, so parallel batches stay reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Rng",
    "sample_gaussian",
    "logsumexp_weighted",
    "softmax_b_eps",
    "DegenerateInputError",
    "ARGMAX_TIE_TOL",
]

_MASK64 = (1 << 64) - 1

# Absolute tolerance for detecting score ties in the eps=0 argmax. Only
# exact float ties matter for correctness, so this is deliberately tight.
ARGMAX_TIE_TOL = 1e-12


class DegenerateInputError(ValueError):
    """Raised when a reduction is asked to operate on an empty support."""


def _mix64(a: int, b: int) -> int:
    """SplitMix64-style finalizer combining two 64-bit words."""
    x = (a * 0x9E3779B97F4A7C15 + b + 0x632BE59BD9B4E019) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


@dataclass(frozen=True)
class Rng:
    """Immutable handle on a (seed, stream) pair of a counter-based generator.

    ``Rng`` values are cheap to copy and split. Every consumer derives a
    fresh :class:`numpy.random.Generator` via :meth:`generator`, so two
    calls with the same ``Rng`` value see bit-identical sequences.
    """

    seed: int
    stream: int = 0

    def _key(self) -> int:
        return ((self.seed & _MASK64) << 64) | (self.stream & _MASK64)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        return np.random.Generator(np.random.Philox(key=self._key()))

    def child(self, index: int) -> "Rng":
        """Derive the ``index``-th child stream of this one."""
        return Rng(self.seed, _mix64(self.stream & _MASK64, index & _MASK64))

    def split(self, n: int) -> list["Rng"]:
        return [self.child(i) for i in range(n)]


def sample_gaussian(rng: Rng, n: int, d: int) -> np.ndarray:
    """Draw an ``n x d`` matrix of i.i.d. standard normal variates.

    Reproducible: the output is a pure function of ``(rng, n, d)``.
    """
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    return rng.generator().standard_normal((n, d), dtype=np.float64)


def logsumexp_weighted(z: np.ndarray, logw: np.ndarray) -> float:
    """Stable ``log sum_j exp(z_j + logw_j)`` with max-subtraction.

    ``logw`` entries may be ``-inf`` (zero weight). If every weight
    vanishes the support is empty and a :class:`DegenerateInputError` is
    raised; if the weighted terms all vanish through ``z`` while some
    weight is positive, ``-inf`` is returned.
    """
    z = np.asarray(z, dtype=np.float64)
    logw = np.asarray(logw, dtype=np.float64)
    if z.shape != logw.shape or z.ndim != 1 or z.size == 0:
        raise ValueError("z and logw must be equal-length non-empty vectors")
    if np.all(np.isneginf(logw)):
        raise DegenerateInputError("all weights vanish: empty support")
    with np.errstate(invalid="ignore"):
        t = z + logw
    m = np.max(t)
    if np.isneginf(m):
        return float("-inf")
    return float(m + np.log(np.sum(np.exp(t - m))))


def softmax_b_eps(z: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    """Weighted softmax over data indices; hard argmax split at ``eps=0``.

    For ``eps > 0`` returns ``b_j exp(z_j/eps)`` normalized (computed in
    the log domain). For ``eps = 0`` returns the ``b``-weighted uniform
    distribution over the argmax set of ``z``, with ties detected at
    absolute tolerance :data:`ARGMAX_TIE_TOL`.
    """
    z = np.asarray(z, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if eps == 0.0:
        mask = z >= np.max(z) - ARGMAX_TIE_TOL
        w = b * mask
        total = w.sum()
        if total <= 0.0:
            # Every argmax index carries zero target mass: degenerate by the
            # TargetMeasure contract (b > 0); split uniformly on the tie set.
            return mask / mask.sum()
        return w / total
    with np.errstate(divide="ignore"):
        t = z / eps + np.log(b)
    t -= np.max(t)
    out = np.exp(t)
    return out / out.sum()


def argmax_with_ties(scores: np.ndarray, tol: float = ARGMAX_TIE_TOL):
    """Row argmax plus the (usually empty) list of rows with score ties.

    Returns ``(idx, tie_rows, close)`` where ``close`` is the boolean
    within-``tol``-of-max mask (needed only for the tie rows).
    """
    idx = scores.argmax(axis=1)
    row_max = scores[np.arange(scores.shape[0]), idx]
    close = scores >= (row_max - tol)[:, None]
    tie_rows = np.flatnonzero(close.sum(axis=1) > 1)
    return idx, tie_rows, close


def _tie_row_weights(close_row: np.ndarray, b: np.ndarray) -> np.ndarray:
    w = b * close_row
    total = w.sum()
    if total <= 0.0:
        w = close_row.astype(np.float64)
        total = w.sum()
    return w / total


def softmax_b_eps_rows(scores: np.ndarray, b: np.ndarray, eps: float) -> np.ndarray:
    """Row-wise :func:`softmax_b_eps` for a ``(B, N)`` score matrix.

    The ``eps = 0`` branch fills one-hot rows sparsely and only densifies
    the rare tie rows, which keeps large solver batches cheap.
    """
    scores = np.asarray(scores, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if eps == 0.0:
        idx, tie_rows, close = argmax_with_ties(scores)
        out = np.zeros_like(scores)
        out[np.arange(scores.shape[0]), idx] = 1.0
        for i in tie_rows:
            out[i] = _tie_row_weights(close[i], b)
        return out
    with np.errstate(divide="ignore"):
        t = scores / eps + np.log(b)[None, :]
    t -= t.max(axis=1, keepdims=True)
    out = np.exp(t)
    out /= out.sum(axis=1, keepdims=True)
    return out


def eps0_column_stats(scores: np.ndarray, b: np.ndarray,
                      row_weights: np.ndarray | None = None):
    """Column sums and squared sums of eps=0 responsibility rows.

    Equivalent to summing ``softmax_b_eps_rows(scores, b, 0)`` and its
    square over rows (optionally row-weighted) without materializing the
    dense matrix.
    """
    n = scores.shape[1]
    idx, tie_rows, close = argmax_with_ties(scores)
    if row_weights is None:
        keep = np.ones(scores.shape[0], dtype=bool)
        keep[tie_rows] = False
        col_sum = np.bincount(idx[keep], minlength=n).astype(np.float64)
        col_sq = col_sum.copy()
        for i in tie_rows:
            w = _tie_row_weights(close[i], b)
            col_sum += w
            col_sq += w * w
        return col_sum, col_sq
    rw = np.asarray(row_weights, dtype=np.float64)
    keep = np.ones(scores.shape[0], dtype=bool)
    keep[tie_rows] = False
    col_sum = np.bincount(idx[keep], weights=rw[keep], minlength=n)
    col_sq = np.bincount(idx[keep], weights=rw[keep] ** 2, minlength=n)
    for i in tie_rows:
        w = _tie_row_weights(close[i], b)
        col_sum += rw[i] * w
        col_sq += (rw[i] * w) ** 2
    return col_sum, col_sq
