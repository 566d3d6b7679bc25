"""Semidiscrete OT kernel: soft-c transform, responsibilities, chi-square.

The target is a finite measure ``sum_j b_j delta_{y_j}``. A potential
vector ``g`` in R^N induces, for every noise point ``x``, a probability
vector of responsibilities

    s_{eps,g}(x) = softmax_b_eps([g_j - c(x, y_j)]_j)

and through it a coupling whose first marginal is the noise law by
construction. The semidual objective

    F_eps(g) = E_x[ f_{g,eps}(x) ] + <b, g>

is concave in ``g``, with gradient ``b - m(g)`` where ``m(g)`` is the
second marginal of the induced coupling. Convergence is tracked through
the chi-square divergence ``chi2(m(g) || b)``, which admits an unbiased
O(NB) batch estimator; all of that machinery lives here.

Every expectation over the noise law has two routes: Monte-Carlo batches
(production) and exact summation over a finite weighted atom list
(:class:`DiscreteNoise`), the backbone of the oracle test suite.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .costs import ConfigurationError, CostConfig, cost_matrix
from .numerics import (
    Rng,
    eps0_column_stats,
    logsumexp_weighted,
    softmax_b_eps,
    softmax_b_eps_rows,
)

__all__ = [
    "TargetMeasure",
    "Potential",
    "MarginalEstimate",
    "GaussianNoise",
    "DiscreteNoise",
    "gauge_fix",
    "coupling_scores",
    "soft_c_transform",
    "responsibilities",
    "responsibilities_rows",
    "semidual_value",
    "stochastic_gradient",
    "marginal_estimate",
    "marginal_exact",
    "chi2_exact",
    "chi2_estimator",
    "transport_cost",
    "transport_cost_estimate",
    "PRODUCTION_CHI2_BATCH",
    "PRODUCTION_CHI2_TOTAL",
]

# Production convergence checks use 2^20 noise samples in batches of 2^13.
PRODUCTION_CHI2_BATCH = 2**13
PRODUCTION_CHI2_TOTAL = 2**20


def _fingerprint(*arrays: Optional[np.ndarray]) -> str:
    h = hashlib.sha256()
    for a in arrays:
        if a is None:
            h.update(b"\x00none")
        else:
            a = np.ascontiguousarray(a)
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class TargetMeasure:
    """Discrete target: support points (in coupling space) plus weights.

    ``points`` are stored after any PCA projection, so kernel evaluations
    never re-project them; ``conditions`` ride along unprojected.
    """

    points: np.ndarray  # (N, d)
    weights: np.ndarray  # (N,), strictly positive, sums to 1
    conditions: Optional[np.ndarray] = None  # (N, p)
    fingerprint: str = ""

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        weights = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)
        if self.conditions is not None:
            cond = np.atleast_2d(np.asarray(self.conditions, dtype=np.float64))
            object.__setattr__(self, "conditions", cond)
            if cond.shape[0] != points.shape[0]:
                raise ValueError("conditions must have one row per point")
        if weights.shape != (points.shape[0],):
            raise ValueError("weights must have one entry per point")
        if np.any(weights <= 0.0):
            raise ValueError("all target weights must be strictly positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("target weights must sum to 1")
        if not self.fingerprint:
            object.__setattr__(
                self, "fingerprint", _fingerprint(points, weights, self.conditions)
            )

    @classmethod
    def from_points(cls, points, weights=None, conditions=None) -> "TargetMeasure":
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = points.shape[0]
        if weights is None:
            weights = np.full(n, 1.0 / n)
        else:
            weights = np.asarray(weights, dtype=np.float64)
            weights = weights / weights.sum()
        return cls(points=points, weights=weights, conditions=conditions)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)


@dataclass
class Potential:
    """Dual vector ``g`` bound to its target, cost, and solver provenance.

    Gauge convention: ``<b, g> = 0`` (the additive constant of the dual
    is unidentifiable), applied by :func:`gauge_fix`.
    """

    g: np.ndarray
    target: TargetMeasure
    cost: CostConfig
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=np.float64)
        if self.g.shape != (self.target.n,):
            raise ValueError("potential length must match the target size")
        if not np.all(np.isfinite(self.g)):
            raise ValueError("potential entries must be finite")

    @property
    def eps(self) -> float:
        return self.cost.eps

    @property
    def target_fingerprint(self) -> str:
        return self.target.fingerprint


def gauge_fix(g: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shift ``g`` so that ``<b, g> = 0``."""
    g = np.asarray(g, dtype=np.float64)
    return g - float(np.dot(b, g))


@dataclass(frozen=True)
class MarginalEstimate:
    """Monte-Carlo estimate of the second marginal ``m(g)``."""

    m: np.ndarray
    samples: int
    std_error: float  # proxy: max_j sqrt(m_j (1 - m_j) / samples)

    def __post_init__(self):
        if abs(self.m.sum() - 1.0) > 1e-10:
            raise ValueError("marginal estimate must sum to 1")


# ---------------------------------------------------------------------------
# Noise sources

class GaussianNoise:
    """Standard normal noise in raw space, mapped into coupling space.

    When the cost carries a projection, samples are drawn in the raw
    ``d_in``-dimensional space and projected, matching how fresh noise is
    treated at pairing time. With ``beta > 0`` each sample also carries a
    condition drawn from the target's condition marginal.
    """

    exact = False

    def __init__(self, target: TargetMeasure, cost: CostConfig):
        self.target = target
        self.cost = cost
        proj = cost.projection
        self.raw_dim = proj.d_in if proj is not None else target.dim
        if cost.beta > 0.0 and target.conditions is None:
            raise ConfigurationError("beta > 0 requires a conditional target")

    def sample(self, rng: Rng, n: int):
        gen = rng.generator()
        x = gen.standard_normal((n, self.raw_dim))
        if self.cost.projection is not None:
            x = self.cost.projection.apply(x)
        z = None
        if self.cost.beta > 0.0:
            idx = gen.choice(self.target.n, size=n, p=self.target.weights)
            z = self.target.conditions[idx]
        return x, z

    def enumerate(self):
        return None


class DiscreteNoise:
    """Finite weighted atom list in coupling space: exact expectations.

    ``exact=True`` makes solver batches the full weighted list (every
    gradient is the exact one); ``exact=False`` samples atoms i.i.d. by
    weight, preserving the stochastic behaviour on a finite instance.
    """

    def __init__(self, atoms, weights=None, conditions=None, exact: bool = False):
        self.atoms = np.atleast_2d(np.asarray(atoms, dtype=np.float64))
        m = self.atoms.shape[0]
        if weights is None:
            self.weights = np.full(m, 1.0 / m)
        else:
            self.weights = np.asarray(weights, dtype=np.float64)
            self.weights = self.weights / self.weights.sum()
        self.conditions = None
        if conditions is not None:
            self.conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
        self.exact = bool(exact)

    def sample(self, rng: Rng, n: int):
        idx = rng.generator().choice(self.atoms.shape[0], size=n, p=self.weights)
        z = self.conditions[idx] if self.conditions is not None else None
        return self.atoms[idx], z

    def enumerate(self):
        return self.atoms, self.weights, self.conditions


# ---------------------------------------------------------------------------
# Kernel evaluations (inputs live in coupling space)

def coupling_scores(pot: Potential, x: np.ndarray,
                    z: Optional[np.ndarray] = None) -> np.ndarray:
    """Score matrix ``g_j - c(x_i, y_j)`` for coupling-space noise rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    zt = pot.target.conditions if pot.cost.beta > 0.0 else None
    if pot.cost.beta > 0.0 and z is None:
        raise ConfigurationError("conditional cost requires noise conditions")
    if pot.cost.kind == "neg-dot" and pot.cost.beta == 0.0:
        # Fused hot path: one matmul plus an in-place shift.
        scores = x @ pot.target.points.T
        scores += pot.g
        return scores
    c = cost_matrix(pot.cost, x, pot.target.points, z, zt, project=False)
    return pot.g[None, :] - c


def soft_c_transform(pot: Potential, x: np.ndarray,
                     z: Optional[np.ndarray] = None) -> float:
    """Soft-c transform ``f_{g,eps}(x)`` of a single coupling-space point.

    ``eps > 0``: ``-eps log sum_j b_j exp((g_j - c(x, y_j))/eps)``;
    ``eps = 0``: ``-max_j (g_j - c(x, y_j))``.
    """
    scores = coupling_scores(pot, x, None if z is None else np.atleast_2d(z))[0]
    eps = pot.eps
    if eps == 0.0:
        return float(-np.max(scores))
    return -eps * logsumexp_weighted(scores / eps, pot.target.log_weights)


def soft_c_transform_rows(pot: Potential, x: np.ndarray,
                          z: Optional[np.ndarray] = None) -> np.ndarray:
    """Vectorized :func:`soft_c_transform` over rows of ``x``."""
    scores = coupling_scores(pot, x, z)
    eps = pot.eps
    if eps == 0.0:
        return -scores.max(axis=1)
    logw = pot.target.log_weights[None, :]
    t = scores / eps + logw
    m = t.max(axis=1, keepdims=True)
    return (-eps * (m[:, 0] + np.log(np.sum(np.exp(t - m), axis=1))))


def responsibilities(pot: Potential, x: np.ndarray,
                     z: Optional[np.ndarray] = None) -> np.ndarray:
    """Conditional distribution over target indices for one noise point."""
    scores = coupling_scores(pot, x, None if z is None else np.atleast_2d(z))[0]
    return softmax_b_eps(scores, pot.target.weights, pot.eps)


def responsibilities_rows(pot: Potential, x: np.ndarray,
                          z: Optional[np.ndarray] = None) -> np.ndarray:
    """Row-wise responsibilities, ``(B, N)``; each row sums to 1."""
    scores = coupling_scores(pot, x, z)
    return softmax_b_eps_rows(scores, pot.target.weights, pot.eps)


def semidual_value(pot: Potential, noise_batch: np.ndarray,
                   weights: Optional[np.ndarray] = None,
                   z: Optional[np.ndarray] = None) -> float:
    """Estimate of ``F_eps(g) = E[f_{g,eps}(X)] + <b, g>``.

    With ``weights`` (a finite noise law) the expectation is an exact sum,
    otherwise the batch mean is a Monte-Carlo estimate.
    """
    f = soft_c_transform_rows(pot, noise_batch, z)
    if weights is None:
        ef = float(np.mean(f))
    else:
        ef = float(np.dot(np.asarray(weights, dtype=np.float64), f))
    return ef + float(np.dot(pot.target.weights, pot.g))


def stochastic_gradient(pot: Potential, noise_batch: np.ndarray,
                        weights: Optional[np.ndarray] = None,
                        z: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient estimate ``b - mean_i s_{eps,g}(x_i)``; entries sum to 0."""
    s = responsibilities_rows(pot, noise_batch, z)
    if weights is None:
        mean_s = s.mean(axis=0)
    else:
        mean_s = np.asarray(weights, dtype=np.float64) @ s
    return pot.target.weights - mean_s


def marginal_exact(pot: Potential, noise: DiscreteNoise) -> np.ndarray:
    """Second marginal ``m(g)`` by exact summation over noise atoms."""
    atoms, w, z = noise.enumerate()
    s = responsibilities_rows(pot, atoms, z)
    return w @ s


def marginal_estimate(pot: Potential, rng: Rng, total_samples: int,
                      batch: int, noise=None) -> MarginalEstimate:
    """Streamed Monte-Carlo estimate of ``m(g)``, deterministic given rng."""
    if not (1 <= batch <= total_samples):
        raise ValueError("need total_samples >= batch >= 1")
    if noise is None:
        noise = GaussianNoise(pot.target, pot.cost)
    acc = np.zeros(pot.target.n)
    done = 0
    chunk = 0
    while done < total_samples:
        m = min(batch, total_samples - done)
        x, z = noise.sample(rng.child(chunk), m)
        s = responsibilities_rows(pot, x, z)
        acc += s.sum(axis=0)
        done += m
        chunk += 1
    m_hat = acc / done
    se = float(np.sqrt(np.max(m_hat * (1.0 - m_hat)) / done))
    return MarginalEstimate(m=m_hat, samples=done, std_error=se)


def chi2_exact(m: np.ndarray, b: np.ndarray) -> float:
    """``chi2(m || b) = sum_j m_j^2 / b_j - 1``; zero iff ``m = b``."""
    m = np.asarray(m, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(b <= 0.0):
        raise ValueError("chi2 divergence requires strictly positive b")
    return float(np.sum(m * m / b) - 1.0)


def chi2_estimator(pot: Potential, noise_batch: np.ndarray,
                   z: Optional[np.ndarray] = None) -> float:
    """Unbiased batch estimator of ``chi2(m(g) || b)`` in O(NB) time.

    For B batch rows with responsibilities ``s_ij``:

        (1 / (B(B-1))) sum_j (1/b_j) [ (sum_i s_ij)^2 - sum_i s_ij^2 ] - 1

    The estimator may be negative for finite B.
    """
    noise_batch = np.atleast_2d(np.asarray(noise_batch, dtype=np.float64))
    b_rows = noise_batch.shape[0]
    if b_rows < 2:
        raise ValueError("chi2_estimator needs a batch of at least 2")
    n = pot.target.n
    col_sum = np.zeros(n)
    col_sq = np.zeros(n)
    # Stream in row chunks: only column sums are needed.
    step = max(1, 2**23 // n)
    for lo in range(0, b_rows, step):
        chunk = noise_batch[lo: lo + step]
        zc = None if z is None else z[lo: lo + step]
        if pot.eps == 0.0:
            scores = coupling_scores(pot, chunk, zc)
            cs, cq = eps0_column_stats(scores, pot.target.weights)
        else:
            s = responsibilities_rows(pot, chunk, zc)
            cs = s.sum(axis=0)
            cq = (s * s).sum(axis=0)
        col_sum += cs
        col_sq += cq
    inv_b = 1.0 / pot.target.weights
    val = np.sum(inv_b * (col_sum**2 - col_sq)) / (b_rows * (b_rows - 1))
    return float(val - 1.0)


def _kl_rows(s: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise KL(s_i || b) with the 0 log 0 = 0 convention."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = s * (np.log(s) - np.log(b)[None, :])
    terms[~np.isfinite(terms)] = 0.0
    return terms.sum(axis=1)


def transport_cost(pot: Potential, noise_batch: np.ndarray,
                   weights: Optional[np.ndarray] = None,
                   z: Optional[np.ndarray] = None) -> float:
    """Primal objective of the induced coupling on a (weighted) batch.

    Returns ``E[c(X, Y)]`` under ``pi_{eps,g}`` plus, for ``eps > 0``, the
    ``eps * KL`` regularization term computed from responsibilities. At
    ``eps = 0`` the KL term is reported as 0.
    """
    noise_batch = np.atleast_2d(np.asarray(noise_batch, dtype=np.float64))
    zt = pot.target.conditions if pot.cost.beta > 0.0 else None
    c = cost_matrix(pot.cost, noise_batch, pot.target.points, z, zt, project=False)
    s = responsibilities_rows(pot, noise_batch, z)
    per_row = np.sum(s * c, axis=1)
    eps = pot.eps
    if eps > 0.0:
        per_row = per_row + eps * _kl_rows(s, pot.target.weights)
    if weights is None:
        return float(np.mean(per_row))
    return float(np.dot(np.asarray(weights, dtype=np.float64), per_row))


def transport_cost_estimate(pot: Potential, rng: Rng, samples: int,
                            batch: int = 8192, noise=None) -> float:
    """Monte-Carlo :func:`transport_cost` over fresh noise samples."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if noise is None:
        noise = GaussianNoise(pot.target, pot.cost)
    total = 0.0
    done = 0
    chunk = 0
    while done < samples:
        m = min(batch, samples - done)
        x, z = noise.sample(rng.child(chunk), m)
        total += transport_cost(pot, x, None, z) * m
        done += m
        chunk += 1
    return total / done
