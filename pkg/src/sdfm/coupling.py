"""Pairing engines: semidiscrete assignment, baselines, and exact oracles.

The production path is :func:`assign` / :func:`assign_batch`: an O(N d)
scan over the target scores ``g_j - c(x, y_j)``. At ``eps = 0`` this is a
maximum inner product search with uniform tie-breaking; for ``eps > 0``
it is a categorical draw from the responsibilities. Baselines cover the
independent coupling and minibatch OT (log-domain Sinkhorn or Hungarian),
including the cached variant that precomputes pairings for many batches
while storing only RNG streams and index arrays.

:func:`oracle_discrete_ot` is the test oracle: dense log-domain Sinkhorn
for ``eps > 0``, exact linear assignment / LP for ``eps = 0``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from .costs import NEG_DOT, ConfigurationError, CostConfig, cost_matrix
from .numerics import ARGMAX_TIE_TOL, Rng, softmax_b_eps_rows
from .semidual import Potential, TargetMeasure, coupling_scores

__all__ = [
    "PairBatch",
    "SinkhornError",
    "UnsupportedOperationError",
    "assign",
    "assign_batch",
    "laguerre_contains",
    "couple_independent",
    "couple_minibatch_ot",
    "CachedMinibatchCoupling",
    "sinkhorn_log",
    "hungarian",
    "oracle_discrete_ot",
]

INDEPENDENT = "independent"
SD = "sd"
MINIBATCH_SINKHORN = "minibatch-sinkhorn"
MINIBATCH_HUNGARIAN = "minibatch-hungarian"


class SinkhornError(RuntimeError):
    """Sinkhorn failed to reach the marginal tolerance; carries residual."""

    def __init__(self, msg: str, residual: float):
        super().__init__(msg)
        self.residual = residual


class UnsupportedOperationError(RuntimeError):
    pass


@dataclass
class PairBatch:
    """A batch of coupled (noise, data index) pairs ready for training."""

    noise: np.ndarray  # (B, d) raw noise
    indices: np.ndarray  # (B,) into the target support
    points: np.ndarray  # (B, d) resolved target points
    conditions: Optional[np.ndarray] = None  # (B, p)
    provenance: str = INDEPENDENT
    time_per_pair: Optional[float] = None  # seconds

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.shape[0] != self.noise.shape[0]:
            raise ValueError("one index per noise row required")

    def __len__(self) -> int:
        return self.indices.shape[0]


def _resolve(target: TargetMeasure, noise: np.ndarray, idx: np.ndarray,
             provenance: str, tpp: float | None = None) -> PairBatch:
    cond = target.conditions[idx] if target.conditions is not None else None
    return PairBatch(noise=noise, indices=idx, points=target.points[idx],
                     conditions=cond, provenance=provenance, time_per_pair=tpp)


def _to_coupling_space(pot: Potential, noise: np.ndarray) -> np.ndarray:
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if pot.cost.projection is not None:
        return pot.cost.projection.apply(noise)
    return noise


def assign(pot: Potential, x: np.ndarray, rng: Rng,
           z: Optional[np.ndarray] = None) -> int:
    """Pair one raw noise point with a target index.

    ``eps = 0``: argmax of ``g_k - c(x, y_k)`` with a uniform draw over
    exact ties; ``eps > 0``: categorical draw from the responsibilities.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    xc = _to_coupling_space(pot, x)
    scores = coupling_scores(pot, xc, None if z is None else np.atleast_2d(z))[0]
    if pot.eps == 0.0:
        ties = np.flatnonzero(scores >= scores.max() - ARGMAX_TIE_TOL)
        if ties.size == 1:
            return int(ties[0])
        return int(ties[rng.generator().integers(ties.size)])
    s = softmax_b_eps_rows(scores[None, :], pot.target.weights, pot.eps)[0]
    return int(rng.generator().choice(s.size, p=s))


# Row chunks keep the (rows, N) score block under ~64 MB of float64.
_SCORE_CHUNK_ENTRIES = 2**23


def _row_chunks(n_rows: int, n_cols: int):
    step = max(1, _SCORE_CHUNK_ENTRIES // max(n_cols, 1))
    for lo in range(0, n_rows, step):
        yield lo, min(lo + step, n_rows)


def assign_batch(pot: Potential, noise: np.ndarray, rng: Rng,
                 z: Optional[np.ndarray] = None) -> PairBatch:
    """Vectorized :func:`assign`; row ``i`` draws from ``rng.child(i)``.

    Streams the O(N) scan in bounded-memory row chunks and records the
    mean wall-clock time per pair so pairing overhead can be compared
    across coupling methods on the same harness.
    """
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    t0 = time.perf_counter()
    xc = _to_coupling_space(pot, noise)
    idx = np.empty(len(noise), dtype=np.int64)
    for lo, hi in _row_chunks(len(noise), pot.target.n):
        zc = None if z is None else z[lo:hi]
        scores = coupling_scores(pot, xc[lo:hi], zc)
        if pot.eps == 0.0:
            part = np.argmax(scores, axis=1)
            best = scores[np.arange(len(part)), part]
            tie_rows = np.flatnonzero(
                (scores >= best[:, None] - ARGMAX_TIE_TOL).sum(axis=1) > 1
            )
            for i in tie_rows:
                ties = np.flatnonzero(scores[i] >= best[i] - ARGMAX_TIE_TOL)
                part[i] = ties[rng.child(lo + i).generator().integers(ties.size)]
        else:
            s = softmax_b_eps_rows(scores, pot.target.weights, pot.eps)
            np.cumsum(s, axis=1, out=s)
            part = np.empty(hi - lo, dtype=np.int64)
            for i in range(hi - lo):
                u = rng.child(lo + i).generator().random()
                part[i] = np.searchsorted(s[i], u * s[i, -1])
        idx[lo:hi] = part
    tpp = (time.perf_counter() - t0) / max(len(noise), 1)
    return _resolve(pot.target, noise, idx, SD, tpp)


def laguerre_contains(pot: Potential, j: int, x: np.ndarray) -> bool:
    """Whether raw point ``x`` lies in the cell of atom ``j``.

    Only defined for the unregularized negative dot-product geometry,
    where cell ``j`` is the half-space intersection
    ``{x : x^T (y_j - y_k) + g_j - g_k >= 0 for all k}``.
    """
    if pot.eps != 0.0 or pot.cost.kind != NEG_DOT:
        raise UnsupportedOperationError(
            "Laguerre cells require eps=0 and the neg-dot cost"
        )
    if not 0 <= j < pot.target.n:
        raise ValueError(f"cell index {j} out of range")
    xc = _to_coupling_space(pot, np.asarray(x, dtype=np.float64).reshape(1, -1))
    scores = coupling_scores(pot, xc)[0]
    return bool(np.all(scores[j] >= scores - ARGMAX_TIE_TOL))


def couple_independent(target: TargetMeasure, noise: np.ndarray,
                       rng: Rng) -> PairBatch:
    """Indices drawn i.i.d. from the target weights."""
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    t0 = time.perf_counter()
    idx = rng.generator().choice(target.n, size=len(noise), p=target.weights)
    tpp = (time.perf_counter() - t0) / max(len(noise), 1)
    return _resolve(target, noise, idx, INDEPENDENT, tpp)


# ---------------------------------------------------------------------------
# Log-domain Sinkhorn

def sinkhorn_log(costs: np.ndarray, a: np.ndarray, b: np.ndarray, eps: float,
                 tol: float = 1e-6, max_sweeps: int = 10_000,
                 eps_scaling: bool = True):
    """Dense log-domain Sinkhorn with an eps-scaling warm start.

    Alternates the dual updates

        f_i = -eps * LSE_j((g_j - C_ij)/eps + log b_j)
        g_j = -eps * LSE_i((f_i - C_ij)/eps + log a_i)

    until the L1 marginal error falls below ``tol``. The column update
    zeroes the column residual by construction, and the row residual of
    the current plan falls out of the next row transform for free:
    ``row_sum_i = a_i exp((f_i - f_new_i)/eps)``. Raises
    :class:`SinkhornError` with the residual if the sweep budget runs
    out. Returns ``(plan, f, g, sweeps)``.
    """
    costs = np.asarray(costs, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if eps <= 0.0:
        raise ValueError("Sinkhorn requires eps > 0")
    log_a = np.log(a)
    log_b = np.log(b)
    m, n = costs.shape
    f = np.zeros(m)
    g = np.zeros(n)

    spread = float(costs.max() - costs.min())
    if eps_scaling and spread > 0 and eps < spread:
        # Geometric ladder from an easy scale down to the requested eps.
        levels = []
        cur = spread
        while cur > eps * 1.5:
            levels.append(cur)
            cur /= 3.0
        schedule = levels + [eps]
    else:
        schedule = [eps]

    buf = np.empty_like(costs)

    def row_transform(level, scaled_costs):
        # buf <- (g - C)/level + log_b, reduced by a stable row LSE.
        np.subtract(g[None, :] / level, scaled_costs, out=buf)
        np.add(buf, log_b[None, :], out=buf)
        mx = buf.max(axis=1)
        np.subtract(buf, mx[:, None], out=buf)
        np.exp(buf, out=buf)
        return -level * (mx + np.log(buf.sum(axis=1)))

    def col_transform(level, scaled_costs):
        np.subtract(f[:, None] / level, scaled_costs, out=buf)
        np.add(buf, log_a[:, None], out=buf)
        mx = buf.max(axis=0)
        np.subtract(buf, mx[None, :], out=buf)
        np.exp(buf, out=buf)
        return -level * (mx + np.log(buf.sum(axis=0)))

    sweeps = 0
    row_err = np.inf
    for level_idx, level in enumerate(schedule):
        final = level_idx == len(schedule) - 1
        budget = max_sweeps - sweeps if final else min(50, max_sweeps - sweeps)
        scaled = costs / level
        fresh_level = True
        for _ in range(max(budget, 0)):
            f_new = row_transform(level, scaled)
            if not fresh_level:
                with np.errstate(over="ignore"):
                    row_err = float(
                        np.abs(a * np.expm1((f - f_new) / level)).sum()
                    )
                if np.isfinite(row_err):
                    if row_err <= tol and final:
                        log_plan = (f[:, None] + g[None, :]) / level - scaled \
                            + log_a[:, None] + log_b[None, :]
                        return np.exp(log_plan), f, g, sweeps
                    if not final and row_err <= max(tol, 1e-3):
                        f = f_new
                        break
            f = f_new
            g = col_transform(level, scaled)
            sweeps += 1
            fresh_level = False
    raise SinkhornError(
        f"no convergence within {max_sweeps} sweeps (residual {row_err:.3e})",
        residual=float(row_err),
    )


# ---------------------------------------------------------------------------
# Hungarian algorithm (classic O(n^3) augmenting-path, square matrices)

def hungarian(costs: np.ndarray):
    """Minimum-cost perfect matching on a square cost matrix.

    Returns ``(assignment, u, v, total)`` where ``assignment[i]`` is the
    column matched to row ``i`` and ``(u, v)`` are the optimal dual
    potentials with ``u_i + v_j <= C_ij``.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.shape[0] != costs.shape[1]:
        raise ValueError("hungarian expects a square cost matrix")
    n = costs.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row assigned to column j
    way = np.zeros(n + 1, dtype=np.int64)
    # 1-indexed columns, column 0 is the virtual root.
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            cur = costs[i0 - 1, :] - u[i0] - v[1:]
            better = np.flatnonzero(free[1:] & (cur < minv[1:]))
            minv[better + 1] = cur[better]
            way[better + 1] = j0
            masked = np.where(free[1:], minv[1:], inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        assignment[p[j] - 1] = j - 1
    total = float(costs[np.arange(n), assignment].sum())
    return assignment, u[1:], v[1:], total


def couple_minibatch_ot(target: TargetMeasure, noise: np.ndarray,
                        cost: CostConfig, eps: float, rng: Rng,
                        method: str = "sinkhorn") -> PairBatch:
    """Minibatch OT baseline: match ``n`` noise rows to ``n`` fresh data rows.

    ``sinkhorn`` samples a data index per noise row from the row of the
    (row-normalized) coupling matrix; ``hungarian`` uses the optimal
    permutation. The recorded time per pair amortizes the full solve over
    the batch.
    """
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    n = len(noise)
    t0 = time.perf_counter()
    gen = rng.generator()
    data_idx = gen.choice(target.n, size=n, p=target.weights)
    zt = zn = None
    if cost.beta > 0.0:
        zt = target.conditions[data_idx]
        # Noise conditions are an independent draw from the condition marginal.
        zn = target.conditions[gen.choice(target.n, size=n, p=target.weights)]
    xs = cost.projection.apply(noise) if cost.projection is not None else noise
    c = cost_matrix(cost, xs, target.points[data_idx], zn, zt, project=False)
    if n == 1:
        local = np.zeros(1, dtype=np.int64)
    elif method == "hungarian":
        local, _, _, _ = hungarian(c)
    elif method == "sinkhorn":
        if eps <= 0.0:
            raise ConfigurationError("sinkhorn minibatch coupling needs eps > 0")
        marg = np.full(n, 1.0 / n)
        plan, _, _, _ = sinkhorn_log(c, marg, marg, eps)
        rows = plan / plan.sum(axis=1, keepdims=True)
        cdf = np.cumsum(rows, axis=1)
        u = gen.random(n)
        local = np.array(
            [np.searchsorted(cdf[i], u[i] * cdf[i, -1]) for i in range(n)],
            dtype=np.int64,
        )
    else:
        raise ConfigurationError(f"unknown minibatch method {method!r}")
    idx = data_idx[local]
    tpp = (time.perf_counter() - t0) / max(n, 1)
    prov = MINIBATCH_HUNGARIAN if method == "hungarian" else MINIBATCH_SINKHORN
    return _resolve(target, noise, idx, prov, tpp)


class CachedMinibatchCoupling:
    """Precomputed minibatch OT pairings (the cached baseline).

    Stores one RNG stream id plus one index array per batch, never the
    raw noise: replaying the stream regenerates the noise bit-exactly.
    """

    def __init__(self, target: TargetMeasure, cost: CostConfig, eps: float,
                 rng: Rng, n: int, num_batches: int, method: str = "sinkhorn"):
        self.target = target
        self.cost = cost
        self.n = n
        self._noise_dim = (cost.projection.d_in if cost.projection is not None
                           else target.dim)
        self._streams = []
        self._indices = []
        self.precompute_seconds = 0.0
        t0 = time.perf_counter()
        for ell in range(num_batches):
            noise_rng = rng.child(2 * ell)
            pair_rng = rng.child(2 * ell + 1)
            noise = noise_rng.generator().standard_normal((n, self._noise_dim))
            batch = couple_minibatch_ot(target, noise, cost, eps, pair_rng,
                                        method)
            self._streams.append(noise_rng)
            self._indices.append(batch.indices)
        self.precompute_seconds = time.perf_counter() - t0

    def __len__(self) -> int:
        return len(self._indices)

    def batch(self, ell: int) -> PairBatch:
        noise_rng = self._streams[ell]
        noise = noise_rng.generator().standard_normal((self.n, self._noise_dim))
        return _resolve(self.target, noise, self._indices[ell], "minibatch-cached",
                        self.precompute_seconds / max(len(self) * self.n, 1))


# ---------------------------------------------------------------------------
# Exact small-instance oracle

def oracle_discrete_ot(costs: np.ndarray, a: np.ndarray, b: np.ndarray,
                       eps: float):
    """Exact discrete OT on a dense cost matrix, with dual potentials.

    ``eps > 0``: log-domain Sinkhorn to marginal tolerance 1e-9.
    ``eps = 0``: Hungarian on the uniform square case, otherwise the
    transport LP via HiGHS. Returns ``(plan, f, g, value)`` with ``g``
    gauge-fixed to ``<b, g> = 0`` and ``value`` the primal objective
    (including the entropic term for ``eps > 0``).
    """
    costs = np.asarray(costs, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, n = costs.shape
    if m > 512 or n > 512:
        raise ValueError("oracle restricted to instances of size <= 512")
    if eps > 0.0:
        plan, f, g, _ = sinkhorn_log(costs, a, b, eps, tol=1e-9)
        with np.errstate(divide="ignore", invalid="ignore"):
            kl_terms = plan * np.log(plan / (a[:, None] * b[None, :]))
        kl_terms[~np.isfinite(kl_terms)] = 0.0
        value = float((plan * costs).sum() + eps * kl_terms.sum())
    elif m == n and np.allclose(a, 1.0 / m) and np.allclose(b, 1.0 / n):
        assignment, u, v, total = hungarian(costs)
        plan = np.zeros_like(costs)
        plan[np.arange(m), assignment] = 1.0 / m
        f, g = u, v
        value = total / m
    else:
        plan, f, g = _transport_lp(costs, a, b)
        value = float((plan * costs).sum())
    shift = float(np.dot(b, g))
    g = g - shift
    f = f + shift
    return plan, f, g, value


def _transport_lp(costs: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Transport LP via scipy HiGHS; returns plan and marginal duals."""
    import scipy.sparse as sp

    m, n = costs.shape
    # Equality rows: m row sums then n column sums (one redundant).
    row_idx = np.repeat(np.arange(m), n)
    col_idx = np.tile(np.arange(n), m)
    data = np.ones(m * n)
    rows = sp.coo_matrix((data, (row_idx, np.arange(m * n))), shape=(m, m * n))
    cols = sp.coo_matrix((data, (col_idx, np.arange(m * n))), shape=(n, m * n))
    a_eq = sp.vstack([rows, cols]).tocsc()
    b_eq = np.concatenate([a, b])
    res = optimize.linprog(costs.ravel(), A_eq=a_eq, b_eq=b_eq,
                           bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    plan = res.x.reshape(m, n)
    duals = np.asarray(res.eqlin.marginals)
    value = float((plan * costs).sum())
    # Pick the dual sign convention under which strong duality holds:
    # value = a.f + b.g with f_i + g_j <= C_ij.
    f, g = duals[:m], duals[m:]
    if abs(np.dot(a, f) + np.dot(b, g) - value) > abs(
        -np.dot(a, f) - np.dot(b, g) - value
    ):
        f, g = -f, -g
    return plan, f, g
