"""Local-search solvers for the matching problem.

Four solver families operate on a shared pattern: sweep over the units (or
cluster pairs), improve one block at a time through an exact linear
assignment (or binary quadratic) subproblem, and stop at the first sweep
that brings no strict improvement. Descent methods monitor the pairwise
objective, ascent methods the Frobenius surrogate; the two are tied by
``pairwise = n * sum ||X_i||^2 - surrogate``.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .core import (
    Matching,
    PartialMatching,
    SolveResult,
    UNMATCHED,
    _check_partial_pair,
    _cluster_stats,
    frobenius_surrogate,
    objective_pairwise,
    objective_unbalanced,
)
from .lap import lap_max, lap_min_rect

__all__ = [
    "SolveOptions",
    "UbqpInstance",
    "kmeans_match",
    "sort_match_1d",
    "bca",
    "bca_unbalanced",
    "frank_wolfe",
    "solve_ubqp",
    "interchange",
    "exhaustive",
]

# two consecutive sweeps improving by less than this (relative) stop a solver
# even under strict comparison, to break float-noise limit cycles
TINY_REL_IMPROVEMENT = 1e-12

SWEEP_ORDERS = ("cyclic", "random-permutation")


@dataclass(frozen=True)
class SolveOptions:
    """Shared solver controls.

    ``tol_rel = 0`` keeps the stopping comparisons strict; a positive value
    requires each sweep to improve by ``tol_rel * (1 + |previous|)``.
    """

    max_sweeps: int = 1000
    sweep_order: str = "cyclic"
    seed: int | None = None
    tol_rel: float = 0.0

    def __post_init__(self):
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if self.sweep_order not in SWEEP_ORDERS:
            raise ValueError(f"sweep_order must be one of {SWEEP_ORDERS}")
        if self.tol_rel < 0:
            raise ValueError("tol_rel must be >= 0")


def _unit_order(n, opts, rng):
    if opts.sweep_order == "random-permutation":
        return rng.permutation(n)
    return np.arange(n)


class _StopRule:
    """Tracks per-sweep progress of a monotone solver.

    ``update`` returns True while sweeping should continue; it returns False
    on the first sweep without strict improvement (natural termination) and
    after two consecutive near-tie improvements (float-noise guard).
    """

    def __init__(self, start_value, opts, ascending):
        self.value = start_value
        self.opts = opts
        self.ascending = ascending
        self.tiny_streak = 0

    def update(self, new_value):
        old = self.value
        margin = self.opts.tol_rel * (1.0 + abs(old))
        improved = (new_value > old + margin) if self.ascending else (
            new_value < old - margin
        )
        self.value = new_value
        if not improved:
            return False
        if abs(new_value - old) < TINY_REL_IMPROVEMENT * (1.0 + abs(old)):
            self.tiny_streak += 1
            if self.tiny_streak >= 2:
                return False
        else:
            self.tiny_streak = 0
        return True


def _result_from_matching(data, matching, sweeps, converged, elapsed,
                          surrogate_trace):
    surr = np.asarray(surrogate_trace, dtype=float)
    obj = data.n * data.total_sumsq - surr
    np.maximum(obj, 0.0, out=obj)
    return SolveResult(
        matching=matching,
        objective=objective_pairwise(data, matching),
        surrogate=frobenius_surrogate(data, matching),
        sweeps=sweeps,
        converged=converged,
        elapsed=elapsed,
        objective_trace=obj,
        surrogate_trace=surr,
    )


def _trivial_result(data, start, elapsed=0.0):
    # single unit: the pair set is empty and every matching is optimal
    surr = frobenius_surrogate(data, start)
    return SolveResult(
        matching=start,
        objective=0.0,
        surrogate=surr,
        sweeps=0,
        converged=True,
        elapsed=elapsed,
        objective_trace=np.zeros(1),
        surrogate_trace=np.array([surr]),
    )


def _rank_match(values, centers):
    """Permutation pairing the q-th smallest value with the q-th smallest
    center; optimal for the 1-D assignment step."""
    order_v = np.argsort(values, kind="stable")
    order_c = np.argsort(centers, kind="stable")
    perm = np.empty_like(order_v)
    perm[order_c] = order_v
    return perm


def sort_match_1d(data, centers=None):
    """One assignment step for scalar features, done by rank matching.

    For p = 1 the per-unit assignment against fixed centers is solved by
    sorting instead of a full LAP (O(nm log m) total). ``centers`` defaults
    to the cluster centers of the identity matching.

    Returns the resulting Matching.
    """
    if data.p != 1:
        raise ValueError(f"rank matching needs p = 1, got p = {data.p}")
    if centers is None:
        centers = data.values[:, 0, :].mean(axis=0)
    else:
        centers = np.asarray(centers, dtype=float).reshape(-1)
        if centers.size != data.m:
            raise ValueError(f"expected {data.m} centers, got {centers.size}")
    perms = np.empty((data.n, data.m), dtype=np.intp)
    for i in range(data.n):
        perms[i] = _rank_match(data.values[i, 0, :], centers)
    return Matching(perms)


def kmeans_match(data, start, opts=None):
    """Alternate per-unit assignment against fixed cluster centers with
    center recomputation, until the objective stops decreasing.

    Each sweep solves one m x m LAP per unit (rank matching when p = 1) and
    then refreshes the centers; the objective is nonincreasing across sweeps.
    """
    opts = opts or SolveOptions()
    if data.n == 1:
        return _trivial_result(data, start)
    t0 = time.perf_counter()
    rng = np.random.default_rng(opts.seed)
    perms = start.perms.copy()
    rows = np.arange(data.n)[:, None]

    def mean_objective():
        permuted = np.take_along_axis(data.values, perms[:, None, :], axis=2)
        centers = permuted.sum(axis=0) / data.n
        return float(np.sum((permuted - centers[None]) ** 2)), centers

    f_mean, centers = mean_objective()
    # pairwise = n * mean; traces are kept in surrogate form like the others
    surrogate_trace = [data.n * data.total_sumsq - data.n * f_mean]
    rule = _StopRule(f_mean, opts, ascending=False)
    sweeps = 0
    converged = False
    while sweeps < opts.max_sweeps:
        sweeps += 1
        scalar_centers = centers[0] if data.p == 1 else None
        for i in _unit_order(data.n, opts, rng):
            if data.p == 1:
                perms[i] = _rank_match(data.values[i, 0, :], scalar_centers)
            else:
                perms[i], _ = lap_max(centers.T @ data.values[i])
        f_mean, centers = mean_objective()
        surrogate_trace.append(data.n * data.total_sumsq - data.n * f_mean)
        if not rule.update(f_mean):
            converged = True
            break
    return _result_from_matching(
        data, Matching(perms), sweeps, converged,
        time.perf_counter() - t0, surrogate_trace,
    )


def bca(data, start, opts=None):
    """Block coordinate ascent on the Frobenius surrogate.

    Keeps the running sum S of matched unit matrices; updating unit i solves
    one LAP against S with unit i removed and refreshes S in place, so one
    sweep costs n LAPs (O(n(pm^2 + m^3))). Stops when a full sweep fails to
    strictly increase ||S||_F^2.
    """
    opts = opts or SolveOptions()
    if data.n == 1:
        return _trivial_result(data, start)
    t0 = time.perf_counter()
    rng = np.random.default_rng(opts.seed)
    perms = start.perms.copy()
    s = np.take_along_axis(data.values, perms[:, None, :], axis=2).sum(axis=0)
    f = float(np.sum(s * s))
    trace = [f]
    rule = _StopRule(f, opts, ascending=True)
    sweeps = 0
    converged = False
    while sweeps < opts.max_sweeps:
        sweeps += 1
        for i in _unit_order(data.n, opts, rng):
            xi = data.values[i]
            s_i = s - xi[:, perms[i]]
            perms[i], _ = lap_max(s_i.T @ xi)
            s = s_i + xi[:, perms[i]]
        # recompute the running sum each sweep to keep float drift out of
        # the stopping comparison
        s = np.take_along_axis(data.values, perms[:, None, :], axis=2).sum(axis=0)
        f = float(np.sum(s * s))
        trace.append(f)
        if not rule.update(f):
            converged = True
            break
    return _result_from_matching(
        data, Matching(perms), sweeps, converged,
        time.perf_counter() - t0, trace,
    )


def frank_wolfe(data, start, opts=None):
    """Frank-Wolfe on the doubly stochastic relaxation of the surrogate.

    Each iteration solves the n LAPs of the linearized problem against the
    frozen running sum; the exact line search accepts the full step iff it
    strictly increases the surrogate, so every iterate stays a permutation
    family. Terminates at the first rejected step.
    """
    opts = opts or SolveOptions()
    t0 = time.perf_counter()
    perms = start.perms.copy()
    s = np.take_along_axis(data.values, perms[:, None, :], axis=2).sum(axis=0)
    f = float(np.sum(s * s))
    trace = [f]
    rule = _StopRule(f, opts, ascending=True)
    sweeps = 0
    converged = False
    candidate = np.empty_like(perms)
    while sweeps < opts.max_sweeps:
        sweeps += 1
        s_new = np.zeros_like(s)
        for i in range(data.n):
            xi = data.values[i]
            candidate[i], _ = lap_max(s.T @ xi)
            s_new += xi[:, candidate[i]]
        f_new = float(np.sum(s_new * s_new))
        if rule.update(f_new):
            perms[:] = candidate
            s = s_new
            f = f_new
            trace.append(f)
        else:
            trace.append(f)  # step rejected: state unchanged
            converged = True
            break
    return _result_from_matching(
        data, Matching(perms), sweeps, converged,
        time.perf_counter() - t0, trace,
    )


@dataclass(frozen=True)
class UbqpInstance:
    """Binary quadratic subproblem of a pairwise interchange.

    Maximize ``c' G c - b' c`` over c in {0,1}^n, where G holds the inner
    products of the per-unit swap differences d_i and ``b_i = <d_i, sum_j d_j>``.
    """

    gram: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gram, dtype=float)
        b = np.asarray(self.linear, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ValueError("gram must be square")
        if b.shape != (g.shape[0],):
            raise ValueError("linear term length must match gram size")
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(b))):
            raise ValueError("instance must be finite")
        if not np.allclose(g, g.T, atol=1e-8 * (1.0 + np.abs(g).max())):
            raise ValueError("gram must be symmetric")
        object.__setattr__(self, "gram", g)
        object.__setattr__(self, "linear", b)

    @classmethod
    def from_differences(cls, diffs):
        """Build the instance from the n x p matrix of swap differences."""
        d = np.asarray(diffs, dtype=float)
        g = d @ d.T
        return cls(g, g.sum(axis=1))

    @property
    def size(self):
        return self.gram.shape[0]

    def value(self, c):
        c = np.asarray(c, dtype=float)
        return float(c @ self.gram @ c - self.linear @ c)


def _ubqp_exact(inst):
    """Enumerate all 2^n vectors in Gray-code order with O(n) value updates."""
    n = inst.size
    g = inst.gram
    b = inst.linear
    c = np.zeros(n, dtype=bool)
    s = np.zeros(n)  # s = G c
    val = 0.0
    best_val = 0.0
    best_c = c.copy()
    for count in range(1, 1 << n):
        gray = count ^ (count >> 1)
        flipped = gray ^ ((count - 1) ^ ((count - 1) >> 1))
        j = flipped.bit_length() - 1
        eps = 1.0 if gray & flipped else -1.0
        base = s[j] - (g[j, j] if c[j] else 0.0)
        val += eps * (2.0 * base + g[j, j] - b[j])
        s += eps * g[j]
        c[j] = not c[j]
        if val > best_val:
            best_val = val
            best_c = c.copy()
    return best_c.astype(np.intp), best_val


def _ubqp_climb(inst, c):
    """Steepest-ascent 1-flip local search from a given start."""
    g = inst.gram
    b = inst.linear
    diag = np.diag(g)
    c = c.astype(float)
    s = g @ c
    val = float(c @ s - b @ c)
    while True:
        sign = 1.0 - 2.0 * c
        gains = sign * (2.0 * (s - c * diag) + diag - b)
        j = int(np.argmax(gains))
        if gains[j] <= 0.0:
            return c.astype(bool), val
        val += gains[j]
        s += sign[j] * g[j]
        c[j] = 1.0 - c[j]


def solve_ubqp(inst, exact_limit=20, seed=None, restarts=32):
    """Solve (or approximately solve) the interchange subproblem.

    Up to ``exact_limit`` variables the 2^n vectors are enumerated exactly;
    beyond that, steepest-ascent 1-flip hill climbing is run from the all-zero
    vector plus ``restarts - 1`` seeded random starts. The all-zero start
    pins the returned value at >= 0 (the no-swap configuration).

    Returns
    -------
    c : ndarray of 0/1, shape (n,)
    value : float
    """
    if inst.size <= exact_limit:
        return _ubqp_exact(inst)
    rng = np.random.default_rng(seed)
    best_c, best_val = _ubqp_climb(inst, np.zeros(inst.size, dtype=bool))
    for _ in range(restarts - 1):
        start = rng.integers(0, 2, size=inst.size).astype(bool)
        c, val = _ubqp_climb(inst, start)
        if val > best_val:
            best_c, best_val = c, val
    return best_c.astype(np.intp), best_val


def _take_column(data, perms, cluster):
    """(n, p) matrix of the vectors currently assigned to one cluster."""
    idx = perms[:, cluster][:, None, None]
    return np.take_along_axis(data.values, idx, axis=2)[:, :, 0]


def interchange(data, start, opts=None, exact_limit=20, ubqp_restarts=32):
    """Pairwise interchange with greedy selection.

    Maintains a candidate list of clusters. For the first candidate q it
    scores, against every other candidate r, the best swap pattern of the
    (q, r) vectors across units (an n-variable binary quadratic program) and
    performs the overall best strictly improving interchange, resetting the
    candidate list; if none improves, q is dropped. Terminates when the list
    is empty. The objective never increases.
    """
    opts = opts or SolveOptions()
    t0 = time.perf_counter()
    rng = np.random.default_rng(opts.seed)
    if data.n == 1:
        return _trivial_result(data, start)
    perms = start.perms.copy()
    s = np.take_along_axis(data.values, perms[:, None, :], axis=2).sum(axis=0)
    obj = data.n * data.total_sumsq - float(np.sum(s * s))
    obj = max(obj, 0.0)
    trace = [obj]
    candidates = list(range(data.m))
    iters = 0
    while candidates and iters < opts.max_sweeps:
        iters += 1
        if opts.sweep_order == "random-permutation":
            q = candidates[int(rng.integers(len(candidates)))]
        else:
            q = candidates[0]
        col_q = _take_column(data, perms, q)
        f_best = obj
        best = None
        for r in candidates:
            if r == q:
                continue
            d = col_q - _take_column(data, perms, r)
            c, _ = solve_ubqp(
                UbqpInstance.from_differences(d),
                exact_limit=exact_limit,
                seed=opts.seed,
                restarts=ubqp_restarts,
            )
            t = d.T @ c  # shift of the cluster sums under the swap pattern
            new_q = s[:, r] + t
            new_r = s[:, q] - t
            f_swapped = obj + (
                np.sum(s[:, q] ** 2) + np.sum(s[:, r] ** 2)
                - np.sum(new_q**2) - np.sum(new_r**2)
            )
            margin = opts.tol_rel * (1.0 + abs(f_best))
            if f_swapped < f_best - margin:
                f_best = f_swapped
                best = (r, c)
        if best is not None:
            r, c = best
            swap = c == 0
            perms[swap, q], perms[swap, r] = perms[swap, r], perms[swap, q]
            s = np.take_along_axis(data.values, perms[:, None, :], axis=2).sum(axis=0)
            obj = max(data.n * data.total_sumsq - float(np.sum(s * s)), 0.0)
            trace.append(obj)
            candidates = list(range(data.m))
        else:
            candidates.remove(q)
    surrogate_trace = data.n * data.total_sumsq - np.asarray(trace)
    return _result_from_matching(
        data, Matching(perms), iters, not candidates,
        time.perf_counter() - t0, surrogate_trace,
    )


def exhaustive(data, limit=1_000_000):
    """Global optimum by enumerating all matchings with the first unit fixed
    to the identity (relabeling invariance); the search space must satisfy
    (m!)^(n-1) <= limit."""
    t0 = time.perf_counter()
    if data.n == 1:
        return _trivial_result(data, Matching.identity(1, data.m))
    fact = math.factorial(data.m)
    if fact ** (data.n - 1) > limit:
        raise ValueError(
            f"instance too large: (m!)^(n-1) = {fact ** (data.n - 1)} "
            f"exceeds the enumeration limit {limit}"
        )
    all_perms = list(itertools.permutations(range(data.m)))
    perm_arr = np.array(all_perms, dtype=np.intp)
    # vectorize over the last unit; loop over permutations of the middle ones
    last_stack = data.values[-1][:, perm_arr.T].transpose(2, 0, 1)  # (m!, p, m)
    base = data.values[0]
    middle = range(1, data.n - 1)
    best_surr = -np.inf
    best_combo = None
    count = 0
    for combo in itertools.product(range(fact), repeat=data.n - 2):
        partial = base.copy()
        for unit, perm_idx in zip(middle, combo):
            partial += data.values[unit][:, perm_arr[perm_idx]]
        sums = partial[None, :, :] + last_stack
        vals = np.einsum("jpm,jpm->j", sums, sums)
        j = int(np.argmax(vals))
        count += fact
        if vals[j] > best_surr:
            best_surr = float(vals[j])
            best_combo = combo + (j,)
    perms = np.empty((data.n, data.m), dtype=np.intp)
    perms[0] = np.arange(data.m)
    for unit, perm_idx in zip(range(1, data.n), best_combo):
        perms[unit] = perm_arr[perm_idx]
    return _result_from_matching(
        data, Matching(perms), count, True,
        time.perf_counter() - t0, [best_surr],
    )


def bca_unbalanced(data, start, opts=None):
    """Block coordinate descent for unbalanced data (per-unit sizes m_i,
    K clusters, unmatched vectors allowed).

    Updating unit i removes its vectors from the per-cluster running sums,
    prices assigning vector q to cluster k by the added pairwise cost against
    the remaining members, and solves the rectangular assignment exactly.
    The total objective is nonincreasing per update.
    """
    opts = opts or SolveOptions()
    t0 = time.perf_counter()
    _check_partial_pair(data, start)
    k = data.n_clusters
    maps = [row.copy() for row in start.maps]

    def current():
        pm = PartialMatching(maps, k)
        return pm

    if data.n == 1:
        pm = current()
        return SolveResult(
            matching=pm,
            objective=0.0,
            surrogate=float(
                np.sum(_cluster_stats(data, pm)[1] ** 2)
            ),
            sweeps=0,
            converged=True,
            elapsed=time.perf_counter() - t0,
            objective_trace=np.zeros(1),
        )

    rng = np.random.default_rng(opts.seed)
    pm = current()
    counts, sums, sumsq = _cluster_stats(data, pm)
    obj = max(float(np.dot(counts, sumsq) - np.sum(sums * sums)), 0.0)
    trace = [obj]
    rule = _StopRule(obj, opts, ascending=False)
    unit_sq = [np.sum(u * u, axis=0) for u in data.units]
    sweeps = 0
    converged = False
    while sweeps < opts.max_sweeps:
        sweeps += 1
        for i in _unit_order(data.n, opts, rng):
            unit = data.units[i]
            labels = maps[i]
            assigned = labels != UNMATCHED
            cols = np.flatnonzero(assigned)
            labs = labels[cols]
            counts[labs] -= 1.0
            sums[:, labs] -= unit[:, cols]
            sumsq[labs] -= unit_sq[i][cols]
            # cost of putting vector q into cluster k, against the members
            # from the other units
            cost = (
                np.outer(unit_sq[i], counts)
                - 2.0 * (unit.T @ sums)
                + sumsq[None, :]
            )
            m_i = unit.shape[1]
            new_labels = np.full(m_i, UNMATCHED, dtype=np.intp)
            if m_i <= k:
                assign, _ = lap_min_rect(cost)
                new_labels[:] = assign
            else:
                chosen, _ = lap_min_rect(cost.T)
                new_labels[chosen] = np.arange(k)
            maps[i] = new_labels
            taken = np.flatnonzero(new_labels != UNMATCHED)
            labs = new_labels[taken]
            counts[labs] += 1.0
            sums[:, labs] += unit[:, taken]
            sumsq[labs] += unit_sq[i][taken]
        pm = current()
        counts, sums, sumsq = _cluster_stats(data, pm)  # refresh, drift control
        obj = max(float(np.dot(counts, sumsq) - np.sum(sums * sums)), 0.0)
        trace.append(obj)
        if not rule.update(obj):
            converged = True
            break
    pm = current()
    return SolveResult(
        matching=pm,
        objective=objective_unbalanced(data, pm),
        surrogate=float(np.sum(_cluster_stats(data, pm)[1] ** 2)),
        sweeps=sweeps,
        converged=converged,
        elapsed=time.perf_counter() - t0,
        objective_trace=np.asarray(trace),
    )
