"""Data model and objective functions for one-to-one feature matching.

The matching problem: given n units, each holding m feature vectors in R^p,
pick one permutation of the vector labels per unit so that the m clusters
formed by taking the k-th matched vector of every unit have minimal total
within-cluster sum of pairwise squared Euclidean distances.

All types are immutable after construction and all operations are pure
functions, so they are safe to call concurrently on shared data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FeatureStack",
    "UnbalancedStack",
    "Matching",
    "PartialMatching",
    "SolveResult",
    "IdentityDiagnostics",
    "matched_sum",
    "cluster_centers",
    "objective_pairwise",
    "objective_mean",
    "objective_unbalanced",
    "frobenius_surrogate",
    "unbalanced_surrogate",
    "check_identities",
]

UNMATCHED = -1  # cluster label of an unassigned vector in a PartialMatching


def _as_finite_array(values, name):
    arr = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite (no NaN or Inf entries)")
    return arr


class FeatureStack:
    """Balanced input data: n units, each a p x m matrix of feature vectors.

    Parameters
    ----------
    values : array_like of shape (n, p, m)
        ``values[i, :, k]`` is the k-th feature vector of unit i.

    Attributes
    ----------
    n, p, m : int
        Number of units, feature dimension, vectors per unit.
    values : ndarray, read-only
        The validated data array.
    total_sumsq : float
        Sum of squared Frobenius norms of all unit matrices.
    """

    __slots__ = ("values", "n", "p", "m", "total_sumsq")

    def __init__(self, values):
        arr = np.array(values, dtype=float)
        if arr.ndim != 3:
            raise ValueError(f"expected an (n, p, m) array, got shape {arr.shape}")
        n, p, m = arr.shape
        if n < 1 or p < 1 or m < 1:
            raise ValueError(f"n, p, m must all be >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature values must be finite (no NaN or Inf entries)")
        arr.flags.writeable = False
        self.values = arr
        self.n, self.p, self.m = n, p, m
        self.total_sumsq = float(np.sum(arr * arr))

    def unit(self, i):
        """The p x m matrix of unit i."""
        return self.values[i]

    def __repr__(self):
        return f"FeatureStack(n={self.n}, p={self.p}, m={self.m})"


class UnbalancedStack:
    """Input data with per-unit vector counts m_i and a free cluster count K.

    Parameters
    ----------
    units : sequence of array_like
        Unit i is a p x m_i matrix; all units share the feature dimension p.
    n_clusters : int
        Number of clusters K to assign vectors to (at most one vector per
        unit per cluster).
    """

    __slots__ = ("units", "n", "p", "sizes", "n_clusters")

    def __init__(self, units, n_clusters):
        mats = []
        for i, u in enumerate(units):
            arr = np.array(u, dtype=float)
            if arr.ndim != 2:
                raise ValueError(f"unit {i + 1}: expected a 2-D (p, m_i) matrix")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"unit {i + 1}: entries must be finite")
            if arr.shape[1] < 1:
                raise ValueError(f"unit {i + 1}: must hold at least one vector")
            arr.flags.writeable = False
            mats.append(arr)
        if not mats:
            raise ValueError("need at least one unit")
        p = mats[0].shape[0]
        for i, arr in enumerate(mats):
            if arr.shape[0] != p:
                raise ValueError(
                    f"unit {i + 1}: feature dimension {arr.shape[0]} != {p}"
                )
        if n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        self.units = tuple(mats)
        self.n = len(mats)
        self.p = p
        self.sizes = tuple(arr.shape[1] for arr in mats)
        self.n_clusters = int(n_clusters)

    @classmethod
    def from_stack(cls, stack):
        """View a balanced FeatureStack as an UnbalancedStack with K = m."""
        return cls([stack.values[i] for i in range(stack.n)], stack.m)

    def __repr__(self):
        return (
            f"UnbalancedStack(n={self.n}, p={self.p}, K={self.n_clusters}, "
            f"sizes={self.sizes})"
        )


class Matching:
    """One permutation of the column labels per unit.

    ``perms[i, k]`` is the (0-based) column of unit i contained in cluster k;
    each row is a bijection of ``{0, ..., m-1}``.
    """

    __slots__ = ("perms", "n", "m")

    def __init__(self, perms):
        arr = np.array(perms, dtype=np.intp)
        if arr.ndim != 2:
            raise ValueError(f"expected an (n, m) array, got shape {arr.shape}")
        n, m = arr.shape
        if n < 1 or m < 1:
            raise ValueError("matching must cover at least one unit and one label")
        if not np.array_equal(np.sort(arr, axis=1), np.tile(np.arange(m), (n, 1))):
            raise ValueError("each row must be a permutation of 0..m-1")
        arr.flags.writeable = False
        self.perms = arr
        self.n, self.m = n, m

    @classmethod
    def identity(cls, n, m):
        return cls(np.tile(np.arange(m, dtype=np.intp), (n, 1)))

    def compose(self, tau):
        """Relabel clusters: apply the same permutation tau to every unit.

        Returns the matching with perms ``sigma_i o tau``; the induced
        clusters are identical up to renumbering.
        """
        tau = np.asarray(tau, dtype=np.intp)
        return Matching(self.perms[:, tau])

    def inverse_labels(self):
        """(n, m) array: cluster containing column j of unit i."""
        inv = np.empty_like(self.perms)
        rows = np.arange(self.n)[:, None]
        inv[rows, self.perms] = np.arange(self.m)[None, :]
        return inv

    def __eq__(self, other):
        return isinstance(other, Matching) and np.array_equal(self.perms, other.perms)

    def __hash__(self):
        return hash(self.perms.tobytes())

    def __repr__(self):
        return f"Matching(n={self.n}, m={self.m})"


class PartialMatching:
    """Per-unit maps from vectors to cluster labels, allowing unmatched vectors.

    ``maps[i][q]`` is the cluster of vector q of unit i, or ``UNMATCHED`` (-1).
    Assigned labels are distinct within a unit, and every unit assigns exactly
    ``min(m_i, K)`` of its vectors.
    """

    __slots__ = ("maps", "n", "sizes", "n_clusters")

    def __init__(self, maps, n_clusters):
        if n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        rows = []
        for i, row in enumerate(maps):
            arr = np.array(row, dtype=np.intp)
            if arr.ndim != 1 or arr.size < 1:
                raise ValueError(f"unit {i + 1}: map must be a nonempty 1-D sequence")
            if np.any(arr < UNMATCHED) or np.any(arr >= n_clusters):
                raise ValueError(
                    f"unit {i + 1}: labels must lie in {{-1, 0, ..., K-1}}"
                )
            assigned = arr[arr != UNMATCHED]
            if assigned.size != np.unique(assigned).size:
                raise ValueError(f"unit {i + 1}: assigned labels must be distinct")
            if assigned.size != min(arr.size, n_clusters):
                raise ValueError(
                    f"unit {i + 1}: expected min(m_i, K) = "
                    f"{min(arr.size, n_clusters)} assigned vectors, "
                    f"got {assigned.size}"
                )
            arr.flags.writeable = False
            rows.append(arr)
        if not rows:
            raise ValueError("need at least one unit")
        self.maps = tuple(rows)
        self.n = len(rows)
        self.sizes = tuple(r.size for r in rows)
        self.n_clusters = int(n_clusters)

    @classmethod
    def from_matching(cls, matching):
        """Balanced matching viewed as a partial matching with K = m."""
        return cls(list(matching.inverse_labels()), matching.m)

    def to_matching(self):
        """Convert back to a Matching; requires m_i = K for all units."""
        if any(s != self.n_clusters for s in self.sizes):
            raise ValueError("only balanced partial matchings convert to Matching")
        perms = np.empty((self.n, self.n_clusters), dtype=np.intp)
        for i, row in enumerate(self.maps):
            perms[i, row] = np.arange(self.n_clusters)
        return Matching(perms)

    def __eq__(self, other):
        return (
            isinstance(other, PartialMatching)
            and self.n_clusters == other.n_clusters
            and len(self.maps) == len(other.maps)
            and all(np.array_equal(a, b) for a, b in zip(self.maps, other.maps))
        )

    def __repr__(self):
        return f"PartialMatching(n={self.n}, K={self.n_clusters}, sizes={self.sizes})"


@dataclass(frozen=True)
class IdentityDiagnostics:
    """Residuals of the algebraic identities tying the three objectives."""

    objective_pairwise: float
    objective_mean: float
    frobenius_surrogate: float
    residual_mean: float
    residual_surrogate: float
    tolerance: float
    ok: bool


@dataclass(frozen=True)
class SolveResult:
    """Matching plus objective values and convergence diagnostics.

    ``objective`` is the pairwise sum-of-squares value attained by
    ``matching``; ``surrogate`` the squared Frobenius norm of the matched
    column sums. ``objective_trace`` / ``surrogate_trace`` hold the per-sweep
    values observed by the solver; ``loglik_trace`` is filled by the EM
    driver only.
    """

    matching: object
    objective: float
    surrogate: float
    sweeps: int
    converged: bool
    elapsed: float
    objective_trace: np.ndarray | None = None
    surrogate_trace: np.ndarray | None = None
    loglik_trace: np.ndarray | None = None

    def __post_init__(self):
        if self.objective < 0 or self.surrogate < 0:
            raise ValueError("objective and surrogate must be nonnegative")


def _check_pair(data, matching):
    if data.n != matching.n or data.m != matching.m:
        raise ValueError(
            f"shape mismatch: data is (n={data.n}, m={data.m}), "
            f"matching is (n={matching.n}, m={matching.m})"
        )


def matched_sum(data, matching):
    """Column sums of the matched data: column k is sum_i x_{i, sigma_i(k)}."""
    _check_pair(data, matching)
    permuted = np.take_along_axis(
        data.values, matching.perms[:, None, :], axis=2
    )
    return permuted.sum(axis=0)


def cluster_centers(data, matching):
    """p x m matrix whose column k is the mean of cluster k."""
    return matched_sum(data, matching) / data.n


def objective_pairwise(data, matching):
    """Sum over all unit pairs and clusters of squared distances between
    matched vectors.

    Evaluated in O(nmp) through the identity
    ``n * sum_i ||X_i||_F^2 - ||sum_i X_i P_i||_F^2``; the explicit loop over
    the n(n-1)/2 pairs exists only as a test oracle.
    """
    s = matched_sum(data, matching)
    value = data.n * data.total_sumsq - float(np.sum(s * s))
    # exact value is a sum of squares; a negative here is pure rounding
    return value if value > 0.0 else 0.0


def objective_mean(data, matching):
    """Sum over units and clusters of squared distances to cluster centers."""
    _check_pair(data, matching)
    permuted = np.take_along_axis(
        data.values, matching.perms[:, None, :], axis=2
    )
    centers = permuted.sum(axis=0) / data.n
    diff = permuted - centers[None, :, :]
    return float(np.sum(diff * diff))


def frobenius_surrogate(data, matching):
    """Squared Frobenius norm of the matched column sums.

    Maximizing this quantity over matchings is equivalent to minimizing the
    pairwise objective.
    """
    s = matched_sum(data, matching)
    return float(np.sum(s * s))


def check_identities(data, matching, rtol=1e-9):
    """Verify the two algebraic identities linking the objective forms.

    Returns an :class:`IdentityDiagnostics` with the absolute residuals of
    ``pairwise = n * mean`` and ``pairwise = n * sum ||X_i||^2 - surrogate``,
    checked against ``rtol * (1 + pairwise)``.
    """
    pw = objective_pairwise(data, matching)
    mean = objective_mean(data, matching)
    surr = frobenius_surrogate(data, matching)
    r_mean = abs(pw - data.n * mean)
    r_surr = abs(pw - (data.n * data.total_sumsq - surr))
    tol = rtol * (1.0 + pw)
    return IdentityDiagnostics(
        objective_pairwise=pw,
        objective_mean=mean,
        frobenius_surrogate=surr,
        residual_mean=r_mean,
        residual_surrogate=r_surr,
        tolerance=tol,
        ok=bool(r_mean <= tol and r_surr <= tol),
    )


def _check_partial_pair(data, matching):
    if data.n != matching.n or data.sizes != matching.sizes:
        raise ValueError("shape mismatch between data and partial matching")
    if data.n_clusters != matching.n_clusters:
        raise ValueError(
            f"cluster count mismatch: data K={data.n_clusters}, "
            f"matching K={matching.n_clusters}"
        )


def _cluster_stats(data, matching):
    """Per-cluster member count, vector sum and sum of squared norms."""
    k = data.n_clusters
    counts = np.zeros(k)
    sums = np.zeros((data.p, k))
    sumsq = np.zeros(k)
    for unit, labels in zip(data.units, matching.maps):
        mask = labels != UNMATCHED
        cols = np.flatnonzero(mask)
        labs = labels[mask]
        counts[labs] += 1.0
        sums[:, labs] += unit[:, cols]
        sumsq[labs] += np.sum(unit[:, cols] ** 2, axis=0)
    return counts, sums, sumsq


def objective_unbalanced(data, matching):
    """Total within-cluster sum of pairwise squared distances for partial
    matchings (clusters may hold fewer than n vectors)."""
    _check_partial_pair(data, matching)
    counts, sums, sumsq = _cluster_stats(data, matching)
    value = float(np.dot(counts, sumsq) - np.sum(sums * sums))
    return value if value > 0.0 else 0.0


def unbalanced_surrogate(data, matching):
    """Sum of squared cluster-sum norms; equals the Frobenius surrogate when
    every unit fills every cluster."""
    _check_partial_pair(data, matching)
    _, sums, _ = _cluster_stats(data, matching)
    return float(np.sum(sums * sums))
