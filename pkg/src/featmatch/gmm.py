"""Gaussian mixture with one-vector-per-component constraints.

The model draws m component vectors y_l ~ N(mu_l, Sigma_l) and reveals them
in uniformly shuffled order, once per unit. The E step needs, per unit, the
posterior probability that vector k came from component l; that quantity is
a ratio of matrix permanents of the per-unit density matrix, computed here
with Ryser's inclusion-exclusion after Sinkhorn balancing to keep the
products away from underflow. Densities are handled in log space throughout.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular, LinAlgError

from .core import (
    Matching,
    SolveResult,
    frobenius_surrogate,
    objective_pairwise,
)
from .lap import lap_max

__all__ = [
    "MixtureParams",
    "Posteriors",
    "AnnealSchedule",
    "permanent",
    "sinkhorn",
    "e_step",
    "m_step",
    "log_likelihood",
    "em_fit",
    "harden",
    "params_from_matching",
]

PERMANENT_CAP = 20  # 2^m growth; refuse beyond this size
RIDGE_EPS = 1e-6
LOG_SHIFT_FLOOR = -600.0  # shifted log densities are clamped here to keep
                          # the balanced matrices strictly positive
LOG_WEIGHT_FLOOR = -700.0


@dataclass(frozen=True)
class MixtureParams:
    """Component means (m, p) and covariances (m, p, p)."""

    means: np.ndarray
    covariances: np.ndarray
    shared_cov: bool = False

    def __post_init__(self):
        mu = np.asarray(self.means, dtype=float)
        cov = np.asarray(self.covariances, dtype=float)
        if mu.ndim != 2:
            raise ValueError("means must be an (m, p) array")
        m, p = mu.shape
        if cov.shape != (m, p, p):
            raise ValueError(f"covariances must have shape ({m}, {p}, {p})")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ValueError("parameters must be finite")
        sym_err = np.abs(cov - cov.transpose(0, 2, 1)).max()
        if sym_err > 1e-8 * (1.0 + np.abs(cov).max()):
            raise ValueError("covariances must be symmetric")
        mu = mu.copy()
        cov = cov.copy()
        mu.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]


@dataclass(frozen=True)
class Posteriors:
    """Per-unit doubly stochastic membership matrices.

    ``weights[i, k, l]`` is the posterior probability that vector k of unit i
    was generated by component l; each slice has unit row and column sums.
    ``log_normalizers[i]`` is the log permanent of unit i's density matrix.
    """

    weights: np.ndarray
    log_normalizers: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        c = np.asarray(self.log_normalizers, dtype=float)
        if w.ndim != 3 or w.shape[1] != w.shape[2]:
            raise ValueError("weights must be an (n, m, m) array")
        if c.shape != (w.shape[0],):
            raise ValueError("need one log normalizer per unit")
        if w.min() < -1e-9 or w.max() > 1.0 + 1e-9:
            raise ValueError("weights must lie in [0, 1]")
        rows = w.sum(axis=2)
        cols = w.sum(axis=1)
        if max(np.abs(rows - 1.0).max(), np.abs(cols - 1.0).max()) > 1e-8:
            raise ValueError("weight matrices must be doubly stochastic")
        w = np.clip(w, 0.0, 1.0)
        w.flags.writeable = False
        c = c.copy()
        c.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "log_normalizers", c)

    @property
    def n_units(self):
        return self.weights.shape[0]


@dataclass(frozen=True)
class AnnealSchedule:
    """Inverse temperature schedule beta_t = min(1, beta0 * growth^t)."""

    beta0: float = 1.0
    growth: float = 1.5

    def __post_init__(self):
        if not 0.0 < self.beta0 <= 1.0:
            raise ValueError("beta0 must lie in (0, 1]")
        if self.growth <= 1.0:
            raise ValueError("growth must be > 1")

    def beta(self, t):
        return min(1.0, self.beta0 * self.growth**t)


def permanent(matrix, cap=PERMANENT_CAP):
    """Permanent of a square matrix by Ryser's inclusion-exclusion.

    Column subsets are visited in Gray-code order so each step updates the
    running row sums with a single column, giving O(2^m m) total work.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix must be finite")
    m = a.shape[0]
    if m > cap:
        raise ValueError(f"matrix size {m} exceeds the permanent cap {cap}")
    if m == 0:
        return 1.0
    rowsums = np.zeros(m)
    total = 0.0
    sign = 1.0
    prev_gray = 0
    for count in range(1, 1 << m):
        gray = count ^ (count >> 1)
        flipped = gray ^ prev_gray
        j = flipped.bit_length() - 1
        if gray & flipped:
            rowsums += a[:, j]
        else:
            rowsums -= a[:, j]
        sign = -sign
        total += sign * rowsums.prod()
        prev_gray = gray
    return float(total * (-1.0) ** m)


def sinkhorn(matrix, max_iters=100, tol=1e-8):
    """Balance a nonnegative square matrix to doubly stochastic form.

    Rows and columns are rescaled alternately until every row and column sum
    is within ``tol`` of 1 (or ``max_iters`` alternations are spent).

    Returns
    -------
    balanced : ndarray
        ``diag(r) @ matrix @ diag(c)``.
    log_factor : float
        Minus the summed log scalings, so that
        ``log per(matrix) = log per(balanced) + log_factor``.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix must be finite")
    if a.min() < 0:
        raise ValueError("matrix entries must be nonnegative")
    if np.any(a.sum(axis=1) == 0) or np.any(a.sum(axis=0) == 0):
        raise ValueError("matrix must have no all-zero row or column")
    m = a.shape[0]
    u = np.ones(m)
    v = np.ones(m)
    b = a
    for _ in range(max_iters):
        rows = b.sum(axis=1)
        cols = b.sum(axis=0)
        if max(np.abs(rows - 1.0).max(), np.abs(cols - 1.0).max()) <= tol:
            break
        u = u / rows
        cols = (u[:, None] * a * v[None, :]).sum(axis=0)
        v = v / cols
        b = u[:, None] * a * v[None, :]
    log_factor = -(np.log(u).sum() + np.log(v).sum()) + 0.0
    return b, float(log_factor)


def _log_permanent(positive, cap):
    """log per of a strictly positive matrix via balancing + Ryser."""
    if positive.shape[0] == 0:
        return 0.0
    balanced, log_factor = sinkhorn(positive)
    value = permanent(balanced, cap=cap)
    return math.log(value) + log_factor


def _chol_factors(params, ridge_eps=RIDGE_EPS):
    """Lower Cholesky factors of the (ridged) covariances.

    A relative ridge is always added before factorization; on failure the
    ridge is retried once at ten times the strength.
    """
    factors = []
    for l in range(params.n_components):
        cov = params.covariances[l]
        scale = float(np.mean(np.diag(cov)))
        if scale <= 0.0:
            scale = 1.0
        eye = np.eye(params.dim)
        try:
            factors.append(cholesky(cov + ridge_eps * scale * eye, lower=True))
        except LinAlgError:
            try:
                factors.append(
                    cholesky(cov + 10.0 * ridge_eps * scale * eye, lower=True)
                )
            except LinAlgError as exc:
                raise ValueError(
                    f"component {l + 1} covariance is not factorizable "
                    "even after adding the ridge"
                ) from exc
    return factors


def _log_density_tensor(data, params):
    """(n, m, m) tensor of log N(x_{ik}; mu_l, Sigma_l) over (i, k, l)."""
    if params.n_components != data.m or params.dim != data.p:
        raise ValueError(
            f"parameter shape (m={params.n_components}, p={params.dim}) does "
            f"not match data (m={data.m}, p={data.p})"
        )
    factors = _chol_factors(params)
    vectors = data.values.transpose(0, 2, 1).reshape(data.n * data.m, data.p)
    out = np.empty((data.n * data.m, data.m))
    const = -0.5 * data.p * math.log(2.0 * math.pi)
    for l, chol_l in enumerate(factors):
        logdet = 2.0 * np.sum(np.log(np.diag(chol_l)))
        diff = vectors - params.means[l][None, :]
        y = solve_triangular(chol_l, diff.T, lower=True)
        out[:, l] = const - 0.5 * logdet - 0.5 * np.sum(y * y, axis=0)
    return out.reshape(data.n, data.m, data.m)


def _minor_indices(m):
    return [np.concatenate([np.arange(k), np.arange(k + 1, m)]) for k in range(m)]


def e_step(data, params, beta=1.0, cap=PERMANENT_CAP):
    """Exact posterior membership matrices under the current parameters.

    Per unit, the log densities are shifted by their maximum (tracked and
    restored in the log normalizer), every permanent minor is Sinkhorn
    balanced before Ryser evaluation, and the posterior is
    ``density * per(minor) / per(full)``. With ``beta < 1`` the entries are
    raised to that power and rebalanced to doubly stochastic form.
    """
    if data.m > cap:
        raise ValueError(f"m = {data.m} exceeds the permanent cap {cap}")
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    log_a = _log_density_tensor(data, params)
    m = data.m
    excl = _minor_indices(m)
    weights = np.empty((data.n, m, m))
    log_norm = np.empty(data.n)
    for i in range(data.n):
        shift = float(log_a[i].max())
        shifted = np.maximum(log_a[i] - shift, LOG_SHIFT_FLOOR)
        scaled = np.exp(shifted)
        log_per_full = _log_permanent(scaled, cap)
        log_w = np.empty((m, m))
        for k in range(m):
            rows = excl[k]
            for l in range(m):
                sub = scaled[np.ix_(rows, excl[l])]
                log_w[k, l] = (
                    shifted[k, l] + _log_permanent(sub, cap) - log_per_full
                )
        w = np.exp(log_w)
        if beta < 1.0:
            w, _ = sinkhorn(w**beta, max_iters=500, tol=1e-10)
        weights[i] = np.clip(w, 0.0, 1.0)
        log_norm[i] = m * shift + log_per_full
    return Posteriors(weights, log_norm)


def m_step(data, posteriors, shared_cov=False, ridge_eps=RIDGE_EPS):
    """Weighted mean / covariance update from the posterior memberships.

    Covariances receive a relative ridge; with ``shared_cov`` the per
    component estimates are averaged into a common matrix.
    """
    w = posteriors.weights
    if w.shape != (data.n, data.m, data.m):
        raise ValueError("posterior shape does not match the data")
    x = data.values
    means = np.einsum("ikl,ipk->lp", w, x) / data.n
    covs = np.empty((data.m, data.p, data.p))
    eye = np.eye(data.p)
    for l in range(data.m):
        diff = x - means[l][None, :, None]
        covs[l] = np.einsum("ik,ipk,iqk->pq", w[:, :, l], diff, diff) / data.n
    if shared_cov:
        covs[:] = covs.mean(axis=0)
    for l in range(data.m):
        scale = float(np.mean(np.diag(covs[l])))
        if scale <= 0.0:
            scale = 1.0
        covs[l] += ridge_eps * scale * eye
    return MixtureParams(means, covs, shared_cov=shared_cov)


def log_likelihood(data, params, cap=PERMANENT_CAP):
    """Observed-data log likelihood: summed log permanents of the per-unit
    density matrices, minus n log m! for the uniform shuffle prior."""
    if data.m > cap:
        raise ValueError(f"m = {data.m} exceeds the permanent cap {cap}")
    log_a = _log_density_tensor(data, params)
    total = 0.0
    for i in range(data.n):
        shift = float(log_a[i].max())
        scaled = np.exp(np.maximum(log_a[i] - shift, LOG_SHIFT_FLOOR))
        total += data.m * shift + _log_permanent(scaled, cap)
    return float(total - data.n * math.lgamma(data.m + 1))


def params_from_matching(data, matching, shared_cov=False, ridge_eps=RIDGE_EPS):
    """Mixture parameters implied by a hard matching: cluster means and
    within-cluster sample covariances (plus ridge)."""
    permuted = np.take_along_axis(data.values, matching.perms[:, None, :], axis=2)
    means = permuted.mean(axis=0).T  # (m, p)
    covs = np.empty((data.m, data.p, data.p))
    eye = np.eye(data.p)
    for l in range(data.m):
        diff = permuted[:, :, l] - means[l][None, :]
        covs[l] = diff.T @ diff / data.n
    if shared_cov:
        covs[:] = covs.mean(axis=0)
    for l in range(data.m):
        scale = float(np.mean(np.diag(covs[l])))
        if scale <= 0.0:
            scale = 1.0
        covs[l] += ridge_eps * scale * eye
    return MixtureParams(means, covs, shared_cov=shared_cov)


def harden(posteriors):
    """Modal permutation per unit: the assignment maximizing the summed log
    posterior weights (log entries floored to stay finite)."""
    n, m, _ = posteriors.weights.shape
    perms = np.empty((n, m), dtype=np.intp)
    for i in range(n):
        log_w = np.log(np.maximum(posteriors.weights[i], 1e-304))
        log_w = np.maximum(log_w, LOG_WEIGHT_FLOOR)
        perms[i], _ = lap_max(log_w.T)
    return Matching(perms)


def em_fit(data, start, schedule=None, max_iters=200, tol=1e-6,
           shared_cov=None, cap=PERMANENT_CAP):
    """Run (annealed) EM to a local maximum of the matching mixture.

    Parameters
    ----------
    start : MixtureParams or Matching
        Either explicit parameters or a hard matching to derive them from.
    schedule : AnnealSchedule, optional
        Defaults to plain EM (beta = 1 throughout).
    max_iters, tol
        Stop when the relative log-likelihood increase falls below ``tol``
        (only once the schedule has reached beta = 1) or after ``max_iters``
        iterations.
    shared_cov : bool, optional
        Tie the component covariances; defaults to the start's setting.

    Returns
    -------
    (MixtureParams, Posteriors, SolveResult)
        Final parameters, their posteriors, and the hardened matching with
        the log-likelihood trace in ``loglik_trace``.
    """
    t0 = time.perf_counter()
    if isinstance(start, Matching):
        if shared_cov is None:
            shared_cov = False
        params = params_from_matching(data, start, shared_cov=shared_cov)
    else:
        params = start
        if shared_cov is None:
            shared_cov = params.shared_cov
    schedule = schedule or AnnealSchedule(beta0=1.0)
    log_mfact = data.n * math.lgamma(data.m + 1)
    trace = []
    posteriors = None
    converged = False
    prev_ll = None
    prev_beta = 0.0
    for t in range(max_iters):
        beta = schedule.beta(t)
        posteriors = e_step(data, params, beta=beta, cap=cap)
        ll = float(posteriors.log_normalizers.sum() - log_mfact)
        trace.append(ll)
        if (
            prev_ll is not None
            and beta >= 1.0
            and prev_beta >= 1.0
            and ll - prev_ll < tol * (1.0 + abs(prev_ll))
        ):
            converged = True
            break
        prev_ll, prev_beta = ll, beta
        params = m_step(data, posteriors, shared_cov=shared_cov)
    if not converged:
        # loop exhausted right after an M step; refresh the posteriors so the
        # returned triple is consistent
        posteriors = e_step(data, params, beta=1.0, cap=cap)
        trace.append(float(posteriors.log_normalizers.sum() - log_mfact))
    matching = harden(posteriors)
    result = SolveResult(
        matching=matching,
        objective=objective_pairwise(data, matching),
        surrogate=frobenius_surrogate(data, matching),
        sweeps=len(trace),
        converged=converged,
        elapsed=time.perf_counter() - t0,
        loglik_trace=np.asarray(trace),
    )
    return params, posteriors, result
