"""Exact linear assignment kernel used by every solver.

Both entry points delegate to scipy's Jonker-Volgenant style shortest
augmenting path solver, which runs in O(max(r, c)^3) and is deterministic
for a fixed input.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["lap_max", "lap_min_rect"]


def _validated(matrix, name):
    arr = np.asarray(matrix, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must have finite entries")
    return arr


def lap_max(scores):
    """Maximum-score assignment of the rows of a square matrix to its columns.

    Parameters
    ----------
    scores : array_like of shape (m, m)

    Returns
    -------
    perm : ndarray of shape (m,)
        ``perm[k]`` is the column assigned to row k; a permutation of 0..m-1.
    value : float
        The attained maximum of ``sum_k scores[k, perm[k]]``.
    """
    a = _validated(scores, "score matrix")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"score matrix must be square, got shape {a.shape}")
    rows, cols = linear_sum_assignment(a, maximize=True)
    return cols, float(a[rows, cols].sum())


def lap_min_rect(costs):
    """Minimum-cost injective assignment of r rows into c >= r columns.

    Returns
    -------
    assign : ndarray of shape (r,)
        ``assign[q]`` is the column chosen for row q; columns are distinct.
    value : float
        The attained minimum of ``sum_q costs[q, assign[q]]``.
    """
    c = _validated(costs, "cost matrix")
    if c.shape[0] > c.shape[1]:
        raise ValueError(
            f"need rows <= cols, got shape {c.shape}; transpose the problem"
        )
    rows, cols = linear_sum_assignment(c)
    return cols, float(c[rows, cols].sum())
