"""Synthetic data generation, evaluation metrics, benchmark orchestration,
and file formats.

The generator draws m class means, samples one noisy copy of every class per
unit, and shuffles the columns uniformly per unit; the shuffle is returned as
the planted ground truth. Benchmarks run (init, solver, post-processing)
pipelines over a grid of instance sizes with fully seeded replications and
report objective values, relative errors, Rand indices and wall times as CSV.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .core import FeatureStack, UnbalancedStack
from .gmm import em_fit
from .initializers import InitSpec, init_random, initialize
from .search import (
    SolveOptions,
    bca,
    exhaustive,
    frank_wolfe,
    interchange,
    kmeans_match,
)

__all__ = [
    "GenConfig",
    "generate",
    "rand_index",
    "relative_error",
    "BenchmarkRow",
    "BenchmarkReport",
    "run_method",
    "run_benchmark",
    "load_stack",
    "save_stack",
    "save_report",
    "apply_weight_cholesky",
    "DIGITSLIKE",
]

MAIN_METHODS = ("kmeans", "bca", "fw", "interchange", "em", "exhaustive")
POST_METHODS = ("2x", "em")


@dataclass(frozen=True)
class GenConfig:
    """Parameters of the synthetic matching instances.

    Class means are drawn i.i.d. N(0, center_spread^2 I) unless ``means`` is
    given; vector k of a unit is its class mean plus isotropic class noise
    (``class_sd``, scalar or one value per class) plus additive white noise
    (``noise_sd``). Columns are shuffled independently per unit.
    """

    n: int
    m: int
    p: int
    center_spread: float = 10.0
    class_sd: float | tuple = 1.0
    noise_sd: float = 2.5
    seed: int = 0
    means: np.ndarray | None = None

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.p < 1:
            raise ValueError("n, m, p must all be >= 1")
        sds = np.atleast_1d(np.asarray(self.class_sd, dtype=float))
        if sds.size == 1:
            sds = np.full(self.m, float(sds[0]))
        if sds.shape != (self.m,):
            raise ValueError(f"class_sd must be scalar or length m={self.m}")
        if np.any(sds < 0) or self.noise_sd < 0 or self.center_spread < 0:
            raise ValueError("spreads and noise levels must be nonnegative")
        object.__setattr__(self, "class_sd", tuple(float(s) for s in sds))
        if self.means is not None:
            mu = np.asarray(self.means, dtype=float)
            if mu.shape != (self.p, self.m):
                raise ValueError(
                    f"means must have shape (p={self.p}, m={self.m})"
                )
            if not np.all(np.isfinite(mu)):
                raise ValueError("means must be finite")
            mu = mu.copy()
            mu.flags.writeable = False
            object.__setattr__(self, "means", mu)


# echoes the scale of the handwritten-digits experiments: 10 classes of
# 64-dimensional features with white-noise SD 2.5
DIGITSLIKE = dict(m=10, p=64, center_spread=25.0, class_sd=5.0, noise_sd=2.5)


def generate(config):
    """Draw one synthetic instance.

    Returns
    -------
    data : FeatureStack
    labels : ndarray of shape (n, m)
        ``labels[i, j]`` is the (0-based) class of column j of unit i; the
        plant against which recovered matchings are scored.
    """
    rng = np.random.default_rng(config.seed)
    if config.means is not None:
        means = config.means
    else:
        means = rng.normal(0.0, config.center_spread, size=(config.p, config.m))
    sds = np.asarray(config.class_sd)
    values = np.empty((config.n, config.p, config.m))
    labels = np.empty((config.n, config.m), dtype=np.intp)
    for i in range(config.n):
        y = means + rng.standard_normal((config.p, config.m)) * sds[None, :]
        if config.noise_sd > 0:
            y = y + rng.standard_normal((config.p, config.m)) * config.noise_sd
        shuffle = rng.permutation(config.m)
        values[i] = y[:, shuffle]
        labels[i] = shuffle
    return FeatureStack(values), labels


def rand_index(labels_a, labels_b):
    """Fraction of item pairs on which two partitions agree (same cluster in
    both, or different clusters in both)."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label lengths differ: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two items")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)

    def pairs(x):
        return float(np.sum(x * (x - 1.0) / 2.0))

    total = pairs(np.array([float(a.size)]))
    same_both = pairs(table)
    same_a = pairs(table.sum(axis=1))
    same_b = pairs(table.sum(axis=0))
    return (total + 2.0 * same_both - same_a - same_b) / total


def relative_error(values):
    """Per-method relative optimality gaps: ``v / min(values) - 1``.

    ``values`` is one column per instance with methods along axis 0 (a plain
    1-D array is a single instance). NaN entries are ignored when taking the
    minimum and propagate to the output; each instance needs at least one
    finite value.
    """
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("need at least one value")
    flat = v.ndim == 1
    if flat:
        v = v[:, None]
    if np.any(np.all(np.isnan(v), axis=0)):
        raise ValueError("each instance needs at least one finite value")
    vmin = np.nanmin(v, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = v / vmin[None, :] - 1.0
    zero_min = vmin == 0
    if np.any(zero_min):
        cols = np.flatnonzero(zero_min)
        rel[:, cols] = np.where(v[:, cols] == 0.0, 0.0, np.inf)
        rel[np.isnan(v)] = np.nan
    return rel[:, 0] if flat else rel


@dataclass(frozen=True)
class BenchmarkRow:
    method: str
    init: str
    n: int
    rep: int
    objective: float
    rel_error: float
    rand_index: float
    seconds: float
    sweeps: int

    def __post_init__(self):
        if not math.isnan(self.rel_error) and self.rel_error < 0:
            raise ValueError("relative error must be >= 0")
        if not math.isnan(self.rand_index) and not 0.0 <= self.rand_index <= 1.0:
            raise ValueError("Rand index must lie in [0, 1]")


@dataclass(frozen=True)
class BenchmarkReport:
    rows: tuple

    def to_csv_lines(self):
        lines = ["method,init,n,rep,objective,rel_error,rand_index,seconds,sweeps"]
        for r in self.rows:
            lines.append(
                f"{r.method},{r.init},{r.n},{r.rep},{r.objective!r},"
                f"{r.rel_error!r},{r.rand_index!r},{r.seconds:.3f},{r.sweeps}"
            )
        return lines


def save_report(report, path):
    """Write a benchmark report as CSV (millisecond timing resolution)."""
    with open(path, "w") as fh:
        fh.write("\n".join(report.to_csv_lines()) + "\n")


def _parse_method(method):
    base, _, post = method.partition("+")
    if base not in MAIN_METHODS:
        raise ValueError(
            f"unknown method id {method!r}; main step must be one of "
            f"{MAIN_METHODS}"
        )
    if post and post not in POST_METHODS:
        raise ValueError(
            f"unknown post-processing {post!r}; choose from {POST_METHODS}"
        )
    return base, post or None


def _solve_main(base, data, start, opts, em_kwargs):
    if base == "kmeans":
        return kmeans_match(data, start, opts)
    if base == "bca":
        return bca(data, start, opts)
    if base == "fw":
        return frank_wolfe(data, start, opts)
    if base == "interchange":
        return interchange(data, start, opts)
    if base == "em":
        _, _, result = em_fit(data, start, **(em_kwargs or {}))
        return result
    raise ValueError(f"unknown solver {base!r}")


def run_method(data, method, init="identity", seed=None, opts=None,
               em_kwargs=None, timeout_secs=None):
    """Run one (init, solver, optional post-processing) pipeline.

    ``method`` is a main solver id (``kmeans``, ``bca``, ``fw``,
    ``interchange``, ``em``, ``exhaustive``), optionally suffixed with
    ``+2x`` or ``+em`` for post-processing. ``init`` follows the ids of
    :meth:`InitSpec.parse`; ``random:R`` runs R restarts and keeps the best
    final objective. A ``timeout_secs`` deadline is honored between restarts.
    """
    t0 = time.perf_counter()
    base, post = _parse_method(method)
    opts = opts or SolveOptions(seed=seed)
    spec = init if isinstance(init, InitSpec) else InitSpec.parse(init, seed=seed)
    if base == "exhaustive":
        result = exhaustive(data)
    elif spec.kind == "random" and spec.restarts > 1:
        children = np.random.SeedSequence(seed).spawn(spec.restarts)
        result = None
        for child in children:
            start = init_random(data, seed=child)
            candidate = _solve_main(base, data, start, opts, em_kwargs)
            if result is None or candidate.objective < result.objective:
                result = candidate
            if timeout_secs is not None and time.perf_counter() - t0 > timeout_secs:
                break
    else:
        start = initialize(data, spec)
        result = _solve_main(base, data, start, opts, em_kwargs)
    sweeps = result.sweeps
    if post == "2x":
        stage = interchange(data, result.matching, opts)
        sweeps += stage.sweeps
        result = stage
    elif post == "em":
        _, _, stage = em_fit(data, result.matching, **(em_kwargs or {}))
        sweeps += stage.sweeps
        result = stage
    return dataclasses.replace(
        result, sweeps=sweeps, elapsed=time.perf_counter() - t0
    )


def _worker_count(threads):
    if threads is not None:
        return max(1, int(threads))
    return max(1, int(os.environ.get("FEATMATCH_THREADS", "1")))


def _run_replication(task):
    (methods, inits, n, n_idx, rep, seed, gen_template, opts_template,
     em_kwargs, timeout_secs) = task
    ss = np.random.SeedSequence([seed, n_idx, rep])
    gen_seed = int(ss.generate_state(1)[0])
    config = dataclasses.replace(gen_template, n=n, seed=gen_seed)
    data, labels = generate(config)
    entries = []
    pipe = 0
    for method in methods:
        for init in inits:
            pipe_seed = int(
                np.random.SeedSequence([seed, n_idx, rep, pipe]).generate_state(1)[0]
            )
            opts = dataclasses.replace(opts_template, seed=pipe_seed)
            result = run_method(
                data, method, init, seed=pipe_seed, opts=opts,
                em_kwargs=em_kwargs, timeout_secs=timeout_secs,
            )
            timed_out = (
                timeout_secs is not None and result.elapsed > timeout_secs
            )
            if timed_out or not isinstance(result.matching, Matching):
                objective = math.nan
                ri = math.nan
            else:
                objective = result.objective
                ri = rand_index(labels, result.matching.inverse_labels())
            entries.append(
                dict(
                    method=method, init=init, n=n, rep=rep,
                    objective=objective, rand_index=ri,
                    seconds=result.elapsed, sweeps=result.sweeps,
                )
            )
            pipe += 1
    objectives = np.array([e["objective"] for e in entries])
    rels = relative_error(objectives)
    for entry, rel in zip(entries, rels):
        entry["rel_error"] = float(rel)
    return entries


def run_benchmark(methods, inits, n_values, reps, seed=0, gen=None,
                  opts=None, em_kwargs=None, timeout_secs=300.0,
                  threads=None):
    """Run the full (method x init x n) grid with seeded replications.

    Every cell of every replication is an independent, deterministically
    seeded pipeline: generate data, initialize, solve, post-process, score.
    Relative errors are taken against the best objective attained on the same
    instance across all pipelines. Runs whose wall time exceeds
    ``timeout_secs`` have their metrics recorded as NaN (their timing is
    kept). Replications may run concurrently (``threads`` or the
    FEATMATCH_THREADS environment variable); the report content does not
    depend on the worker count.
    """
    methods = list(methods)
    inits = list(inits)
    for method in methods:
        _parse_method(method)
    for init in inits:
        InitSpec.parse(init)
    if reps < 1:
        raise ValueError("reps must be >= 1")
    gen_template = gen or GenConfig(n=1, m=10, p=64, **{
        k: v for k, v in DIGITSLIKE.items() if k not in ("m", "p")
    })
    opts_template = opts or SolveOptions()
    tasks = [
        (methods, inits, int(n), n_idx, rep, seed, gen_template,
         opts_template, em_kwargs, timeout_secs)
        for n_idx, n in enumerate(n_values)
        for rep in range(reps)
    ]
    workers = _worker_count(threads)
    if workers == 1:
        per_task = [_run_replication(t) for t in tasks]
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            per_task = list(pool.map(_run_replication, tasks))
    rows = [
        BenchmarkRow(
            method=e["method"], init=e["init"], n=e["n"], rep=e["rep"],
            objective=e["objective"], rel_error=e["rel_error"],
            rand_index=e["rand_index"], seconds=e["seconds"],
            sweeps=e["sweeps"],
        )
        for entries in per_task
        for e in entries
    ]
    return BenchmarkReport(rows=tuple(rows))


def apply_weight_cholesky(stack, factor):
    """Left-multiply every unit by a p x p matrix (typically the Cholesky
    factor of a weighting matrix), turning weighted squared distances into
    plain ones; solvers need no changes."""
    l = np.asarray(factor, dtype=float)
    if l.shape != (stack.p, stack.p):
        raise ValueError(f"factor must be ({stack.p}, {stack.p}), got {l.shape}")
    if not np.all(np.isfinite(l)):
        raise ValueError("factor must be finite")
    return FeatureStack(np.einsum("qp,npm->nqm", l, stack.values))


# ---------------------------------------------------------------------------
# file formats


def save_stack(stack, path, fmt=None):
    """Write a stack to JSON (column-major unit matrices) or CSV (one row
    per vector: unit, index, f1..fp; 1-based ids)."""
    fmt = fmt or _format_from_path(path)
    if isinstance(stack, FeatureStack):
        units = [stack.values[i] for i in range(stack.n)]
        sizes = None
        k = None
    else:
        units = list(stack.units)
        sizes = list(stack.sizes)
        k = stack.n_clusters
    if fmt == "json":
        doc = {"n": len(units), "p": units[0].shape[0]}
        if sizes is None:
            doc["m"] = units[0].shape[1]
        else:
            doc["sizes"] = sizes
            doc["K"] = k
        doc["units"] = [u.flatten(order="F").tolist() for u in units]
        with open(path, "w") as fh:
            json.dump(doc, fh)
    elif fmt == "csv":
        p = units[0].shape[0]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["unit", "index"] + [f"f{j + 1}" for j in range(p)])
            for i, u in enumerate(units):
                for q in range(u.shape[1]):
                    writer.writerow(
                        [i + 1, q + 1] + [repr(x) for x in u[:, q]]
                    )
    else:
        raise ValueError(f"unknown stack format {fmt!r}; use 'json' or 'csv'")


def _format_from_path(path):
    text = str(path).lower()
    if text.endswith(".json"):
        return "json"
    if text.endswith(".csv"):
        return "csv"
    raise ValueError(f"cannot infer format from {path!r}; pass fmt explicitly")


def _load_json_stack(path, n_clusters):
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("n", "p", "units"):
        if key not in doc:
            raise ValueError(f"stack file is missing the {key!r} field")
    n = int(doc["n"])
    p = int(doc["p"])
    units = doc["units"]
    if len(units) != n:
        raise ValueError(f"expected {n} units, file holds {len(units)}")
    if "sizes" in doc:
        sizes = [int(s) for s in doc["sizes"]]
        if len(sizes) != n:
            raise ValueError("sizes must list one count per unit")
        k = n_clusters if n_clusters is not None else doc.get("K")
        if k is None:
            raise ValueError("unbalanced stack needs a K field or n_clusters")
        mats = []
        for i, (flat, m_i) in enumerate(zip(units, sizes)):
            if len(flat) != p * m_i:
                raise ValueError(
                    f"unit {i + 1}: expected {p}x{m_i} = {p * m_i} values, "
                    f"got {len(flat)}"
                )
            mats.append(np.asarray(flat, dtype=float).reshape((p, m_i), order="F"))
        return UnbalancedStack(mats, int(k))
    m = int(doc["m"])
    mats = []
    for i, flat in enumerate(units):
        if len(flat) != p * m:
            raise ValueError(
                f"unit {i + 1}: expected {p}x{m} = {p * m} values, "
                f"got {len(flat)}"
            )
        mats.append(np.asarray(flat, dtype=float).reshape((p, m), order="F"))
    return FeatureStack(np.stack(mats))


def _load_csv_stack(path, n_clusters):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty stack file") from None
        if len(header) < 3 or header[:2] != ["unit", "index"]:
            raise ValueError(
                "stack CSV must start with columns unit, index, f1, ..."
            )
        p = len(header) - 2
        by_unit = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 2:
                unit_name = row[0] if row else "?"
                raise ValueError(
                    f"unit {unit_name} (line {lineno}): expected {p} feature "
                    f"columns, got {len(row) - 2}"
                )
            unit = int(row[0])
            index = int(row[1])
            by_unit.setdefault(unit, {})[index] = [float(x) for x in row[2:]]
    if not by_unit:
        raise ValueError("stack file holds no vectors")
    unit_ids = sorted(by_unit)
    if unit_ids != list(range(1, len(unit_ids) + 1)):
        raise ValueError("unit ids must be 1..n without gaps")
    mats = []
    for unit in unit_ids:
        entries = by_unit[unit]
        m_i = len(entries)
        if sorted(entries) != list(range(1, m_i + 1)):
            raise ValueError(f"unit {unit}: vector indices must be 1..{m_i}")
        mats.append(
            np.array([entries[q] for q in range(1, m_i + 1)], dtype=float).T
        )
    sizes = {m.shape[1] for m in mats}
    if len(sizes) == 1 and n_clusters is None:
        return FeatureStack(np.stack(mats))
    if n_clusters is None:
        raise ValueError(
            "units have unequal sizes; pass n_clusters to load an "
            "unbalanced stack"
        )
    return UnbalancedStack(mats, int(n_clusters))


def load_stack(path, fmt=None, n_clusters=None):
    """Read a stack written by :func:`save_stack`.

    JSON files self-describe balanced vs unbalanced form; CSV files with
    unequal per-unit sizes (or an explicit ``n_clusters``) load as
    :class:`UnbalancedStack`. Round-trips are exact.
    """
    fmt = fmt or _format_from_path(path)
    if fmt == "json":
        return _load_json_stack(path, n_clusters)
    if fmt == "csv":
        return _load_csv_stack(path, n_clusters)
    raise ValueError(f"unknown stack format {fmt!r}; use 'json' or 'csv'")
