"""Starting-point generators for the local-search solvers.

All generators are deterministic given (data, arguments, seed) and return
valid matchings. The hub and recursive heuristics reduce the joint problem
to a sequence of independent linear assignments against a template.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Matching, objective_pairwise
from .lap import lap_max

__all__ = [
    "InitSpec",
    "init_identity",
    "init_random",
    "init_template",
    "init_hub",
    "init_recursive",
    "initialize",
]

KINDS = ("identity", "random", "template", "hub-single", "hub-multiple", "recursive")


@dataclass(frozen=True)
class InitSpec:
    """Parsed description of an initialization strategy.

    ``kind`` is one of ``identity``, ``random``, ``template``, ``hub-single``,
    ``hub-multiple``, ``recursive``. ``restarts`` applies to ``random`` only;
    ``hub`` is the 0-based template unit for ``hub-single``; ``cap`` bounds
    the candidate set of ``hub-multiple``.
    """

    kind: str
    restarts: int = 1
    hub: int | None = None
    cap: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown init kind {self.kind!r}; choose from {KINDS}")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.kind == "hub-single" and self.hub is None:
            raise ValueError("hub-single needs a hub index")

    @classmethod
    def parse(cls, text, seed=None):
        """Parse CLI-style init ids: ``identity``, ``random:R``, ``hub``,
        ``hub:i`` (1-based i), ``recursive``."""
        name, _, arg = text.partition(":")
        if name == "identity":
            return cls("identity", seed=seed)
        if name == "random":
            restarts = int(arg) if arg else 1
            return cls("random", restarts=restarts, seed=seed)
        if name == "hub":
            if arg:
                hub = int(arg)
                if hub < 1:
                    raise ValueError("hub index is 1-based and must be >= 1")
                return cls("hub-single", hub=hub - 1, seed=seed)
            return cls("hub-multiple", seed=seed)
        if name == "recursive":
            return cls("recursive", seed=seed)
        raise ValueError(f"unknown init id {text!r}")


def init_identity(data):
    """Identity permutation for every unit."""
    return Matching.identity(data.n, data.m)


def init_random(data, seed=None):
    """Independent uniform permutation per unit (seeded shuffle)."""
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(data.m) for _ in range(data.n)])
    return Matching(perms)


def init_template(data, template):
    """Match every unit against a fixed p x m template.

    Unit i gets the permutation minimizing ||X_i P_i - T||_F^2, i.e. the
    maximum-score assignment on the inner products of template columns with
    unit columns; the n assignments are independent.
    """
    t = np.asarray(template, dtype=float)
    if t.shape != (data.p, data.m):
        raise ValueError(
            f"template shape {t.shape} does not match data (p={data.p}, m={data.m})"
        )
    if not np.all(np.isfinite(t)):
        raise ValueError("template must be finite")
    perms = np.empty((data.n, data.m), dtype=np.intp)
    for i in range(data.n):
        perms[i], _ = lap_max(t.T @ data.values[i])
    return Matching(perms)


def init_hub(data, mode="multiple", hub=None, cap=None, seed=None):
    """Template matching with data units as templates.

    ``mode="single"`` uses unit ``hub`` as the template. ``mode="multiple"``
    tries every unit (or a seeded subsample of ``cap`` candidates) as the
    template and keeps the matching with the smallest pairwise objective,
    breaking ties by the smallest candidate index.
    """
    if mode == "single":
        if hub is None or not 0 <= hub < data.n:
            raise ValueError(f"hub index must lie in [0, {data.n - 1}]")
        return init_template(data, data.values[hub])
    if mode != "multiple":
        raise ValueError("mode must be 'single' or 'multiple'")
    candidates = np.arange(data.n)
    if cap is not None and cap < data.n:
        if cap < 1:
            raise ValueError("cap must be >= 1")
        rng = np.random.default_rng(seed)
        candidates = np.sort(rng.choice(data.n, size=cap, replace=False))
    best = None
    best_obj = np.inf
    for c in candidates:
        matching = init_template(data, data.values[c])
        obj = objective_pairwise(data, matching)
        if obj < best_obj:
            best, best_obj = matching, obj
    return best


def init_recursive(data, seed=None, shuffle=False):
    """Greedy sequential matching against the running sum of matched units.

    The first unit keeps the identity permutation; each following unit is
    matched (one linear assignment) against the sum of the already matched
    ones. Units are visited in input order unless ``shuffle`` is set.
    """
    order = np.arange(data.n)
    if shuffle:
        order = np.random.default_rng(seed).permutation(data.n)
    perms = np.empty((data.n, data.m), dtype=np.intp)
    first = order[0]
    perms[first] = np.arange(data.m)
    running = data.values[first][:, perms[first]].copy()
    for i in order[1:]:
        perms[i], _ = lap_max(running.T @ data.values[i])
        running += data.values[i][:, perms[i]]
    return Matching(perms)


def initialize(data, spec):
    """Produce one matching from an InitSpec (restart loops live in the
    benchmark pipeline, which varies the seed)."""
    if spec.kind == "identity":
        return init_identity(data)
    if spec.kind == "random":
        return init_random(data, seed=spec.seed)
    if spec.kind == "hub-single":
        return init_hub(data, mode="single", hub=spec.hub)
    if spec.kind == "hub-multiple":
        return init_hub(data, mode="multiple", cap=spec.cap, seed=spec.seed)
    if spec.kind == "recursive":
        return init_recursive(data, seed=spec.seed, shuffle=False)
    raise ValueError(f"InitSpec kind {spec.kind!r} needs explicit arguments")
