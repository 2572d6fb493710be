"""Seeded random formulas, predicates and trajectories shared across tests.

Generated robustness magnitudes stay far below the default big-M of 1000 so
encodings never saturate against the rails.
"""

from __future__ import annotations

import numpy as np

from dpmtl import mtl


def random_predicates(rng: np.random.Generator, dims: int, count: int = 3) -> dict[str, mtl.Predicate]:
    preds = {}
    for k in range(count):
        name = f"p{k}"
        if rng.random() < 0.6:
            bounds = []
            for _ in range(dims):
                lo = float(rng.uniform(-9.0, 6.0))
                hi = lo + float(rng.uniform(1.0, 8.0))
                bounds.append((lo, hi))
            preds[name] = mtl.Predicate.from_box(name, bounds)
        else:
            normal = rng.normal(size=dims)
            norm = float(np.linalg.norm(normal))
            if norm < 1e-6:
                normal = np.ones(dims)
                norm = float(np.linalg.norm(normal))
            preds[name] = mtl.Predicate(
                name, (((tuple(float(c) for c in normal / norm)), float(rng.uniform(-6, 6))),)
            )
    return preds


def random_formula(rng: np.random.Generator, preds: dict[str, mtl.Predicate],
                   depth: int, max_horizon: int) -> mtl.Formula:
    """Random formula of the given depth whose horizon stays within budget."""
    names = sorted(preds)

    def gen(d: int, budget: int) -> mtl.Formula:
        if d == 0 or budget <= 0:
            atom = mtl.Atom(preds[names[int(rng.integers(len(names)))]])
            return mtl.Not(atom) if rng.random() < 0.25 else atom
        kind = rng.choice(["not", "and", "or", "ev", "alw", "until"])
        if kind == "not":
            return mtl.Not(gen(d - 1, budget))
        if kind == "and":
            return mtl.And(gen(d - 1, budget), gen(d - 1, budget))
        if kind == "or":
            return mtl.Or(gen(d - 1, budget), gen(d - 1, budget))
        a = int(rng.integers(0, max(1, budget // 2) + 1))
        b = a + int(rng.integers(0, budget - a + 1))
        interval = mtl.Interval(a, b)
        if kind == "ev":
            return mtl.Eventually(interval, gen(d - 1, budget - b))
        if kind == "alw":
            return mtl.Globally(interval, gen(d - 1, budget - b))
        return mtl.Until(interval, gen(d - 1, budget - b), gen(d - 1, budget - b))

    while True:
        f = gen(depth, max_horizon)
        if mtl.horizon(f) <= max_horizon:
            return f


def random_instance(seed: int, depth: int | None = None, max_horizon: int = 8,
                    dims: int | None = None):
    """(trajectory, formula, predicates) with the trajectory long enough for t=0.

    Depth is sampled from {1, 2, 3} unless pinned.
    """
    rng = np.random.default_rng(np.random.SeedSequence((823117, seed)))
    d = dims if dims is not None else int(rng.integers(1, 3))
    depth = depth if depth is not None else int(rng.integers(1, 4))
    preds = random_predicates(rng, d)
    f = random_formula(rng, preds, depth, max_horizon)
    length = mtl.horizon(f) + 1 + int(rng.integers(0, 3))
    traj = rng.uniform(-8.0, 8.0, size=(length, d))
    return traj, f, preds
