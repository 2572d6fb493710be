"""Agent dynamics and communication topology.

All agents share scalar per-agent dynamics coefficients: agent i's state (a
vector over the workspace dimensions) evolves as

    x_i[t] = a_i x_i[t-1] + b_i u_i[t-1],

its published output is y_i = c_i x_i, and inputs are box-bounded per
coordinate.  The topology is a connected undirected graph without self-loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DynamicsError(Exception):
    pass


@dataclass(frozen=True)
class Graph:
    n: int
    edges: frozenset[tuple[int, int]]

    @classmethod
    def from_edges(cls, n: int, edges) -> "Graph":
        norm = set()
        for i, l in edges:
            i, l = int(i), int(l)
            if i == l:
                raise DynamicsError(f"self-loop on node {i}")
            if not (0 <= i < n and 0 <= l < n):
                raise DynamicsError(f"edge ({i},{l}) references a node outside 0..{n - 1}")
            norm.add((min(i, l), max(i, l)))
        g = cls(n, frozenset(norm))
        if not g.is_connected():
            raise DynamicsError("graph is not connected")
        return g

    def neighbors(self, i: int) -> list[int]:
        out = [l for (a, b) in self.edges for l in ((b,) if a == i else (a,) if b == i else ())]
        return sorted(out)

    def adjacency(self) -> np.ndarray:
        d = np.zeros((self.n, self.n))
        for i, l in self.edges:
            d[i, l] = d[l, i] = 1.0
        return d

    def is_connected(self) -> bool:
        if self.n == 0:
            return False
        if self.n == 1:
            return True
        seen = {0}
        frontier = [0]
        while frontier:
            node = frontier.pop()
            for nb in self.neighbors(node):
                if nb not in seen:
                    seen.add(nb)
                    frontier.append(nb)
        return len(seen) == self.n


@dataclass(frozen=True)
class LinearDynamics:
    """Diagonal dynamics/output coefficients and input bounds."""

    a: np.ndarray        # (N,) state coefficients
    b: np.ndarray        # (N,) input coefficients
    c: np.ndarray        # (N,) output coefficients
    n_dims: int
    u_min: float
    u_max: float

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float))
        object.__setattr__(self, "c", np.asarray(self.c, dtype=float))
        if not (self.a.shape == self.b.shape == self.c.shape) or self.a.ndim != 1:
            raise DynamicsError("dynamics coefficient vectors must share one length")
        if self.u_min > self.u_max:
            raise DynamicsError(f"input bounds empty: [{self.u_min}, {self.u_max}]")
        if self.n_dims < 1:
            raise DynamicsError("need at least one workspace dimension")

    @property
    def n_agents(self) -> int:
        return self.a.shape[0]


def check_input(u: np.ndarray, dyn: LinearDynamics, tol: float = 1e-9) -> None:
    u = np.asarray(u, dtype=float)
    if np.any(u < dyn.u_min - tol) or np.any(u > dyn.u_max + tol):
        raise DynamicsError(
            f"input outside [{dyn.u_min}, {dyn.u_max}]: min={u.min():.6g} max={u.max():.6g}"
        )


def step_agent(x: np.ndarray, u: np.ndarray, dyn: LinearDynamics, i: int) -> np.ndarray:
    """x <- a_i x + b_i u for a single agent, enforcing the input bounds."""
    check_input(u, dyn)
    return dyn.a[i] * np.asarray(x, dtype=float) + dyn.b[i] * np.asarray(u, dtype=float)


def step_system(states: np.ndarray, inputs: np.ndarray, dyn: LinearDynamics) -> np.ndarray:
    """Advance all agents at once; rows index agents."""
    check_input(inputs, dyn)
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    return dyn.a[:, None] * states + dyn.b[:, None] * inputs


def system_average(states: np.ndarray) -> np.ndarray:
    """Mean state over the agents (the system-level trajectory sample)."""
    return np.asarray(states, dtype=float).mean(axis=0)


def output(x: np.ndarray, dyn: LinearDynamics, i: int) -> np.ndarray:
    """Published output of agent i before privacy noise: c_i x."""
    return dyn.c[i] * np.asarray(x, dtype=float)
