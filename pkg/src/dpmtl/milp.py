"""Mixed-integer linear programming on dense tableaus.

``MilpModel`` is a plain container: bounded continuous/binary variables, linear
constraints (<=, =, >=) and a minimisation objective.  ``solve_lp`` runs a
two-phase primal simplex on the integrality-relaxed model; variable bounds are
handled natively (nonbasic variables may sit at either bound), so bound
constraints never become tableau rows.  ``solve_milp`` wraps it in a
deterministic best-first branch-and-bound with most-fractional branching and a
root rounding heuristic.

Deterministic tie-breaking throughout: entering/leaving candidates and
branching variables prefer the lowest index.  Identical models yield identical
solutions.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

CONTINUOUS = "continuous"
BINARY = "binary"

FEASIBILITY_TOL = 1e-7
INTEGRALITY_TOL = 1e-6
PIVOT_TOL = 1e-9
COST_TOL = 1e-9
_BLAND_TRIGGER = 200     # degenerate pivots before switching to Bland's rule
_TABLEAU_GUARD = 1e13    # magnitude ceiling before declaring numerical trouble


class MilpError(Exception):
    pass


class ModelError(MilpError):
    pass


class NumericalInstabilityError(MilpError):
    pass


class NodeLimitError(MilpError):
    """Branch-and-bound ran out of nodes; carries the best incumbent if any."""

    def __init__(self, message: str, incumbent: Optional["MilpSolution"]):
        super().__init__(message)
        self.incumbent = incumbent


@dataclass
class LinExpr:
    """Affine expression sum(coeffs[v] * v) + const used to build constraints."""

    coeffs: dict[str, float] = field(default_factory=dict)
    const: float = 0.0

    def add_term(self, var: str, coef: float) -> None:
        if coef != 0.0:
            self.coeffs[var] = self.coeffs.get(var, 0.0) + coef

    def scaled(self, factor: float) -> "LinExpr":
        return LinExpr({v: c * factor for v, c in self.coeffs.items()}, self.const * factor)

    def plus(self, other: "LinExpr") -> "LinExpr":
        out = LinExpr(dict(self.coeffs), self.const)
        for v, c in other.coeffs.items():
            out.add_term(v, c)
        out.const += other.const
        return out

    @classmethod
    def constant(cls, value: float) -> "LinExpr":
        return cls({}, float(value))

    @classmethod
    def variable(cls, name: str, coef: float = 1.0) -> "LinExpr":
        return cls({name: float(coef)}, 0.0)


@dataclass
class Variable:
    name: str
    kind: str
    lb: float
    ub: float
    index: int


@dataclass
class Constraint:
    coeffs: dict[str, float]
    relation: str
    rhs: float
    name: str


@dataclass
class MilpSolution:
    status: str                    # "optimal" | "infeasible" | "unbounded"
    values: dict[str, float]
    objective: Optional[float]
    iterations: int = 0
    nodes: int = 0

    @property
    def is_optimal(self) -> bool:
        return self.status == "optimal"


class MilpModel:
    """Variables, linear constraints and a minimisation objective."""

    def __init__(self, name: str = "model"):
        self.name = name
        self.variables: list[Variable] = []
        self.constraints: list[Constraint] = []
        self.objective: dict[str, float] = {}
        self.objective_const: float = 0.0
        self._index: dict[str, int] = {}

    def add_variable(self, name: str, kind: str = CONTINUOUS,
                     lb: float = -math.inf, ub: float = math.inf) -> str:
        if name in self._index:
            raise ModelError(f"duplicate variable {name!r}")
        if kind not in (CONTINUOUS, BINARY):
            raise ModelError(f"unknown variable kind {kind!r}")
        if kind == BINARY:
            lb = max(lb, 0.0)
            ub = min(ub, 1.0)
        if lb > ub:
            raise ModelError(f"variable {name!r} has empty bounds [{lb}, {ub}]")
        self._index[name] = len(self.variables)
        self.variables.append(Variable(name, kind, float(lb), float(ub), len(self.variables)))
        return name

    def has_variable(self, name: str) -> bool:
        return name in self._index

    def add_constraint(self, coeffs: Mapping[str, float], relation: str, rhs: float,
                       name: str = "") -> None:
        if relation not in ("<=", "=", ">="):
            raise ModelError(f"unknown relation {relation!r}")
        clean = {}
        for var, coef in coeffs.items():
            if var not in self._index:
                raise ModelError(f"constraint references undeclared variable {var!r}")
            if coef != 0.0:
                clean[var] = float(coef)
        self.constraints.append(Constraint(clean, relation, float(rhs),
                                           name or f"c{len(self.constraints)}"))

    def add_expr_constraint(self, expr: LinExpr, relation: str, rhs: float,
                            name: str = "") -> None:
        self.add_constraint(expr.coeffs, relation, rhs - expr.const, name)

    def set_objective(self, coeffs: Mapping[str, float], const: float = 0.0) -> None:
        for var in coeffs:
            if var not in self._index:
                raise ModelError(f"objective references undeclared variable {var!r}")
        self.objective = {v: float(c) for v, c in coeffs.items() if c != 0.0}
        self.objective_const = float(const)

    @property
    def binary_indices(self) -> list[int]:
        return [v.index for v in self.variables if v.kind == BINARY]

    def to_lp_text(self) -> str:
        """Plain-text dump, one constraint per line, for external cross-checks."""
        lines = [f"\\ model {self.name}", "Minimize"]
        obj = " + ".join(f"{c:+.12g} {v}" for v, c in sorted(self.objective.items()))
        lines.append(f" obj: {obj if obj else '0'}")
        lines.append("Subject To")
        for con in self.constraints:
            terms = " ".join(f"{c:+.12g} {v}" for v, c in sorted(con.coeffs.items()))
            lines.append(f" {con.name}: {terms} {con.relation} {con.rhs:.12g}")
        lines.append("Bounds")
        for var in self.variables:
            lines.append(f" {var.lb:.12g} <= {var.name} <= {var.ub:.12g}")
        binaries = [v.name for v in self.variables if v.kind == BINARY]
        if binaries:
            lines.append("Binary")
            lines.append(" " + " ".join(binaries))
        lines.append("End")
        return "\n".join(lines) + "\n"


# --- simplex ---------------------------------------------------------------


class _Standardised:
    """Model rewritten over shifted non-negative variables with upper spans.

    Each original variable becomes one column y >= 0 with span = ub - lb
    (possibly infinite); free variables are split into a positive pair.
    """

    def __init__(self, model: MilpModel, overrides: Optional[dict[int, tuple[float, float]]]):
        n = len(model.variables)
        lbs = np.array([v.lb for v in model.variables])
        ubs = np.array([v.ub for v in model.variables])
        if overrides:
            for idx, (lo, hi) in overrides.items():
                lbs[idx] = lo
                ubs[idx] = hi
        if np.any(lbs > ubs):
            self.trivially_infeasible = True
            return
        self.trivially_infeasible = False

        cols: list[tuple[int, float, float]] = []  # (orig index, sign, base)
        spans: list[float] = []
        self.col_of: dict[int, int] = {}
        self.neg_col_of: dict[int, int] = {}
        for j in range(n):
            lo, hi = lbs[j], ubs[j]
            if math.isfinite(lo):
                self.col_of[j] = len(cols)
                cols.append((j, 1.0, lo))
                spans.append(hi - lo)
            elif math.isfinite(hi):
                # mirror so the finite bound becomes the floor
                self.col_of[j] = len(cols)
                cols.append((j, -1.0, hi))
                spans.append(math.inf)
            else:
                self.col_of[j] = len(cols)
                cols.append((j, 1.0, 0.0))
                spans.append(math.inf)
                self.neg_col_of[j] = len(cols)
                cols.append((j, -1.0, 0.0))
                spans.append(math.inf)
        self.cols = cols
        self.spans = np.array(spans)
        self.n_struct = len(cols)
        self.model = model
        self.lbs = lbs
        self.ubs = ubs

        m = len(model.constraints)
        a = np.zeros((m, self.n_struct))
        b = np.zeros(m)
        rel = []
        name_to_idx = model._index
        for i, con in enumerate(model.constraints):
            rhs = con.rhs
            for var, coef in con.coeffs.items():
                j = name_to_idx[var]
                cj = self.col_of[j]
                _, sign, base = cols[cj]
                a[i, cj] += coef * sign
                rhs -= coef * base
                if j in self.neg_col_of:
                    a[i, self.neg_col_of[j]] -= coef
            b[i] = rhs
            rel.append(con.relation)
        # normalise right-hand sides to be non-negative
        for i in range(m):
            if b[i] < 0:
                a[i] *= -1.0
                b[i] *= -1.0
                rel[i] = {"<=": ">=", ">=": "<=", "=": "="}[rel[i]]
        self.a = a
        self.b = b
        self.rel = rel

        c = np.zeros(self.n_struct)
        self.obj_const = model.objective_const
        for var, coef in model.objective.items():
            j = name_to_idx[var]
            cj = self.col_of[j]
            _, sign, base = cols[cj]
            c[cj] += coef * sign
            self.obj_const += coef * base
            if j in self.neg_col_of:
                c[self.neg_col_of[j]] -= coef
        self.c = c

    def recover(self, y: np.ndarray) -> dict[str, float]:
        n = len(self.model.variables)
        x = np.zeros(n)
        for cj, (j, sign, _) in enumerate(self.cols):
            x[j] += sign * y[cj]
        # the base offset contributes once per original variable
        for j in range(n):
            x[j] += self.cols[self.col_of[j]][2]
        return {v.name: float(x[v.index]) for v in self.model.variables}


class _Tableau:
    """Dense bounded-variable simplex tableau with an appended cost row."""

    def __init__(self, a: np.ndarray, b: np.ndarray, spans: np.ndarray):
        self.m, self.n = a.shape
        self.t = np.zeros((self.m + 1, self.n + 1))
        self.t[: self.m, : self.n] = a
        self.t[: self.m, self.n] = b
        self.spans = spans.copy()           # per-column upper span (inf allowed)
        self.at_upper = np.zeros(self.n, dtype=bool)
        self.basis = np.full(self.m, -1, dtype=int)
        self.iterations = 0
        self.bland = False
        self._stall = 0
        self._colbuf = np.empty(self.m + 1)
        self._rank1 = np.empty_like(self.t)

    def append_columns(self, block: np.ndarray, spans: np.ndarray) -> None:
        m1, k = self.t.shape[0], block.shape[1]
        grown = np.zeros((m1, self.n + k + 1))
        grown[:, : self.n] = self.t[:, : self.n]
        grown[: self.m, self.n : self.n + k] = block
        grown[:, -1] = self.t[:, -1]
        self.t = grown
        self.spans = np.concatenate([self.spans, spans])
        self.at_upper = np.concatenate([self.at_upper, np.zeros(k, dtype=bool)])
        self.n += k
        self._rank1 = np.empty_like(self.t)

    def set_cost_row(self, costs: np.ndarray) -> None:
        self.t[self.m, : self.n] = costs
        self.t[self.m, self.n] = 0.0
        # reduce the cost row against the current basis
        for r in range(self.m):
            j = self.basis[r]
            cj = self.t[self.m, j]
            if cj != 0.0:
                self.t[self.m] -= cj * self.t[r]

    def _entering(self, allowed: np.ndarray) -> int:
        d = self.t[self.m, : self.n]
        # a variable at its upper span improves the objective by decreasing
        eligible = allowed & np.where(self.at_upper, d > COST_TOL, d < -COST_TOL)
        if not eligible.any():
            return -1
        if self.bland:
            return int(np.argmax(eligible))
        score = np.where(eligible, np.abs(d), -1.0)
        return int(np.argmax(score))

    def _ratio_test(self, j: int) -> tuple[str, int, float]:
        """Largest step for the entering column; returns (kind, row, step)."""
        direction = -1.0 if self.at_upper[j] else 1.0
        col = direction * self.t[: self.m, j]
        rhs = self.t[: self.m, self.n]
        span_b = self.spans[self.basis] if self.m else np.empty(0)

        pos = col > PIVOT_TOL
        floor_lim = np.where(pos, rhs / np.where(pos, col, 1.0), math.inf)
        neg = (col < -PIVOT_TOL) & np.isfinite(span_b)
        ceil_lim = np.where(neg, (span_b - rhs) / np.where(neg, -col, 1.0), math.inf)
        limits = np.maximum(np.minimum(floor_lim, ceil_lim), 0.0)

        best = float(limits.min()) if self.m else math.inf
        if self.spans[j] < best - 1e-12:
            if not math.isfinite(self.spans[j]):
                return ("unbounded", -1, math.inf)
            return ("flip", -1, self.spans[j])
        if not math.isfinite(best):
            if math.isfinite(self.spans[j]):
                return ("flip", -1, self.spans[j])
            return ("unbounded", -1, math.inf)
        ties = np.flatnonzero(limits <= best + 1e-12)
        r = int(ties[int(np.argmin(self.basis[ties]))])  # lowest basic index wins
        kind = "floor" if floor_lim[r] <= ceil_lim[r] else "ceiling"
        return (kind, r, best)

    def _apply_flip(self, j: int) -> None:
        delta = self.spans[j] if not self.at_upper[j] else -self.spans[j]
        self.t[:, self.n] -= delta * self.t[:, j]
        self.at_upper[j] = ~self.at_upper[j]

    def _pivot(self, r: int, j: int, leaving_to: str) -> None:
        leaving = self.basis[r]
        if self.at_upper[j]:
            # entering descends from its span: rebase the column first
            self._apply_flip(j)
        piv = self.t[r, j]
        if abs(piv) < PIVOT_TOL:
            raise NumericalInstabilityError(f"pivot magnitude {piv:.3e} below safeguard")
        self.t[r] /= piv
        col = self._colbuf
        np.copyto(col, self.t[:, j])
        col[r] = 0.0  # pivot row is already in place
        np.multiply(col[:, None], self.t[r][None, :], out=self._rank1)
        np.subtract(self.t, self._rank1, out=self.t)
        self.basis[r] = j
        if leaving_to == "ceiling":
            # leaving variable exits at its span, not its floor
            self._apply_flip(leaving)

    def run(self, allowed: np.ndarray, max_iter: int) -> str:
        while True:
            j = self._entering(allowed)
            if j < 0:
                return "optimal"
            kind, r, step = self._ratio_test(j)
            if kind == "unbounded":
                return "unbounded"
            before = self.t[self.m, self.n]
            if kind == "flip":
                self._apply_flip(j)
            else:
                self._pivot(r, j, kind)
            self.iterations += 1
            if self.iterations > max_iter:
                raise NumericalInstabilityError("simplex iteration limit exceeded")
            if self.m and np.max(np.abs(self.t[: self.m, self.n])) > _TABLEAU_GUARD:
                raise NumericalInstabilityError("tableau magnitudes exceed safeguard")
            if not self.bland:
                # degenerate pivots leave the objective cell untouched
                if abs(self.t[self.m, self.n] - before) <= 1e-12:
                    self._stall += 1
                    if self._stall > _BLAND_TRIGGER:
                        self.bland = True
                else:
                    self._stall = 0


def _solve_standardised(std: _Standardised) -> tuple[str, Optional[np.ndarray], float, int]:
    """Two-phase simplex; returns (status, y values, objective, iterations)."""
    m, n = std.a.shape
    tab = _Tableau(std.a, std.b, std.spans)

    # slack/surplus columns; rows without a natural basic column get artificials
    slack_cols = []
    for i, rel in enumerate(std.rel):
        if rel == "<=":
            col = np.zeros((m, 1))
            col[i, 0] = 1.0
            slack_cols.append((i, col, math.inf, True))
        elif rel == ">=":
            col = np.zeros((m, 1))
            col[i, 0] = -1.0
            slack_cols.append((i, col, math.inf, False))
    if slack_cols:
        block = np.hstack([c for _, c, _, _ in slack_cols])
        tab.append_columns(block, np.array([s for _, _, s, _ in slack_cols]))
    basic_of_row = {}
    for k, (i, _, _, basic) in enumerate(slack_cols):
        if basic:
            basic_of_row[i] = std.n_struct + k

    n_art = 0
    art_rows = []
    for i in range(m):
        if i not in basic_of_row:
            art_rows.append(i)
            n_art += 1
    if n_art:
        block = np.zeros((m, n_art))
        for k, i in enumerate(art_rows):
            block[i, k] = 1.0
        tab.append_columns(block, np.full(n_art, math.inf))
    art_start = tab.n - n_art

    for i in range(m):
        if i in basic_of_row:
            tab.basis[i] = basic_of_row[i]
    for k, i in enumerate(art_rows):
        tab.basis[i] = art_start + k

    max_iter = 2000 + 60 * (m + tab.n)
    allowed = np.ones(tab.n, dtype=bool)

    if n_art:
        phase1 = np.zeros(tab.n)
        phase1[art_start:] = 1.0
        tab.set_cost_row(phase1)
        status = tab.run(allowed, max_iter)
        if status == "unbounded":
            raise NumericalInstabilityError("phase-1 objective unbounded")
        infeas = -tab.t[tab.m, tab.n]  # cost row holds the negated objective
        if infeas > FEASIBILITY_TOL:
            return ("infeasible", None, math.nan, tab.iterations)
        # pivot artificials out of the basis where possible
        for r in range(m):
            if tab.basis[r] >= art_start:
                row = tab.t[r, :art_start]
                candidates = np.flatnonzero(np.abs(row) > PIVOT_TOL)
                if candidates.size:
                    tab._pivot(r, int(candidates[0]), "floor")
        allowed[art_start:] = False

    costs = np.zeros(tab.n)
    costs[: std.n_struct] = std.c
    tab.set_cost_row(costs)
    tab.bland = False
    tab._stall = 0
    status = tab.run(allowed, max_iter)
    if status == "unbounded":
        return ("unbounded", None, math.nan, tab.iterations)

    y = np.where(tab.at_upper[: std.n_struct],
                 np.where(np.isfinite(std.spans), std.spans, 0.0),
                 0.0)
    for r in range(m):
        j = tab.basis[r]
        if j < std.n_struct:
            y[j] = tab.t[r, tab.n]
    y = np.maximum(y, 0.0)
    obj = float(std.c @ y) + std.obj_const
    return ("optimal", y, obj, tab.iterations)


def solve_lp(model: MilpModel,
             bound_overrides: Optional[dict[int, tuple[float, float]]] = None) -> MilpSolution:
    """Solve the LP relaxation (binary variables relaxed to their bounds)."""
    std = _Standardised(model, bound_overrides)
    if std.trivially_infeasible:
        return MilpSolution("infeasible", {}, None)
    status, y, obj, iters = _solve_standardised(std)
    if status != "optimal":
        return MilpSolution(status, {}, None, iterations=iters)
    values = std.recover(y)
    return MilpSolution("optimal", values, obj, iterations=iters)


# --- branch and bound ------------------------------------------------------


def _fractional(values: dict[str, float], model: MilpModel, tol: float) -> list[tuple[int, float]]:
    out = []
    for idx in model.binary_indices:
        name = model.variables[idx].name
        x = values.get(name, 0.0)
        frac = abs(x - round(x))
        if frac > tol:
            out.append((idx, x))
    return out


def _rounding_heuristic(model: MilpModel, root_values: dict[str, float],
                        base_overrides: dict[int, tuple[float, float]],
                        tol: float) -> Optional[MilpSolution]:
    """Round binaries to the nearest integer, repair violated pure-binary rows
    greedily by flipping the largest fractional values up, then resolve the LP
    with all binaries fixed."""
    rounded: dict[int, float] = {}
    for idx in model.binary_indices:
        name = model.variables[idx].name
        if idx in base_overrides:
            lo, hi = base_overrides[idx]
            if lo == hi:
                rounded[idx] = lo
                continue
        rounded[idx] = float(round(root_values.get(name, 0.0)))

    bin_set = {model.variables[i].name: i for i in model.binary_indices}
    for con in model.constraints:
        if not con.coeffs or not all(v in bin_set for v in con.coeffs):
            continue
        lhs = sum(c * rounded[bin_set[v]] for v, c in con.coeffs.items())
        if con.relation in (">=", "=") and lhs < con.rhs - tol:
            # raise the lhs: flip up the largest fractional helpful binaries
            order = sorted(
                (v for v, c in con.coeffs.items() if c > 0 and rounded[bin_set[v]] == 0.0),
                key=lambda v: (-root_values.get(v, 0.0), bin_set[v]),
            )
            for v in order:
                rounded[bin_set[v]] = 1.0
                lhs += con.coeffs[v]
                if lhs >= con.rhs - tol:
                    break
        if con.relation in ("<=", "=") and lhs > con.rhs + tol:
            order = sorted(
                (v for v, c in con.coeffs.items() if c > 0 and rounded[bin_set[v]] == 1.0),
                key=lambda v: (root_values.get(v, 0.0), bin_set[v]),
            )
            for v in order:
                rounded[bin_set[v]] = 0.0
                lhs -= con.coeffs[v]
                if lhs <= con.rhs + tol:
                    break

    overrides = dict(base_overrides)
    overrides.update({idx: (val, val) for idx, val in rounded.items()})
    sol = solve_lp(model, overrides)
    return sol if sol.is_optimal else None


def solve_milp(model: MilpModel, node_limit: int = 20000,
               integrality_tol: float = INTEGRALITY_TOL,
               use_heuristic: bool = True) -> MilpSolution:
    """Best-first branch-and-bound over the binary variables.

    Nodes are ordered by LP bound (ties: most recent first).  Branching picks
    the most fractional binary, lowest index on ties.  Raises
    ``NodeLimitError`` carrying the best incumbent when the node budget is
    exhausted.
    """
    if not model.binary_indices:
        return solve_lp(model)

    root = solve_lp(model)
    if root.status != "optimal":
        return root

    incumbent: Optional[MilpSolution] = None
    nodes = 0
    counter = 0
    heap: list[tuple[float, int, dict[int, tuple[float, float]]]] = []
    heapq.heappush(heap, (root.objective, 0, {}))

    if use_heuristic:
        guess = _rounding_heuristic(model, root.values, {}, integrality_tol)
        if guess is not None and not _fractional(guess.values, model, integrality_tol):
            incumbent = guess

    while heap:
        bound, tie, overrides = heapq.heappop(heap)
        if incumbent is not None and bound >= incumbent.objective - 1e-9:
            continue
        nodes += 1
        if nodes > node_limit:
            raise NodeLimitError(f"node limit {node_limit} exceeded", incumbent)
        relax = solve_lp(model, overrides)
        if relax.status == "unbounded":
            return MilpSolution("unbounded", {}, None, nodes=nodes)
        if relax.status != "optimal":
            continue
        if incumbent is not None and relax.objective >= incumbent.objective - 1e-9:
            continue
        fracs = _fractional(relax.values, model, integrality_tol)
        if not fracs:
            if incumbent is None or relax.objective < incumbent.objective - 1e-12:
                incumbent = relax
            continue
        # most fractional binary, lowest index on ties
        idx, value = min(fracs, key=lambda p: (-min(p[1] - math.floor(p[1]),
                                                    math.ceil(p[1]) - p[1]), p[0]))
        for lo, hi in ((0.0, 0.0), (1.0, 1.0)):
            child = dict(overrides)
            child[idx] = (lo, hi)
            counter -= 1  # newer nodes win ties -> dive-like behaviour
            heapq.heappush(heap, (relax.objective, counter, child))

    if incumbent is None:
        return MilpSolution("infeasible", {}, None, nodes=nodes)
    incumbent.nodes = nodes
    return incumbent
