"""Big-M MILP encodings of robustness and probabilistic confidence bounds.

Two encodings are provided:

* :func:`encode_robustness` pins every robustness variable to its exact value
  with equality-style big-M min/max selections (binaries on both sides).  Used
  when the robustness value itself must be recovered from the solved model,
  e.g. to cross-check the recursive semantics.
* :func:`encode_robustness_lower` emits the one-sided relaxation that is
  sufficient (and much cheaper) when the model only ever lower-bounds a
  robustness variable: minimum nodes become plain chains of <= rows and only
  maximum nodes spend selector binaries.  Polarity is tracked through
  negations, so each node adds the single side it needs.

The confidence machinery turns a per-step estimation error bound into a lower
bound on the probability that the true averaged trajectory satisfies a formula
when its estimate clears a robustness threshold, and inverts that bound to the
smallest usable threshold.  Two recursions are available: ``paper_faithful``
reproduces the published rules verbatim (whose window rules for always and
eventually coincide), ``sound`` replaces the always rule by a union bound and
keeps the remaining rules conservative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

from . import mtl
from .milp import BINARY, LinExpr, MilpModel

PAPER_FAITHFUL = "paper_faithful"
SOUND = "sound"
CONFIDENCE_MODES = (PAPER_FAITHFUL, SOUND)


class EncodingError(Exception):
    pass


class SymbolTableGapError(EncodingError):
    pass


class BigMTooSmallError(EncodingError):
    pass


class UnreachableConfidenceError(EncodingError):
    pass


@dataclass
class EncodingConfig:
    """Shared constants for robustness encodings.

    ``big_m`` must dominate every robustness magnitude reachable in the
    workspace; ``r_min`` is the threshold attached to the top-level variable
    when requested; ``window_offset`` shifts symbol-table lookups when the
    encoded window does not start at absolute time zero.
    """

    big_m: float = 1000.0
    r_min: float = 0.0
    window_offset: int = 0

    def __post_init__(self):
        if self.big_m <= 0:
            raise EncodingError("big_m must be positive")
        if self.r_min < 0:
            raise EncodingError("r_min must be non-negative")


Symbols = Mapping[tuple[int, int], Union[str, LinExpr]]


def _symbol_expr(symbols: Symbols, t: int, dim: int) -> LinExpr:
    try:
        entry = symbols[(t, dim)]
    except KeyError:
        raise SymbolTableGapError(f"no state symbol for time {t}, dimension {dim}") from None
    if isinstance(entry, LinExpr):
        return entry
    return LinExpr.variable(entry)


def atom_slack_exprs(predicate: mtl.Predicate, symbols: Symbols, t: int) -> list[LinExpr]:
    """Normalised face slack (offset - normal.s)/|normal| per halfspace at t."""
    exprs = []
    for normal, offset in predicate.halfspaces:
        norm = math.sqrt(sum(c * c for c in normal))
        expr = LinExpr.constant(offset / norm)
        for dim, coef in enumerate(normal):
            if coef != 0.0:
                expr = expr.plus(_symbol_expr(symbols, t, dim).scaled(-coef / norm))
        exprs.append(expr)
    return exprs


class _Encoder:
    """Recursive encoder tracking interval bounds per node.

    Bounds come from interval arithmetic over the symbol variables' bounds and
    are used both as variable bounds and to shrink each big-M deactivation
    constant to the smallest locally valid value (capped at ``cfg.big_m``),
    which keeps LP relaxations tight.
    """

    def __init__(self, model: MilpModel, symbols: Symbols, cfg: EncodingConfig, prefix: str):
        self.model = model
        self.symbols = symbols
        self.cfg = cfg
        self.prefix = prefix
        self.counter = 0
        self.memo: dict[tuple[int, int, str], tuple[Union[str, LinExpr], float, float]] = {}
        self._var_bounds: dict[str, tuple[float, float]] = {}

    # operands are (value, lo, hi) triples
    Operand = tuple[Union[str, LinExpr], float, float]

    def new_var(self, tag: str, lo: float, hi: float) -> str:
        name = f"{self.prefix}_{tag}_{self.counter}"
        self.counter += 1
        lb = max(lo, -self.cfg.big_m)
        ub = min(hi, self.cfg.big_m)
        if lb > ub:  # degenerate interval from rounding; widen minimally
            lb, ub = ub, lb
        self.model.add_variable(name, lb=lb, ub=ub)
        self._var_bounds[name] = (lb, ub)
        return name

    def new_binary(self, tag: str) -> str:
        name = f"{self.prefix}_{tag}_{self.counter}"
        self.counter += 1
        self.model.add_variable(name, kind=BINARY)
        return name

    def as_expr(self, operand: Union[str, LinExpr]) -> LinExpr:
        return operand if isinstance(operand, LinExpr) else LinExpr.variable(operand)

    def expr_bounds(self, expr: LinExpr) -> tuple[float, float]:
        lo = hi = expr.const
        for var, coef in expr.coeffs.items():
            if var in self._var_bounds:
                vlo, vhi = self._var_bounds[var]
            else:
                v = self.model.variables[self.model._index[var]]
                vlo, vhi = v.lb, v.ub
            a, b = coef * vlo, coef * vhi
            lo += min(a, b)
            hi += max(a, b)
        return lo, hi

    def deactivation(self, gap: float) -> float:
        if not math.isfinite(gap):
            return self.cfg.big_m
        return min(max(gap, 0.0), self.cfg.big_m)

    def leq(self, var: str, operand: Union[str, LinExpr]) -> None:
        expr = LinExpr.variable(var).plus(self.as_expr(operand).scaled(-1.0))
        self.model.add_expr_constraint(expr, "<=", 0.0)

    def geq(self, var: str, operand: Union[str, LinExpr]) -> None:
        expr = LinExpr.variable(var).plus(self.as_expr(operand).scaled(-1.0))
        self.model.add_expr_constraint(expr, ">=", 0.0)

    def equal(self, var: str, operand: Union[str, LinExpr]) -> None:
        expr = LinExpr.variable(var).plus(self.as_expr(operand).scaled(-1.0))
        self.model.add_expr_constraint(expr, "=", 0.0)

    def _selector_geq(self, var: str, op: Union[str, LinExpr], b: str, big: float) -> None:
        # var >= op - big * (1 - b)
        expr = LinExpr.variable(var).plus(self.as_expr(op).scaled(-1.0))
        expr.add_term(b, -big)
        self.model.add_expr_constraint(expr, ">=", -big)

    def _selector_leq(self, var: str, op: Union[str, LinExpr], b: str, big: float) -> None:
        # var <= op + big * (1 - b)
        expr = LinExpr.variable(var).plus(self.as_expr(op).scaled(-1.0))
        expr.add_term(b, big)
        self.model.add_expr_constraint(expr, "<=", big)

    def select_min(self, tag: str, operands: list[Operand], exact: bool) -> "Operand":
        """Node equal to (exact) or upper-bounded by (one-sided) the minimum."""
        if len(operands) == 1:
            return operands[0]
        lo = min(op[1] for op in operands)
        hi = min(op[2] for op in operands)
        var = self.new_var(tag, lo, hi)
        for op, _, _ in operands:
            self.leq(var, op)
        if exact:
            selectors = []
            for op, _, op_hi in operands:
                b = self.new_binary(tag + "_sel")
                selectors.append(b)
                self._selector_geq(var, op, b, self.deactivation(op_hi - lo))
            self.model.add_constraint({b: 1.0 for b in selectors}, "=", 1.0)
        return (var, lo, hi)

    def select_max(self, tag: str, operands: list[Operand], exact: bool) -> "Operand":
        """Node equal to (exact) or with ceiling at (one-sided) the maximum."""
        if len(operands) == 1:
            return operands[0]
        lo = max(op[1] for op in operands)
        hi = max(op[2] for op in operands)
        var = self.new_var(tag, lo, hi)
        if exact:
            for op, _, _ in operands:
                self.geq(var, op)
        selectors = []
        for op, op_lo, _ in operands:
            b = self.new_binary(tag + "_sel")
            selectors.append(b)
            self._selector_leq(var, op, b, self.deactivation(hi - op_lo))
        self.model.add_constraint({b: 1.0 for b in selectors}, "=", 1.0)
        return (var, lo, hi)

    def chain_max(self, tag: str, operands: list[Operand]) -> "Operand":
        """Floor of the node is the maximum (upper-side disjunction)."""
        if len(operands) == 1:
            return operands[0]
        lo = max(op[1] for op in operands)
        hi = max(op[2] for op in operands)
        var = self.new_var(tag, lo, hi)
        for op, _, _ in operands:
            self.geq(var, op)
        return (var, lo, hi)

    def _min_floor(self, tag: str, operands: list[Operand]) -> "Operand":
        """Floor of the node is the minimum (upper-side conjunction)."""
        if len(operands) == 1:
            return operands[0]
        lo = min(op[1] for op in operands)
        hi = min(op[2] for op in operands)
        var = self.new_var(tag, lo, hi)
        selectors = []
        for op, _, op_hi in operands:
            b = self.new_binary(tag + "_sel")
            selectors.append(b)
            self._selector_geq(var, op, b, self.deactivation(op_hi - lo))
        self.model.add_constraint({b: 1.0 for b in selectors}, "=", 1.0)
        return (var, lo, hi)

    def negate(self, op: Operand) -> "Operand":
        value, lo, hi = op
        return (self.as_expr(value).scaled(-1.0), -hi, -lo)

    def atom_operands(self, f: mtl.Atom, t: int) -> list["Operand"]:
        slacks = atom_slack_exprs(f.predicate, self.symbols, t + self.cfg.window_offset)
        return [(s, *self.expr_bounds(s)) for s in slacks]

    # -- exact (two-sided) encoding -----------------------------------------

    def exact(self, f: mtl.Formula, t: int) -> "Operand":
        key = (id(f), t, "x")
        if key in self.memo:
            return self.memo[key]
        out = self._exact(f, t)
        self.memo[key] = out
        return out

    def _exact(self, f: mtl.Formula, t: int) -> "Operand":
        if isinstance(f, mtl.TrueFormula):
            raise EncodingError("Boolean constants have no finite robustness; "
                                "simplify the formula before encoding")
        if isinstance(f, mtl.Atom):
            return self.select_min(f"atom_{f.predicate.name}_{t}",
                                   self.atom_operands(f, t), exact=True)
        if isinstance(f, mtl.Not):
            return self.negate(self.exact(f.child, t))
        if isinstance(f, mtl.And):
            return self.select_min(f"and_{t}", [self.exact(f.left, t), self.exact(f.right, t)],
                                   exact=True)
        if isinstance(f, mtl.Or):
            return self.select_max(f"or_{t}", [self.exact(f.left, t), self.exact(f.right, t)],
                                   exact=True)
        if isinstance(f, mtl.Globally):
            ops = [self.exact(f.child, tp) for tp in f.interval.times(t)]
            return self.select_min(f"alw_{t}", ops, exact=True)
        if isinstance(f, mtl.Eventually):
            ops = [self.exact(f.child, tp) for tp in f.interval.times(t)]
            return self.select_max(f"evt_{t}", ops, exact=True)
        if isinstance(f, mtl.Until):
            branches = []
            for tp in f.interval.times(t):
                ops = [self.exact(f.right, tp)]
                ops += [self.exact(f.left, ts) for ts in range(t + f.interval.a, tp)]
                branches.append(self.select_min(f"untl_{t}_{tp}", ops, exact=True))
            return self.select_max(f"unt_{t}", branches, exact=True)
        raise TypeError(f"not a formula: {f!r}")

    # -- one-sided encoding ---------------------------------------------------

    def onesided(self, f: mtl.Formula, t: int, lower: bool) -> "Operand":
        key = (id(f), t, "l" if lower else "u")
        if key in self.memo:
            return self.memo[key]
        out = self._onesided(f, t, lower)
        self.memo[key] = out
        return out

    def _onesided(self, f: mtl.Formula, t: int, lower: bool) -> "Operand":
        if isinstance(f, mtl.TrueFormula):
            # infinite robustness capped at the big-M rail on either side
            big = self.cfg.big_m
            return (LinExpr.constant(big), big, big)
        if isinstance(f, mtl.Atom):
            ops = self.atom_operands(f, t)
            tag = f"atom_{f.predicate.name}_{t}"
            return self.select_min(tag, ops, exact=False) if lower \
                else self._min_floor(tag + "u", ops)
        if isinstance(f, mtl.Not):
            return self.negate(self.onesided(f.child, t, not lower))
        if isinstance(f, mtl.And):
            ops = [self.onesided(f.left, t, lower), self.onesided(f.right, t, lower)]
            return self.select_min(f"and_{t}", ops, exact=False) if lower \
                else self._min_floor(f"andu_{t}", ops)
        if isinstance(f, mtl.Or):
            ops = [self.onesided(f.left, t, lower), self.onesided(f.right, t, lower)]
            return self.select_max(f"or_{t}", ops, exact=False) if lower \
                else self.chain_max(f"oru_{t}", ops)
        if isinstance(f, mtl.Globally):
            ops = [self.onesided(f.child, tp, lower) for tp in f.interval.times(t)]
            return self.select_min(f"alw_{t}", ops, exact=False) if lower \
                else self._min_floor(f"alwu_{t}", ops)
        if isinstance(f, mtl.Eventually):
            ops = [self.onesided(f.child, tp, lower) for tp in f.interval.times(t)]
            return self.select_max(f"evt_{t}", ops, exact=False) if lower \
                else self.chain_max(f"evtu_{t}", ops)
        if isinstance(f, mtl.Until):
            groups = []
            for tp in f.interval.times(t):
                ops = [self.onesided(f.right, tp, lower)]
                ops += [self.onesided(f.left, ts, lower) for ts in range(t + f.interval.a, tp)]
                groups.append(ops)
            lo = max(min(o[1] for o in ops) for ops in groups)
            hi = max(min(o[2] for o in ops) for ops in groups)
            if lower:
                # one selector per anchor step deactivates its whole min-group
                var = self.new_var(f"unt_{t}", lo, hi)
                selectors = []
                for ops in groups:
                    b = self.new_binary("unt_sel")
                    selectors.append(b)
                    for op, op_lo, _ in ops:
                        self._selector_leq(var, op, b, self.deactivation(hi - op_lo))
                self.model.add_constraint({b: 1.0 for b in selectors}, "=", 1.0)
                return (var, lo, hi)
            branches = [ops[0] if len(ops) == 1 else self._min_floor(f"untlu_{t}_{k}", ops)
                        for k, ops in enumerate(groups)]
            return self.chain_max(f"untu_{t}", branches)
        raise TypeError(f"not a formula: {f!r}")


def _materialise(encoder: _Encoder, out, tag: str) -> str:
    value, lo, hi = out
    if isinstance(value, str):
        return value
    var = encoder.new_var(tag, lo, hi)
    encoder.equal(var, value)
    return var


def encode_robustness(f: mtl.Formula, symbols: Symbols, t: int, model: MilpModel,
                      cfg: EncodingConfig, enforce_min: bool = True,
                      prefix: str = "rho") -> str:
    """Exact big-M encoding; the returned variable equals the robustness of
    ``f`` at ``t`` over the symbolic trajectory.  With ``enforce_min`` the
    threshold ``cfg.r_min`` is attached as a >= constraint."""
    simplified = mtl.simplify(f)
    if isinstance(simplified, mtl.TrueFormula):
        raise EncodingError("cannot encode the constant-true formula; skip its constraints")
    enc = _Encoder(model, symbols, cfg, prefix)
    var = _materialise(enc, enc.exact(simplified, t), f"top_{t}")
    if enforce_min:
        model.add_constraint({var: 1.0}, ">=", cfg.r_min)
    return var


def encode_robustness_lower(f: mtl.Formula, symbols: Symbols, t: int, model: MilpModel,
                            cfg: EncodingConfig, threshold: float,
                            prefix: str = "wit") -> str:
    """One-sided encoding enforcing robustness(f, t) >= threshold.

    The returned variable can reach at most the true robustness, so the model
    is feasible iff the threshold is actually attainable; the variable value
    itself is only a certificate (a valid lower bound), not the exact degree.
    """
    simplified = mtl.simplify(f)
    if isinstance(simplified, mtl.TrueFormula):
        raise EncodingError("cannot encode the constant-true formula; skip its constraints")
    enc = _Encoder(model, symbols, cfg, prefix)
    var = _materialise(enc, enc.onesided(simplified, t, lower=True), f"top_{t}")
    model.add_constraint({var: 1.0}, ">=", threshold)
    return var


def check_big_m(values: Mapping[str, float], rho_vars: Sequence[str], big_m: float,
                margin: float = 1e-3) -> None:
    """Raise when a solved robustness variable sits against the big-M rails,
    which indicates the constant was too small for the workspace."""
    for name in rho_vars:
        v = values.get(name)
        if v is not None and abs(abs(v) - big_m) < margin:
            raise BigMTooSmallError(
                f"robustness variable {name} = {v:.6g} is within {margin} of the big-M rail"
            )


# --- confidence recursion ---------------------------------------------------


def _eps_at(eps_bound: Sequence[float], t: int) -> float:
    if t < 0 or t >= len(eps_bound):
        raise EncodingError(f"error-bound sequence does not cover time {t}")
    value = float(eps_bound[t])
    if not math.isfinite(value):
        raise EncodingError(f"error bound at time {t} is not finite")
    return value


def confidence_lower_bound(f: mtl.Formula, eps_bound: Sequence[float], r_min: float,
                           t: int, mode: str = PAPER_FAITHFUL) -> float:
    """Lower bound on the probability that the true trajectory satisfies ``f``
    at ``t`` given that its estimate satisfies it with robustness >= ``r_min``
    and the per-step estimation error is bounded by ``eps_bound``.

    Values are at most 1 and can be arbitrarily negative (vacuous bound).
    """
    if r_min <= 0:
        raise EncodingError("r_min must be positive for the confidence recursion")
    if mode not in CONFIDENCE_MODES:
        raise EncodingError(f"unknown confidence mode {mode!r}")
    g = mtl.push_negations(mtl.simplify(f))
    return _gamma(g, eps_bound, r_min, t, mode)


def _gamma(f: mtl.Formula, eps: Sequence[float], r: float, t: int, mode: str) -> float:
    if isinstance(f, mtl.TrueFormula):
        return 1.0
    if isinstance(f, mtl.Atom) or (isinstance(f, mtl.Not) and isinstance(f.child, mtl.Atom)):
        # negated atoms are again affine-region events with the same margin
        return 1.0 - _eps_at(eps, t) / r
    if isinstance(f, mtl.And):
        return _gamma(f.left, eps, r, t, mode) + _gamma(f.right, eps, r, t, mode) - 1.0
    if isinstance(f, mtl.Or):
        return max(_gamma(f.left, eps, r, t, mode), _gamma(f.right, eps, r, t, mode))
    if isinstance(f, mtl.Globally):
        values = [_gamma(f.child, eps, r, tp, mode) for tp in f.interval.times(t)]
        if mode == PAPER_FAITHFUL:
            # published rule: 1 - min(1 - gamma) over the window
            return max(values)
        return 1.0 - sum(1.0 - v for v in values)
    if isinstance(f, mtl.Eventually):
        values = [_gamma(f.child, eps, r, tp, mode) for tp in f.interval.times(t)]
        return max(values)
    if isinstance(f, mtl.Until):
        best = -math.inf
        for tp in f.interval.times(t):
            right = _gamma(f.right, eps, r, tp, mode)
            if mode == PAPER_FAITHFUL:
                # published sum includes the right-anchor step itself
                left_span = range(t + f.interval.a, tp + 1)
            else:
                left_span = range(t + f.interval.a, tp)
            penalty = sum(1.0 - _gamma(f.left, eps, r, ts, mode) for ts in left_span)
            best = max(best, 1.0 - (1.0 - right) - penalty)
        return best
    if isinstance(f, mtl.Not):
        raise EncodingError("confidence recursion supports negation on atoms only")
    raise TypeError(f"not a formula: {f!r}")


def required_rmin(f: mtl.Formula, eps_bound: Sequence[float], gamma_min: float,
                  mode: str = PAPER_FAITHFUL, eval_times: Sequence[int] = (0,),
                  rel_tol: float = 1e-9) -> float:
    """Smallest robustness threshold whose confidence bound clears ``gamma_min``
    at every requested evaluation time (the bound is monotone in the threshold).
    """
    if not (0.0 < gamma_min < 1.0):
        raise EncodingError("gamma_min must lie strictly between 0 and 1")

    def ok(r: float) -> bool:
        return all(
            confidence_lower_bound(f, eps_bound, r, t, mode) >= gamma_min
            for t in eval_times
        )

    lo, hi = 0.0, 1.0
    while not ok(hi):
        lo = hi
        hi *= 2.0
        if hi > 1e15:
            raise UnreachableConfidenceError(
                f"confidence target {gamma_min} unreachable for any threshold"
            )
    while hi - lo > rel_tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi
