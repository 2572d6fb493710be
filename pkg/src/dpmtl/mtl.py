"""Metric temporal logic over affine-region predicates.

Formulas are built from named predicates whose satisfaction regions are
intersections of halfspaces {s : normal . s <= offset}.  The module provides a
recursive-descent parser for a compact surface syntax, a canonical printer,
the evaluation horizon of a formula, Boolean satisfaction, and the quantitative
robustness degree.

Time is discrete and intervals are stored closed, ``[a, b]``.  The parser also
accepts half-open intervals ``[a, b)`` and converts them to ``[a, b-1]``.

Robustness at an atom is the minimum face slack ``(offset - normal.s)/|normal|``,
i.e. the interior depth for points inside the region and a lower bound on the
(negated) Euclidean exterior distance otherwise; it is exact whenever at most
one face is violated.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence, Union

import numpy as np


class MtlError(Exception):
    """Base class for errors raised by this module."""


class MtlSyntaxError(MtlError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownPredicateError(MtlError):
    pass


class TrajectoryTooShortError(MtlError):
    pass


@dataclass(frozen=True)
class Interval:
    """Closed discrete-time interval [a, b] with 0 <= a <= b."""

    a: int
    b: int

    def __post_init__(self):
        if not (isinstance(self.a, int) and isinstance(self.b, int)):
            raise MtlError("interval bounds must be integers")
        if self.a < 0 or self.b < 0:
            raise MtlError(f"interval bounds must be non-negative, got [{self.a},{self.b}]")
        if self.a > self.b:
            raise MtlError(f"empty interval [{self.a},{self.b}] (need a <= b)")

    def times(self, t: int) -> range:
        """Absolute time steps covered when the interval is anchored at t."""
        return range(t + self.a, t + self.b + 1)


@dataclass(frozen=True)
class Predicate:
    """Named affine region: intersection of halfspaces normal.s <= offset."""

    name: str
    halfspaces: tuple[tuple[tuple[float, ...], float], ...]

    def __post_init__(self):
        if not self.halfspaces:
            raise MtlError(f"predicate {self.name!r} needs at least one halfspace")
        dim = len(self.halfspaces[0][0])
        for normal, _ in self.halfspaces:
            if len(normal) != dim:
                raise MtlError(f"predicate {self.name!r} mixes halfspace dimensions")
            if all(abs(c) == 0.0 for c in normal):
                raise MtlError(f"predicate {self.name!r} has a zero normal")

    @property
    def dim(self) -> int:
        return len(self.halfspaces[0][0])

    @classmethod
    def from_box(cls, name: str, bounds: Sequence[tuple[float, float]]) -> "Predicate":
        """Axis-aligned box given per-dimension (low, high) bounds."""
        halfspaces = []
        d = len(bounds)
        for k, (lo, hi) in enumerate(bounds):
            if lo >= hi:
                raise MtlError(f"box predicate {name!r}: bound {k} has low >= high")
            axis_pos = tuple(1.0 if j == k else 0.0 for j in range(d))
            axis_neg = tuple(-1.0 if j == k else 0.0 for j in range(d))
            halfspaces.append((axis_pos, float(hi)))
            halfspaces.append((axis_neg, float(-lo)))
        return cls(name, tuple(halfspaces))

    @classmethod
    def quadrant(cls, name: str, signs: Sequence[int], margin: float = 0.0) -> "Predicate":
        """Orthant selected by per-dimension signs (+1/-1), shrunk by ``margin``.

        A +1 sign demands coordinate >= margin, a -1 sign coordinate <= -margin.
        Open orthants are approximated by closed ones; a positive robustness
        threshold restores strict containment downstream.
        """
        if margin < 0:
            raise MtlError("quadrant margin must be non-negative")
        d = len(signs)
        halfspaces = []
        for k, s in enumerate(signs):
            if s not in (-1, 1):
                raise MtlError(f"quadrant {name!r}: signs must be +1 or -1")
            normal = tuple((-float(s) if j == k else 0.0) for j in range(d))
            halfspaces.append((normal, float(-margin)))
        return cls(name, tuple(halfspaces))


# --- formula tree ---------------------------------------------------------


@dataclass(frozen=True)
class TrueFormula:
    pass


@dataclass(frozen=True)
class Atom:
    predicate: Predicate


@dataclass(frozen=True)
class Not:
    child: "Formula"


@dataclass(frozen=True)
class And:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Or:
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Until:
    interval: Interval
    left: "Formula"
    right: "Formula"


@dataclass(frozen=True)
class Eventually:
    interval: Interval
    child: "Formula"


@dataclass(frozen=True)
class Globally:
    interval: Interval
    child: "Formula"


Formula = Union[TrueFormula, Atom, Not, And, Or, Until, Eventually, Globally]

TRUE = TrueFormula()


def horizon(f: Formula) -> int:
    """Number of future steps needed to evaluate ``f`` (its necessary length)."""
    if isinstance(f, (TrueFormula, Atom)):
        return 0
    if isinstance(f, Not):
        return horizon(f.child)
    if isinstance(f, (And, Or)):
        return max(horizon(f.left), horizon(f.right))
    if isinstance(f, (Eventually, Globally)):
        return f.interval.b + horizon(f.child)
    if isinstance(f, Until):
        return f.interval.b + max(horizon(f.left), horizon(f.right))
    raise TypeError(f"not a formula: {f!r}")


def atoms(f: Formula) -> Iterator[Atom]:
    """All atom nodes in the tree (with repetition)."""
    if isinstance(f, Atom):
        yield f
    elif isinstance(f, Not):
        yield from atoms(f.child)
    elif isinstance(f, (And, Or)):
        yield from atoms(f.left)
        yield from atoms(f.right)
    elif isinstance(f, Until):
        yield from atoms(f.left)
        yield from atoms(f.right)
    elif isinstance(f, (Eventually, Globally)):
        yield from atoms(f.child)


def simplify(f: Formula) -> Formula:
    """Propagate the Boolean constant upward so it only survives at the root.

    ``Not(True)`` has no dual constant in this grammar and is left in place.
    """
    if isinstance(f, (TrueFormula, Atom)):
        return f
    if isinstance(f, Not):
        return Not(simplify(f.child))
    if isinstance(f, And):
        left, right = simplify(f.left), simplify(f.right)
        if isinstance(left, TrueFormula):
            return right
        if isinstance(right, TrueFormula):
            return left
        return And(left, right)
    if isinstance(f, Or):
        left, right = simplify(f.left), simplify(f.right)
        if isinstance(left, TrueFormula) or isinstance(right, TrueFormula):
            return TRUE
        return Or(left, right)
    if isinstance(f, Eventually):
        child = simplify(f.child)
        return TRUE if isinstance(child, TrueFormula) else Eventually(f.interval, child)
    if isinstance(f, Globally):
        child = simplify(f.child)
        return TRUE if isinstance(child, TrueFormula) else Globally(f.interval, child)
    if isinstance(f, Until):
        left, right = simplify(f.left), simplify(f.right)
        if isinstance(right, TrueFormula):
            # the right operand can always be realised at the first window step
            return TRUE
        return Until(f.interval, left, right)
    raise TypeError(f"not a formula: {f!r}")


def push_negations(f: Formula) -> Formula:
    """Negation normal form via De Morgan and temporal duality.

    Negated Until has no dual in this grammar and raises.
    """
    if isinstance(f, Not):
        g = f.child
        if isinstance(g, Atom):
            return f
        if isinstance(g, TrueFormula):
            return f
        if isinstance(g, Not):
            return push_negations(g.child)
        if isinstance(g, And):
            return Or(push_negations(Not(g.left)), push_negations(Not(g.right)))
        if isinstance(g, Or):
            return And(push_negations(Not(g.left)), push_negations(Not(g.right)))
        if isinstance(g, Eventually):
            return Globally(g.interval, push_negations(Not(g.child)))
        if isinstance(g, Globally):
            return Eventually(g.interval, push_negations(Not(g.child)))
        raise MtlError("negation of Until has no normal form in this grammar")
    if isinstance(f, (TrueFormula, Atom)):
        return f
    if isinstance(f, And):
        return And(push_negations(f.left), push_negations(f.right))
    if isinstance(f, Or):
        return Or(push_negations(f.left), push_negations(f.right))
    if isinstance(f, Eventually):
        return Eventually(f.interval, push_negations(f.child))
    if isinstance(f, Globally):
        return Globally(f.interval, push_negations(f.child))
    if isinstance(f, Until):
        return Until(f.interval, push_negations(f.left), push_negations(f.right))
    raise TypeError(f"not a formula: {f!r}")


# --- semantics ------------------------------------------------------------


def as_trajectory(samples) -> np.ndarray:
    """Validate and return a (T, d) float array of state samples."""
    traj = np.asarray(samples, dtype=float)
    if traj.ndim == 1:
        traj = traj[:, None]
    if traj.ndim != 2 or traj.shape[0] == 0:
        raise MtlError("trajectory must be a non-empty sequence of state vectors")
    return traj

def signed_distance(point, predicate: Predicate) -> float:
    """Minimum face slack of ``point`` w.r.t. the predicate region.

    Positive iff the point is strictly inside, zero on the boundary, negative
    outside (exact Euclidean distance when a single face is violated).
    """
    p = np.asarray(point, dtype=float).reshape(-1)
    if p.shape[0] != predicate.dim:
        raise MtlError(
            f"point has dimension {p.shape[0]}, predicate {predicate.name!r} expects {predicate.dim}"
        )
    best = math.inf
    for normal, offset in predicate.halfspaces:
        n = np.asarray(normal, dtype=float)
        best = min(best, (offset - float(n @ p)) / float(np.linalg.norm(n)))
    return best


def _check_window(traj: np.ndarray, f: Formula, t: int) -> None:
    need = t + horizon(f)
    if t < 0:
        raise MtlError(f"negative evaluation time {t}")
    if need >= traj.shape[0]:
        raise TrajectoryTooShortError(
            f"evaluation at t={t} needs sample {need}, trajectory has {traj.shape[0]}"
        )


def robustness(traj, f: Formula, t: int = 0) -> float:
    """Robustness degree of ``f`` over ``traj`` anchored at step ``t``.

    Positive robustness implies Boolean satisfaction, negative implies
    violation; the magnitude is the satisfaction margin in state-space units.
    """
    s = as_trajectory(traj)
    _check_window(s, f, t)
    return _rho(s, f, t)


def _rho(s: np.ndarray, f: Formula, t: int) -> float:
    if isinstance(f, TrueFormula):
        return math.inf
    if isinstance(f, Atom):
        return signed_distance(s[t], f.predicate)
    if isinstance(f, Not):
        return -_rho(s, f.child, t)
    if isinstance(f, And):
        return min(_rho(s, f.left, t), _rho(s, f.right, t))
    if isinstance(f, Or):
        return max(_rho(s, f.left, t), _rho(s, f.right, t))
    if isinstance(f, Eventually):
        return max(_rho(s, f.child, tp) for tp in f.interval.times(t))
    if isinstance(f, Globally):
        return min(_rho(s, f.child, tp) for tp in f.interval.times(t))
    if isinstance(f, Until):
        best = -math.inf
        prefix = math.inf  # min of left-operand robustness over [t+a, tp)
        for tp in f.interval.times(t):
            best = max(best, min(_rho(s, f.right, tp), prefix))
            prefix = min(prefix, _rho(s, f.left, tp))
        return best
    raise TypeError(f"not a formula: {f!r}")


def boolean_sat(traj, f: Formula, t: int = 0) -> bool:
    """Boolean satisfaction of ``f`` over ``traj`` anchored at step ``t``."""
    s = as_trajectory(traj)
    _check_window(s, f, t)
    return _sat(s, f, t)


def _sat(s: np.ndarray, f: Formula, t: int) -> bool:
    if isinstance(f, TrueFormula):
        return True
    if isinstance(f, Atom):
        return all(
            float(np.asarray(n, dtype=float) @ s[t]) <= offset
            for n, offset in f.predicate.halfspaces
        )
    if isinstance(f, Not):
        return not _sat(s, f.child, t)
    if isinstance(f, And):
        return _sat(s, f.left, t) and _sat(s, f.right, t)
    if isinstance(f, Or):
        return _sat(s, f.left, t) or _sat(s, f.right, t)
    if isinstance(f, Eventually):
        return any(_sat(s, f.child, tp) for tp in f.interval.times(t))
    if isinstance(f, Globally):
        return all(_sat(s, f.child, tp) for tp in f.interval.times(t))
    if isinstance(f, Until):
        for tp in f.interval.times(t):
            if _sat(s, f.right, tp) and all(
                _sat(s, f.left, ts) for ts in range(t + f.interval.a, tp)
            ):
                return True
        return False
    raise TypeError(f"not a formula: {f!r}")


# --- parser and printer ---------------------------------------------------


class _Parser:
    """Recursive-descent parser.  Precedence: ! and F/G bind tightest, then U, &, |."""

    def __init__(self, text: str, predicates: Mapping[str, Predicate]):
        self.text = text
        self.predicates = predicates
        self.pos = 0

    def error(self, message: str) -> MtlSyntaxError:
        return MtlSyntaxError(message, self.pos)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str) -> None:
        if self.peek() != ch:
            raise self.error(f"expected {ch!r}")
        self.pos += 1

    def parse(self) -> Formula:
        f = self.parse_or()
        self.skip_ws()
        if self.pos != len(self.text):
            raise self.error("unexpected trailing input")
        return f

    def parse_or(self) -> Formula:
        f = self.parse_and()
        while self.peek() == "|":
            self.pos += 1
            f = Or(f, self.parse_and())
        return f

    def parse_and(self) -> Formula:
        f = self.parse_until()
        while self.peek() == "&":
            self.pos += 1
            f = And(f, self.parse_until())
        return f

    def parse_until(self) -> Formula:
        f = self.parse_unary()
        if self.peek() == "U":
            self.pos += 1
            interval = self.parse_interval()
            right = self.parse_unary()
            f = Until(interval, f, right)
        return f

    def parse_unary(self) -> Formula:
        ch = self.peek()
        if ch == "!":
            self.pos += 1
            return Not(self.parse_unary())
        if ch in ("F", "G"):
            # distinguish the operator from identifiers starting with F/G
            mark = self.pos
            self.pos += 1
            if self.peek() == "[":
                interval = self.parse_interval()
                self.expect("(")
                child = self.parse_or()
                self.expect(")")
                return Eventually(interval, child) if ch == "F" else Globally(interval, child)
            self.pos = mark
        if ch == "(":
            self.pos += 1
            f = self.parse_or()
            self.expect(")")
            return f
        return self.parse_atom()

    def parse_interval(self) -> Interval:
        self.expect("[")
        a = self.parse_int()
        self.expect(",")
        b = self.parse_int()
        ch = self.peek()
        if ch == ")":
            self.pos += 1
            b -= 1  # half-open [a, b) stored closed as [a, b-1]
        elif ch == "]":
            self.pos += 1
        else:
            raise self.error("expected ']' or ')' closing the interval")
        if a > b:
            raise self.error(f"malformed interval: [{a},{b}] is empty")
        try:
            return Interval(a, b)
        except MtlError as exc:
            raise self.error(str(exc)) from exc

    def parse_int(self) -> int:
        self.skip_ws()
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        if self.pos == start:
            raise self.error("expected an integer")
        return int(self.text[start : self.pos])

    def parse_atom(self) -> Formula:
        self.skip_ws()
        m = re.match(r"[A-Za-z_][A-Za-z0-9_]*", self.text[self.pos :])
        if not m:
            raise self.error("expected a predicate name, 'true', or a subformula")
        name = m.group(0)
        self.pos += len(name)
        if name == "true":
            return TRUE
        if name not in self.predicates:
            raise UnknownPredicateError(f"unknown predicate {name!r}")
        return Atom(self.predicates[name])


def parse(text: str, predicates: Mapping[str, Predicate]) -> Formula:
    """Parse the surface syntax into a formula tree.

    Grammar (loosest to tightest binding)::

        or     := and ('|' and)*
        and    := until ('&' until)*
        until  := unary ('U' interval unary)?
        unary  := '!' unary | 'F' interval '(' or ')' | 'G' interval '(' or ')'
                | '(' or ')' | 'true' | predicate-name
        interval := '[' int ',' int (']' | ')')
    """
    if not predicates:
        raise MtlError("predicate table is empty")
    return _Parser(text, predicates).parse()


def format_formula(f: Formula) -> str:
    """Canonical printer; ``parse(format_formula(f))`` is structurally ``f``.

    Binary nodes are always parenthesised, so the output is stable regardless
    of the original spelling.
    """
    if isinstance(f, TrueFormula):
        return "true"
    if isinstance(f, Atom):
        return f.predicate.name
    if isinstance(f, Not):
        # And/Or/Until print with their own parentheses, F/G/atoms bind tighter
        return f"!{format_formula(f.child)}"
    if isinstance(f, And):
        return f"({format_formula(f.left)} & {format_formula(f.right)})"
    if isinstance(f, Or):
        return f"({format_formula(f.left)} | {format_formula(f.right)})"
    if isinstance(f, Until):
        i = f.interval
        return f"({format_formula(f.left)} U[{i.a},{i.b}] {format_formula(f.right)})"
    if isinstance(f, Eventually):
        return f"F[{f.interval.a},{f.interval.b}]({format_formula(f.child)})"
    if isinstance(f, Globally):
        return f"G[{f.interval.a},{f.interval.b}]({format_formula(f.child)})"
    raise TypeError(f"not a formula: {f!r}")
