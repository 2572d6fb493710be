"""Per-agent receding-horizon controller.

At each step an agent assembles one mixed-integer program over a planning
window of 2H inputs: its own state recursion, the filter recursion for its
stacked estimate of everyone's states (driven by one-step-ahead output
predictions), and the expected-gossip recursion for its stacked running
average.  All three recursions are affine in the planned inputs, so they are
folded into coefficient form at assembly time and the model only carries the
input variables (split into non-negative parts for the 1-norm objective),
selector binaries and robustness variables; reconstruction helpers recover the
planned trajectories from a solution and re-verify the recursions.

The agent-level formula is enforced on the planned own trajectory and the
system-level formula on the agent's own row of the planned running average,
both at every anchor offset j in [0, H-1]; the system-level threshold is
raised to the level required for the confidence bound to clear its target,
evaluated once per solve across the window.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import encoding, estimation, mtl
from .dynamics import LinearDynamics
from .milp import BINARY, LinExpr, MilpModel, MilpSolution, solve_milp

ONE_NORM = "one_norm"
INF_NORM = "inf_norm"
OBJECTIVE_MODES = (ONE_NORM, INF_NORM)


class ControllerError(Exception):
    pass


class ConfidencePrecheckError(ControllerError):
    """The confidence target cannot be met by any robustness threshold."""


@dataclass
class RhcConfig:
    horizon: int                     # H; the planning window spans 2H inputs
    r_min: np.ndarray                # (H,) per-offset robustness thresholds
    gamma_min: np.ndarray            # (H,) per-offset confidence targets
    big_m: float = 1000.0
    objective_mode: str = ONE_NORM
    confidence_mode: str = encoding.PAPER_FAITHFUL
    node_limit: int = 20000

    def __post_init__(self):
        self.r_min = np.asarray(self.r_min, dtype=float)
        self.gamma_min = np.asarray(self.gamma_min, dtype=float)
        if self.horizon < 1:
            raise ControllerError("horizon must be at least 1")
        if self.r_min.shape != (self.horizon,) or self.gamma_min.shape != (self.horizon,):
            raise ControllerError("r_min and gamma_min must have one entry per window offset")
        if np.any(self.r_min < 0):
            raise ControllerError("robustness thresholds must be non-negative")
        if np.any((self.gamma_min <= 0) | (self.gamma_min >= 1)):
            raise ControllerError("confidence targets must lie strictly between 0 and 1")
        if self.objective_mode not in OBJECTIVE_MODES:
            raise ControllerError(f"unknown objective mode {self.objective_mode!r}")
        if self.confidence_mode not in encoding.CONFIDENCE_MODES:
            raise ControllerError(f"unknown confidence mode {self.confidence_mode!r}")


@dataclass
class AgentContext:
    """Everything agent ``agent_id`` carries between steps."""

    agent_id: int
    own_state: np.ndarray            # (d,)
    xhat: np.ndarray                 # (N, d) stacked state estimates
    zeta: np.ndarray                 # (N, d) stacked running-average estimates
    prev_input: np.ndarray           # (N, d) stacked inputs planned at t-1
    prev_prev_input: np.ndarray      # (N, d) stacked inputs planned at t-2
    last_noisy_output: np.ndarray    # (N, d) measurement vector used last step
    dynamics: LinearDynamics
    kalman: estimation.KalmanSchedule
    gossip: estimation.GossipMatrix
    system_formula: mtl.Formula
    agent_formula: mtl.Formula
    error_bounds: np.ndarray         # eps_t over absolute steps 0..len-1
    config: RhcConfig

    def __post_init__(self):
        n = self.dynamics.n_agents
        d = self.dynamics.n_dims
        for name in ("xhat", "zeta", "prev_input", "prev_prev_input", "last_noisy_output"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != (n, d):
                raise ControllerError(f"{name} must have shape ({n}, {d}), got {arr.shape}")
            setattr(self, name, arr)
        self.own_state = np.asarray(self.own_state, dtype=float)
        if self.own_state.shape != (d,):
            raise ControllerError(f"own_state must have shape ({d},)")


@dataclass(frozen=True)
class IncomingMessage:
    """Payload received from the gossip partner at the current step."""

    partner: int
    noisy_output: np.ndarray   # partner's published noisy output (d,)
    zeta_row: np.ndarray       # partner's previous running-average estimate (d,)


def initial_context(agent_id: int, own_state, dynamics: LinearDynamics,
                    kalman: estimation.KalmanSchedule, gossip: estimation.GossipMatrix,
                    system_formula: mtl.Formula, agent_formula: mtl.Formula,
                    error_bounds: np.ndarray, config: RhcConfig,
                    xhat0: Optional[np.ndarray] = None,
                    zeta0: Optional[np.ndarray] = None) -> AgentContext:
    """Fresh context: the agent knows its own state; unless overridden, its
    stacked estimate and running average carry that value in its own row and
    zeros elsewhere."""
    n, d = dynamics.n_agents, dynamics.n_dims
    own = np.asarray(own_state, dtype=float)
    if xhat0 is None:
        xhat0 = np.zeros((n, d))
        xhat0[agent_id] = own
    if zeta0 is None:
        zeta0 = np.zeros((n, d))
        zeta0[agent_id] = xhat0[agent_id]
    zeros = np.zeros((n, d))
    return AgentContext(
        agent_id=agent_id, own_state=own.copy(), xhat=np.array(xhat0, dtype=float),
        zeta=np.array(zeta0, dtype=float), prev_input=zeros.copy(),
        prev_prev_input=zeros.copy(), last_noisy_output=zeros.copy(),
        dynamics=dynamics, kalman=kalman, gossip=gossip,
        system_formula=system_formula, agent_formula=agent_formula,
        error_bounds=np.asarray(error_bounds, dtype=float), config=config,
    )


def predict_output(xhat: np.ndarray, u: np.ndarray, u_prev: np.ndarray,
                   dyn: LinearDynamics) -> np.ndarray:
    """One-step-ahead prediction of the stacked noisy output vector:

        y~ = C (xhat + u) + (C B A / 2) (u - u_prev)

    with the diagonal coefficient products applied row-wise.
    """
    xhat = np.asarray(xhat, dtype=float)
    u = np.asarray(u, dtype=float)
    u_prev = np.asarray(u_prev, dtype=float)
    c = dyn.c[:, None]
    cba_half = (dyn.c * dyn.b * dyn.a)[:, None] / 2.0
    return c * (xhat + u) + cba_half * (u - u_prev)


# --- window coefficient recursions -------------------------------------------


@dataclass
class _WindowMaps:
    """Affine maps from the flattened input plan to planned quantities.

    Input columns are indexed (step k, agent a) -> k * N + a, one map shared
    by all workspace dimensions; constants are per dimension.
    """

    steps: int                      # number of planned inputs (2H)
    n_agents: int
    xhat_coef: np.ndarray           # (steps+1, N, steps*N)
    xhat_const: np.ndarray          # (steps+1, N, d)
    zeta_coef: np.ndarray           # (steps+1, N, steps*N)
    zeta_const: np.ndarray          # (steps+1, N, d)
    own_coef: np.ndarray            # (steps+1, steps*N)
    own_const: np.ndarray           # (steps+1, d)


def window_maps(ctx: AgentContext, t: int) -> _WindowMaps:
    """Unroll the estimate, averaging and own-state recursions over the window
    starting at step ``t`` (the window holds 2H planned inputs)."""
    dyn = ctx.dynamics
    n, d = dyn.n_agents, dyn.n_dims
    steps = 2 * ctx.config.horizon
    ncols = steps * n
    a, b, c = dyn.a, dyn.b, dyn.c
    cba_half = (c * b * a) / 2.0
    v = ctx.gossip.v

    xhat_coef = np.zeros((steps + 1, n, ncols))
    xhat_const = np.zeros((steps + 1, n, d))
    zeta_coef = np.zeros((steps + 1, n, ncols))
    zeta_const = np.zeros((steps + 1, n, d))
    xhat_const[0] = ctx.xhat
    zeta_const[0] = ctx.zeta

    def u_sel(k: int) -> np.ndarray:
        sel = np.zeros((n, ncols))
        for agent in range(n):
            sel[agent, k * n + agent] = 1.0
        return sel

    for k in range(steps):
        uk = u_sel(k)
        ukm1 = u_sel(k - 1) if k > 0 else np.zeros((n, ncols))
        ukm1_const = ctx.prev_input if k == 0 else np.zeros((n, d))
        # predicted measurement entering the filter at step t+k+1
        y_coef = c[:, None] * (xhat_coef[k] + uk) + cba_half[:, None] * (uk - ukm1)
        y_const = c[:, None] * xhat_const[k] - cba_half[:, None] * ukm1_const
        gain = ctx.kalman.gain(t + k + 1)
        pred_coef = a[:, None] * xhat_coef[k] + b[:, None] * uk
        pred_const = a[:, None] * xhat_const[k]
        xhat_coef[k + 1] = pred_coef + gain @ (y_coef - pred_coef)
        xhat_const[k + 1] = pred_const + gain @ (y_const - pred_const)
        zeta_coef[k + 1] = v @ zeta_coef[k] + xhat_coef[k + 1] - xhat_coef[k]
        zeta_const[k + 1] = v @ zeta_const[k] + xhat_const[k + 1] - xhat_const[k]

    own_coef = np.zeros((steps + 1, ncols))
    own_const = np.zeros((steps + 1, d))
    own_const[0] = ctx.own_state
    i = ctx.agent_id
    for k in range(steps):
        own_coef[k + 1] = a[i] * own_coef[k]
        own_coef[k + 1, k * n + i] += b[i]
        own_const[k + 1] = a[i] * own_const[k]
    return _WindowMaps(steps, n, xhat_coef, xhat_const, zeta_coef, zeta_const,
                       own_coef, own_const)


@dataclass
class DiffMilpInfo:
    """Reconstruction data and diagnostics attached to an assembled model."""

    t: int
    maps: _WindowMaps
    plus_names: np.ndarray          # (steps, N, d) object array of variable names
    minus_names: np.ndarray
    agent_thresholds: np.ndarray    # (H,)
    system_thresholds: np.ndarray   # (H,)
    required_r: float
    rho_vars: list[str] = field(default_factory=list)

    def input_plan(self, values: dict[str, float]) -> np.ndarray:
        steps, n, d = self.plus_names.shape
        plan = np.zeros((steps, n, d))
        for k in range(steps):
            for agent in range(n):
                for dim in range(d):
                    plan[k, agent, dim] = (values[self.plus_names[k, agent, dim]]
                                           - values[self.minus_names[k, agent, dim]])
        return plan

    def own_trajectory(self, plan: np.ndarray) -> np.ndarray:
        flat = plan.reshape(self.maps.steps * self.maps.n_agents, -1)
        return self.maps.own_coef @ flat + self.maps.own_const

    def zeta_row_trajectory(self, plan: np.ndarray, agent_id: int) -> np.ndarray:
        flat = plan.reshape(self.maps.steps * self.maps.n_agents, -1)
        return self.maps.zeta_coef[:, agent_id, :] @ flat + self.maps.zeta_const[:, agent_id, :]

    def xhat_trajectory(self, plan: np.ndarray) -> np.ndarray:
        flat = plan.reshape(self.maps.steps * self.maps.n_agents, -1)
        return np.einsum("knc,cd->knd", self.maps.xhat_coef, flat) + self.maps.xhat_const


def _symbols_from(coef_rows: np.ndarray, const_rows: np.ndarray,
                  plus_names: np.ndarray, minus_names: np.ndarray,
                  tol: float = 1e-14) -> dict[tuple[int, int], LinExpr]:
    """Symbol table mapping (window step, dim) to affine input expressions."""
    steps_p1, ncols = coef_rows.shape
    _, n, d = plus_names.shape
    flat_plus = plus_names.reshape(ncols, d)
    flat_minus = minus_names.reshape(ncols, d)
    symbols = {}
    for k in range(steps_p1):
        row = coef_rows[k]
        nz = np.flatnonzero(np.abs(row) > tol)
        for dim in range(d):
            expr = LinExpr.constant(float(const_rows[k, dim]))
            for col in nz:
                coef = float(row[col])
                expr.add_term(str(flat_plus[col, dim]), coef)
                expr.add_term(str(flat_minus[col, dim]), -coef)
            symbols[(k, dim)] = expr
    return symbols


def _conjuncts(f: mtl.Formula) -> list[mtl.Formula]:
    """Split conjunctions; a window of always distributes over conjunction."""
    f = mtl.simplify(f)
    if isinstance(f, mtl.And):
        return _conjuncts(f.left) + _conjuncts(f.right)
    if isinstance(f, mtl.Globally) and isinstance(f.child, mtl.And):
        return (_conjuncts(mtl.Globally(f.interval, f.child.left))
                + _conjuncts(mtl.Globally(f.interval, f.child.right)))
    return [f]


def _expr_lower(expr: LinExpr, model: MilpModel) -> float:
    lo = expr.const
    for var, coef in expr.coeffs.items():
        v = model.variables[model._index[var]]
        lo += min(coef * v.lb, coef * v.ub)
    return lo


def _add_formula_constraints(model: MilpModel, f: mtl.Formula,
                             symbols: dict[tuple[int, int], LinExpr],
                             thresholds: np.ndarray, steps: int,
                             cfg: encoding.EncodingConfig, tag: str,
                             rho_vars: list[str]) -> None:
    """Require robustness(f, j) >= thresholds[j] for every window offset j.

    Windows of always/eventually over atoms collapse to per-step rows (plus
    shared achievement binaries for eventually); everything else falls back to
    the generic one-sided encoding per offset.
    """
    h = len(thresholds)
    for ci, conj in enumerate(_conjuncts(f)):
        if isinstance(conj, mtl.TrueFormula):
            continue
        uniform = bool(np.all(thresholds == thresholds[0]))
        if isinstance(conj, mtl.Globally) and isinstance(conj.child, mtl.Atom):
            a, b = conj.interval.a, conj.interval.b
            for k in range(a, min(h - 1 + b, steps) + 1):
                covering = [thresholds[j] for j in range(h) if j + a <= k <= j + b]
                if not covering:
                    continue
                req = max(covering)
                for face in encoding.atom_slack_exprs(conj.child.predicate, symbols, k):
                    model.add_expr_constraint(face, ">=", req,
                                              name=f"{tag}_alw{ci}_k{k}")
            continue
        if isinstance(conj, mtl.Eventually) and isinstance(conj.child, mtl.Atom) and uniform:
            a, b = conj.interval.a, conj.interval.b
            req = float(thresholds[0])
            last = min(h - 1 + b, steps)
            z_names = {}
            for k in range(a, last + 1):
                z = model.add_variable(f"{tag}_ach{ci}_k{k}", kind=BINARY)
                z_names[k] = z
                for face in encoding.atom_slack_exprs(conj.child.predicate, symbols, k):
                    # face >= req - M (1 - z), with the smallest valid M
                    gap = req - _expr_lower(face, model)
                    big = min(max(gap, 0.0), cfg.big_m)
                    expr = LinExpr(dict(face.coeffs), face.const)
                    expr.add_term(z, -big)
                    model.add_expr_constraint(expr, ">=", req - big,
                                              name=f"{tag}_ach{ci}_k{k}_face")
            for j in range(h):
                window = {z_names[k]: 1.0 for k in range(j + a, min(j + b, last) + 1)
                          if k in z_names}
                if not window:
                    raise ControllerError(f"eventually window at offset {j} is empty")
                model.add_constraint(window, ">=", 1.0, name=f"{tag}_cover{ci}_j{j}")
            continue
        for j in range(h):
            var = encoding.encode_robustness_lower(conj, symbols, j, model, cfg,
                                                   float(thresholds[j]),
                                                   prefix=f"{tag}_rho{ci}_j{j}")
            rho_vars.append(var)


def assemble_diff_milp(ctx: AgentContext, t: int) -> tuple[MilpModel, DiffMilpInfo]:
    """Build the planning program for the window starting at step ``t``."""
    dyn = ctx.dynamics
    cfg = ctx.config
    n, d = dyn.n_agents, dyn.n_dims
    h = cfg.horizon
    steps = 2 * h
    maps = window_maps(ctx, t)
    model = MilpModel(name=f"plan_agent{ctx.agent_id}_t{t}")

    plus_names = np.empty((steps, n, d), dtype=object)
    minus_names = np.empty((steps, n, d), dtype=object)
    p_hi = max(0.0, dyn.u_max)
    p_lo = max(0.0, dyn.u_min)
    m_hi = max(0.0, -dyn.u_min)
    m_lo = max(0.0, -dyn.u_max)
    for k in range(steps):
        for agent in range(n):
            for dim in range(d):
                plus_names[k, agent, dim] = model.add_variable(
                    f"up_{k}_{agent}_{dim}", lb=p_lo, ub=p_hi)
                minus_names[k, agent, dim] = model.add_variable(
                    f"um_{k}_{agent}_{dim}", lb=m_lo, ub=m_hi)

    if cfg.objective_mode == ONE_NORM:
        obj = {str(name): 1.0 for name in plus_names.ravel()}
        obj.update({str(name): 1.0 for name in minus_names.ravel()})
        model.set_objective(obj)
    else:
        obj = {}
        for k in range(steps):
            w = model.add_variable(f"winf_{k}", lb=0.0, ub=max(abs(dyn.u_min), abs(dyn.u_max)))
            obj[w] = 1.0
            for agent in range(n):
                for dim in range(d):
                    model.add_constraint(
                        {w: 1.0, str(plus_names[k, agent, dim]): -1.0,
                         str(minus_names[k, agent, dim]): -1.0}, ">=", 0.0)
        model.set_objective(obj)

    enc_cfg = encoding.EncodingConfig(big_m=cfg.big_m, r_min=float(np.min(cfg.r_min)))
    rho_vars: list[str] = []

    agent_symbols = _symbols_from(maps.own_coef, maps.own_const, plus_names, minus_names)
    _add_formula_constraints(model, ctx.agent_formula, agent_symbols, cfg.r_min,
                             steps, enc_cfg, "agt", rho_vars)

    sys_formula = mtl.simplify(ctx.system_formula)
    required_r = 0.0
    if not isinstance(sys_formula, mtl.TrueFormula):
        eval_times = [t + j for j in range(h)]
        try:
            required_r = encoding.required_rmin(
                sys_formula, ctx.error_bounds, float(np.max(cfg.gamma_min)),
                mode=cfg.confidence_mode, eval_times=eval_times)
        except encoding.UnreachableConfidenceError as exc:
            raise ConfidencePrecheckError(str(exc)) from exc
        sys_thresholds = np.maximum(cfg.r_min, required_r)
        zeta_symbols = _symbols_from(maps.zeta_coef[:, ctx.agent_id, :],
                                     maps.zeta_const[:, ctx.agent_id, :],
                                     plus_names, minus_names)
        _add_formula_constraints(model, sys_formula, zeta_symbols, sys_thresholds,
                                 steps, enc_cfg, "sys", rho_vars)
    else:
        sys_thresholds = np.zeros(h)

    info = DiffMilpInfo(t=t, maps=maps, plus_names=plus_names, minus_names=minus_names,
                        agent_thresholds=cfg.r_min.copy(),
                        system_thresholds=sys_thresholds, required_r=required_r,
                        rho_vars=rho_vars)
    return model, info


@dataclass
class RhcStepResult:
    status: str                      # "optimal" | "infeasible" | "unbounded"
    plan: Optional[np.ndarray]       # (2H, N, d) planned inputs
    applied: Optional[np.ndarray]    # (d,) own input actually applied
    objective: Optional[float]
    nodes: int
    solve_seconds: float
    required_r: float
    planned_agent_robustness: Optional[np.ndarray]   # (H,)
    planned_system_robustness: Optional[np.ndarray]  # (H,)


def rhc_step(ctx: AgentContext, t: int) -> tuple[RhcStepResult, AgentContext]:
    """Assemble and solve the planning program, apply the first own input.

    Returns the step result and the rolled context; on infeasibility the
    context is unchanged and the result signals termination.
    """
    model, info = assemble_diff_milp(ctx, t)
    started = time.perf_counter()
    sol = solve_milp(model, node_limit=ctx.config.node_limit)
    elapsed = time.perf_counter() - started
    if not sol.is_optimal:
        return RhcStepResult(sol.status, None, None, None, sol.nodes, elapsed,
                             info.required_r, None, None), ctx

    plan = info.input_plan(sol.values)
    own_traj = info.own_trajectory(plan)
    zrow_traj = info.zeta_row_trajectory(plan, ctx.agent_id)
    h = ctx.config.horizon
    agent_rob = _window_robustness(own_traj, ctx.agent_formula, h)
    system_rob = _window_robustness(zrow_traj, ctx.system_formula, h)
    encoding.check_big_m(sol.values, info.rho_vars, ctx.config.big_m)

    new_ctx = replace(
        ctx,
        prev_prev_input=ctx.prev_input.copy(),
        prev_input=plan[0].copy(),
    )
    result = RhcStepResult("optimal", plan, plan[0, ctx.agent_id].copy(), sol.objective,
                           sol.nodes, elapsed, info.required_r, agent_rob, system_rob)
    return result, new_ctx


def _window_robustness(traj: np.ndarray, f: mtl.Formula, h: int) -> np.ndarray:
    f = mtl.simplify(f)
    if isinstance(f, mtl.TrueFormula):
        return np.full(h, math.inf)
    return np.array([mtl.robustness(traj, f, j) for j in range(h)])


def begin_step(ctx: AgentContext, t: int,
               message: Optional[IncomingMessage] = None) -> AgentContext:
    """Start-of-step estimate update.

    Every row of the measurement vector is filled with the one-step-ahead
    prediction; when a partner message arrived, its row is replaced by the
    received noisy output and the running-average rows of the two
    participants take the pair mean.  The filter update then uses the gain
    scheduled for this step.
    """
    dyn = ctx.dynamics
    y_vec = predict_output(ctx.xhat, ctx.prev_input, ctx.prev_prev_input, dyn)
    if message is not None:
        y_vec[message.partner] = np.asarray(message.noisy_output, dtype=float)
    gain = ctx.kalman.gain(t)
    xhat_new = estimation.kalman_update(ctx.xhat, ctx.prev_input, y_vec, gain,
                                        dyn.a, dyn.b)
    delta = xhat_new - ctx.xhat
    zeta_new = ctx.zeta + delta
    if message is not None:
        pair_mean = 0.5 * (ctx.zeta[ctx.agent_id] + np.asarray(message.zeta_row, dtype=float))
        zeta_new[ctx.agent_id] = pair_mean + delta[ctx.agent_id]
        zeta_new[message.partner] = pair_mean + delta[message.partner]
    return replace(ctx, xhat=xhat_new, zeta=zeta_new, last_noisy_output=y_vec)


def apply_own_input(ctx: AgentContext, applied: np.ndarray) -> AgentContext:
    """Advance the agent's true state with its applied input."""
    dyn = ctx.dynamics
    i = ctx.agent_id
    new_state = dyn.a[i] * ctx.own_state + dyn.b[i] * np.asarray(applied, dtype=float)
    return replace(ctx, own_state=new_state)


@dataclass
class AgentLoopResult:
    states: np.ndarray               # realized own states, (T+1, d)
    applied_inputs: np.ndarray       # (T, d)
    step_results: list[RhcStepResult]
    status: str                      # "completed" | "infeasible"
    terminated_at: Optional[int]


def agent_loop(ctx: AgentContext, events: dict[int, IncomingMessage], tau: int) -> AgentLoopResult:
    """Run one agent standalone over steps 1..tau-H with scripted messages.

    The loop runs while the planning program stays feasible; on infeasibility
    it stops and reports the step.  Useful for tests; the full simulator in
    :mod:`dpmtl.simulate` couples all agents through the plant.
    """
    h = ctx.config.horizon
    if tau <= h:
        raise ControllerError("time length must exceed the horizon")
    states = [ctx.own_state.copy()]
    inputs = []
    results: list[RhcStepResult] = []
    # the agent idles at step 0, so its state first decays uncontrolled
    ctx = apply_own_input(ctx, np.zeros(ctx.dynamics.n_dims))
    states.append(ctx.own_state.copy())
    for t in range(1, tau - h + 1):
        ctx = begin_step(ctx, t, events.get(t))
        result, ctx = rhc_step(ctx, t)
        results.append(result)
        if result.status != "optimal":
            return AgentLoopResult(np.array(states), np.array(inputs) if inputs else np.zeros((0, ctx.dynamics.n_dims)),
                                   results, "infeasible", t)
        ctx = apply_own_input(ctx, result.applied)
        states.append(ctx.own_state.copy())
        inputs.append(result.applied)
    return AgentLoopResult(np.array(states), np.array(inputs), results, "completed", None)
