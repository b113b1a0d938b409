"""Single-level MILP: aggregator constraints plus the DSO's KKT system.

The DSO's bilinear settlement terms are replaced through strong duality, so
the objective only carries primal costs, multipliers times constant
right-hand sides, and curtailment compensation. Because the slack voltage is
substituted as a constant, lines leaving the slack bus carry a constant
right-hand side and contribute their own multiplier term.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .case import NetworkCase
from .cea import CeaHandles, CommunitySchedule, build_cea_constraints, settlements
from .dso import DsoBlock, DualState, GridState, build_dso_lp, dual_state, fixed_injections, grid_state, injection_coupling, solve_dso_lp
from .errors import BigMSaturatedError, InfeasibleError, SolveLimitError, UnboundedError, UnhousedVariableError
from .solver import INF, LinExpr, ModelInstance, SolveOptions, Var, solve

log = logging.getLogger(__name__)

SATURATION = 0.999
MAX_ESCALATIONS = 3


@dataclass
class ComplementarityPair:
    row: int  # position in DsoBlock.rows
    constraint_slack: LinExpr
    multiplier: Var
    switch: Var
    big_m: float


@dataclass
class SingleLevelModel:
    model: ModelInstance
    cea_handles: CeaHandles
    block: DsoBlock
    dual_vars: list[Var]
    stationarity: list[tuple[int, LinExpr]]  # (primal position, expression == 0)
    comp_pairs: list[ComplementarityPair]
    objective: LinExpr
    active: frozenset[int]
    big_m: float


def declare_duals(model: ModelInstance, block: DsoBlock) -> list[Var]:
    """One multiplier per DSO row; inequality multipliers are non-negative."""
    out = []
    for row in block.rows:
        name = f"lam_{row.kind}[{row.index},{row.t}]"
        lb = 0.0 if row.sense == "<=" else -INF
        out.append(model.add_var(name, lb, INF))
    return out


def stationarity_expressions(block: DsoBlock, dual_vars: list[Var]) -> list[tuple[int, LinExpr]]:
    """Gradient of the DSO Lagrangian for every primal variable: ``c_j + sum_i a_ij lambda_i``."""
    col_pos = {p.var.index: j for j, p in enumerate(block.primal)}
    exprs = [LinExpr(const=p.cost) for p in block.primal]
    housed = [False] * len(block.primal)
    for row, lam in zip(block.rows, dual_vars):
        for col, a in row.terms.items():
            j = col_pos[col]
            exprs[j].iadd(lam, a)
            housed[j] = True
    missing = [block.primal[j].var.name for j, ok in enumerate(housed) if not ok]
    if missing:
        raise UnhousedVariableError(f"DSO variables without any row: {missing[:5]}")
    return list(enumerate(exprs))


def stationarity_residuals(block: DsoBlock, raw: np.ndarray) -> np.ndarray:
    """Value of every stationarity expression at the multipliers ``raw`` (one per DSO row)."""
    scratch = ModelInstance(name="duals")
    duals = declare_duals(scratch, block)
    x = np.zeros(scratch.num_vars)
    for v, lam in zip(duals, raw):
        x[v.index] = lam
    return np.array([expr.value(x) for _, expr in stationarity_expressions(block, duals)])


def build_stationarity(case: NetworkCase, model: ModelInstance, block: DsoBlock, dual_vars: list[Var]):
    exprs = stationarity_expressions(block, dual_vars)
    for j, expr in exprs:
        p = block.primal[j]
        model.add_constr(expr, "==", 0.0, f"stat_{p.var.name}")
    return exprs


def build_complementarity(model: ModelInstance, block: DsoBlock, dual_vars: list[Var], big_m: float) -> list[ComplementarityPair]:
    pairs = []
    for r, (row, lam) in enumerate(zip(block.rows, dual_vars)):
        if row.sense != "<=":
            continue
        slack = LinExpr(const=row.rhs_const) - LinExpr(row.terms)
        if row.rhs_param is not None:
            slack = slack + row.rhs_param
        z = model.add_var(f"z_{row.kind}[{row.index},{row.t}]", binary=True)
        model.add_constr(lam - big_m * z, "<=", 0.0, f"cs_mult_{row.kind}[{row.index},{row.t}]")
        model.add_constr(slack + big_m * z, "<=", big_m, f"cs_slack_{row.kind}[{row.index},{row.t}]")
        pairs.append(ComplementarityPair(r, slack, lam, z, big_m))
    return pairs


def build_duality_objective(case: NetworkCase, block: DsoBlock, dual_vars: list[Var], cea: CeaHandles) -> LinExpr:
    """Primal DSO cost + sum(lambda * constant rhs) + curtailment compensation."""
    obj = block.primal_cost()
    for row, lam in zip(block.rows, dual_vars):
        if row.rhs_const:
            obj.iadd(lam, row.rhs_const)
    for l, v in cea.items():
        k = case.community(l).flex.pi_flex * case.dt_hours
        for p_red in v.p_red:
            obj.iadd(p_red, k)
    return obj


def build_single_level(case: NetworkCase, active, big_m: float | None = None) -> SingleLevelModel:
    active = frozenset(active)
    big_m = float(big_m if big_m is not None else case.big_m)
    model = ModelInstance(name=f"single_{case.name}")
    cea = build_cea_constraints(case, active, model)
    p_inj, q_inj = injection_coupling(case, active, cea)
    block = build_dso_lp(case, p_inj, q_inj, model)
    duals = declare_duals(model, block)
    stat = build_stationarity(case, model, block, duals)
    pairs = build_complementarity(model, block, duals, big_m)
    obj = build_duality_objective(case, block, duals, cea)
    model.set_objective(obj)
    return SingleLevelModel(model, cea, block, duals, stat, pairs, obj, active, big_m)


@dataclass
class SingleLevelResult:
    active: frozenset[int]
    objective: float
    schedule: CommunitySchedule
    grid: GridState
    duals: DualState
    settlement: dict[int, float]
    dso_cost: float
    complementarity: float  # max lambda * slack
    saturation: float  # max(lambda, slack) / M
    strong_duality_gap: float  # |objective - sum(settlement)|
    big_m: float
    mip_gap: float
    wall_time: float
    escalations: int = 0
    nonparticipant_cost: dict[int, float] = field(default_factory=dict)


def _evaluate(slm: SingleLevelModel, case: NetworkCase, x: np.ndarray, objective: float) -> SingleLevelResult:
    raw = np.array([x[v.index] for v in slm.dual_vars])
    duals = dual_state(slm.block, raw)
    grid = grid_state(slm.block, x)
    schedule = extract_schedule_x(slm.cea_handles, x)
    settle = settlements(schedule, duals.lambda_p, duals.lambda_q, case)
    comp = 0.0
    sat = 0.0
    for pair in slm.comp_pairs:
        lam = x[pair.multiplier.index]
        s = pair.constraint_slack.value(x)
        comp = max(comp, abs(lam * s))
        sat = max(sat, lam / pair.big_m, s / pair.big_m)
    dso_cost = slm.block.primal_cost().value(x)
    nonpart = {}
    for i, b in enumerate(case.buses):
        if b.kind == "slack" or b.id in slm.active:
            continue
        p_load = -grid.p_inj[i]
        q_load = -grid.q_inj[i]
        nonpart[b.id] = float(np.sum(duals.lambda_p[i] * p_load + duals.lambda_q[i] * q_load) * case.dt_hours)
    return SingleLevelResult(
        active=slm.active,
        objective=objective,
        schedule=schedule,
        grid=grid,
        duals=duals,
        settlement=settle,
        dso_cost=dso_cost,
        complementarity=comp,
        saturation=sat,
        strong_duality_gap=abs(objective - sum(settle.values())),
        big_m=slm.big_m,
        mip_gap=0.0,
        wall_time=0.0,
        nonparticipant_cost=nonpart,
    )


def extract_schedule_x(handles: CeaHandles, x: np.ndarray) -> CommunitySchedule:
    sched = CommunitySchedule()
    for l, v in handles.items():
        sched.values[l] = {f: np.array([LinExpr.of(e).value(x) for e in getattr(v, f)]) for f in CommunitySchedule.FIELDS}
    return sched


def solve_single_level(
    case: NetworkCase,
    active,
    opts: SolveOptions | None = None,
    big_m: float | None = None,
    escalate: bool = True,
) -> SingleLevelResult:
    """Solve the single-level MILP for one coalition of active communities.

    On Big-M saturation, or infeasibility that a larger M could lift, the
    constant is multiplied by 10 and the model is rebuilt, at most three times.
    """
    opts = opts or SolveOptions()
    m = float(big_m if big_m is not None else case.big_m)
    t0 = time.perf_counter()
    for attempt in range(MAX_ESCALATIONS + 1):
        slm = build_single_level(case, active, m)
        out = solve(slm.model, opts)
        if out.status == "infeasible":
            # a small M also cuts off feasible points, so infeasibility escalates like saturation
            if not escalate or attempt == MAX_ESCALATIONS:
                raise InfeasibleError(f"single-level model infeasible for coalition {sorted(active)} (M = {m:g})")
            log.warning("single-level model infeasible with M = %g; retrying with %g", m, m * 10)
            m *= 10.0
            continue
        if out.status == "unbounded":
            raise UnboundedError(f"single-level model unbounded for coalition {sorted(active)}")
        if not out.ok:
            raise SolveLimitError(f"solve stopped with status {out.status}")
        res = _evaluate(slm, case, out.x, out.objective)
        res.mip_gap = out.gap
        res.escalations = attempt
        if res.saturation < SATURATION:
            res.wall_time = time.perf_counter() - t0
            return res
        if not escalate or attempt == MAX_ESCALATIONS:
            raise BigMSaturatedError(m, res.saturation * m, f"coalition {sorted(active)}")
        log.warning("Big-M %g saturated (%.3g); retrying with %g", m, res.saturation, m * 10)
        m *= 10.0
    raise AssertionError("unreachable")


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def verify_kkt(case: NetworkCase, res: SingleLevelResult, opts: SolveOptions | None = None) -> dict[str, float]:
    """Re-solve the DSO LP with the solution's injections and compare.

    Returns relative mismatches of the DSO cost and of the nodal energy
    settlement ``sum(lambda_p * p_inj)`` between the embedded and the
    standalone problem.
    """
    p, q = fixed_injections(case, res.active, res.schedule)
    lp = solve_dso_lp(case, p, q, opts)
    embedded = float(np.sum(res.duals.lambda_p * res.grid.p_inj))
    standalone = float(np.sum(lp.duals.lambda_p * lp.grid.p_inj))
    return {
        "dso_cost_rel": _rel(lp.objective, res.dso_cost),
        "settlement_rel": _rel(embedded, standalone),
    }
