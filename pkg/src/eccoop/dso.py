"""Distribution operator: LinDistFlow dispatch LP and DLMP extraction.

Every DSO row is kept as a :class:`DsoRow` in Lagrangian form
``a.x (== | <=) b``; the standalone LP and the KKT reformulation both build
from the same rows, so stationarity, duals and the dual objective agree by
construction. Voltage rows are scaled by ``base_kva / 2`` so the squared
voltage enters in kW-equivalent units and its multipliers stay moderate.
Multipliers follow ``L = f + sum(lambda * (a.x - b))``: inequality
multipliers are non-negative and ``lambda_p`` is the marginal cost of load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .case import NetworkCase
from .cea import CeaHandles, passive_profile
from .errors import DimensionError, InfeasibleError, InfeasibleTopologyError, MissingScheduleError, UnboundedError
from .solver import INF, LinExpr, ModelInstance, SolveOptions, Var, solve

ROW_KINDS = ("volt", "u_lo", "u_hi", "bal_p", "bal_q", "gp_lo", "gp_hi", "gq_lo", "gq_hi")


@dataclass
class DsoRow:
    kind: str
    index: int  # bus position for nodal rows, line position for "volt"
    t: int
    terms: dict[int, float]  # coefficients on DSO primal variables
    sense: str  # "==" or "<="
    rhs_const: float
    rhs_param: LinExpr | None = None  # upper-level part of the right-hand side
    model_row: int = -1

    def rhs_value(self, x: np.ndarray | None = None) -> float:
        if self.rhs_param is None:
            return self.rhs_const
        return self.rhs_const + self.rhs_param.value(x)


@dataclass
class DsoPrimal:
    var: Var
    kind: str  # u | P | Q | pg | qg
    index: int
    t: int
    cost: float


@dataclass
class DsoBlock:
    case: NetworkCase
    rows: list[DsoRow] = field(default_factory=list)
    primal: list[DsoPrimal] = field(default_factory=list)
    u: dict[tuple[int, int], Var] = field(default_factory=dict)
    P: dict[tuple[int, int], Var] = field(default_factory=dict)
    Q: dict[tuple[int, int], Var] = field(default_factory=dict)
    pg: dict[tuple[int, int], Var] = field(default_factory=dict)
    qg: dict[tuple[int, int], Var] = field(default_factory=dict)
    p_inj: list = field(default_factory=list)
    q_inj: list = field(default_factory=list)

    @property
    def volt_scale(self) -> float:
        return self.case.base_kva / 2.0

    def primal_cost(self) -> LinExpr:
        return LinExpr({p.var.index: p.cost for p in self.primal if p.cost})


@dataclass
class GridState:
    u: np.ndarray  # (n_bus, T) squared voltage p.u.^2
    p_g: np.ndarray
    q_g: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    p_flow: np.ndarray  # (n_line, T)
    q_flow: np.ndarray


@dataclass
class DualState:
    """Multipliers per bus/line and period.

    ``lambda_p``/``lambda_q`` are DLMPs in $/kWh ($/kvarh); the remaining
    multipliers are in objective units per period and, for voltage rows,
    per kW-equivalent of the scaled row.
    """

    lambda_p: np.ndarray
    lambda_q: np.ndarray
    lambda_volt: np.ndarray
    lambda_u_lo: np.ndarray
    lambda_u_hi: np.ndarray
    lambda_gp_lo: np.ndarray
    lambda_gp_hi: np.ndarray
    lambda_gq_lo: np.ndarray
    lambda_gq_hi: np.ndarray
    raw: np.ndarray  # one multiplier per DsoRow, Lagrangian units


def _finite(v: float) -> bool:
    return not math.isinf(v)


def build_dso_lp(case: NetworkCase, p_inj, q_inj, model: ModelInstance) -> DsoBlock:
    """Declare DSO variables and rows in ``model``.

    ``p_inj``/``q_inj`` are indexed ``[bus_position][t]`` and hold floats or
    expressions over upper-level variables.
    """
    n, T = len(case.buses), case.horizon
    if len(p_inj) != n or len(q_inj) != n or any(len(r) != T for r in p_inj) or any(len(r) != T for r in q_inj):
        raise DimensionError(f"injections must cover {n} buses x {T} periods")
    block = DsoBlock(case, p_inj=p_inj, q_inj=q_inj)
    S = block.volt_scale
    slack = case.slack.id
    incident = {b.id: 0 for b in case.buses}
    for ln in case.lines:
        incident[ln.from_bus] += 1
        incident[ln.to_bus] += 1
    for b in case.buses:
        if b.kind != "slack" and incident[b.id] == 0:
            raise InfeasibleTopologyError(f"bus {b.id} has no incident line")
    v0sq = case.slack_voltage**2

    def add_row(kind, index, t, terms, sense, rhs, param=None, name=""):
        row = DsoRow(kind, index, t, terms, sense, float(rhs), param)
        body = LinExpr(terms)
        if param is not None:
            body = body - param
        row.model_row = model.add_constr(body, sense, rhs, name)
        block.rows.append(row)
        return row

    for t in range(T):
        price = case.lmp[t] * case.dt_hours
        for i, b in enumerate(case.buses):
            if b.kind != "slack":
                u = model.add_var(f"u[{b.id},{t}]", -INF, INF)
                block.u[i, t] = u
                block.primal.append(DsoPrimal(u, "u", i, t, 0.0))
            if b.generator is not None:
                cost = price if b.kind == "slack" else b.generator.marginal_cost * case.dt_hours
                pg = model.add_var(f"pg[{b.id},{t}]", -INF, INF)
                qg = model.add_var(f"qg[{b.id},{t}]", -INF, INF)
                block.pg[i, t], block.qg[i, t] = pg, qg
                block.primal.append(DsoPrimal(pg, "pg", i, t, cost))
                block.primal.append(DsoPrimal(qg, "qg", i, t, 0.0))
        for k, ln in enumerate(case.lines):
            P = model.add_var(f"P[{ln.from_bus},{ln.to_bus},{t}]", -INF, INF)
            Q = model.add_var(f"Q[{ln.from_bus},{ln.to_bus},{t}]", -INF, INF)
            block.P[k, t], block.Q[k, t] = P, Q
            block.primal.append(DsoPrimal(P, "P", k, t, 0.0))
            block.primal.append(DsoPrimal(Q, "Q", k, t, 0.0))

        # voltage drop along each line: S*(u_to - u_from) + r*P + x*Q = 0
        for k, ln in enumerate(case.lines):
            terms = {block.P[k, t].index: ln.r, block.Q[k, t].index: ln.x}
            rhs = 0.0
            for bus_id, sign in ((ln.to_bus, 1.0), (ln.from_bus, -1.0)):
                if bus_id == slack:
                    rhs -= sign * S * v0sq
                else:
                    terms[block.u[case.bus_pos[bus_id], t].index] = sign * S
            add_row("volt", k, t, terms, "==", rhs, name=f"volt[{ln.from_bus},{ln.to_bus},{t}]")

        for i, b in enumerate(case.buses):
            if b.kind != "slack":
                ui = block.u[i, t].index
                add_row("u_lo", i, t, {ui: -S}, "<=", -S * b.v_min**2, name=f"u_lo[{b.id},{t}]")
                add_row("u_hi", i, t, {ui: S}, "<=", S * b.v_max**2, name=f"u_hi[{b.id},{t}]")

        # nodal balance: sum(out) - sum(in) - p_g = p_inj
        for kind, flows, gens, inj in (("bal_p", block.P, block.pg, p_inj), ("bal_q", block.Q, block.qg, q_inj)):
            for i, b in enumerate(case.buses):
                terms: dict[int, float] = {}
                for k, ln in enumerate(case.lines):
                    if ln.from_bus == b.id:
                        terms[flows[k, t].index] = terms.get(flows[k, t].index, 0.0) + 1.0
                    elif ln.to_bus == b.id:
                        terms[flows[k, t].index] = terms.get(flows[k, t].index, 0.0) - 1.0
                if (i, t) in gens:
                    terms[gens[i, t].index] = -1.0
                val = inj[i][t]
                if isinstance(val, (LinExpr, Var)):
                    e = LinExpr.of(val)
                    param = LinExpr(e.terms)
                    add_row(kind, i, t, terms, "==", e.const, param, name=f"{kind}[{b.id},{t}]")
                else:
                    add_row(kind, i, t, terms, "==", float(val), name=f"{kind}[{b.id},{t}]")

        for i, b in enumerate(case.buses):
            g = b.generator
            if g is None:
                continue
            for kind_lo, kind_hi, var, (lo, hi) in (
                ("gp_lo", "gp_hi", block.pg[i, t], g.p_bounds),
                ("gq_lo", "gq_hi", block.qg[i, t], g.q_bounds),
            ):
                if _finite(lo):
                    add_row(kind_lo, i, t, {var.index: -1.0}, "<=", -lo, name=f"{kind_lo}[{b.id},{t}]")
                if _finite(hi):
                    add_row(kind_hi, i, t, {var.index: 1.0}, "<=", hi, name=f"{kind_hi}[{b.id},{t}]")
    return block


def injection_coupling(case: NetworkCase, active, schedules: CeaHandles | None = None):
    """Injection series per bus: ``-p_c`` for active communities, fixed profiles elsewhere."""
    active = set(active)
    p_inj, q_inj = [], []
    for b in case.buses:
        if b.id in active:
            if schedules is None or b.id not in schedules.keys():
                raise MissingScheduleError(f"no schedule for active community {b.id}")
            v = schedules[b.id]
            p_inj.append([-1.0 * LinExpr.of(x) for x in v.p_c])
            q_inj.append([-1.0 * LinExpr.of(x) for x in v.q_c])
        elif b.kind == "community":
            p_c, q_c = passive_profile(case, b.id)
            p_inj.append([-float(v) for v in p_c])
            q_inj.append([-float(v) for v in q_c])
        else:
            p_inj.append([-float(v) for v in b.load_p])
            q_inj.append([-float(v) for v in b.load_q])
    return p_inj, q_inj


def fixed_injections(case: NetworkCase, active=(), schedule=None):
    """Numeric injections; ``schedule`` supplies ``p_c``/``q_c`` for active buses."""
    active = set(active)
    p_inj = np.zeros((len(case.buses), case.horizon))
    q_inj = np.zeros_like(p_inj)
    for i, b in enumerate(case.buses):
        if b.id in active:
            if schedule is None or b.id not in schedule.values:
                raise MissingScheduleError(f"no schedule for active community {b.id}")
            p_inj[i] = -schedule[b.id]["p_c"]
            q_inj[i] = -schedule[b.id]["q_c"]
        elif b.kind == "community":
            p_c, q_c = passive_profile(case, b.id)
            p_inj[i], q_inj[i] = -p_c, -q_c
        else:
            p_inj[i] = -np.array(b.load_p)
            q_inj[i] = -np.array(b.load_q)
    return p_inj, q_inj


def grid_state(block: DsoBlock, x: np.ndarray) -> GridState:
    case = block.case
    n, m, T = len(case.buses), len(case.lines), case.horizon
    u = np.full((n, T), case.slack_voltage**2)
    p_g, q_g = np.zeros((n, T)), np.zeros((n, T))
    P, Q = np.zeros((m, T)), np.zeros((m, T))
    for (i, t), v in block.u.items():
        u[i, t] = x[v.index]
    for (i, t), v in block.pg.items():
        p_g[i, t] = x[v.index]
    for (i, t), v in block.qg.items():
        q_g[i, t] = x[v.index]
    for (k, t), v in block.P.items():
        P[k, t] = x[v.index]
    for (k, t), v in block.Q.items():
        Q[k, t] = x[v.index]
    p_inj = np.array([[LinExpr.of(v).value(x) for v in row] for row in block.p_inj])
    q_inj = np.array([[LinExpr.of(v).value(x) for v in row] for row in block.q_inj])
    return GridState(u, p_g, q_g, p_inj, q_inj, P, Q)


def dual_state(block: DsoBlock, raw: np.ndarray) -> DualState:
    case = block.case
    n, m, T = len(case.buses), len(case.lines), case.horizon
    arrays = {k: np.zeros((m if k == "volt" else n, T)) for k in ROW_KINDS}
    for row, lam in zip(block.rows, raw):
        arrays[row.kind][row.index, row.t] = lam
    dt = case.dt_hours
    return DualState(
        lambda_p=arrays["bal_p"] / dt,
        lambda_q=arrays["bal_q"] / dt,
        lambda_volt=arrays["volt"],
        lambda_u_lo=arrays["u_lo"],
        lambda_u_hi=arrays["u_hi"],
        lambda_gp_lo=arrays["gp_lo"],
        lambda_gp_hi=arrays["gp_hi"],
        lambda_gq_lo=arrays["gq_lo"],
        lambda_gq_hi=arrays["gq_hi"],
        raw=np.asarray(raw, dtype=float),
    )


def dual_objective(block: DsoBlock, raw: np.ndarray, x: np.ndarray | None = None) -> float:
    """Lagrangian dual value ``-sum(lambda * b)`` for the given multipliers."""
    return -float(sum(lam * row.rhs_value(x) for row, lam in zip(block.rows, raw)))


@dataclass
class DsoSolution:
    grid: GridState
    duals: DualState
    objective: float
    dual_objective: float
    block: DsoBlock
    x: np.ndarray
    wall_time: float

    def slacks(self) -> np.ndarray:
        """Slack ``b - a.x`` of every inequality row (NaN for equalities)."""
        out = np.full(len(self.block.rows), np.nan)
        for r, row in enumerate(self.block.rows):
            if row.sense == "<=":
                out[r] = row.rhs_value(self.x) - sum(c * self.x[i] for i, c in row.terms.items())
        return out


def solve_dso_lp(case: NetworkCase, p_inj, q_inj, opts: SolveOptions | None = None) -> DsoSolution:
    """Solve the DSO dispatch for fixed numeric injections and read its duals."""
    model = ModelInstance(name=f"dso_{case.name}")
    p_inj = [[float(v) for v in row] for row in np.asarray(p_inj, dtype=float)]
    q_inj = [[float(v) for v in row] for row in np.asarray(q_inj, dtype=float)]
    block = build_dso_lp(case, p_inj, q_inj, model)
    model.set_objective(block.primal_cost())
    out = solve(model, opts or SolveOptions())
    if out.status == "infeasible":
        raise InfeasibleError("DSO dispatch is infeasible for these injections")
    if out.status == "unbounded":
        raise UnboundedError("DSO dispatch is unbounded")
    if not out.ok or out.duals is None:
        raise InfeasibleError(f"DSO dispatch did not reach optimality ({out.status})")
    raw = np.array([-out.duals[row.model_row] for row in block.rows])
    return DsoSolution(
        grid=grid_state(block, out.x),
        duals=dual_state(block, raw),
        objective=out.objective,
        dual_objective=dual_objective(block, raw),
        block=block,
        x=out.x,
        wall_time=out.wall_time,
    )
