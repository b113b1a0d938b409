"""Community aggregator: DER scheduling constraints and settlement cost."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .case import NetworkCase
from .errors import DimensionError, InactiveCommunityError, ValidationError
from .solver import LinExpr, ModelInstance, SolveOutcome, Var

# inscribed regular polygon for the inverter circle; capacity loss is 1 - cos(pi/N)
POLYGON_SIDES = 12
_ALPHAS = [(2 * k + 1) * math.pi / POLYGON_SIDES for k in range(POLYGON_SIDES)]
POLYGON_APOTHEM = math.cos(math.pi / POLYGON_SIDES)


@dataclass
class CommunityVars:
    bus: int
    p_pv: list
    q_pv: list
    p_ch: list
    p_dis: list
    u_ch: list
    u_dis: list
    e: list  # horizon + 1 entries; e[0] and e[T] are the boundary states
    p_bat: list
    p_load: list
    p_red: list
    p_c: list
    q_c: list


class CeaHandles(dict):
    """Variable handles per active community bus."""

    def __missing__(self, bus):
        raise InactiveCommunityError(f"community bus {bus} is not active in this model")


@dataclass
class CommunitySchedule:
    """Numeric schedule for a set of community buses; arrays have one entry per period."""

    values: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)

    FIELDS = ("p_pv", "q_pv", "p_ch", "p_dis", "u_ch", "u_dis", "e", "p_bat", "p_load", "p_red", "p_c", "q_c")

    def __getitem__(self, bus: int) -> dict[str, np.ndarray]:
        return self.values[bus]

    @property
    def buses(self) -> list[int]:
        return list(self.values)


def _const(v: float) -> LinExpr:
    return LinExpr(const=v)


def build_cea_constraints(case: NetworkCase, active, model: ModelInstance) -> CeaHandles:
    """Declare the DER schedule of every active community and its operating rules."""
    active = set(active)
    unknown = active - set(case.community_buses)
    if unknown:
        raise ValidationError("active-subset", f"buses {sorted(unknown)} are not communities")
    T, dt = case.horizon, case.dt_hours
    handles = CeaHandles()
    for comm in case.communities:
        l = comm.bus
        if l not in active:
            continue
        bus = case.bus(l)
        pv, bess = comm.pv, comm.bess
        v = CommunityVars(l, *([] for _ in range(12)))
        for t in range(T):
            tag = f"[{l},{t}]"
            if pv is not None:
                p_pv = model.add_var(f"p_pv{tag}", 0.0, pv.forecast[t])
                q_pv = model.add_var(f"q_pv{tag}", -math.inf, math.inf)
                for k, a in enumerate(_ALPHAS):
                    model.add_constr(math.cos(a) * p_pv + math.sin(a) * q_pv, "<=", pv.s_max * POLYGON_APOTHEM, f"pv_circle{k}{tag}")
                model.add_constr(q_pv - pv.zeta * p_pv, "<=", 0.0, f"pv_pf_hi{tag}")
                model.add_constr(-q_pv - pv.zeta * p_pv, "<=", 0.0, f"pv_pf_lo{tag}")
            else:
                p_pv = q_pv = _const(0.0)
            v.p_pv.append(p_pv)
            v.q_pv.append(q_pv)

            if bess is not None:
                p_ch = model.add_var(f"p_ch{tag}", 0.0, bess.p_ch_max)
                p_dis = model.add_var(f"p_dis{tag}", 0.0, bess.p_dis_max)
                u_ch = model.add_var(f"u_ch{tag}", binary=True)
                u_dis = model.add_var(f"u_dis{tag}", binary=True)
                model.add_constr(p_ch - bess.p_ch_max * u_ch, "<=", 0.0, f"bess_ch{tag}")
                model.add_constr(p_dis - bess.p_dis_max * u_dis, "<=", 0.0, f"bess_dis{tag}")
                model.add_constr(u_ch + u_dis, "<=", 1.0, f"bess_mode{tag}")
                p_bat = model.add_var(f"p_bat{tag}", -math.inf, math.inf)
                model.add_constr(p_bat - p_dis + p_ch, "==", 0.0, f"bess_net{tag}")
            else:
                p_ch = p_dis = u_ch = u_dis = p_bat = _const(0.0)
            v.p_ch.append(p_ch)
            v.p_dis.append(p_dis)
            v.u_ch.append(u_ch)
            v.u_dis.append(u_dis)
            v.p_bat.append(p_bat)

            load = bus.load_p[t]
            p_load = model.add_var(f"p_load{tag}", 0.0, load)
            p_red = model.add_var(f"p_red{tag}", 0.0, comm.flex.p_flex_max[t])
            model.add_constr(p_red + p_load, "==", load, f"curtail{tag}")
            p_c = model.add_var(f"p_c{tag}", -math.inf, math.inf)
            q_c = model.add_var(f"q_c{tag}", -math.inf, math.inf)
            model.add_constr(p_c - p_load + p_pv + p_bat, "==", 0.0, f"net_p{tag}")
            model.add_constr(q_c + q_pv, "==", bus.load_q[t], f"net_q{tag}")
            v.p_load.append(p_load)
            v.p_red.append(p_red)
            v.p_c.append(p_c)
            v.q_c.append(q_c)

        if bess is not None:
            e = [model.add_var(f"e[{l},{t}]", bess.e_min, bess.e_max) for t in range(T + 1)]
            model.add_constr(e[0], "==", bess.e_init, f"soc_init[{l}]")
            model.add_constr(e[T], "==", bess.e_final, f"soc_final[{l}]")
            for t in range(T):
                model.add_constr(
                    e[t + 1] - e[t] - bess.eta_ch * dt * v.p_ch[t] + (dt / bess.eta_dis) * v.p_dis[t],
                    "==",
                    0.0,
                    f"soc[{l},{t}]",
                )
            v.e = e
        else:
            v.e = [_const(0.0) for _ in range(T + 1)]
        handles[l] = v
    return handles


def extract_schedule(outcome: SolveOutcome, handles: CeaHandles) -> CommunitySchedule:
    sched = CommunitySchedule()
    for l, v in handles.items():
        sched.values[l] = {f: outcome.values(getattr(v, f)) for f in CommunitySchedule.FIELDS}
    return sched


def passive_profile(case: NetworkCase, bus: int) -> tuple[np.ndarray, np.ndarray]:
    """Net consumption of a non-participating community: no curtailment, full PV, idle battery."""
    comm = case.community(bus)
    b = case.bus(bus)
    pv = np.array(comm.pv.forecast) if comm.pv is not None else np.zeros(case.horizon)
    return np.array(b.load_p) - pv, np.array(b.load_q, dtype=float)


def passive_schedule(case: NetworkCase, bus: int) -> dict[str, np.ndarray]:
    """The passive profile expressed as a full schedule record."""
    T = case.horizon
    comm = case.community(bus)
    b = case.bus(bus)
    z = np.zeros(T)
    pv = np.array(comm.pv.forecast) if comm.pv is not None else z.copy()
    e0 = comm.bess.e_init if comm.bess is not None else 0.0
    p_c, q_c = passive_profile(case, bus)
    return {
        "p_pv": pv, "q_pv": z.copy(), "p_ch": z.copy(), "p_dis": z.copy(), "u_ch": z.copy(),
        "u_dis": z.copy(), "e": np.full(T + 1, e0), "p_bat": z.copy(), "p_load": np.array(b.load_p),
        "p_red": z.copy(), "p_c": p_c, "q_c": q_c,
    }


def settlements(schedule: CommunitySchedule, dlmp_p: np.ndarray, dlmp_q: np.ndarray, case: NetworkCase) -> dict[int, float]:
    """Per-community settlement in $; prices are $/kWh arrays shaped (n_buses, horizon)."""
    dlmp_p = np.asarray(dlmp_p, dtype=float)
    dlmp_q = np.asarray(dlmp_q, dtype=float)
    shape = (len(case.buses), case.horizon)
    if dlmp_p.shape != shape or dlmp_q.shape != shape:
        raise DimensionError(f"price arrays must have shape {shape}, got {dlmp_p.shape} and {dlmp_q.shape}")
    out = {}
    for l in schedule.buses:
        s = schedule[l]
        if len(s["p_c"]) != case.horizon or len(s["q_c"]) != case.horizon or len(s["p_red"]) != case.horizon:
            raise DimensionError(f"schedule for bus {l} does not cover the horizon")
        i = case.bus_pos[l]
        pi_flex = case.community(l).flex.pi_flex
        per_t = dlmp_p[i] * s["p_c"] + dlmp_q[i] * s["q_c"] + pi_flex * s["p_red"]
        out[l] = float(np.sum(per_t) * case.dt_hours)
    return out


def cea_cost(schedule: CommunitySchedule, dlmp_p, dlmp_q, case: NetworkCase) -> float:
    """Aggregator cost: energy and reactive settlement plus curtailment compensation."""
    return float(sum(settlements(schedule, dlmp_p, dlmp_q, case).values()))


def check_schedule(case: NetworkCase, schedule: CommunitySchedule) -> dict[str, float]:
    """Worst residual of each operating rule, recomputed from raw schedule values.

    Inequalities report their positive violation; equalities the absolute
    mismatch. The inverter check uses the exact circle, not the polygon.
    """
    worst: dict[str, float] = {}

    def note(key, val):
        worst[key] = max(worst.get(key, 0.0), float(np.max(val)) if np.size(val) else 0.0)

    dt = case.dt_hours
    for l in schedule.buses:
        s = schedule[l]
        comm = case.community(l)
        load = np.array(case.bus(l).load_p)
        pv_fc = np.array(comm.pv.forecast) if comm.pv else np.zeros(case.horizon)
        s_max = comm.pv.s_max if comm.pv else 0.0
        zeta = comm.pv.zeta if comm.pv else 0.0
        note("pv_avail", np.maximum(-s["p_pv"], 0) + np.maximum(s["p_pv"] - pv_fc, 0))
        note("pv_circle", np.maximum(np.hypot(s["p_pv"], s["q_pv"]) - s_max, 0))
        note("pv_pf", np.maximum(np.abs(s["q_pv"]) - zeta * s["p_pv"], 0))
        if comm.bess is not None:
            b = comm.bess
            note("bess_ch", np.maximum(s["p_ch"] - b.p_ch_max * s["u_ch"], 0) + np.maximum(-s["p_ch"], 0))
            note("bess_dis", np.maximum(s["p_dis"] - b.p_dis_max * s["u_dis"], 0) + np.maximum(-s["p_dis"], 0))
            note("bess_mode", np.maximum(s["u_ch"] + s["u_dis"] - 1, 0))
            e = s["e"]
            note("soc_dyn", np.abs(e[1:] - e[:-1] - b.eta_ch * s["p_ch"] * dt + s["p_dis"] * dt / b.eta_dis))
            note("soc_bounds", np.maximum(b.e_min - e, 0) + np.maximum(e - b.e_max, 0))
            note("soc_boundary", np.array([abs(e[0] - b.e_init), abs(e[-1] - b.e_final)]))
            note("bess_net", np.abs(s["p_bat"] - (s["p_dis"] - s["p_ch"])))
        note("load_bounds", np.maximum(-s["p_load"], 0) + np.maximum(s["p_load"] - load, 0))
        note("curtail_def", np.abs(s["p_red"] - (load - s["p_load"])))
        note("curtail_limit", np.maximum(-s["p_red"], 0) + np.maximum(s["p_red"] - np.array(comm.flex.p_flex_max), 0))
        note("net_p", np.abs(s["p_c"] - (s["p_load"] - s["p_pv"] - s["p_bat"])))
        note("net_q", np.abs(s["q_c"] - (np.array(case.bus(l).load_q) - s["q_pv"])))
    return worst
