import math

import numpy as np
import pytest

from eccoop.cea import (
    POLYGON_APOTHEM,
    POLYGON_SIDES,
    CommunitySchedule,
    build_cea_constraints,
    cea_cost,
    check_schedule,
    extract_schedule,
    passive_profile,
    passive_schedule,
    settlements,
)
from eccoop.errors import DimensionError, InactiveCommunityError, ValidationError
from eccoop.solver import LinExpr, ModelInstance, quicksum, solve


def _solve_cea(case, active, objective):
    m = ModelInstance()
    h = build_cea_constraints(case, active, m)
    m.set_objective(objective(h))
    out = solve(m)
    assert out.ok
    return h, extract_schedule(out, h)


def test_handles_cover_active_only(toy6):
    m = ModelInstance()
    h = build_cea_constraints(toy6, {2}, m)
    assert list(h) == [2]
    assert len(h[2].p_c) == toy6.horizon and len(h[2].e) == toy6.horizon + 1
    with pytest.raises(InactiveCommunityError):
        h[3]


def test_unknown_active_bus(toy6):
    with pytest.raises(ValidationError):
        build_cea_constraints(toy6, {1}, ModelInstance())


def test_bess_modes_exclusive_and_soc_closed(toy6):
    # reward battery throughput: the binaries must still forbid simultaneous charge and discharge
    def obj(h):
        v = h[2]
        return quicksum(-1.0 * p for p in v.p_ch) + quicksum(-1.0 * p for p in v.p_dis)

    h, sched = _solve_cea(toy6, {2}, obj)
    s = sched[2]
    assert np.all(s["u_ch"] + s["u_dis"] <= 1 + 1e-9)
    assert np.all(np.minimum(s["p_ch"], s["p_dis"]) <= 1e-9)
    bess = toy6.community(2).bess
    assert s["e"][0] == pytest.approx(bess.e_init)
    assert s["e"][-1] == pytest.approx(bess.e_final)
    worst = check_schedule(toy6, sched)
    assert max(worst.values()) <= 1e-7


def test_pv_polygon_inside_circle(toy6):
    # push for maximum apparent power in one direction; the polygon keeps it within s_max
    pv = toy6.community(2).pv

    def obj(h):
        v = h[2]
        return quicksum(-1.0 * q for q in v.q_pv) + quicksum(-1.0 * p for p in v.p_pv)

    _, sched = _solve_cea(toy6, {2}, obj)
    s = sched[2]
    assert np.all(np.hypot(s["p_pv"], s["q_pv"]) <= pv.s_max + 1e-9)
    assert np.all(np.abs(s["q_pv"]) <= pv.zeta * s["p_pv"] + 1e-9)
    assert POLYGON_APOTHEM == pytest.approx(math.cos(math.pi / POLYGON_SIDES))


def test_curtailment_bookkeeping(toy6):
    def obj(h):
        return quicksum(-1.0 * p for p in h[5].p_red)

    _, sched = _solve_cea(toy6, {5}, obj)
    s = sched[5]
    flex = np.array(toy6.community(5).flex.p_flex_max)
    assert s["p_red"] == pytest.approx(flex)
    assert s["p_load"] + s["p_red"] == pytest.approx(np.array(toy6.bus(5).load_p))
    assert s["p_c"] == pytest.approx(s["p_load"] - s["p_pv"] - s["p_bat"])


def test_passive_profile(toy6):
    p, q = passive_profile(toy6, 2)
    pv = np.array(toy6.community(2).pv.forecast)
    assert p == pytest.approx(np.array(toy6.bus(2).load_p) - pv)
    assert q == pytest.approx(np.array(toy6.bus(2).load_q))
    rec = passive_schedule(toy6, 2)
    assert rec["p_c"] == pytest.approx(p) and np.all(rec["p_red"] == 0)


def test_settlement_hand_computation(toy6):
    n, T = len(toy6.buses), toy6.horizon
    rng = np.random.default_rng(1)
    lam_p, lam_q = rng.uniform(0.01, 0.1, (n, T)), rng.uniform(0.0, 0.01, (n, T))
    sched = CommunitySchedule({2: passive_schedule(toy6, 2), 5: passive_schedule(toy6, 5)})
    sched.values[5]["p_red"] = np.full(T, 1.0)
    got = settlements(sched, lam_p, lam_q, toy6)
    i2, i5 = toy6.bus_pos[2], toy6.bus_pos[5]
    s2, s5 = sched[2], sched[5]
    want2 = sum(lam_p[i2, t] * s2["p_c"][t] + lam_q[i2, t] * s2["q_c"][t] for t in range(T))
    want5 = sum(lam_p[i5, t] * s5["p_c"][t] + lam_q[i5, t] * s5["q_c"][t] + toy6.community(5).flex.pi_flex for t in range(T))
    assert got[2] == pytest.approx(want2 * toy6.dt_hours, rel=1e-12)
    assert got[5] == pytest.approx(want5 * toy6.dt_hours, rel=1e-12)
    assert cea_cost(sched, lam_p, lam_q, toy6) == pytest.approx(got[2] + got[5], rel=1e-12)


def test_settlement_shape_checked(toy6):
    sched = CommunitySchedule({2: passive_schedule(toy6, 2)})
    with pytest.raises(DimensionError):
        settlements(sched, np.zeros((2, 2)), np.zeros((2, 2)), toy6)


def test_zero_der_community_is_fixed(chain_doc, make_case):
    chain_doc["communities"][0]["flex"] = {"p_flex_max": 0.0, "pi_flex": 0.0}
    c = make_case(chain_doc)
    _, sched = _solve_cea(c, {2}, lambda h: quicksum(h[2].p_c))
    assert sched[2]["p_c"] == pytest.approx(np.array(c.bus(2).load_p))
    assert isinstance(LinExpr.of(0.0), LinExpr)
