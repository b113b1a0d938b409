import math

import highspy
import numpy as np
import pytest

from eccoop.errors import ValidationError
from eccoop.kkt import build_single_level
from eccoop.solver import INF, LinExpr, ModelInstance, SolveOptions, quicksum, solve


def test_min_x_at_lower_row():
    m = ModelInstance()
    x = m.add_var("x", -INF, INF)
    m.add_constr(x, ">=", 3.0)
    m.set_objective(x)
    out = solve(m)
    assert out.status == "optimal"
    assert out.value(x) == pytest.approx(3.0)
    assert out.objective == pytest.approx(3.0)


def test_infeasible_bounds_and_row():
    m = ModelInstance()
    x = m.add_var("x", 0.0, INF)
    m.add_constr(x, "<=", -1.0)
    m.set_objective(LinExpr())
    out = solve(m)
    assert out.status == "infeasible"
    assert out.x is None


def test_unbounded():
    m = ModelInstance()
    x = m.add_var("x", -INF, INF)
    m.set_objective(x)
    m.add_constr(x, "<=", 5.0)
    assert solve(m).status == "unbounded"


def test_one_dimensional_dual_is_cost_ratio():
    # min 2x s.t. 4x >= 3: shadow price of the row is c/a = 0.5
    m = ModelInstance()
    x = m.add_var("x", -INF, INF)
    r = m.add_constr(4.0 * x, ">=", 3.0)
    m.set_objective(2.0 * x)
    out = solve(m)
    assert out.value(x) == pytest.approx(0.75)
    assert out.duals[r] == pytest.approx(0.5)


def test_mip_has_no_duals_lp_has():
    m = ModelInstance()
    x = m.add_var("x", 0, 10)
    z = m.add_var("z", binary=True)
    m.add_constr(x - 10 * z, "<=", 0)
    m.add_constr(x, ">=", 2.5)
    m.set_objective(x + 3 * z)
    out = solve(m)
    assert out.status == "optimal" and out.duals is None
    assert out.value(z) == 1.0 and out.value(x) == pytest.approx(2.5)
    assert out.polished


def test_primal_feasibility_residual(toy6):
    slm = build_single_level(toy6, toy6.community_buses)
    out = solve(slm.model)
    assert out.ok
    assert slm.model.max_violation(out.x) <= 1e-8


def test_validate_rejects_foreign_variable():
    a = ModelInstance()
    a.add_var("x")
    a.add_constr(LinExpr({1: 1.0}), "<=", 1.0)
    with pytest.raises(ValidationError, match="model-reference"):
        a.validate()
    b = ModelInstance()
    b.add_var("x")
    b.set_objective(LinExpr({5: 1.0}))
    with pytest.raises(ValidationError):
        solve(b)


def test_quicksum_and_constants():
    m = ModelInstance()
    xs = [m.add_var(f"x{i}", 0, 1) for i in range(3)]
    e = quicksum(xs) + 2.0
    assert e.value(np.array([1.0, 0.5, 0.25])) == pytest.approx(3.75)


def test_deterministic_resolve(toy6):
    objs = []
    for _ in range(2):
        slm = build_single_level(toy6, toy6.community_buses)
        objs.append(solve(slm.model, SolveOptions(threads=1)).objective)
    assert objs[0] == objs[1]


def _mps_roundtrip_model():
    m = ModelInstance(name="rt")
    x = m.add_var("x[0,1]", -2.0, 4.0)
    y = m.add_var("y", -INF, INF)
    z = m.add_var("z", binary=True)
    w = m.add_var("w", 1.5, 1.5)
    m.add_constr(x + y, ">=", 1.0, "c1")
    m.add_constr(x - y, "<=", 2.0, "c2")
    m.add_constr(y - 3 * z, "<=", 0.5, "c3")
    m.add_constr(x + w, "==", 2.0, "c4")
    m.set_objective(3 * x + y + 0.5 * z + 1.0)
    return m


def test_mps_roundtrip_own_reader(tmp_path):
    m = _mps_roundtrip_model()
    path = tmp_path / "m.mps"
    m.write_mps(path)
    back = ModelInstance.read_mps(path)
    assert back.var_names == m.var_names
    assert back.row_names == m.row_names
    assert solve(back).objective == pytest.approx(solve(m).objective, rel=1e-9)


def test_mps_roundtrip_external_reader(tmp_path, toy6):
    slm = build_single_level(toy6, (2,))
    path = tmp_path / "single.mps"
    slm.model.write_mps(path)
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("threads", 1)
    h.setOptionValue("mip_rel_gap", 1e-9)
    h.setOptionValue("mip_feasibility_tolerance", 1e-7)
    assert h.readModel(str(path)) == highspy.HighsStatus.kOk
    h.run()
    ours = solve(slm.model, SolveOptions(gap_tol=1e-9)).objective
    theirs = h.getInfo().objective_function_value
    assert math.isclose(ours, theirs, rel_tol=1e-6, abs_tol=1e-7)
    assert h.getLp().num_col_ == slm.model.num_vars


def test_text_dump_lists_every_row(toy6):
    slm = build_single_level(toy6, (3,))
    text = slm.model.to_text()
    assert text.count("\n  ") >= slm.model.num_rows
    assert "stat_" in text and "cs_mult_" in text
