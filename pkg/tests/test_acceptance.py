"""Acceptance gate: one PASS/FAIL line per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -s`` (the lines are printed even
without ``-s``).
"""

import itertools
import math
import time

import numpy as np
import pytest

from eccoop.allocation import (
    SignatureScheme,
    allocate_exact,
    allocate_signature,
    capacity_post_scale,
    compare_allocations,
    shapley_exact,
)
from eccoop.cea import cea_cost
from eccoop.coalitions import Ledger, ValueTable, evaluate_all, members_of
from eccoop.dso import fixed_injections, solve_dso_lp
from eccoop.kkt import solve_single_level, stationarity_residuals
from eccoop.synth import BUILDERS, build_case

KINDS = sorted(BUILDERS)
CASE69_GROUPS = [(31, 36), (44, 52), (60, 68)]


@pytest.fixture
def verdict(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {label}: {detail}")
        assert ok, f"{label}: {detail}"

    return emit


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(a), abs(b))


def _permutation_shapley(v, n):
    phi = [0.0] * n
    for order in itertools.permutations(range(n)):
        mask = 0
        for i in order:
            phi[i] += v[mask | 1 << i] - v[mask]
            mask |= 1 << i
    return [x / math.factorial(n) for x in phi]


def test_c01_strong_duality(verdict):
    worst, count, cigre_time = 0.0, 0, None
    for kind in KINDS:
        case = build_case(kind)
        roster = case.community_buses
        t0 = time.perf_counter()
        for mask in range(1 << len(roster)):
            res = solve_single_level(case, members_of(mask, roster))
            # f^CEA recomputed from the schedule and the embedded multipliers
            f_cea = cea_cost(res.schedule, res.duals.lambda_p, res.duals.lambda_q, case)
            worst = max(worst, abs(res.objective - f_cea) / max(1.0, abs(f_cea)))
            count += 1
        if kind == "cigre19":
            cigre_time = time.perf_counter() - t0
    ok = worst <= 1e-5 and cigre_time <= 60.0
    verdict("C1 strong duality", ok, f"worst relative gap {worst:.2e} over {count} solves (tol 1e-5); "
            f"19-bus 24 periods 8 coalitions in {cigre_time:.1f} s (limit 60 s)")


def test_c02_kkt_consistency(verdict, exact_runs):
    cost, settle, comp_ratio, sat = 0.0, 0.0, 0.0, 0.0
    n = 0
    for kind in KINDS:
        _, _, table, _ = exact_runs(kind)
        for r in table.results.values():
            a = r.audit
            cost = max(cost, a["dso_cost_rel"])
            settle = max(settle, a["settlement_rel"])
            comp_ratio = max(comp_ratio, a["complementarity"] / r.big_m)
            sat = max(sat, a["saturation"])
            n += 1
    ok = cost <= 1e-6 and settle <= 1e-5 and comp_ratio <= 1e-6 and sat < 0.999
    verdict("C2 KKT consistency", ok, f"{n} solutions: DSO cost rel {cost:.2e} (1e-6), settlement rel {settle:.2e} (1e-5), "
            f"complementarity/M {comp_ratio:.2e} (1e-6), max multiplier or slack/M {sat:.4f} (< 0.999)")


def test_c03_stationarity(verdict, toy6, cigre19):
    rng = np.random.default_rng(2024)
    worst, n = 0.0, 0
    for case in (toy6, cigre19):
        p, q = fixed_injections(case)
        for _ in range(10):
            scale = rng.uniform(0.5, 1.0, p.shape)
            sol = solve_dso_lp(case, p * scale, q * scale)
            worst = max(worst, float(np.abs(stationarity_residuals(sol.block, sol.duals.raw)).max()))
            n += 1
    verdict("C3 stationarity", worst <= 1e-7, f"{n} random LPs, max residual {worst:.2e} (tol 1e-7)")


def test_c04_axioms(verdict, exact_runs):
    eff = 0.0
    for kind in KINDS:
        _, _, table, _ = exact_runs(kind)
        phi = shapley_exact(table)
        eff = max(eff, _rel(math.fsum(phi.values()), table.value(table.grand)))
    twin, _, ttable, _ = exact_runs("twin")
    phi = shapley_exact(ttable)
    sym = abs(phi[3] - phi[5])
    null = abs(phi[6])
    rng = np.random.default_rng(7)
    add = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 6))
        a = ValueTable(tuple(range(n)), dict(enumerate([0.0] + list(rng.uniform(-1, 1, (1 << n) - 1)))))
        b = ValueTable(tuple(range(n)), dict(enumerate([0.0] + list(rng.uniform(-1, 1, (1 << n) - 1)))))
        pa, pb, pab = shapley_exact(a), shapley_exact(b), shapley_exact(a + b)
        add = max(add, max(abs(pab[k] - pa[k] - pb[k]) for k in pab))
    ok = eff <= 1e-9 and sym <= 1e-9 and null <= 1e-6 and add <= 1e-12
    verdict("C4 Shapley axioms", ok, f"efficiency rel {eff:.1e} (1e-9), twin symmetry {sym:.1e} (1e-9), "
            f"zero-capacity null player {null:.1e} (1e-6), additivity {add:.1e} (1e-12)")


def test_c05_oracle(verdict):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 5))
        v = [0.0] + list(rng.uniform(-100, 100, (1 << n) - 1))
        phi = shapley_exact(ValueTable(tuple(range(n)), dict(enumerate(v))))
        want = _permutation_shapley(v, n)
        worst = max(worst, max(abs(phi[i] - want[i]) for i in range(n)))
    verdict("C5 permutation oracle", worst <= 1e-10, f"100 tables with N <= 4, max deviation {worst:.1e} (tol 1e-10)")


def test_c06_counts(verdict, exact_runs):
    case, _, table, _ = exact_runs("case69")
    roster = case.community_buses
    full = len(table.values)
    pairs = SignatureScheme.from_groups(roster, CASE69_GROUPS)
    triplets = SignatureScheme.from_groups(roster, [roster[:3], roster[3:]])
    counts = (full, len(pairs.representatives()), len(triplets.representatives()))
    verdict("C6 coalition counts", counts == (64, 27, 16), f"enumeration {counts[0]} (64), three pairs {counts[1]} (27), "
            f"two triplets {counts[2]} (16)")


def test_c07_signature_accuracy(verdict, exact_runs):
    case, exact, table, ledger = exact_runs("case69")
    scheme = SignatureScheme.from_groups(case.community_buses, CASE69_GROUPS)
    approx, sig = allocate_signature(case, scheme, ledger=ledger)
    errs = compare_allocations(exact, approx)
    rel = max(e["rel_error"] for e in errs if abs(e["exact"]) >= 0.01)
    near = [e for e in errs if abs(e["exact"]) < 0.01]
    near_abs = max((e["abs_error"] for e in near), default=0.0)
    total_gap = abs(approx.total_phi - exact.total_phi)
    vm = table.value(table.grand)
    ok = rel <= 0.05 and near_abs <= 1e-3 and total_gap <= 1e-9 * max(1.0, abs(vm)) and len(near) > 0 and sig.solve_count == 27
    verdict("C7 signature accuracy", ok, f"worst relative error {rel:.2e} (5%), near-null ECs "
            f"{[e['community'] for e in near]} abs error {near_abs:.1e} (1e-3), |sum phi~ - sum phi| {total_gap:.1e}, v(M) {vm:.6f}")


def _timed(case, masks):
    t0 = time.perf_counter()
    table = evaluate_all(case, masks, ledger=Ledger())
    return time.perf_counter() - t0, table.stats.solved


def test_c08_speedup(verdict, case69):
    roster = case69.community_buses
    reps = SignatureScheme.from_groups(roster, CASE69_GROUPS).representatives()
    # best of two interleaved runs on each side, fresh ledgers every time
    exact, sig = [], []
    for _ in range(2):
        exact.append(_timed(case69, range(1 << len(roster))))
        sig.append(_timed(case69, reps))
    t_exact, n_exact = min(exact)
    t_sig, n_sig = min(sig)
    ratio = t_sig / t_exact
    ok = ratio <= 0.6 and n_exact == 64 and n_sig == 27
    verdict("C8 signature speedup", ok, f"{n_sig} solves {t_sig:.2f} s vs {n_exact} solves {t_exact:.2f} s, "
            f"ratio {ratio:.3f} (limit 0.6, best of 2 each)")


def test_c09_cooperation_benefit(verdict, exact_runs):
    worst_v, worst_ir = math.inf, -math.inf
    for kind in KINDS:
        _, rep, table, _ = exact_runs(kind)
        worst_v = min(worst_v, table.value(table.grand))
        worst_ir = max(worst_ir, max(r.c_final - r.c_indiv for r in rep.rows))
    ok = worst_v >= 0.0 and worst_ir <= 1e-6
    verdict("C9 cooperation benefit", ok, f"smallest v(M) {worst_v:.6f} (>= 0), largest c_final - c_indiv {worst_ir:.2e} (<= 1e-6)")


def test_c10_post_scale(verdict):
    out = capacity_post_scale({"a": 45.0, "b": 46.51}, {"a": 1.2, "b": 1.0})
    example = (round(out["a"], 2), round(out["b"], 2)) == (49.91, 41.60)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 9))
        final = dict(enumerate(rng.uniform(-100, 100, n)))
        ratios = dict(enumerate(rng.uniform(0.2, 5.0, n)))
        cut = int(rng.integers(1, n))
        groups = [list(range(cut)), list(range(cut, n))]
        scaled = capacity_post_scale(final, ratios, groups)
        for g in groups:
            worst = max(worst, abs(math.fsum(scaled[b] for b in g) - math.fsum(final[b] for b in g)))
        worst = max(worst, abs(math.fsum(scaled.values()) - math.fsum(final.values())))
    ok = example and worst <= 1e-9
    verdict("C10 post-scaling", ok, f"91.51 at 1.2:1 -> {out['a']:.4f} / {out['b']:.4f} (49.91 / 41.60), "
            f"max total drift {worst:.1e} (1e-9)")


def test_c11_determinism(verdict, toy6):
    runs = []
    for workers in (1, 8):
        rep, table = allocate_exact(toy6, parallelism=workers, ledger=Ledger())
        runs.append((table.to_json(), rep.to_json()))
    same_table = runs[0][0] == runs[1][0]
    same_report = runs[0][1] == runs[1][1]
    verdict("C11 determinism", same_table and same_report,
            f"value table identical: {same_table}, allocation report identical: {same_report} (workers 1 vs 8)")
