"""Cost-saving allocation: exact and signature Shapley values, DLMP baseline.

The signature scheme treats the members of each group as interchangeable:
a coalition is identified by how many members of every group it holds, one
representative per signature is solved (the lowest-index members of each
group) and its value is copied to every coalition with that signature.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .case import NetworkCase
from .coalitions import (
    CoalitionResult,
    Ledger,
    ValueTable,
    enumerate_all,
    evaluate_all,
    members_of,
)
from .errors import EccoopError, IncompleteTableError, ValidationError, ZeroCapacityError
from .solver import SolveOptions

PROPORTIONAL_RTOL = 1e-9


def shapley_weights(n: int) -> np.ndarray:
    """w[s] = s! (n - s - 1)! / n! for coalitions of size s not holding the player."""
    return np.array([float(Fraction(math.factorial(s) * math.factorial(n - s - 1), math.factorial(n))) for s in range(n)])


def _popcounts(n: int) -> np.ndarray:
    counts = np.zeros(1 << n, dtype=np.int64)
    for i in range(n):
        counts[1 << i : 1 << (i + 1)] = counts[: 1 << i] + 1
    return counts


def shapley_exact(table: ValueTable) -> dict[int, float]:
    """Shapley value of every community from a complete value table."""
    if not table.complete:
        missing = table.missing()
        raise IncompleteTableError(
            f"value table incomplete: {len(missing)} coalition(s) missing, {len(table.failed)} failed"
        )
    n = table.n
    if n == 0:
        return {}
    v = np.array([table.values[m] for m in range(1 << n)], dtype=float)
    size = _popcounts(n)
    w = shapley_weights(n)
    masks = np.arange(1 << n)
    phi = {}
    for i, bus in enumerate(table.roster):
        without = masks[(masks >> i) & 1 == 0]
        marg = v[without | (1 << i)] - v[without]
        phi[bus] = math.fsum(w[size[without]] * marg)
    return phi


def final_costs(table: ValueTable, phi: Mapping[int, float]) -> dict[int, float]:
    return {b: table.individual[b] - phi[b] for b in table.roster}


def base_allocation(grand: CoalitionResult) -> dict[int, float]:
    """Each member pays its own DLMP settlement from the grand-coalition solve."""
    return {b: grand.settlement[b] for b in grand.members}


@dataclass(frozen=True)
class SignatureScheme:
    """Partition of the roster into interchangeable groups.

    ``groups`` hold community bus ids ordered by roster position;
    ``capacity`` is each member's scale relative to its group's first member.
    """

    roster: tuple[int, ...]
    groups: tuple[tuple[int, ...], ...]
    capacity: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        pos = {b: i for i, b in enumerate(self.roster)}
        flat = [b for g in self.groups for b in g]
        if sorted(flat, key=lambda b: pos.get(b, -1)) != list(self.roster) or len(flat) != len(set(flat)):
            raise ValidationError("signature-partition", "groups must partition the community roster")
        groups = tuple(sorted((tuple(sorted(g, key=pos.__getitem__)) for g in self.groups if g), key=lambda g: pos[g[0]]))
        object.__setattr__(self, "groups", groups)
        cap = dict(self.capacity)
        object.__setattr__(self, "capacity", tuple((b, float(cap.get(b, 1.0))) for b in self.roster))
        group_masks = tuple(tuple(1 << pos[b] for b in g) for g in groups)
        object.__setattr__(self, "_group_bits", group_masks)

    @classmethod
    def from_groups(cls, roster, groups: Iterable[Iterable[int]], capacity: Mapping[int, float] | None = None) -> SignatureScheme:
        return cls(tuple(roster), tuple(tuple(g) for g in groups), tuple((capacity or {}).items()))

    @classmethod
    def singletons(cls, roster) -> SignatureScheme:
        return cls(tuple(roster), tuple((b,) for b in roster))

    @property
    def ratios(self) -> dict[int, float]:
        return dict(self.capacity)

    @property
    def n_signatures(self) -> int:
        return math.prod(len(g) + 1 for g in self.groups)

    def signature(self, mask: int) -> tuple[int, ...]:
        return tuple(sum(1 for bit in bits if mask & bit) for bits in self._group_bits)

    def representative(self, mask: int) -> int:
        """Smallest bitmask with the same signature: the lowest-index members of each group."""
        rep = 0
        for k, bits in zip(self.signature(mask), self._group_bits):
            for bit in bits[:k]:
                rep |= bit
        return rep

    def representatives(self) -> list[int]:
        n = len(self.roster)
        return sorted({self.representative(m) for m in range(1 << n)}) if n <= 20 else self._reps_by_product()

    def _reps_by_product(self) -> list[int]:
        reps = [0]
        for bits in self._group_bits:
            prefix = [0]
            for bit in bits:
                prefix.append(prefix[-1] | bit)
            reps = [r | p for r in reps for p in prefix]
        return sorted(reps)

    def group_of(self, bus: int) -> tuple[int, ...]:
        for g in self.groups:
            if bus in g:
                return g
        raise KeyError(bus)


def _scalable_vector(case: NetworkCase, bus: int) -> tuple[tuple, np.ndarray]:
    """(non-scalable key, capacity vector) describing a community's DER portfolio."""
    comm = case.community(bus)
    b = case.bus(bus)
    key: list = [comm.pv is not None, comm.bess is not None, comm.flex.pi_flex]
    vec: list = list(b.load_p) + list(b.load_q) + list(comm.flex.p_flex_max)
    if comm.pv is not None:
        key.append(comm.pv.zeta)
        vec += list(comm.pv.forecast) + [comm.pv.s_max]
    if comm.bess is not None:
        s = comm.bess
        key += [s.eta_ch, s.eta_dis]
        vec += [s.p_ch_max, s.p_dis_max, s.e_min, s.e_max, s.e_init, s.e_final]
    return tuple(key), np.array(vec, dtype=float)


def capacity_factor(ref: np.ndarray, other: np.ndarray, rtol: float = PROPORTIONAL_RTOL) -> float | None:
    """k with other = k * ref, or None when the vectors are not proportional."""
    nr = float(np.linalg.norm(ref))
    no = float(np.linalg.norm(other))
    if nr == 0.0 or no == 0.0:
        return 1.0 if nr == no else None
    k = no / nr
    if np.allclose(other, k * ref, rtol=rtol, atol=rtol * no):
        return k
    return None


def propose_groups(case: NetworkCase, tol: float | None = None) -> SignatureScheme:
    """Greedy grouping by electrical proximity and proportional DER portfolios.

    A community joins the first earlier group whose every member lies within
    ``tol`` (sum of |z| along the tree path) and has a proportional
    portfolio; otherwise it starts a new group. ``tol`` defaults to 5% of
    the largest slack-to-bus path impedance.
    """
    if tol is None:
        tol = 0.05 * case.max_path_impedance()
    groups: list[list[int]] = []
    capacity: dict[int, float] = {}
    desc = {b: _scalable_vector(case, b) for b in case.community_buses}
    for b in case.community_buses:
        key, vec = desc[b]
        placed = False
        for g in groups:
            ref_key, ref_vec = desc[g[0]]
            if key != ref_key:
                continue
            if any(case.electrical_distance(b, m) > tol for m in g):
                continue
            k = capacity_factor(ref_vec, vec)
            if k is None:
                continue
            g.append(b)
            capacity[b] = k
            placed = True
            break
        if not placed:
            groups.append([b])
            capacity[b] = 1.0
    return SignatureScheme.from_groups(case.community_buses, groups, capacity)


def capacity_post_scale(
    final: Mapping[int, float],
    ratios: Mapping[int, float],
    groups: Sequence[Sequence[int]] | None = None,
) -> dict[int, float]:
    """Split each group's combined final cost in proportion to capacity ratios.

    Without ``groups`` all entries of ``final`` form one group. The last
    member takes the remainder so group totals are preserved exactly.
    """
    out = dict(final)
    if groups is None:
        groups = [list(final)]
    for g in groups:
        g = list(g)
        if len(g) < 2:
            continue
        r = [float(ratios.get(b, 1.0)) for b in g]
        if any(x <= 0.0 for x in r):
            raise ZeroCapacityError(f"non-positive capacity ratio in group {g}")
        total = math.fsum(final[b] for b in g)
        rsum = math.fsum(r)
        assigned = 0.0
        for b, x in zip(g[:-1], r[:-1]):
            out[b] = total * x / rsum
            assigned += out[b]
        out[g[-1]] = total - assigned
    return out


@dataclass
class SignatureOutcome:
    phi: dict[int, float]
    solve_count: int
    table: ValueTable  # filled table used for the Shapley computation
    individual: dict[int, float]  # c_indiv per member, copied from group representatives
    representatives: list[int]
    scheme: SignatureScheme
    results: dict[int, CoalitionResult] = field(default_factory=dict, repr=False)
    failed: dict[int, str] = field(default_factory=dict)

    def __iter__(self):
        yield self.phi
        yield self.solve_count


def shapley_signature(
    case: NetworkCase,
    scheme: SignatureScheme,
    parallelism: int = 1,
    ledger: Ledger | None = None,
    opts: SolveOptions | None = None,
) -> SignatureOutcome:
    """Approximate Shapley values from one solve per signature.

    Individual costs of non-representative members are those of their
    group's representative singleton, so the filled table's grand value
    equals the true v(M) whenever groups are exactly symmetric.
    """
    roster = case.community_buses
    if scheme.roster != roster:
        raise ValidationError("signature-partition", "scheme roster differs from the case roster")
    reps = scheme.representatives()
    solved = evaluate_all(case, reps, parallelism=parallelism, ledger=ledger, opts=opts, provenance="signature-representative")
    if solved.failed:
        raise IncompleteTableError(f"{len(solved.failed)} representative coalition(s) failed")
    results = solved.results
    pos = {b: i for i, b in enumerate(roster)}
    individual = {}
    for b in roster:
        rep = scheme.representative(1 << pos[b])
        rep_bus = members_of(rep, roster)[0]
        individual[b] = results[rep].settlement[rep_bus]
    rep_values = {}
    for r in reps:
        rep_values[r] = math.fsum(individual[b] for b in members_of(r, roster)) - results[r].objective if r else 0.0
    values = {m: rep_values[scheme.representative(m)] for m in range(1 << len(roster))}
    costs = {m: results[scheme.representative(m)].objective for m in range(1 << len(roster))}
    table = ValueTable(roster, values, dict(individual), costs)
    phi = shapley_exact(table)
    for g in scheme.groups:
        avg = math.fsum(phi[b] for b in g) / len(g)
        for b in g:
            phi[b] = avg
    return SignatureOutcome(phi, len(reps), table, individual, reps, scheme, dict(results))


@dataclass
class EcAllocation:
    bus: int
    c_indiv: float
    phi: float
    c_final: float
    c_base: float


@dataclass
class AllocationReport:
    method: str
    scenario: str
    case_hash: str
    roster: tuple[int, ...]
    rows: list[EcAllocation]
    grand_cost: float
    v_grand: float
    solve_count: int
    groups: list[list[int]] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)  # exact-vs-approx comparison

    @property
    def total_final(self) -> float:
        return math.fsum(r.c_final for r in self.rows)

    @property
    def total_base(self) -> float:
        return math.fsum(r.c_base for r in self.rows)

    @property
    def total_phi(self) -> float:
        return math.fsum(r.phi for r in self.rows)

    def row(self, bus: int) -> EcAllocation:
        for r in self.rows:
            if r.bus == bus:
                return r
        raise KeyError(bus)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "scenario": self.scenario,
            "case_hash": self.case_hash,
            "roster": list(self.roster),
            "communities": [vars(r).copy() for r in self.rows],
            "totals": {
                "c_indiv": math.fsum(r.c_indiv for r in self.rows),
                "phi": self.total_phi,
                "c_final": self.total_final,
                "c_base": self.total_base,
                "grand_cost": self.grand_cost,
                "v_grand": self.v_grand,
            },
            "solve_count": self.solve_count,
            "groups": self.groups,
            "errors": self.errors,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def table_rows(self) -> list[list]:
        """(method, scenario, community, original cost, new cost, difference)."""
        out = []
        for r in self.rows:
            new = r.c_base if self.method == "base" else r.c_final
            out.append([self.method, self.scenario, r.bus, r.c_indiv, new, new - r.c_indiv])
        return out

    def to_csv(self) -> str:
        return _csv(["method", "scenario", "community", "original_cost", "new_cost", "difference"], self.table_rows())

    def bar_chart_csv(self) -> str:
        return _csv(["community", "individual", "saving", "final"], [[r.bus, r.c_indiv, r.phi, r.c_final] for r in self.rows])

    def error_csv(self) -> str:
        return _csv(["community", "exact", "approx", "abs_error", "rel_error"],
                    [[e["community"], e["exact"], e["approx"], e["abs_error"], e["rel_error"]] for e in self.errors])


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def _rows(roster, individual, phi, base) -> list[EcAllocation]:
    return [EcAllocation(b, individual[b], phi[b], individual[b] - phi[b], base.get(b, math.nan)) for b in roster]


def allocate_exact(case: NetworkCase, parallelism: int = 1, ledger: Ledger | None = None, opts: SolveOptions | None = None,
                   table: ValueTable | None = None) -> tuple[AllocationReport, ValueTable]:
    """Enumerate every coalition (or reuse ``table``) and allocate by Shapley value."""
    if table is None:
        table = enumerate_all(case, parallelism=parallelism, ledger=ledger, opts=opts)
    phi = shapley_exact(table)
    grand = table.results.get(table.grand)
    base = base_allocation(grand) if grand is not None else {}
    rep = AllocationReport(
        method="exact",
        scenario=case.name,
        case_hash=case.content_hash(),
        roster=table.roster,
        rows=_rows(table.roster, table.individual, phi, base),
        grand_cost=table.costs[table.grand],
        v_grand=table.values[table.grand],
        solve_count=1 << table.n,
        groups=[[b] for b in table.roster],
    )
    return rep, table


def allocate_signature(case: NetworkCase, scheme: SignatureScheme | None = None, parallelism: int = 1,
                       ledger: Ledger | None = None, opts: SolveOptions | None = None,
                       post_scale: bool = True) -> tuple[AllocationReport, SignatureOutcome]:
    """Signature approximation, optionally post-scaled by the scheme's capacity ratios."""
    scheme = scheme or propose_groups(case)
    sig = shapley_signature(case, scheme, parallelism, ledger, opts)
    grand_mask = (1 << len(scheme.roster)) - 1
    grand = sig.results[grand_mask]
    rows = _rows(scheme.roster, sig.individual, sig.phi, base_allocation(grand))
    if post_scale:
        scaled = capacity_post_scale({r.bus: r.c_final for r in rows}, scheme.ratios, scheme.groups)
        for r in rows:
            r.c_final = scaled[r.bus]
    rep = AllocationReport(
        method="signature",
        scenario=case.name,
        case_hash=case.content_hash(),
        roster=scheme.roster,
        rows=rows,
        grand_cost=grand.objective,
        v_grand=sig.table.values[grand_mask],
        solve_count=sig.solve_count,
        groups=[list(g) for g in scheme.groups],
    )
    return rep, sig


def allocate_base(case: NetworkCase, parallelism: int = 1, ledger: Ledger | None = None,
                  opts: SolveOptions | None = None) -> AllocationReport:
    """DLMP baseline: grand-coalition settlements, alongside individual costs."""
    roster = case.community_buses
    n = len(roster)
    masks = [(1 << n) - 1] + [1 << i for i in range(n)]
    table = evaluate_all(case, masks, parallelism=parallelism, ledger=ledger, opts=opts)
    if table.failed:
        raise IncompleteTableError(f"{len(table.failed)} coalition(s) failed for the base allocation")
    grand = table.results[table.grand]
    base = base_allocation(grand)
    rows = [EcAllocation(b, table.individual[b], table.individual[b] - base[b], base[b], base[b]) for b in roster]
    return AllocationReport(
        method="base",
        scenario=case.name,
        case_hash=case.content_hash(),
        roster=roster,
        rows=rows,
        grand_cost=grand.objective,
        v_grand=table.values[table.grand],
        solve_count=len(set(masks)),
        groups=[[b] for b in roster],
    )


def compare_allocations(exact: AllocationReport, approx: AllocationReport) -> list[dict]:
    """Per-community Shapley error of ``approx`` against ``exact``; stored on ``approx``."""
    if exact.roster != approx.roster:
        raise EccoopError("reports cover different communities")
    errors = []
    for e, a in zip(exact.rows, approx.rows):
        abs_err = abs(a.phi - e.phi)
        rel = abs_err / abs(e.phi) if e.phi != 0 else (0.0 if abs_err == 0 else math.inf)
        errors.append({"community": e.bus, "exact": e.phi, "approx": a.phi, "abs_error": abs_err, "rel_error": rel})
    approx.errors = errors
    return errors
