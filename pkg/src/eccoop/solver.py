"""Solver boundary: a small symbolic LP/MILP container and a HiGHS backend.

Model builders only ever talk to :class:`ModelInstance`; :func:`solve` turns an
instance into a :class:`SolveOutcome`. Dual values are shadow prices, i.e. the
derivative of the optimal objective with respect to a row's right-hand side,
and are reported only for pure LPs.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import highspy
import numpy as np

from .errors import BackendError, ValidationError

INF = math.inf


class Var:
    __slots__ = ("index", "name")

    def __init__(self, index: int, name: str):
        self.index = index
        self.name = name

    def _expr(self) -> "LinExpr":
        return LinExpr({self.index: 1.0})

    def __add__(self, other):
        return self._expr() + other

    __radd__ = __add__

    def __sub__(self, other):
        return self._expr() - other

    def __rsub__(self, other):
        return (-1.0) * self._expr() + other

    def __mul__(self, k):
        return LinExpr({self.index: float(k)})

    __rmul__ = __mul__

    def __neg__(self):
        return LinExpr({self.index: -1.0})

    def __repr__(self):
        return f"Var({self.name})"


class LinExpr:
    """Sparse affine expression ``sum(coef * var) + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: dict[int, float] | None = None, const: float = 0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def of(obj) -> "LinExpr":
        if isinstance(obj, LinExpr):
            return obj
        if isinstance(obj, Var):
            return obj._expr()
        return LinExpr(const=float(obj))

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.const)

    def iadd(self, other, k: float = 1.0) -> "LinExpr":
        """In-place ``self += k * other``; returns self."""
        if isinstance(other, Var):
            self.terms[other.index] = self.terms.get(other.index, 0.0) + k
        elif isinstance(other, LinExpr):
            terms = self.terms
            for i, c in other.terms.items():
                terms[i] = terms.get(i, 0.0) + k * c
            self.const += k * other.const
        else:
            self.const += k * float(other)
        return self

    def __add__(self, other):
        return self.copy().iadd(other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.copy().iadd(other, -1.0)

    def __rsub__(self, other):
        return (self * -1.0).iadd(other)

    def __mul__(self, k):
        k = float(k)
        return LinExpr({i: k * c for i, c in self.terms.items()}, k * self.const)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[i] for i, c in self.terms.items())

    def __repr__(self):
        return f"LinExpr({len(self.terms)} terms, const={self.const:g})"


def quicksum(items: Iterable) -> LinExpr:
    out = LinExpr()
    for it in items:
        out.iadd(it)
    return out


@dataclass
class ModelInstance:
    """Variables, linear rows ``lo <= a.x <= hi`` and a linear objective (minimised)."""

    name: str = "model"
    var_names: list[str] = field(default_factory=list)
    lb: list[float] = field(default_factory=list)
    ub: list[float] = field(default_factory=list)
    binary: list[bool] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)
    row_terms: list[dict[int, float]] = field(default_factory=list)
    row_lo: list[float] = field(default_factory=list)
    row_hi: list[float] = field(default_factory=list)
    objective: LinExpr = field(default_factory=LinExpr)
    tags: dict[str, str] = field(default_factory=dict)

    @property
    def num_vars(self) -> int:
        return len(self.var_names)

    @property
    def num_rows(self) -> int:
        return len(self.row_names)

    @property
    def has_binaries(self) -> bool:
        return any(self.binary)

    def add_var(self, name: str, lb: float = 0.0, ub: float = INF, binary: bool = False, tag: str | None = None) -> Var:
        idx = len(self.var_names)
        self.var_names.append(name)
        if binary:
            lb, ub = 0.0, 1.0
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.binary.append(binary)
        if tag:
            self.tags[name] = tag
        return Var(idx, name)

    def add_constr(self, expr, sense: str, rhs=0.0, name: str | None = None) -> int:
        """Add ``expr <sense> rhs``; either side may carry constants or variables."""
        e = LinExpr.of(expr) - rhs
        terms = {i: c for i, c in e.terms.items() if c != 0.0}
        b = -e.const
        if sense == "<=":
            lo, hi = -INF, b
        elif sense == ">=":
            lo, hi = b, INF
        elif sense == "==":
            lo, hi = b, b
        else:
            raise ValueError(f"unknown sense {sense!r}")
        idx = len(self.row_names)
        self.row_names.append(name or f"r{idx}")
        self.row_terms.append(terms)
        self.row_lo.append(lo)
        self.row_hi.append(hi)
        return idx

    def set_objective(self, expr) -> None:
        self.objective = LinExpr.of(expr).copy()

    def validate(self) -> None:
        n = self.num_vars
        for r, terms in enumerate(self.row_terms):
            for i in terms:
                if not 0 <= i < n:
                    raise ValidationError("model-reference", f"row {self.row_names[r]} references undeclared variable {i}")
        for i in self.objective.terms:
            if not 0 <= i < n:
                raise ValidationError("model-reference", f"objective references undeclared variable {i}")

    def row_activity(self, x: np.ndarray) -> np.ndarray:
        return np.array([sum(c * x[i] for i, c in t.items()) for t in self.row_terms])

    def max_violation(self, x: np.ndarray) -> float:
        """Largest primal infeasibility over rows and bounds, in model units."""
        act = self.row_activity(x) if self.num_rows else np.zeros(0)
        viol = 0.0
        if self.num_rows:
            viol = max(viol, float(np.max(np.maximum(np.array(self.row_lo) - act, 0.0))))
            viol = max(viol, float(np.max(np.maximum(act - np.array(self.row_hi), 0.0))))
        if self.num_vars:
            viol = max(viol, float(np.max(np.maximum(np.array(self.lb) - x, 0.0))))
            viol = max(viol, float(np.max(np.maximum(x - np.array(self.ub), 0.0))))
        return viol

    def to_text(self) -> str:
        """Human-readable constraint listing used for model audits."""

        def fmt(terms, const=0.0):
            parts = [f"{c:+.10g} {self.var_names[i]}" for i, c in sorted(terms.items())]
            if const:
                parts.append(f"{const:+.10g}")
            return " ".join(parts) if parts else "0"

        lines = [f"\\ model {self.name}", "minimize", "  " + fmt(self.objective.terms, self.objective.const), "subject to"]
        for name, terms, lo, hi in zip(self.row_names, self.row_terms, self.row_lo, self.row_hi):
            body = fmt(terms)
            if lo == hi:
                lines.append(f"  {name}: {body} = {hi:.10g}")
            elif lo == -INF:
                lines.append(f"  {name}: {body} <= {hi:.10g}")
            elif hi == INF:
                lines.append(f"  {name}: {body} >= {lo:.10g}")
            else:
                lines.append(f"  {name}: {lo:.10g} <= {body} <= {hi:.10g}")
        lines.append("bounds")
        for name, lo, hi, b in zip(self.var_names, self.lb, self.ub, self.binary):
            lines.append(f"  {name} binary" if b else f"  {lo:.10g} <= {name} <= {hi:.10g}")
        return "\n".join(lines) + "\n"

    # interchange format -------------------------------------------------

    def write_mps(self, path: str | Path) -> None:
        """Write free-format MPS using the model's own variable and row names."""
        out = [f"NAME {self.name}", "ROWS", " N OBJ"]
        for name, lo, hi in zip(self.row_names, self.row_lo, self.row_hi):
            kind = "E" if lo == hi else ("L" if lo == -INF else "G")
            out.append(f" {kind} {name}")
        cols: list[list[tuple[str, float]]] = [[] for _ in range(self.num_vars)]
        for i, c in self.objective.terms.items():
            cols[i].append(("OBJ", c))
        for name, terms in zip(self.row_names, self.row_terms):
            for i, c in terms.items():
                cols[i].append((name, c))
        out.append("COLUMNS")
        in_int = False
        for j, vname in enumerate(self.var_names):
            if self.binary[j] != in_int:
                out.append(" MARKER 'MARKER' 'INTORG'" if self.binary[j] else " MARKER 'MARKER' 'INTEND'")
                in_int = self.binary[j]
            entries = cols[j] or [("OBJ", 0.0)]
            for rname, c in entries:
                out.append(f" {vname} {rname} {c!r}")
        if in_int:
            out.append(" MARKER 'MARKER' 'INTEND'")
        out.append("RHS")
        if self.objective.const:
            out.append(f" RHS OBJ {-self.objective.const!r}")
        ranges = []
        for name, lo, hi in zip(self.row_names, self.row_lo, self.row_hi):
            if lo == hi or lo == -INF:
                rhs = hi
            elif hi == INF:
                rhs = lo
            else:
                rhs = lo
                ranges.append(f" RNG {name} {hi - lo!r}")
            if rhs != 0.0:
                out.append(f" RHS {name} {rhs!r}")
        if ranges:
            out.append("RANGES")
            out.extend(ranges)
        out.append("BOUNDS")
        for vname, lo, hi, b in zip(self.var_names, self.lb, self.ub, self.binary):
            if b:
                out.append(f" BV BND {vname}")
            elif lo == -INF and hi == INF:
                out.append(f" FR BND {vname}")
            elif lo == hi:
                out.append(f" FX BND {vname} {lo!r}")
            else:
                if lo == -INF:
                    out.append(f" MI BND {vname}")
                elif lo != 0.0:
                    out.append(f" LO BND {vname} {lo!r}")
                if hi != INF:
                    out.append(f" UP BND {vname} {hi!r}")
        out.append("ENDATA")
        Path(path).write_text("\n".join(out) + "\n")

    @classmethod
    def read_mps(cls, path: str | Path) -> "ModelInstance":
        """Read the free-format MPS subset produced by :meth:`write_mps`."""
        model = cls()
        section = None
        obj_row = None
        row_index: dict[str, int] = {}
        row_kind: dict[str, str] = {}
        col_index: dict[str, int] = {}
        rhs: dict[str, float] = {}
        rng: dict[str, float] = {}
        integer = False
        for raw in Path(path).read_text().splitlines():
            if not raw.strip() or raw.startswith("*"):
                continue
            if not raw.startswith(" "):
                head = raw.split()
                section = head[0]
                if section == "NAME" and len(head) > 1:
                    model.name = head[1]
                continue
            tok = raw.split()
            if section == "ROWS":
                kind, name = tok
                if kind == "N":
                    obj_row = name
                else:
                    row_kind[name] = kind
                    row_index[name] = len(model.row_names)
                    model.row_names.append(name)
                    model.row_terms.append({})
            elif section == "COLUMNS":
                if len(tok) >= 3 and tok[1] == "'MARKER'":
                    integer = tok[2] == "'INTORG'" or tok[2] == "INTORG"
                    continue
                cname = tok[0]
                if cname not in col_index:
                    col_index[cname] = len(model.var_names)
                    model.var_names.append(cname)
                    model.lb.append(0.0)
                    model.ub.append(1.0 if integer else INF)
                    model.binary.append(integer)
                j = col_index[cname]
                for rname, val in zip(tok[1::2], tok[2::2]):
                    v = float(val)
                    if rname == obj_row:
                        if v:
                            model.objective.terms[j] = v
                    elif v:
                        model.row_terms[row_index[rname]][j] = v
            elif section == "RHS":
                for rname, val in zip(tok[1::2], tok[2::2]):
                    if rname == obj_row:
                        model.objective.const = -float(val)
                    else:
                        rhs[rname] = float(val)
            elif section == "RANGES":
                for rname, val in zip(tok[1::2], tok[2::2]):
                    rng[rname] = abs(float(val))
            elif section == "BOUNDS":
                kind, name = tok[0], tok[2]
                j = col_index[name]
                val = float(tok[3]) if len(tok) > 3 else None
                if kind == "BV":
                    model.binary[j] = True
                    model.lb[j], model.ub[j] = 0.0, 1.0
                elif kind == "FR":
                    model.lb[j], model.ub[j] = -INF, INF
                elif kind == "MI":
                    model.lb[j] = -INF
                elif kind == "FX":
                    model.lb[j] = model.ub[j] = val
                elif kind == "LO":
                    model.lb[j] = val
                elif kind == "UP":
                    model.ub[j] = val
                else:
                    raise BackendError(f"unsupported MPS bound type {kind}")
        for name in model.row_names:
            b = rhs.get(name, 0.0)
            kind = row_kind[name]
            if name in rng:
                lo, hi = b, b + rng[name]
            elif kind == "E":
                lo, hi = b, b
            elif kind == "L":
                lo, hi = -INF, b
            else:
                lo, hi = b, INF
            model.row_lo.append(lo)
            model.row_hi.append(hi)
        return model


@dataclass
class SolveOutcome:
    status: str  # optimal | infeasible | unbounded | limit
    x: np.ndarray | None
    duals: np.ndarray | None
    reduced_costs: np.ndarray | None
    objective: float
    gap: float
    wall_time: float
    polished: bool = False

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def value(self, item) -> float:
        if isinstance(item, Var):
            return float(self.x[item.index])
        return LinExpr.of(item).value(self.x)

    def values(self, items) -> np.ndarray:
        return np.array([self.value(v) for v in items], dtype=float)


@dataclass(frozen=True)
class SolveOptions:
    gap_tol: float = 1e-6
    time_limit: float | None = None
    threads: int = 1
    feas_tol: float = 1e-9
    # HiGHS reports spurious infeasibility on Big-M models below 1e-7
    mip_feas_tol: float = 1e-7
    # MILPs declared infeasible are retried with these looser tolerances
    mip_feas_retry: tuple[float, ...] = (1e-6, 1e-5)
    polish: bool = True


_STATUS = {
    highspy.HighsModelStatus.kOptimal: "optimal",
    highspy.HighsModelStatus.kInfeasible: "infeasible",
    highspy.HighsModelStatus.kUnbounded: "unbounded",
    highspy.HighsModelStatus.kTimeLimit: "limit",
    highspy.HighsModelStatus.kIterationLimit: "limit",
    highspy.HighsModelStatus.kSolutionLimit: "limit",
    highspy.HighsModelStatus.kObjectiveBound: "limit",
    highspy.HighsModelStatus.kObjectiveTarget: "limit",
    highspy.HighsModelStatus.kInterrupt: "limit",
}


def _to_highs(model: ModelInstance, lb=None, ub=None) -> highspy.HighsLp:
    n, m = model.num_vars, model.num_rows
    counts = np.zeros(n + 1, dtype=np.int64)
    for terms in model.row_terms:
        for i in terms:
            counts[i + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    index = np.empty(start[-1], dtype=np.int32)
    value = np.empty(start[-1], dtype=np.float64)
    for r, terms in enumerate(model.row_terms):
        for i, c in terms.items():
            k = fill[i]
            index[k] = r
            value[k] = c
            fill[i] += 1
    cost = np.zeros(n)
    for i, c in model.objective.terms.items():
        cost[i] = c
    lp = highspy.HighsLp()
    lp.num_col_ = n
    lp.num_row_ = m
    lp.col_cost_ = cost
    lp.offset_ = model.objective.const
    lp.col_lower_ = np.array(model.lb if lb is None else lb, dtype=float)
    lp.col_upper_ = np.array(model.ub if ub is None else ub, dtype=float)
    lp.row_lower_ = np.array(model.row_lo, dtype=float)
    lp.row_upper_ = np.array(model.row_hi, dtype=float)
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = start.astype(np.int32)
    lp.a_matrix_.index_ = index
    lp.a_matrix_.value_ = value
    lp.a_matrix_.num_col_ = n
    lp.a_matrix_.num_row_ = m
    return lp


def _run(lp: highspy.HighsLp, integrality, opts: SolveOptions, presolve: bool = True):
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("threads", int(opts.threads))
    h.setOptionValue("random_seed", 0)
    h.setOptionValue("mip_rel_gap", float(opts.gap_tol))
    h.setOptionValue("mip_abs_gap", 1e-9)
    h.setOptionValue("primal_feasibility_tolerance", float(opts.feas_tol))
    h.setOptionValue("dual_feasibility_tolerance", float(opts.feas_tol))
    h.setOptionValue("mip_feasibility_tolerance", float(opts.mip_feas_tol))
    if not presolve:
        h.setOptionValue("presolve", "off")
    if opts.time_limit is not None:
        h.setOptionValue("time_limit", float(opts.time_limit))
    if integrality is not None:
        lp.integrality_ = integrality
    status = h.passModel(lp)
    if status == highspy.HighsStatus.kError:
        raise BackendError("HiGHS rejected the model")
    if h.run() == highspy.HighsStatus.kError:
        raise BackendError("HiGHS run failed")
    return h


def solve(model: ModelInstance, opts: SolveOptions | None = None) -> SolveOutcome:
    """Solve ``model`` with HiGHS.

    MILPs are optionally polished: binaries are rounded, fixed, and the
    remaining LP is re-solved so that continuous values sit on an exact vertex.
    """
    opts = opts or SolveOptions()
    model.validate()
    t0 = time.perf_counter()
    is_mip = model.has_binaries
    integrality = None
    if is_mip:
        integrality = [highspy.HighsVarType.kInteger if b else highspy.HighsVarType.kContinuous for b in model.binary]
    h = _run(_to_highs(model), integrality, opts)
    ms = h.getModelStatus()
    if ms == highspy.HighsModelStatus.kUnboundedOrInfeasible:
        h = _run(_to_highs(model), integrality, opts, presolve=False)
        ms = h.getModelStatus()
        if ms == highspy.HighsModelStatus.kUnboundedOrInfeasible:
            ms = highspy.HighsModelStatus.kInfeasible
    if is_mip and ms == highspy.HighsModelStatus.kInfeasible:
        # the Big-M rows make infeasibility claims unreliable; polishing re-checks at tight tolerance
        for tol in opts.mip_feas_retry:
            if tol <= opts.mip_feas_tol:
                continue
            h = _run(_to_highs(model), integrality, replace(opts, mip_feas_tol=tol))
            ms = h.getModelStatus()
            if ms != highspy.HighsModelStatus.kInfeasible:
                break
    status = _STATUS.get(ms)
    if status is None:
        raise BackendError(f"HiGHS returned {h.modelStatusToString(ms)}")
    info = h.getInfo()
    sol = h.getSolution()
    has_primal = bool(sol.value_valid) and model.num_vars > 0
    if status != "optimal" and not (status == "limit" and has_primal):
        return SolveOutcome(status, None, None, None, math.nan, math.inf, time.perf_counter() - t0)
    x = np.array(sol.col_value, dtype=float)
    objective = float(info.objective_function_value)
    gap = float(info.mip_gap) if is_mip else 0.0
    duals = reduced = None
    polished = False
    if is_mip:
        if opts.polish and status == "optimal":
            lb = np.array(model.lb, dtype=float)
            ub = np.array(model.ub, dtype=float)
            mask = np.array(model.binary)
            fixed = np.round(x[mask])
            lb[mask] = fixed
            ub[mask] = fixed
            hp = _run(_to_highs(model, lb, ub), None, opts)
            if hp.getModelStatus() == highspy.HighsModelStatus.kOptimal:
                x = np.array(hp.getSolution().col_value, dtype=float)
                x[mask] = fixed
                objective = float(hp.getInfo().objective_function_value)
                polished = True
    elif sol.dual_valid:
        duals = np.array(sol.row_dual, dtype=float)
        reduced = np.array(sol.col_dual, dtype=float)
    if not is_mip:
        gap = 0.0
    return SolveOutcome(status, x, duals, reduced, objective, gap, time.perf_counter() - t0, polished)
