"""Coalition evaluation: audited solves, a persistent ledger and the value table.

Coalitions are bitmasks over the ordered community roster: bit ``i`` is the
``i``-th community of the case. Every solve is audited; results that fail the
audit are written to the ledger as quarantined and never reused.

Ledger format (JSON lines, append-only):

* header  ``{"type": "header", "format": FORMAT, "case_hash", "case_name", "roster", "created"}``
* result  ``{"type": "result", "case_hash", "mask", "members", "objective", "settlement",
  "dso_cost", "nonparticipant_cost", "dlmp_p", "dlmp_q", "audit", "provenance",
  "big_m", "escalations", "mip_gap", "wall_time", "started", "finished"}``
* failure ``{"type": "failure", "case_hash", "mask", "error", "message", "started", "finished"}``

Settlement keys are community bus ids (as strings, per JSON); DLMPs are
$/kWh arrays shaped (buses, periods). A trailing line without a newline is a
torn write and is ignored by readers.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from multiprocessing import get_context
from pathlib import Path
from typing import Iterable

import numpy as np

from .case import NetworkCase
from .cea import check_schedule
from .errors import EccoopError, ValidationError
from .kkt import SingleLevelResult, solve_single_level, verify_kkt
from .solver import SolveOptions

log = logging.getLogger(__name__)

FORMAT = "eccoop-ledger/1"
MAX_COMMUNITIES = 30
EXACT_WARN_N = 12
PROVENANCE = ("exact", "signature-representative", "signature-assigned")


@dataclass(frozen=True)
class Coalition:
    mask: int
    n: int

    def __post_init__(self):
        if not 0 <= self.n <= MAX_COMMUNITIES:
            raise ValidationError("coalition-width", f"{self.n} communities exceeds the bitmask width {MAX_COMMUNITIES}")
        if not 0 <= self.mask < (1 << self.n):
            raise ValidationError("coalition-width", f"mask {self.mask:#b} does not fit {self.n} communities")

    @classmethod
    def grand(cls, n: int) -> Coalition:
        return cls((1 << n) - 1, n)

    @classmethod
    def of(cls, roster: tuple[int, ...], buses: Iterable[int]) -> Coalition:
        pos = {b: i for i, b in enumerate(roster)}
        mask = 0
        for b in buses:
            if b not in pos:
                raise ValidationError("active-subset", f"bus {b} is not a community")
            mask |= 1 << pos[b]
        return cls(mask, len(roster))

    @classmethod
    def parse(cls, text: str | int, n: int) -> Coalition:
        """``all``, ``none``, ``0b101``, ``0x5`` or a decimal integer."""
        if isinstance(text, int):
            return cls(text, n)
        t = text.strip().lower()
        if t == "all":
            return cls.grand(n)
        if t in ("none", "empty"):
            return cls(0, n)
        try:
            return cls(int(t, 0), n)
        except ValueError:
            raise ValidationError("coalition-syntax", f"cannot read coalition {text!r}") from None

    def members(self, roster: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(b for i, b in enumerate(roster) if self.mask >> i & 1)

    @property
    def size(self) -> int:
        return bin(self.mask).count("1")

    def __contains__(self, i: int) -> bool:
        return bool(self.mask >> i & 1)

    def __str__(self) -> str:
        return format(self.mask, f"0{max(self.n, 1)}b")


def members_of(mask: int, roster: tuple[int, ...]) -> tuple[int, ...]:
    return tuple(b for i, b in enumerate(roster) if mask >> i & 1)


def all_masks(n: int) -> range:
    if n > MAX_COMMUNITIES:
        raise ValidationError("coalition-width", f"{n} communities exceeds the bitmask width {MAX_COMMUNITIES}")
    return range(1 << n)


@dataclass(frozen=True)
class AuditThresholds:
    duality_rel: float = 1e-5
    complementarity_rel: float = 1e-6  # times big M
    saturation: float = 0.999
    kkt_cost_rel: float = 1e-6
    kkt_settlement_rel: float = 1e-5
    schedule_abs: float = 1e-6
    recheck_dso: bool = True


def audit_solution(case: NetworkCase, res: SingleLevelResult, opts: SolveOptions | None = None, th: AuditThresholds | None = None) -> dict:
    """Residual audit of a single-level solution; ``verdict`` is ``pass`` or ``fail``."""
    th = th or AuditThresholds()
    scale = max(1.0, abs(res.objective))
    metrics = {
        "strong_duality_rel": res.strong_duality_gap / scale,
        "complementarity": res.complementarity,
        "complementarity_limit": th.complementarity_rel * res.big_m,
        "saturation": res.saturation,
        "schedule_residual": max(check_schedule(case, res.schedule).values(), default=0.0),
    }
    failed = []
    if metrics["strong_duality_rel"] > th.duality_rel:
        failed.append("strong_duality")
    if res.complementarity > metrics["complementarity_limit"]:
        failed.append("complementarity")
    if res.saturation >= th.saturation:
        failed.append("saturation")
    if metrics["schedule_residual"] > th.schedule_abs:
        failed.append("schedule")
    if th.recheck_dso:
        kkt = verify_kkt(case, res, opts)
        metrics.update(kkt)
        if kkt["dso_cost_rel"] > th.kkt_cost_rel:
            failed.append("dso_cost")
        if kkt["settlement_rel"] > th.kkt_settlement_rel:
            failed.append("settlement")
    metrics["failed"] = failed
    metrics["verdict"] = "fail" if failed else "pass"
    return metrics


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


@dataclass
class CoalitionResult:
    mask: int
    members: tuple[int, ...]
    objective: float  # c_C, total settlement of the members
    settlement: dict[int, float]
    dso_cost: float
    nonparticipant_cost: dict[int, float]
    dlmp_p: np.ndarray | None
    dlmp_q: np.ndarray | None
    audit: dict
    wall_time: float
    provenance: str = "exact"
    big_m: float = 0.0
    escalations: int = 0
    mip_gap: float = 0.0
    started: str = ""
    finished: str = ""
    schedule: object = None  # CommunitySchedule, only on fresh solves

    @property
    def passed(self) -> bool:
        return self.audit.get("verdict") == "pass"

    def to_record(self, case_hash: str) -> dict:
        return {
            "type": "result",
            "case_hash": case_hash,
            "mask": self.mask,
            "members": list(self.members),
            "objective": self.objective,
            "settlement": {str(k): v for k, v in self.settlement.items()},
            "dso_cost": self.dso_cost,
            "nonparticipant_cost": {str(k): v for k, v in self.nonparticipant_cost.items()},
            "dlmp_p": None if self.dlmp_p is None else self.dlmp_p.tolist(),
            "dlmp_q": None if self.dlmp_q is None else self.dlmp_q.tolist(),
            "audit": self.audit,
            "provenance": self.provenance,
            "big_m": self.big_m,
            "escalations": self.escalations,
            "mip_gap": self.mip_gap,
            "wall_time": self.wall_time,
            "started": self.started,
            "finished": self.finished,
        }

    @classmethod
    def from_record(cls, rec: dict) -> CoalitionResult:
        arr = lambda v: None if v is None else np.array(v, dtype=float)
        return cls(
            mask=int(rec["mask"]),
            members=tuple(rec["members"]),
            objective=float(rec["objective"]),
            settlement={int(k): float(v) for k, v in rec["settlement"].items()},
            dso_cost=float(rec["dso_cost"]),
            nonparticipant_cost={int(k): float(v) for k, v in rec.get("nonparticipant_cost", {}).items()},
            dlmp_p=arr(rec.get("dlmp_p")),
            dlmp_q=arr(rec.get("dlmp_q")),
            audit=rec["audit"],
            wall_time=float(rec.get("wall_time", 0.0)),
            provenance=rec.get("provenance", "exact"),
            big_m=float(rec.get("big_m", 0.0)),
            escalations=int(rec.get("escalations", 0)),
            mip_gap=float(rec.get("mip_gap", 0.0)),
            started=rec.get("started", ""),
            finished=rec.get("finished", ""),
        )


@dataclass
class CoalitionFailure:
    mask: int
    error: str
    message: str
    started: str = ""
    finished: str = ""

    def to_record(self, case_hash: str) -> dict:
        return {"type": "failure", "case_hash": case_hash, "mask": self.mask, "error": self.error,
                "message": self.message, "started": self.started, "finished": self.finished}


def solve_coalition(
    case: NetworkCase,
    mask: int,
    opts: SolveOptions | None = None,
    thresholds: AuditThresholds | None = None,
    provenance: str = "exact",
    big_m: float | None = None,
) -> CoalitionResult:
    """Solve and audit one coalition; the objective is the members' total settlement."""
    roster = case.community_buses
    Coalition(mask, len(roster))
    members = members_of(mask, roster)
    started = _now()
    res = solve_single_level(case, members, opts, big_m=big_m)
    audit = audit_solution(case, res, opts, thresholds)
    settle = {b: res.settlement[b] for b in members}
    return CoalitionResult(
        mask=mask,
        members=members,
        objective=float(sum(settle.values())),
        settlement=settle,
        dso_cost=float(res.dso_cost),
        nonparticipant_cost=dict(res.nonparticipant_cost),
        dlmp_p=res.duals.lambda_p,
        dlmp_q=res.duals.lambda_q,
        audit=audit,
        wall_time=res.wall_time,
        provenance=provenance,
        big_m=res.big_m,
        escalations=res.escalations,
        mip_gap=res.mip_gap,
        started=started,
        finished=_now(),
        schedule=res.schedule,
    )


class Ledger:
    """Append-only JSON-lines store of coalition results, keyed by (case hash, mask).

    With ``path=None`` the ledger lives in memory only. Writes happen from
    one process; each record is a single ``write`` on an ``O_APPEND``
    descriptor followed by ``fsync``.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._memory: list[dict] = []
        self._lock = threading.Lock()
        self._headers: set[str] = set()
        for rec in self.records():
            if rec.get("type") == "header":
                self._headers.add(rec["case_hash"])

    def records(self) -> Iterable[dict]:
        if self.path is None:
            yield from (dict(r) for r in self._memory)
            return
        if not self.path.exists():
            return
        with open(self.path, "rb") as fh:
            data = fh.read()
        for line in data.split(b"\n")[:-1]:
            if line.strip():
                yield json.loads(line)

    def _write(self, rec: dict) -> None:
        if self.path is None:
            self._memory.append(json.loads(json.dumps(rec)))
            return
        line = (json.dumps(rec, separators=(",", ":")) + "\n").encode()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
        try:
            os.write(fd, line)
            os.fsync(fd)
        finally:
            os.close(fd)

    def ensure_header(self, case: NetworkCase) -> str:
        h = case.content_hash()
        with self._lock:
            if h not in self._headers:
                self._write({"type": "header", "format": FORMAT, "case_hash": h, "case_name": case.name,
                             "roster": list(case.community_buses), "created": _now()})
                self._headers.add(h)
        return h

    def append(self, case_hash: str, item: CoalitionResult | CoalitionFailure) -> None:
        with self._lock:
            self._write(item.to_record(case_hash))

    def load(self, case_hash: str) -> dict[int, CoalitionResult]:
        """Audited results for a case; later records win, quarantined ones are skipped."""
        out = {}
        for rec in self.records():
            if rec.get("type") != "result" or rec.get("case_hash") != case_hash:
                continue
            res = CoalitionResult.from_record(rec)
            if res.passed:
                out[res.mask] = res
        return out

    def drop(self, case_hash: str, masks: Iterable[int]) -> int:
        """Rewrite the ledger without the given results; returns how many were removed."""
        masks = set(masks)
        keep, removed = [], 0
        for rec in self.records():
            if rec.get("type") in ("result", "failure") and rec.get("case_hash") == case_hash and rec.get("mask") in masks:
                removed += rec["type"] == "result"
                continue
            keep.append(rec)
        with self._lock:
            if self.path is None:
                self._memory = keep
            else:
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                tmp.write_text("".join(json.dumps(r, separators=(",", ":")) + "\n" for r in keep))
                os.replace(tmp, self.path)
        return removed


def _f(x: float) -> float:
    return float(x)


@dataclass
class EvaluationStats:
    requested: int = 0
    solved: int = 0
    cached: int = 0
    failed: int = 0
    wall_time: float = 0.0


@dataclass
class ValueTable:
    """Characteristic function over bitmask coalitions.

    ``values[mask]`` is the saving v(C); ``costs[mask]`` the coalition cost
    c_C when the table was built from solves; ``individual`` maps community
    bus to c_indiv. ``results`` and ``stats`` are runtime extras excluded
    from serialization.
    """

    roster: tuple[int, ...]
    values: dict[int, float]
    individual: dict[int, float] = field(default_factory=dict)
    costs: dict[int, float] = field(default_factory=dict)
    failed: dict[int, str] = field(default_factory=dict)
    results: dict[int, CoalitionResult] = field(default_factory=dict, repr=False, compare=False)
    stats: EvaluationStats = field(default_factory=EvaluationStats, repr=False, compare=False)

    def __post_init__(self):
        self.roster = tuple(self.roster)
        if len(self.roster) > MAX_COMMUNITIES:
            raise ValidationError("coalition-width", f"{len(self.roster)} communities exceeds {MAX_COMMUNITIES}")
        v0 = self.values.get(0, 0.0)
        if v0 != 0.0:
            raise ValidationError("empty-coalition", f"v(empty) must be 0, got {v0}")
        self.values[0] = 0.0

    @property
    def n(self) -> int:
        return len(self.roster)

    @property
    def grand(self) -> int:
        return (1 << self.n) - 1

    @property
    def complete(self) -> bool:
        return not self.failed and all(m in self.values for m in range(1 << self.n))

    def missing(self) -> list[int]:
        return [m for m in range(1 << self.n) if m not in self.values]

    def value(self, mask: int) -> float:
        return self.values[mask]

    @classmethod
    def from_costs(cls, roster, costs: dict[int, float], individual: dict[int, float], failed=None) -> ValueTable:
        """v(C) = sum of members' individual costs minus the coalition cost."""
        roster = tuple(roster)
        values = {0: 0.0}
        for mask, c in costs.items():
            if mask == 0:
                continue
            members = members_of(mask, roster)
            if all(b in individual for b in members):
                values[mask] = _f(math.fsum(individual[b] for b in members) - c)
        return cls(roster, values, dict(individual), dict(costs), dict(failed or {}))

    @classmethod
    def from_results(cls, roster, results: dict[int, CoalitionResult], failed=None) -> ValueTable:
        roster = tuple(roster)
        costs = {m: r.objective for m, r in results.items()}
        costs.setdefault(0, 0.0)
        individual = {}
        for i, b in enumerate(roster):
            r = results.get(1 << i)
            if r is not None:
                individual[b] = r.settlement[b]
        table = cls.from_costs(roster, costs, individual, failed)
        table.results = dict(results)
        return table

    def __add__(self, other: ValueTable) -> ValueTable:
        if self.roster != other.roster:
            raise ValidationError("roster", "value tables over different rosters")
        keys = set(self.values) & set(other.values)
        return ValueTable(self.roster, {m: self.values[m] + other.values[m] for m in keys})

    def to_dict(self) -> dict:
        return {
            "roster": list(self.roster),
            "complete": self.complete,
            "individual": [[b, self.individual[b]] for b in sorted(self.individual)],
            "values": [[m, self.values[m]] for m in sorted(self.values)],
            "costs": [[m, self.costs[m]] for m in sorted(self.costs)],
            "failed": [[m, self.failed[m]] for m in sorted(self.failed)],
        }

    def to_json(self) -> str:
        """Canonical serialization: sorted keys and masks, shortest round-trip floats."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> ValueTable:
        d = json.loads(text)
        return cls(
            tuple(d["roster"]),
            {int(m): float(v) for m, v in d["values"]},
            {int(b): float(c) for b, c in d["individual"]},
            {int(m): float(c) for m, c in d["costs"]},
            {int(m): str(e) for m, e in d.get("failed", [])},
        )


# worker-side state, set once per process by the pool initializer
_W: dict = {}


def _init_worker(case: NetworkCase, opts, thresholds, provenance, big_m):
    _W.update(case=case, opts=opts, thresholds=thresholds, provenance=provenance, big_m=big_m)


def _solve_task(mask: int):
    started = _now()
    try:
        return solve_coalition(_W["case"], mask, _W["opts"], _W["thresholds"], _W["provenance"], _W["big_m"])
    except EccoopError as exc:
        return CoalitionFailure(mask, type(exc).__name__, str(exc), started, _now())


def _run(case, masks, parallelism, opts, thresholds, provenance, big_m):
    if not masks:
        return
    if parallelism <= 1:
        _init_worker(case, opts, thresholds, provenance, big_m)
        for m in masks:
            yield _solve_task(m)
        return
    with ProcessPoolExecutor(
        max_workers=min(parallelism, len(masks)),
        mp_context=get_context("spawn"),
        initializer=_init_worker,
        initargs=(case, opts, thresholds, provenance, big_m),
    ) as pool:
        yield from pool.map(_solve_task, masks)


def evaluate_all(
    case: NetworkCase,
    coalitions: Iterable[int | Coalition],
    parallelism: int = 1,
    ledger: Ledger | None = None,
    opts: SolveOptions | None = None,
    thresholds: AuditThresholds | None = None,
    provenance: str = "exact",
    big_m: float | None = None,
) -> ValueTable:
    """Solve each distinct coalition once, reusing audited ledger entries.

    Results are persisted as they arrive. Failed or quarantined coalitions
    are listed in ``table.failed`` and the table is then incomplete.
    """
    t0 = time.perf_counter()
    roster = case.community_buses
    n = len(roster)
    masks = []
    seen = set()
    for c in coalitions:
        m = c.mask if isinstance(c, Coalition) else int(c)
        Coalition(m, n)
        if m not in seen:
            seen.add(m)
            masks.append(m)
    ledger = ledger if ledger is not None else Ledger()
    h = ledger.ensure_header(case)
    stored = ledger.load(h)
    results = {m: stored[m] for m in masks if m in stored}
    todo = [m for m in masks if m not in results]
    failed = {}
    for item in _run(case, todo, parallelism, opts, thresholds, provenance, big_m):
        ledger.append(h, item)
        if isinstance(item, CoalitionFailure):
            failed[item.mask] = f"{item.error}: {item.message}"
            log.error("coalition %s failed: %s", bin(item.mask), failed[item.mask])
        elif not item.passed:
            failed[item.mask] = "audit failed: " + ", ".join(item.audit["failed"])
            log.error("coalition %s quarantined: %s", bin(item.mask), failed[item.mask])
        else:
            results[item.mask] = item
    table = ValueTable.from_results(roster, results, failed)
    table.stats = EvaluationStats(len(masks), len(todo), len(masks) - len(todo), len(failed), time.perf_counter() - t0)
    return table


def enumerate_all(case: NetworkCase, **kw) -> ValueTable:
    """Every coalition of the case; warns when exact enumeration gets large."""
    n = case.n_communities
    if n > EXACT_WARN_N:
        warnings.warn(f"exact enumeration over {n} communities needs {1 << n} MILP solves", stacklevel=2)
    return evaluate_all(case, all_masks(n), **kw)


def individual_cost(case: NetworkCase, bus: int, ledger: Ledger | None = None, opts: SolveOptions | None = None) -> float:
    """Settlement of ``bus`` when it alone is active and the others stay passive."""
    c = Coalition.of(case.community_buses, [bus])
    table = evaluate_all(case, [c.mask], ledger=ledger, opts=opts)
    if c.mask in table.failed:
        raise EccoopError(table.failed[c.mask])
    return table.individual[bus]


def coalition_value(case: NetworkCase, members: Iterable[int], ledger: Ledger | None = None, opts: SolveOptions | None = None) -> float:
    """v(C) for a set of community buses, solving the singletons it needs."""
    roster = case.community_buses
    c = Coalition.of(roster, members)
    masks = [c.mask] + [1 << i for i in range(len(roster)) if c.mask >> i & 1]
    table = evaluate_all(case, masks, ledger=ledger, opts=opts)
    if table.failed:
        raise EccoopError("; ".join(table.failed.values()))
    return table.value(c.mask)


def failure_report(table: ValueTable) -> str:
    if not table.failed:
        return "all coalitions solved"
    lines = [f"{len(table.failed)} coalition(s) failed; table incomplete"]
    n = table.n
    for m in sorted(table.failed):
        lines.append(f"  {format(m, f'0{n}b')} {members_of(m, table.roster)}: {table.failed[m]}")
    return "\n".join(lines)
