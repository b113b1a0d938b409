"""Problem-instance data model and the JSON case-file format.

Powers are kW/kvar, energies kWh, impedances per-unit on ``base_kva``.
Prices are written in $/MWh in case files and held in $/kWh in memory.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any

from .errors import DomainError, SchemaError, TopologyError, ValidationError

KINDS = ("slack", "load", "community")
MWH = 1000.0
DEFAULT_FLEX_SHARE = 0.3
DEFAULT_PI_FLEX = 75.0  # $/MWh


def derive_zeta(pf_min: float) -> float:
    """Reactive-to-active ratio allowed by a minimum power factor."""
    if not (0.0 < pf_min <= 1.0):
        raise DomainError(f"power factor must lie in (0, 1], got {pf_min}")
    return math.tan(math.acos(pf_min))


GEN_Q_RATIO = derive_zeta(0.9)


@dataclass(frozen=True)
class GeneratorParams:
    marginal_cost: float  # $/kWh
    p_bounds: tuple[float, float]
    q_bounds: tuple[float, float]


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    voltage_limits: tuple[float, float]
    load_p: tuple[float, ...]
    load_q: tuple[float, ...]
    generator: GeneratorParams | None = None

    @property
    def v_min(self) -> float:
        return self.voltage_limits[0]

    @property
    def v_max(self) -> float:
        return self.voltage_limits[1]


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float

    @property
    def z(self) -> float:
        return math.hypot(self.r, self.x)


@dataclass(frozen=True)
class PV:
    forecast: tuple[float, ...]
    s_max: float
    zeta: float


@dataclass(frozen=True)
class BESS:
    p_ch_max: float
    p_dis_max: float
    e_min: float
    e_max: float
    eta_ch: float
    eta_dis: float
    e_init: float
    e_final: float


@dataclass(frozen=True)
class Flex:
    p_flex_max: tuple[float, ...]
    pi_flex: float  # $/kWh


@dataclass(frozen=True)
class CommunityPortfolio:
    bus: int
    flex: Flex
    pv: PV | None = None
    bess: BESS | None = None


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    communities: tuple[CommunityPortfolio, ...]
    horizon: int
    dt_hours: float
    lmp: tuple[float, ...]  # $/kWh
    slack_voltage: float = 1.0
    big_m: float = 1e4
    base_kva: float = 1000.0
    name: str = "case"

    # derived lookups; not part of equality
    @cached_property
    def bus_pos(self) -> dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def slack(self) -> Bus:
        return next(b for b in self.buses if b.kind == "slack")

    @property
    def periods(self) -> range:
        return range(self.horizon)

    @cached_property
    def community_buses(self) -> tuple[int, ...]:
        return tuple(c.bus for c in self.communities)

    @cached_property
    def _communities_by_bus(self) -> dict[int, CommunityPortfolio]:
        return {c.bus: c for c in self.communities}

    def community(self, bus: int) -> CommunityPortfolio:
        return self._communities_by_bus[bus]

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_pos[bus_id]]

    @property
    def n_communities(self) -> int:
        return len(self.communities)

    @cached_property
    def adjacency(self) -> dict[int, list[tuple[int, Line]]]:
        adj: dict[int, list[tuple[int, Line]]] = {b.id: [] for b in self.buses}
        for ln in self.lines:
            adj[ln.from_bus].append((ln.to_bus, ln))
            adj[ln.to_bus].append((ln.from_bus, ln))
        return adj

    @cached_property
    def _root_paths(self) -> dict[int, tuple[Line, ...]]:
        paths = {self.slack.id: ()}
        queue = deque([self.slack.id])
        while queue:
            b = queue.popleft()
            for nb, ln in self.adjacency[b]:
                if nb not in paths:
                    paths[nb] = paths[b] + (ln,)
                    queue.append(nb)
        return paths

    def path_lines(self, a: int, b: int) -> list[Line]:
        """Lines on the unique tree path between buses ``a`` and ``b``."""
        pa, pb = self._root_paths[a], self._root_paths[b]
        k = 0
        while k < min(len(pa), len(pb)) and pa[k] is pb[k]:
            k += 1
        return list(pa[k:]) + list(pb[k:])

    def electrical_distance(self, a: int, b: int) -> float:
        return sum(ln.z for ln in self.path_lines(a, b))

    def max_path_impedance(self) -> float:
        return max(sum(ln.z for ln in p) for p in self._root_paths.values())

    def content_hash(self) -> str:
        return hashlib.sha256(serialize_case(self).encode()).hexdigest()


# ---------------------------------------------------------------- parsing


def _req(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    if key not in obj:
        raise SchemaError(f"{where}: missing field '{key}'")
    return obj[key]


def _num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{where}: expected a number, got {v!r}")
    return float(v)


def _bound(v, where: str) -> float:
    """Generator bound; ``null`` means unbounded."""
    if v is None:
        return math.nan
    return _num(v, where)


def _series(ref, series: dict[str, list], horizon: int, where: str) -> tuple[float, ...]:
    if isinstance(ref, (int, float)) and not isinstance(ref, bool):
        return (float(ref),) * horizon
    scale = 1.0
    if isinstance(ref, dict):
        scale = _num(ref.get("scale", 1.0), where + ".scale")
        ref = _req(ref, "series", where)
    if isinstance(ref, str):
        if ref not in series:
            raise SchemaError(f"{where}: unknown series '{ref}'")
        ref = series[ref]
    if not isinstance(ref, list):
        raise SchemaError(f"{where}: expected a series reference")
    vals = tuple(scale * _num(v, where) for v in ref)
    if len(vals) != horizon:
        raise ValidationError("series-length", f"{where}: length {len(vals)} != horizon {horizon}")
    return vals


def parse_case(raw: bytes | str) -> NetworkCase:
    """Parse and validate a case file; see docs/case_format.md for the schema."""
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object")
    meta = _req(doc, "meta", "case")
    horizon = _req(meta, "horizon", "meta")
    if isinstance(horizon, bool) or not isinstance(horizon, int) or horizon <= 0:
        raise SchemaError("meta.horizon: expected a positive integer")
    series = doc.get("series", {})
    if not isinstance(series, dict):
        raise SchemaError("series: expected an object")
    dt = _num(_req(meta, "dt_hours", "meta"), "meta.dt_hours")
    base_kva = _num(meta.get("base_kva", 1000.0), "meta.base_kva")
    lmp = tuple(p / MWH for p in _series(_req(meta, "lmp", "meta"), series, horizon, "meta.lmp"))

    buses = []
    for i, b in enumerate(_req(doc, "buses", "case")):
        where = f"buses[{i}]"
        bid = _req(b, "id", where)
        if isinstance(bid, bool) or not isinstance(bid, int):
            raise SchemaError(f"{where}.id: expected an integer")
        kind = _req(b, "kind", where)
        if kind not in KINDS:
            raise SchemaError(f"{where}.kind: must be one of {KINDS}")
        gen = None
        if b.get("generator") is not None:
            g = b["generator"]
            pb = _req(g, "p_bounds", where + ".generator")
            p_lo, p_hi = (_bound(v, where + ".generator.p_bounds") for v in pb)
            if "q_bounds" in g:
                q_lo, q_hi = (_bound(v, where + ".generator.q_bounds") for v in g["q_bounds"])
            else:
                q_hi = GEN_Q_RATIO * p_hi
                q_lo = -q_hi
            gen = GeneratorParams(
                _num(g.get("marginal_cost", 0.0), where + ".generator.marginal_cost") / MWH,
                (-math.inf if math.isnan(p_lo) else p_lo, math.inf if math.isnan(p_hi) else p_hi),
                (-math.inf if math.isnan(q_lo) else q_lo, math.inf if math.isnan(q_hi) else q_hi),
            )
        elif kind == "slack":
            gen = GeneratorParams(0.0, (-base_kva, base_kva), (-GEN_Q_RATIO * base_kva, GEN_Q_RATIO * base_kva))
        buses.append(
            Bus(
                id=bid,
                kind=kind,
                voltage_limits=(_num(b.get("v_min", 0.95), where), _num(b.get("v_max", 1.05), where)),
                load_p=_series(b.get("load_p", 0.0), series, horizon, where + ".load_p"),
                load_q=_series(b.get("load_q", 0.0), series, horizon, where + ".load_q"),
                generator=gen,
            )
        )

    lines = []
    for i, ln in enumerate(_req(doc, "lines", "case")):
        where = f"lines[{i}]"
        lines.append(
            Line(
                int(_num(_req(ln, "from", where), where)),
                int(_num(_req(ln, "to", where), where)),
                _num(_req(ln, "r", where), where),
                _num(_req(ln, "x", where), where),
            )
        )

    bus_load = {b.id: b.load_p for b in buses}
    comms = []
    for i, c in enumerate(doc.get("communities", [])):
        where = f"communities[{i}]"
        bus = _req(c, "bus", where)
        pv = bess = None
        if c.get("pv") is not None:
            p = c["pv"]
            if "zeta" in p:
                zeta = _num(p["zeta"], where + ".pv.zeta")
            elif "pf_min" in p:
                zeta = derive_zeta(_num(p["pf_min"], where + ".pv.pf_min"))
            else:
                zeta = 0.2
            pv = PV(
                _series(_req(p, "forecast", where + ".pv"), series, horizon, where + ".pv.forecast"),
                _num(_req(p, "s_max", where + ".pv"), where + ".pv.s_max"),
                zeta,
            )
        if c.get("bess") is not None:
            s = c["bess"]
            w = where + ".bess"
            e_max = _num(_req(s, "e_max", w), w)
            bess = BESS(
                p_ch_max=_num(_req(s, "p_ch_max", w), w),
                p_dis_max=_num(_req(s, "p_dis_max", w), w),
                e_min=_num(s.get("e_min", 0.0), w),
                e_max=e_max,
                eta_ch=_num(s.get("eta_ch", 0.95), w),
                eta_dis=_num(s.get("eta_dis", 0.95), w),
                e_init=_num(s.get("e_init", 0.5 * e_max), w),
                e_final=_num(s.get("e_final", 0.5 * e_max), w),
            )
        f = c.get("flex") or {}
        if "p_flex_max" in f:
            flex_max = _series(f["p_flex_max"], series, horizon, where + ".flex.p_flex_max")
        else:
            load = bus_load.get(bus, (0.0,) * horizon)
            flex_max = tuple(DEFAULT_FLEX_SHARE * v for v in load)
        flex = Flex(flex_max, _num(f.get("pi_flex", DEFAULT_PI_FLEX), where + ".flex.pi_flex") / MWH)
        comms.append(CommunityPortfolio(bus=bus, flex=flex, pv=pv, bess=bess))

    case = NetworkCase(
        buses=tuple(buses),
        lines=tuple(lines),
        communities=tuple(comms),
        horizon=horizon,
        dt_hours=dt,
        lmp=lmp,
        slack_voltage=_num(meta.get("slack_voltage", 1.0), "meta.slack_voltage"),
        big_m=_num(meta.get("big_m", 1e4), "meta.big_m"),
        base_kva=base_kva,
        name=str(meta.get("name", "case")),
    )
    validate_case(case)
    return case


def load_case(path: str | Path) -> NetworkCase:
    return parse_case(Path(path).read_bytes())


def validate_case(case: NetworkCase) -> None:
    """Raise on the first violated invariant; returns None for a valid case."""
    T = case.horizon
    if case.dt_hours <= 0:
        raise ValidationError("dt-positive", "dt_hours must be > 0")
    if case.big_m <= 0:
        raise ValidationError("big-m-positive", "big_m must be > 0")
    if case.base_kva <= 0:
        raise ValidationError("base-positive", "base_kva must be > 0")
    if len(case.lmp) != T:
        raise ValidationError("lmp-length", "lmp length must equal the horizon")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise ValidationError("bus-id-unique", "bus ids must be unique")
    n_slack = sum(b.kind == "slack" for b in case.buses)
    if n_slack != 1:
        raise ValidationError("slack-uniqueness", f"exactly one slack bus required, found {n_slack}")
    for b in case.buses:
        if not (0 < b.v_min < b.v_max):
            raise ValidationError("voltage-limits", f"bus {b.id}: need 0 < v_min < v_max")
        if len(b.load_p) != T or len(b.load_q) != T:
            raise ValidationError("series-length", f"bus {b.id}: load series length != horizon")
        if b.generator is not None:
            g = b.generator
            if not (g.p_bounds[0] <= g.p_bounds[1] and g.q_bounds[0] <= g.q_bounds[1]):
                raise ValidationError("generator-bounds", f"bus {b.id}: generator lower bound exceeds upper")
    if not (case.slack.v_min <= case.slack_voltage <= case.slack.v_max):
        raise ValidationError("slack-voltage", "slack_voltage must lie within the slack bus limits")
    known = set(ids)
    for ln in case.lines:
        if ln.from_bus not in known or ln.to_bus not in known:
            raise ValidationError("line-endpoints", f"line {ln.from_bus}-{ln.to_bus} references an unknown bus")
        if ln.r < 0 or ln.x < 0 or (ln.r == 0 and ln.x == 0):
            raise ValidationError("line-impedance", f"line {ln.from_bus}-{ln.to_bus}: need r,x >= 0 and not both 0")
    seen = set()
    for c in case.communities:
        if c.bus not in known or case.bus(c.bus).kind != "community":
            raise ValidationError("community-bus", f"community bus {c.bus} must exist with kind 'community'")
        if c.bus in seen:
            raise ValidationError("community-unique", f"bus {c.bus} has more than one portfolio")
        seen.add(c.bus)
        load = case.bus(c.bus).load_p
        if len(c.flex.p_flex_max) != T:
            raise ValidationError("series-length", f"community {c.bus}: flex series length != horizon")
        if any(f < 0 or f > l + 1e-12 for f, l in zip(c.flex.p_flex_max, load)):
            raise ValidationError("flex-bound", f"community {c.bus}: need 0 <= p_flex_max <= load_p")
        if c.pv is not None:
            if c.pv.zeta < 0:
                raise ValidationError("zeta", f"community {c.bus}: zeta must be >= 0")
            if c.pv.s_max < 0 or any(v < 0 for v in c.pv.forecast):
                raise ValidationError("pv-nonnegative", f"community {c.bus}: PV ratings must be >= 0")
        if c.bess is not None:
            s = c.bess
            if not (0 < s.eta_ch <= 1 and 0 < s.eta_dis <= 1):
                raise ValidationError("bess-efficiency", f"community {c.bus}: efficiencies must lie in (0, 1]")
            if not (s.e_min <= s.e_init <= s.e_max and s.e_min <= s.e_final <= s.e_max):
                raise ValidationError("soc-bounds", f"community {c.bus}: need e_min <= e_init, e_final <= e_max")
            if s.p_ch_max < 0 or s.p_dis_max < 0:
                raise ValidationError("bess-power", f"community {c.bus}: power limits must be >= 0")
    for b in case.buses:
        if b.kind == "community" and b.id not in seen:
            raise ValidationError("community-bus", f"bus {b.id} is kind 'community' without a portfolio")
    check_radial(case)


def check_radial(case: NetworkCase) -> None:
    n, m = len(case.buses), len(case.lines)
    if any(ln.from_bus == ln.to_bus for ln in case.lines):
        raise TopologyError("self-loop line")
    if m != n - 1:
        raise TopologyError(f"radial network needs |L| = |N| - 1 ({n - 1}), found {m}")
    adj: dict[int, list[int]] = {b.id: [] for b in case.buses}
    for ln in case.lines:
        adj[ln.from_bus].append(ln.to_bus)
        adj[ln.to_bus].append(ln.from_bus)
    seen = {case.slack.id}
    stack = [case.slack.id]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != n:
        raise TopologyError(f"network is disconnected: {n - len(seen)} bus(es) unreachable from the slack")


# ---------------------------------------------------------- serialization


def _bound_out(v: float):
    return None if math.isinf(v) else v


def case_to_dict(case: NetworkCase) -> dict[str, Any]:
    series: dict[str, list[float]] = {"lmp": [p * MWH for p in case.lmp]}
    buses = []
    for b in case.buses:
        entry: dict[str, Any] = {"id": b.id, "kind": b.kind, "v_min": b.v_min, "v_max": b.v_max}
        for key in ("load_p", "load_q"):
            sid = f"bus{b.id}.{key}"
            series[sid] = list(getattr(b, key))
            entry[key] = sid
        if b.generator is not None:
            g = b.generator
            entry["generator"] = {
                "marginal_cost": g.marginal_cost * MWH,
                "p_bounds": [_bound_out(v) for v in g.p_bounds],
                "q_bounds": [_bound_out(v) for v in g.q_bounds],
            }
        buses.append(entry)
    comms = []
    for c in case.communities:
        entry = {"bus": c.bus}
        fid = f"ec{c.bus}.p_flex_max"
        series[fid] = list(c.flex.p_flex_max)
        entry["flex"] = {"p_flex_max": fid, "pi_flex": c.flex.pi_flex * MWH}
        if c.pv is not None:
            pid = f"ec{c.bus}.pv"
            series[pid] = list(c.pv.forecast)
            entry["pv"] = {"forecast": pid, "s_max": c.pv.s_max, "zeta": c.pv.zeta}
        if c.bess is not None:
            entry["bess"] = {k: getattr(c.bess, k) for k in BESS.__dataclass_fields__}
        comms.append(entry)
    return {
        "meta": {
            "name": case.name,
            "horizon": case.horizon,
            "dt_hours": case.dt_hours,
            "slack_voltage": case.slack_voltage,
            "big_m": case.big_m,
            "base_kva": case.base_kva,
            "lmp": "lmp",
        },
        "buses": buses,
        "lines": [{"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x} for ln in case.lines],
        "communities": comms,
        "series": series,
    }


def serialize_case(case: NetworkCase, indent: int | None = None) -> str:
    return json.dumps(case_to_dict(case), indent=indent, sort_keys=True)


def replace_community(case: NetworkCase, bus: int, **changes) -> NetworkCase:
    """Copy of ``case`` with one community's portfolio fields replaced."""
    from dataclasses import replace

    comms = tuple(replace(c, **changes) if c.bus == bus else c for c in case.communities)
    return replace(case, communities=comms)
