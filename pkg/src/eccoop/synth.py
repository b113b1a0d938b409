"""Synthetic load, PV and price series plus the bundled feeder builders.

Series are smooth diurnal shapes with seed-controlled multiplicative noise.
Builders return case documents (plain dicts in the case-file schema) that
:func:`eccoop.case.parse_case` accepts after ``json.dumps``.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .case import GEN_Q_RATIO, parse_case

PRICE_RANGE = (12.0, 55.0)  # $/MWh, wholesale interface


def _hours(horizon: int, dt: float, start: float) -> np.ndarray:
    return (start + dt * np.arange(horizon)) % 24.0


def load_shape(hours: np.ndarray) -> np.ndarray:
    """Residential profile normalised to a peak of about 1: morning bump, evening peak."""
    morning = 0.25 * np.exp(-0.5 * ((hours - 8.0) / 1.5) ** 2)
    evening = 0.55 * np.exp(-0.5 * ((hours - 19.0) / 2.0) ** 2)
    return 0.4 + morning + evening


def pv_shape(hours: np.ndarray) -> np.ndarray:
    return np.clip(np.sin(math.pi * (hours - 6.0) / 12.0), 0.0, None)


def price_shape(hours: np.ndarray) -> np.ndarray:
    """Duck-curve wholesale price spanning PRICE_RANGE."""
    lo, hi = PRICE_RANGE
    evening = np.exp(-0.5 * ((hours - 19.5) / 2.5) ** 2)
    midday = np.exp(-0.5 * ((hours - 13.0) / 2.5) ** 2)
    shape = 0.45 + 0.55 * evening - 0.4 * midday
    shape = (shape - shape.min()) / (shape.max() - shape.min())
    return lo + (hi - lo) * shape


def synthetic_series(horizon: int, dt: float = 1.0, start: float = 0.0, seed: int = 0, noise: float = 0.05):
    """Named unit series: ``load``, ``pv`` and ``lmp`` ($/MWh), rounded to 1e-4."""
    rng = np.random.default_rng(seed)
    h = _hours(horizon, dt, start)
    load = load_shape(h) * (1.0 + noise * rng.standard_normal(horizon))
    pv = pv_shape(h) * np.clip(1.0 + noise * rng.standard_normal(horizon), 0.0, None)
    lmp = price_shape(h) * (1.0 + 0.5 * noise * rng.standard_normal(horizon))
    rnd = lambda a: [round(float(v), 4) for v in a]
    return {"load": rnd(np.clip(load, 0.05, None)), "pv": rnd(pv), "lmp": rnd(np.clip(lmp, 1.0, None))}


def _bus(bid, kind, load_kw=0.0, pf=0.95, gen=None, v=(0.95, 1.05)):
    entry = {"id": bid, "kind": kind, "v_min": v[0], "v_max": v[1]}
    if load_kw:
        entry["load_p"] = {"series": "load", "scale": load_kw}
        entry["load_q"] = {"series": "load", "scale": round(load_kw * math.tan(math.acos(pf)), 6)}
    if gen is not None:
        entry["generator"] = gen
    return entry


def local_generator(p_max: float, cost: float = 250.0) -> dict:
    q = round(GEN_Q_RATIO * p_max, 6)
    return {"marginal_cost": cost, "p_bounds": [0.0, p_max], "q_bounds": [-q, q]}


def slack_generator(p_max: float) -> dict:
    q = round(GEN_Q_RATIO * p_max, 6)
    return {"marginal_cost": 0.0, "p_bounds": [-p_max, p_max], "q_bounds": [-q, q]}


def portfolio(bus: int, pv_kw: float = 30.0, bess_kw: float = 20.0, bess_kwh: float = 50.0, zeta: float = 0.2, flex: bool = True, pi_flex: float = 75.0):
    entry = {"bus": bus, "flex": {"pi_flex": pi_flex}}
    if not flex:
        entry["flex"]["p_flex_max"] = 0.0
    if pv_kw > 0:
        entry["pv"] = {"forecast": {"series": "pv", "scale": pv_kw}, "s_max": pv_kw, "zeta": zeta}
    if bess_kw > 0 and bess_kwh > 0:
        entry["bess"] = {"p_ch_max": bess_kw, "p_dis_max": bess_kw, "e_min": 0.0, "e_max": bess_kwh, "eta_ch": 0.95, "eta_dis": 0.95}
    return entry


def _meta(name, horizon, dt, base_kva, slack_voltage=1.0, big_m=1e4):
    return {"name": name, "horizon": horizon, "dt_hours": dt, "slack_voltage": slack_voltage, "big_m": big_m, "base_kva": base_kva, "lmp": "lmp"}


def toy6(horizon: int = 6, dt: float = 1.0, start: float = 15.0, seed: int = 0, load_scale: float = 1.3) -> dict:
    """Six-bus feeder (trunk 0-1-2-3, branch 1-4-5) with communities at 2, 3 and 5."""
    buses = [
        _bus(0, "slack", gen=slack_generator(400.0)),
        _bus(1, "load", load_scale * 40.0),
        _bus(2, "community", load_scale * 50.0),
        _bus(3, "community", load_scale * 60.0, gen=local_generator(30.0)),
        _bus(4, "load", load_scale * 40.0),
        _bus(5, "community", load_scale * 50.0),
    ]
    lines = [
        {"from": 0, "to": 1, "r": 0.02, "x": 0.03},
        {"from": 1, "to": 2, "r": 0.06, "x": 0.03},
        {"from": 2, "to": 3, "r": 0.07, "x": 0.03},
        {"from": 1, "to": 4, "r": 0.05, "x": 0.03},
        {"from": 4, "to": 5, "r": 0.06, "x": 0.03},
    ]
    comms = [portfolio(2), portfolio(3, pv_kw=20.0), portfolio(5, bess_kw=10.0, bess_kwh=30.0)]
    return {"meta": _meta("toy6", horizon, dt, 400.0), "buses": buses, "lines": lines, "communities": comms, "series": synthetic_series(horizon, dt, start, seed)}


# CIGRE European LV residential feeder, 400 V, 400 kVA transformer
_CIGRE_LINES = [
    (0, 1, "tr"), (1, 2, 35), (2, 3, 35), (3, 4, 35), (4, 5, 35), (5, 6, 35), (6, 7, 35), (7, 8, 35), (8, 9, 35),
    (9, 10, 35), (3, 11, -30), (4, 12, 35), (12, 13, 35), (13, 14, 35), (14, 15, -30), (6, 16, -30), (9, 17, -30),
    (10, 18, -30),
]


def cigre19(horizon: int = 24, dt: float = 1.0, start: float = 0.0, seed: int = 0, ec_buses=(9, 11, 18), load_scale: float = 1.0) -> dict:
    """CIGRE LV topology with synthetic loads; communities default to buses 9, 11, 18."""
    zbase = 0.4**2 / 0.4  # ohm on 400 V / 400 kVA
    lines = []
    for a, b, spec in _CIGRE_LINES:
        if spec == "tr":
            r, x = 0.01, 0.04
        elif spec > 0:  # main cable, ohm/km
            r, x = 0.162 * spec / 1000 / zbase, 0.0832 * spec / 1000 / zbase
        else:  # service cable
            r, x = 0.822 * -spec / 1000 / zbase, 0.0847 * -spec / 1000 / zbase
        lines.append({"from": a, "to": b, "r": round(r, 6), "x": round(x, 6)})
    loads = {2: 12, 4: 10, 6: 10, 7: 8, 9: 22, 10: 12, 11: 18, 12: 8, 14: 10, 15: 30, 16: 28, 17: 20, 18: 26}
    gens = {10: 15.0, 15: 15.0, 18: 15.0}
    buses = []
    for b in range(19):
        kind = "slack" if b == 0 else ("community" if b in ec_buses else "load")
        gen = slack_generator(400.0) if b == 0 else (local_generator(gens[b]) if b in gens else None)
        buses.append(_bus(b, kind, load_scale * loads.get(b, 0.0), gen=gen))
    comms = [portfolio(b) for b in ec_buses]
    return {"meta": _meta("cigre19", horizon, dt, 400.0), "buses": buses, "lines": lines, "communities": comms, "series": synthetic_series(horizon, dt, start, seed)}


def twin(horizon: int = 4, dt: float = 1.0, start: float = 17.0, seed: int = 0, load_scale: float = 1.8) -> dict:
    """Mirrored twin laterals (communities 3 and 5) plus a zero-capacity community at 6."""
    buses = [
        _bus(0, "slack", gen=slack_generator(400.0)),
        _bus(1, "load", load_scale * 30.0),
        _bus(2, "load", load_scale * 20.0),
        _bus(3, "community", load_scale * 50.0, gen=local_generator(40.0)),
        _bus(4, "load", load_scale * 20.0),
        _bus(5, "community", load_scale * 50.0, gen=local_generator(40.0)),
        _bus(6, "community", load_scale * 20.0),
    ]
    lines = [
        {"from": 0, "to": 1, "r": 0.03, "x": 0.03},
        {"from": 1, "to": 2, "r": 0.05, "x": 0.02},
        {"from": 2, "to": 3, "r": 0.05, "x": 0.02},
        {"from": 1, "to": 4, "r": 0.05, "x": 0.02},
        {"from": 4, "to": 5, "r": 0.05, "x": 0.02},
        {"from": 0, "to": 6, "r": 0.01, "x": 0.01},
    ]
    comms = [portfolio(3), portfolio(5), portfolio(6, pv_kw=0.0, bess_kw=0.0, flex=False)]
    return {"meta": _meta("twin", horizon, dt, 400.0), "buses": buses, "lines": lines, "communities": comms, "series": synthetic_series(horizon, dt, start, seed)}


def case69(
    horizon: int = 4,
    dt: float = 1.0,
    start: float = 17.0,
    seed: int = 0,
    load_scale: float = 1.0,
    small_pair: int = 1,
    small_scale: float = 0.001,
) -> dict:
    """69-bus feeder with three forks, each carrying an exactly mirrored community pair.

    Trunk 0..26; fork A at trunk bus 2 (laterals of 5 buses), fork B at bus 12
    and fork C at bus 20 (laterals of 8 buses). Communities sit at lateral ends.
    Pair ``small_pair`` has its load and DER scaled by ``small_scale``, which
    makes it a near-null pair.
    """
    lines = []
    buses = [_bus(0, "slack", gen=slack_generator(1500.0))]
    trunk_r, trunk_x = 0.004, 0.003
    for b in range(1, 27):
        lines.append({"from": b - 1, "to": b, "r": trunk_r, "x": trunk_x})
        buses.append(_bus(b, "load", load_scale * (12.0 if b % 2 else 8.0), gen=local_generator(30.0) if b in (18, 26) else None))
    nxt = 27
    ec = []
    for root, length, r in ((2, 5, 0.004), (12, 8, 0.006), (20, 8, 0.006)):
        small = len(ec) // 2 == small_pair
        f = small_scale if small else 1.0
        for _side in range(2):
            prev = root
            for k in range(length):
                bid = nxt
                nxt += 1
                lines.append({"from": prev, "to": bid, "r": r, "x": 0.004})
                if k == length - 1:
                    buses.append(_bus(bid, "community", 40.0 * f))
                    ec.append(bid)
                else:
                    # a shrunken community's load moves to its neighbour so feeder loading is unchanged
                    extra = 40.0 * (1.0 - f) if k == length - 2 else 0.0
                    buses.append(_bus(bid, "load", load_scale * (10.0 if k % 2 else 6.0) + extra))
                prev = bid
    comms = []
    for k, b in enumerate(ec):
        f = small_scale if k // 2 == small_pair else 1.0
        comms.append(portfolio(b, pv_kw=25.0 * f, bess_kw=20.0 * f, bess_kwh=50.0 * f))
    assert nxt == 69
    return {"meta": _meta("case69", horizon, dt, 1000.0), "buses": buses, "lines": lines, "communities": comms, "series": synthetic_series(horizon, dt, start, seed)}


BUILDERS = {"toy6": toy6, "cigre19": cigre19, "twin": twin, "case69": case69}


def build_case(kind: str, **kw):
    return parse_case(json.dumps(BUILDERS[kind](**kw)))
