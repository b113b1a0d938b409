import json
import math

import pytest

from eccoop.case import (
    GEN_Q_RATIO,
    case_to_dict,
    derive_zeta,
    load_case,
    parse_case,
    replace_community,
    serialize_case,
)
from eccoop.errors import DomainError, SchemaError, TopologyError, ValidationError
from eccoop.synth import BUILDERS, build_case


def test_parse_small_case(chain_doc, make_case):
    c = make_case(chain_doc)
    assert c.horizon == 3 and c.dt_hours == 1.0
    assert c.slack.id == 0
    assert c.community_buses == (2,)
    assert c.bus(1).load_p == (10.0, 15.0, 5.0)
    assert c.bus(1).load_q == (2.0, 2.0, 2.0)
    # prices stored per kWh
    assert c.lmp == pytest.approx((0.04,) * 3)


def test_defaults(chain_doc, make_case):
    c = make_case(chain_doc)
    g = c.slack.generator
    assert g.p_bounds == (-100.0, 100.0)
    assert g.q_bounds[1] == pytest.approx(GEN_Q_RATIO * 100.0)
    comm = c.community(2)
    assert comm.pv is None and comm.bess is None
    assert comm.flex.p_flex_max == pytest.approx(tuple(0.3 * v for v in c.bus(2).load_p))
    assert comm.flex.pi_flex == pytest.approx(0.08)


def test_pv_and_bess_defaults(chain_doc, make_case):
    chain_doc["communities"][0]["pv"] = {"forecast": [1.0, 2.0, 0.0], "s_max": 3.0, "pf_min": 0.9}
    chain_doc["communities"][0]["bess"] = {"p_ch_max": 5.0, "p_dis_max": 5.0, "e_max": 10.0}
    c = make_case(chain_doc)
    pv, bess = c.community(2).pv, c.community(2).bess
    assert pv.zeta == pytest.approx(math.tan(math.acos(0.9)))
    assert bess.e_init == bess.e_final == 5.0
    assert bess.eta_ch == bess.eta_dis == 0.95


@pytest.mark.parametrize(
    "pf, expected",
    [(1.0, 0.0), (0.9, 0.4843221048), (0.8, 0.75)],
)
def test_derive_zeta(pf, expected):
    assert derive_zeta(pf) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("pf", [0.0, -0.1, 1.01, math.nan])
def test_derive_zeta_domain(pf):
    with pytest.raises(DomainError):
        derive_zeta(pf)


def test_truncated_file_is_schema_error(chain_doc):
    text = json.dumps(chain_doc)
    with pytest.raises(SchemaError):
        parse_case(text[: len(text) // 2])


@pytest.mark.parametrize(
    "mutate, invariant",
    [
        (lambda d: d["buses"].append({"id": 1, "kind": "load"}), "bus-id-unique"),
        (lambda d: d["buses"][1].update(kind="slack"), "slack-uniqueness"),
        (lambda d: d["buses"][1].update(v_min=1.1), "voltage-limits"),
        (lambda d: d["lines"][0].update(r=-0.1), "line-impedance"),
        (lambda d: d["lines"][1].update(to=7), "line-endpoints"),
        (lambda d: d["communities"][0].update(bus=1), "community-bus"),
        (lambda d: d["communities"].append({"bus": 2}), "community-unique"),
        (lambda d: d["meta"].update(dt_hours=0), "dt-positive"),
        (lambda d: d["meta"].update(big_m=-1), "big-m-positive"),
        (lambda d: d["buses"][1].update(load_p=[1.0, 2.0]), "series-length"),
        (lambda d: d["communities"][0].update(flex={"p_flex_max": 50.0}), "flex-bound"),
        (lambda d: d["communities"][0].update(bess={"p_ch_max": 1, "p_dis_max": 1, "e_max": 2, "eta_ch": 1.2}), "bess-efficiency"),
        (lambda d: d["communities"][0].update(bess={"p_ch_max": 1, "p_dis_max": 1, "e_max": 2, "e_init": 3}), "soc-bounds"),
        (lambda d: d["communities"][0].update(pv={"forecast": 5.0, "s_max": 1.0, "zeta": -0.1}), "zeta"),
    ],
)
def test_invariant_violations(chain_doc, make_case, mutate, invariant):
    mutate(chain_doc)
    with pytest.raises(ValidationError) as exc:
        make_case(chain_doc)
    assert exc.value.invariant == invariant


def test_missing_field_is_schema_error(chain_doc, make_case):
    del chain_doc["lines"][0]["r"]
    with pytest.raises(SchemaError, match="'r'"):
        make_case(chain_doc)


def test_unknown_series(chain_doc, make_case):
    chain_doc["buses"][1]["load_p"] = "nope"
    with pytest.raises(SchemaError, match="unknown series"):
        make_case(chain_doc)


def test_cycle_is_topology_error(chain_doc, make_case):
    chain_doc["buses"].append({"id": 3, "kind": "load"})
    chain_doc["lines"] += [{"from": 2, "to": 3, "r": 0.01, "x": 0.01}, {"from": 3, "to": 1, "r": 0.01, "x": 0.01}]
    with pytest.raises(TopologyError):
        make_case(chain_doc)


def test_disconnected_is_topology_error(chain_doc, make_case):
    chain_doc["buses"] += [{"id": 3, "kind": "load"}, {"id": 4, "kind": "load"}]
    chain_doc["lines"] += [{"from": 3, "to": 4, "r": 0.01, "x": 0.01}]
    with pytest.raises(TopologyError):
        make_case(chain_doc)


def test_self_loop_is_topology_error(chain_doc, make_case):
    chain_doc["lines"][1] = {"from": 2, "to": 2, "r": 0.01, "x": 0.01}
    with pytest.raises(TopologyError):
        make_case(chain_doc)


@pytest.mark.parametrize("kind", sorted(BUILDERS))
def test_serialize_roundtrip(kind):
    c = build_case(kind)
    again = parse_case(serialize_case(c))
    assert again == c
    assert again.content_hash() == c.content_hash()


def test_bundled_files_match_builders():
    from eccoop.cli import bundled_case_path

    for kind in BUILDERS:
        assert parse_case(bundled_case_path(kind).read_bytes()) == build_case(kind)


def test_content_hash_changes_with_data(toy6):
    other = replace_community(toy6, 2, flex=toy6.community(2).flex.__class__((0.0,) * toy6.horizon, 0.0))
    assert other.content_hash() != toy6.content_hash()
    assert case_to_dict(toy6)["meta"]["name"] == "toy6"


def test_path_distance(toy6):
    # 2 and 5 sit on different branches below bus 1
    d = toy6.electrical_distance(2, 5)
    lines = toy6.path_lines(2, 5)
    assert {(l.from_bus, l.to_bus) for l in lines} == {(1, 2), (1, 4), (4, 5)}
    assert d == pytest.approx(sum(l.z for l in lines))
    assert toy6.electrical_distance(3, 3) == 0.0


def test_load_case_file(tmp_path, chain_doc):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(chain_doc))
    assert load_case(p).name == "chain3"
