import copy
import json

import pytest

from eccoop.allocation import allocate_exact
from eccoop.case import parse_case
from eccoop.coalitions import Ledger
from eccoop.synth import BUILDERS, build_case


def small_doc(horizon=3, lmp=40.0):
    """Three-bus chain with one community at the far end."""
    return {
        "meta": {"name": "chain3", "horizon": horizon, "dt_hours": 1.0, "base_kva": 100.0, "lmp": lmp},
        "series": {"shape": [1.0, 1.5, 0.5][:horizon] + [1.0] * max(0, horizon - 3)},
        "buses": [
            {"id": 0, "kind": "slack"},
            {"id": 1, "kind": "load", "load_p": {"series": "shape", "scale": 10.0}, "load_q": 2.0},
            {"id": 2, "kind": "community", "load_p": {"series": "shape", "scale": 8.0}, "load_q": 1.0},
        ],
        "lines": [{"from": 0, "to": 1, "r": 0.01, "x": 0.01}, {"from": 1, "to": 2, "r": 0.02, "x": 0.01}],
        "communities": [{"bus": 2, "flex": {"pi_flex": 80.0}}],
    }


@pytest.fixture
def chain_doc():
    return small_doc()


@pytest.fixture
def make_case():
    def _make(doc):
        return parse_case(json.dumps(doc))

    return _make


@pytest.fixture
def doc_of():
    def _doc(kind, **kw):
        return copy.deepcopy(BUILDERS[kind](**kw))

    return _doc


@pytest.fixture(scope="session")
def toy6():
    return build_case("toy6")


@pytest.fixture(scope="session")
def twin():
    return build_case("twin")


@pytest.fixture(scope="session")
def cigre19():
    return build_case("cigre19")


@pytest.fixture(scope="session")
def case69():
    return build_case("case69")


@pytest.fixture(scope="session")
def exact_runs():
    """Exact allocation of every bundled case, each with its own in-memory ledger."""
    cache = {}

    def get(kind):
        if kind not in cache:
            case = build_case(kind)
            ledger = Ledger()
            report, table = allocate_exact(case, ledger=ledger)
            cache[kind] = (case, report, table, ledger)
        return cache[kind]

    return get
