import csv
import io
import json

import pytest

from eccoop.case import load_case
from eccoop.cli import parse_groups, run
from eccoop.coalitions import Ledger
from eccoop.errors import ValidationError

from conftest import small_doc


@pytest.fixture
def chain_file(tmp_path):
    p = tmp_path / "chain.json"
    p.write_text(json.dumps(small_doc()))
    return p


def _ledger_results(path):
    return [r for r in Ledger(path).records() if r["type"] == "result"]


def test_validate_ok(chain_file, capsys):
    assert run(["validate", str(chain_file)]) == 0
    assert "chain3" in capsys.readouterr().out


def test_validate_bundled():
    assert run(["validate", "toy6"]) == 0


def test_validate_cycle_exit_2(tmp_path):
    doc = small_doc()
    doc["lines"].append({"from": 2, "to": 0, "r": 0.01, "x": 0.01})
    p = tmp_path / "cyc.json"
    p.write_text(json.dumps(doc))
    assert run(["validate", str(p)]) == 2


def test_validate_truncated_exit_1(tmp_path):
    p = tmp_path / "cut.json"
    p.write_text(json.dumps(small_doc())[:40])
    assert run(["validate", str(p)]) == 1


def test_missing_file_exit_1(tmp_path):
    assert run(["validate", str(tmp_path / "nope.json")]) == 1


def test_usage_error_exit_1():
    assert run(["solve"]) == 1
    assert run(["allocate", "toy6", "--method", "magic"]) == 1


def test_solve_grand(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["solve", "toy6", "--out", str(out)]) == 0
    recs = _ledger_results(out / "ledger.jsonl")
    assert len(recs) == 1 and recs[0]["mask"] == 7
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["case_name"] == "toy6"
    assert {"results.json", "dlmp.csv", "schedule.csv", "audit.json"} <= set(manifest["files"])
    assert "audit pass" in capsys.readouterr().out


def test_solve_bitmask_members(tmp_path):
    out = tmp_path / "run"
    assert run(["solve", "toy6", "--coalition", "0b101", "--out", str(out)]) == 0
    res = json.loads((out / "results.json").read_text())
    # bit 0 is the first community, bit 2 the third
    assert res[0]["members"] == [2, 5]


def test_solve_enumerate_and_resume(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["solve", "toy6", "--enumerate", "--parallel", "2", "--out", str(out)]) == 0
    assert len(_ledger_results(out / "ledger.jsonl")) == 8
    capsys.readouterr()
    assert run(["solve", "toy6", "--enumerate", "--out", str(out)]) == 0
    assert "0 solved, 8 from ledger" in capsys.readouterr().out
    assert len(_ledger_results(out / "ledger.jsonl")) == 8


def test_solve_dump_model(tmp_path):
    out = tmp_path / "run"
    assert run(["solve", "toy6", "--coalition", "1", "--dump-model", "--out", str(out)]) == 0
    text = (out / "model_1.txt").read_text()
    assert "stat_" in text
    assert (out / "model_1.mps").read_text().startswith("NAME")


def test_solve_bad_coalition_exit_1(tmp_path):
    assert run(["solve", "toy6", "--coalition", "0b11111", "--out", str(tmp_path / "r")]) == 1


def test_allocate_exact(tmp_path, capsys, exact_runs):
    out = tmp_path / "run"
    assert run(["allocate", "toy6", "--method", "exact", "--out", str(out)]) == 0
    assert "[exact] 8 coalitions solved" in capsys.readouterr().out
    doc = json.loads((out / "allocation_exact.json").read_text())
    assert doc["totals"]["phi"] == pytest.approx(doc["totals"]["v_grand"], abs=1e-9)
    _, rep, _, _ = exact_runs("toy6")
    assert doc["totals"]["v_grand"] == pytest.approx(rep.v_grand, rel=1e-9)
    rows = list(csv.reader(io.StringIO((out / "allocation.csv").read_text())))
    assert rows[0] == ["method", "scenario", "community", "original_cost", "new_cost", "difference"]
    assert len(rows) == 4


def test_allocate_base(tmp_path):
    out = tmp_path / "run"
    assert run(["allocate", "toy6", "--method", "base", "--out", str(out)]) == 0
    doc = json.loads((out / "allocation_base.json").read_text())
    assert doc["totals"]["c_base"] == pytest.approx(doc["totals"]["grand_cost"], abs=1e-9)


def test_allocate_signature_case69(tmp_path, capsys):
    out = tmp_path / "run"
    code = run(["allocate", "case69", "--method", "signature", "--groups", "31,36;44,52;60,68",
                "--parallel", "4", "--out", str(out)])
    assert code == 0
    assert "[signature] 27 coalitions solved" in capsys.readouterr().out
    doc = json.loads((out / "allocation_signature.json").read_text())
    assert doc["groups"] == [[31, 36], [44, 52], [60, 68]]


def test_allocate_from_incomplete_ledger(tmp_path, capsys):
    led = tmp_path / "led.jsonl"
    assert run(["solve", "toy6", "--coalition", "all", "--ledger", str(led), "--out", str(tmp_path / "a")]) == 0
    assert run(["allocate", "toy6", "--from-ledger", str(led), "--out", str(tmp_path / "b")]) == 1
    assert "IncompleteTableError" in capsys.readouterr().err


def test_allocate_from_complete_ledger(tmp_path, capsys):
    led = tmp_path / "led.jsonl"
    assert run(["solve", "toy6", "--enumerate", "--ledger", str(led), "--out", str(tmp_path / "a")]) == 0
    capsys.readouterr()
    assert run(["allocate", "toy6", "--from-ledger", str(led), "--out", str(tmp_path / "b")]) == 0
    assert "[exact] 8 coalitions solved" in capsys.readouterr().out


def test_generate_case_roundtrip(tmp_path):
    p = tmp_path / "t.json"
    assert run(["generate-case", "twin", "--out", str(p), "--horizon", "3"]) == 0
    c = load_case(p)
    assert c.horizon == 3 and c.community_buses == (3, 5, 6)


def test_report_from_ledger(tmp_path):
    led = tmp_path / "led.jsonl"
    assert run(["solve", "toy6", "--enumerate", "--ledger", str(led), "--out", str(tmp_path / "a")]) == 0
    out = tmp_path / "rep"
    assert run(["report", "toy6", "--from-ledger", str(led), "--out", str(out)]) == 0
    rows = list(csv.reader(io.StringIO((out / "nonparticipant_cost.csv").read_text())))
    # every coalition lists each non-slack bus outside it: 8 coalitions * 5 buses - 12 memberships
    assert len(rows) - 1 == 28
    assert (out / "dlmp_summary.csv").exists()


def test_report_empty_ledger_exit_1(tmp_path):
    assert run(["report", "toy6", "--from-ledger", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "r")]) == 1


def test_parse_groups():
    s = parse_groups("31,36; 44,52", (31, 36, 44, 52, 60, 68))
    assert s.groups == ((31, 36), (44, 52), (60,), (68,))
    with pytest.raises(ValidationError):
        parse_groups("31,x", (31, 36))


def test_manifest_is_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["allocate", "toy6", "--method", "base", "--out", str(a)]) == 0
    assert run(["allocate", "toy6", "--method", "base", "--out", str(b)]) == 0
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma["config_hash"] == mb["config_hash"] and ma["case_hash"] == mb["case_hash"]
    assert (a / "allocation_base.json").read_text() == (b / "allocation_base.json").read_text()
