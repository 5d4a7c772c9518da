from __future__ import annotations

import copy
import json

import pytest

from algmech import cli

SO3_C = [
    {"A": 1, "B": 2, "C_index": 3, "expr": 1},
    {"A": 2, "B": 3, "C_index": 1, "expr": 1},
    {"A": 3, "B": 1, "C_index": 2, "expr": 1},
]


def _custom_so3(extra=(), mode="validate") -> dict:
    return {"mode": mode, "algebroid": {"custom": {"m": 0, "n": 3, "C": SO3_C + list(extra)}}}


def _example(name: str) -> dict:
    return json.loads(cli.example_path(name).read_text())


def _write(tmp_path, doc) -> str:
    path = tmp_path / "problem.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_examples_load():
    assert cli.load(cli.example_path("rigid_body_spline")).mode == "solve-ocp"
    assert cli.load(cli.example_path("elroy_beanie")).mode == "second-order"
    with pytest.raises(ValueError, match="unknown example"):
        cli.example_path("pendulum")


def test_schema_errors_carry_pointers():
    doc = _example("rigid_body_spline")
    doc["boundary"]["T"] = -1.0
    with pytest.raises(cli.ProblemError) as info:
        cli.parse_document(doc)
    assert info.value.pointer == "/boundary/T"


def test_non_antisymmetric_entries_are_rejected():
    bad = {"A": 2, "B": 1, "C_index": 3, "expr": 1}
    with pytest.raises(cli.ProblemError) as info:
        cli.parse_document(_custom_so3([bad]))
    assert info.value.pointer == "/algebroid/custom/C/3"
    with pytest.raises(cli.ProblemError) as info:
        cli.parse_document(_custom_so3([{"A": 2, "B": 2, "C_index": 1, "expr": "0.5"}]))
    assert info.value.pointer == "/algebroid/custom/C/3"


def test_bad_expression_points_at_field():
    doc = _example("rigid_body_spline")
    doc["lagrangian"] = "0.5*q1^2"
    with pytest.raises(cli.ProblemError) as info:
        cli.parse_document(doc)
    assert info.value.pointer == "/lagrangian"


def test_custom_so3_validates():
    code, report, csv_text = cli.execute(cli.parse_document(_custom_so3()))
    assert code == cli.EXIT_OK and csv_text is None
    assert report["validation"]["passed"]


def test_jacobi_violation_exits_with_validation_code():
    doc = _custom_so3([{"A": 1, "B": 2, "C_index": 1, "expr": 1e-3}])
    code, report, _ = cli.execute(cli.parse_document(doc))
    assert code == cli.EXIT_VALIDATION
    assert report["validation"]["jacobi_residual"] >= 1e-3 - 1e-15


def test_zero_cost_exits_with_regularity_code():
    doc = _example("rigid_body_spline")
    doc["cost"] = "0*u1"
    code, report, _ = cli.execute(cli.parse_document(doc))
    assert code == cli.EXIT_REGULARITY
    assert report["singular_matrix"]["shape"] == [3, 3]


def test_rigid_body_spline_report():
    code, report, csv_text = cli.execute(cli.load(cli.example_path("rigid_body_spline")))
    assert code == cli.EXIT_OK
    assert report["shooting"]["converged"]
    assert report["spline_residual_max"] < 1e-5
    assert csv_text.splitlines()[0].startswith("t,")


def test_elroy_example_stays_on_constraints():
    code, report, _ = cli.execute(cli.load(cli.example_path("elroy_beanie")))
    assert code == cli.EXIT_OK
    assert report["constraint_residual_max"] < 1e-12
    assert report["hamiltonian_drift"] < 1e-10


def test_nonconvergence_exit_code():
    doc = _example("rigid_body_spline")
    doc["solver"]["max_iter"] = 1
    code, report, _ = cli.execute(cli.parse_document(doc))
    assert code == cli.EXIT_NONCONVERGED
    assert report["error"].startswith("solve:")


def test_runs_are_byte_identical(tmp_path):
    pf = cli.load(cli.example_path("rigid_body_spline"))
    for d in ("a", "b"):
        assert cli.run(pf, tmp_path / d) == cli.EXIT_OK
    for name in ("report.json", "trajectory.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_main_subcommands(tmp_path):
    assert cli.main(["validate", "--example", "elroy_beanie", "--out", str(tmp_path / "v")]) == cli.EXIT_OK
    report = json.loads((tmp_path / "v" / "report.json").read_text())
    assert report["validation"]["passed"]
    path = _write(tmp_path, _custom_so3([{"A": 1, "B": 2, "C_index": 1, "expr": 1e-3}]))
    assert cli.main(["validate", "--input", path, "--out", str(tmp_path / "bad")]) == cli.EXIT_VALIDATION
    assert cli.main(["run", "--example", "elroy_beanie", "--out", str(tmp_path / "r")]) == cli.EXIT_OK
    assert (tmp_path / "r" / "trajectory.csv").exists()


def test_main_io_and_schema_errors(tmp_path):
    assert cli.main(["run", "--input", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == cli.EXIT_IO
    broken = tmp_path / "broken.json"
    broken.write_text("{ not json")
    assert cli.main(["run", "--input", str(broken), "--out", str(tmp_path / "o")]) == cli.EXIT_VALIDATION
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert "line 1" in report["error"]


def test_sweep_runs_every_point(tmp_path):
    doc = _example("elroy_beanie")
    doc["sweep"] = {"a": [0.0, 0.5], "I2": [1.0, 2.0]}
    path = _write(tmp_path, doc)
    assert cli.main(["sweep", "--input", path, "--out", str(tmp_path / "s")]) == cli.EXIT_OK
    summary = json.loads((tmp_path / "s" / "report.json").read_text())
    assert len(summary["points"]) == 4
    for entry in summary["points"]:
        assert (tmp_path / "s" / entry["dir"] / "report.json").exists()


def test_sweep_needs_grid(tmp_path):
    assert cli.main(["sweep", "--example", "elroy_beanie", "--out", str(tmp_path)]) == cli.EXIT_VALIDATION


def test_constraint_chain_mode():
    doc = copy.deepcopy(_example("rigid_body_spline"))
    doc["mode"] = "constraint-chain"
    code, report, _ = cli.execute(cli.parse_document(doc))
    assert code == cli.EXIT_OK
    assert report["constraint_chain"]["nontrivial_levels"] == 1
