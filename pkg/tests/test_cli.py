import json
import subprocess
import sys

import numpy as np
import pytest

from geoperturb.cli import main
from geoperturb.config import load_config, validate
from geoperturb.errors import ConfigError
from geoperturb.report import Report, dumps, emit_plots


def test_passing_suite_exits_zero_and_writes_report(tmp_path, capsys):
    assert main(["verify", "convexity", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "PASS t_line_residual" in out
    rep = json.loads((tmp_path / "report_convexity.json").read_text())
    assert rep["status"] == "PASS" and rep["suite"] == "convexity"
    assert all(c["status"] == "PASS" for c in rep["checks"])


@pytest.mark.parametrize("suite", ["convexity", pytest.param("intersections", marks=pytest.mark.slow)])
def test_reports_are_byte_identical(tmp_path, suite):
    path = tmp_path / f"report_{suite}.json"
    runs = []
    for _ in range(2):
        assert main([suite, "--out", str(tmp_path), "--seed", "3", "--no-plots"]) == 0
        runs.append(path.read_bytes())
        path.unlink()
    assert runs[0] == runs[1]


def test_failing_check_exits_one(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"tolerances": {"control": 1e9}}))
    assert main(["convexity", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    rep = json.loads((tmp_path / "o" / "report_convexity.json").read_text())
    assert rep["status"] == "FAIL"


def test_bound_violation_exits_two_and_names_it(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"eps": 0.08, "delta": 0.03}))
    assert main(["perturb", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "[eps]" in err and "7*eps < eta" in err
    assert not (tmp_path / "report_perturb.json").exists()


def test_malformed_json_reports_position(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{\n  "eta": 0.5,\n  "eps": \n}')
    assert main(["perturb", "--config", str(cfg)]) == 2
    assert "line 4, column 1" in capsys.readouterr().err


@pytest.mark.parametrize(
    "doc, field",
    [({"bogus": 1}, "bogus"), ({"delta": 0.05}, "delta"), ({"scenario": "nowhere"}, "scenario"), ({"eta": -1}, "eta")],
)
def test_config_errors_carry_the_field(tmp_path, doc, field):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    with pytest.raises(ConfigError) as info:
        validate(load_config(cfg))
    assert info.value.field == field


def test_bad_arguments_exit_two(capsys):
    assert main(["no-such-suite"]) == 2
    assert main(["convexity", "--seed", "x"]) == 2


def test_overrides_apply_in_order(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"scenario": "torus-cross", "seed": 4, "length_bound": 2.5}))
    c = load_config(cfg, overrides={"seed": 9})
    assert c.scenario == "torus-cross" and c.seed == 9 and c.length_bound == 2.5
    assert load_config(cfg, scenario="poly-test").metric == "poly-test"


def test_console_entry_point_runs(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "geoperturb.cli", "convexity", "--out", str(tmp_path), "--no-plots"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "report:" in proc.stdout


def test_plots_only_for_tables(tmp_path):
    assert emit_plots(None, tmp_path) == []
    rep = Report("demo", "x")
    assert emit_plots(rep, tmp_path / "none") == []
    assert not (tmp_path / "none").exists()
    rep.table("curve", ["t", "y"], [np.array([0.0, 0.5]), np.array([1.0, 1 / 3])])
    (path,) = emit_plots(rep, tmp_path)
    assert path.name == "demo_curve.csv"
    assert path.read_text().splitlines() == ["t,y", "0,1", "0.5,0.33333333333333331"]


def test_dumps_is_sorted_and_full_precision():
    text = dumps({"b": 0.1, "a": [1, 2.0, float("nan")], "c": True})
    assert text.index('"a"') < text.index('"b"') < text.index('"c"')
    assert "0.10000000000000001" in text and "2.0" in text and "null" in text
    assert json.loads(text)["c"] is True
