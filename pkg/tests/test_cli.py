from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from mfgminimax.cli import ConfigError, load_config, main
from mfgminimax.nplayer import GAP_HEADER

UNCOUPLED = """\
model:
  template: uncoupled
  m0: {type: uniform, atoms: 20}
grids:
  steps: 16
  state_nodes: 41
nplayer:
  N_list: [2, 4]
  seeds: [0]
"""


@pytest.fixture
def solved(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(UNCOUPLED)
    out = tmp_path / "res"
    assert main(["solve", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_solve_uncoupled(solved):
    _, out = solved
    diag = json.loads((out / "diagnostics.json").read_text())
    assert diag["converged"] and diag["residual"] <= diag["tol_W"]
    for name in ["flow.json", "flow.csv", "value.csv", "bundle.csv", "config.json"]:
        assert (out / name).exists()


def test_negative_tolerance_names_field(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("model:\n  template: lq1d\nsolver:\n  tol_W: -1\n")
    assert main(["solve", str(cfg), "--out", str(tmp_path / "x")]) == 1
    err = capsys.readouterr().err
    assert "solver.tol_W" in err and "bad.yaml:4" in err


def test_unknown_field(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("solver:\n  tolerance: 1\n")
    assert main(["solve", str(cfg)]) == 1
    assert "solver.tolerance" in capsys.readouterr().err


def test_check_report(solved):
    cfg, out = solved
    assert main(["check", str(cfg), str(out)]) == 0
    rep = json.loads((out / "check_report.json").read_text())
    for fam in ("terminal", "viability", "upper_hadamard", "lower_hadamard"):
        assert fam in rep and rep[fam]["pass"]


def test_tampered_terminal_fails(solved):
    cfg, out = solved
    rows = list(csv.reader(open(out / "value.csv")))
    last_t = rows[-1][0]
    for r in rows[1:]:
        if r[0] == last_t:
            r[-1] = repr(float(r[-1]) + 0.01)
            break
    with open(out / "value.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    assert main(["check", str(cfg), str(out)]) != 0
    rep = json.loads((out / "check_report.json").read_text())
    assert rep["terminal"]["defect"] > 0 and not rep["terminal"]["pass"]


def test_missing_result_dir(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(UNCOUPLED)
    assert main(["check", str(cfg), str(tmp_path / "nope")]) == 1


def test_nash_gap_uncoupled(solved):
    cfg, out = solved
    assert main(["nash-gap", str(cfg), str(out)]) == 0
    with open(out / "nash_gap.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == GAP_HEADER
    assert [r[0] for r in rows[1:]] == ["2", "4"]
    assert all(float(r[4]) <= float(r[5]) for r in rows[1:])
    manifest = json.loads((out / "nash_gap_manifest.json").read_text())
    assert manifest["pass"] and "Chat1" in manifest["constants"]


def test_w1_command(tmp_path, capsys):
    (tmp_path / "a.csv").write_text("x_1,w\n0,0.5\n1,0.5\n")
    (tmp_path / "b.csv").write_text("x_1,w\n0.5,1\n")
    assert main(["w1", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.5)


def test_env_override(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(UNCOUPLED)
    rc = load_config(str(cfg), environ={"MFGMM_SOLVER__TOL_W": "0.5", "MFGMM_GRIDS__STEPS": "8"})
    assert rc.solver["tol_W"] == 0.5 and rc.grids["steps"] == 8
    with pytest.raises(ConfigError):
        load_config(str(cfg), environ={"MFGMM_SOLVER__NOPE": "1"})


def test_defaults_without_file():
    rc = load_config(None, environ={})
    assert rc.model["template"] == "lq1d" and rc.solver["tol_W"] == 1e-3


def test_deterministic_outputs(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(UNCOUPLED.replace("uncoupled", "lq1d"))
    for d in ("a", "b"):
        main(["solve", str(cfg), "--out", str(tmp_path / d)])
    for name in ("flow.csv", "value.csv", "bundle.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_threads(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(UNCOUPLED)
    assert main(["solve", str(cfg), "--threads", "0"]) == 1
