import json

import numpy as np
import pytest

from degenpde.cli import ConfigValidationError, main, validate
from degenpde.discretization import read_field_csv

HESTON = {"sigma": 0.5, "rho": -0.3, "kappa": 2.0, "theta": 0.3, "r": 0.05}


def run(tmp_path, cfg, *extra, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg) if isinstance(cfg, dict) else cfg)
    out = tmp_path / "out"
    return main(["--config", str(path), "--out", str(out), *extra]), out


def bvp_cfg(**over):
    cfg = {"case": "bvp", "operator": {"heston": HESTON},
           "domain": {"bounds": [[-3, 3], [0, 1]]}, "grid": {"n": [17, 9]},
           "data": {"f": {"expr": "exp(-x1**2) * (1 + x2)"}, "g": 0.0}}
    cfg.update(over)
    return cfg


def put_cfg(**over):
    cfg = bvp_cfg(case="obstacle", data={"f": 0.0, "g": {"payoff": {"kind": "put", "K": 1.0}},
                                         "psi": {"payoff": {"kind": "put", "K": 1.0}}})
    cfg.update(over)
    return cfg


def test_malformed_json_exits_2(tmp_path, capsys):
    code, _ = run(tmp_path, '{"case": "bvp",')
    assert code == 2
    assert "cfg.json" in capsys.readouterr().err
    assert main(["--config", str(tmp_path / "missing.json")]) == 2


def test_validation_lists_every_problem():
    with pytest.raises(ConfigValidationError) as err:
        validate({"case": "bvp", "operator": {"heston": {**HESTON, "rho": 1.5, "vol": 1}},
                  "domain": {"bounds": [[-3, 3], [0, 1]]}, "grid": {}, "colour": "blue"})
    text = "\n".join(err.value.problems)
    for part in ("unknown key colour", "unknown key operator.heston.vol", "grid.n"):
        assert part in text


@pytest.mark.parametrize("cfg", [
    bvp_cfg(case="nonsense"),
    bvp_cfg(operator={"heston": HESTON, "constant": {}}),
    bvp_cfg(solver={"omega": 2.5}),
    bvp_cfg(grid={"n": 2}),
    bvp_cfg(domain={"bounds": [[-3, 3], [0.5, 1]]}),
    put_cfg(data={"f": 0.0, "g": 0.0, "psi": {"payoff": {"kind": "put", "K": 1.0}}}),
])
def test_invalid_configs_exit_3(tmp_path, cfg):
    code, _ = run(tmp_path, cfg)
    assert code == 3


def test_bvp_run_writes_solution_and_report(tmp_path):
    code, out = run(tmp_path, bvp_cfg(), "--acceptance")
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["exit_status"] == 0 and rep["monotonicity"]["passed"]
    assert rep["max_abs_u"] <= rep["apriori_bound"]["value"]
    field = read_field_csv(out / "solution.csv")
    assert field["value"].size == 17 * 9
    assert np.abs(field["value"]).max() == rep["max_abs_u"]


def test_report_is_sorted_and_exact(tmp_path):
    code, out = run(tmp_path, bvp_cfg())
    text = (out / "report.json").read_text()
    rep = json.loads(text)
    assert list(rep) == sorted(rep)
    value = read_field_csv(out / "solution.csv")["value"]
    assert rep["max_abs_u"] == float(np.abs(value).max())


def test_runs_are_deterministic(tmp_path):
    def strip(r):
        r.pop("timings", None)
        return r

    _, out = run(tmp_path, bvp_cfg())
    first = strip(json.loads((out / "report.json").read_text()))
    _, out = run(tmp_path, bvp_cfg())
    assert strip(json.loads((out / "report.json").read_text())) == first


def test_solver_failure_exits_4(tmp_path):
    code, out = run(tmp_path, bvp_cfg(solver={"method": "sor", "max_iter": 2, "tol": 1e-14}))
    assert code == 4
    assert json.loads((out / "report.json").read_text())["error"]["kind"] == "solver"


@pytest.mark.parametrize("method", ["psor", "policy", "penalized"])
def test_obstacle_run(tmp_path, method):
    code, out = run(tmp_path, put_cfg(solver={"method": method, "tol": 1e-11}), "--acceptance")
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    for name in ("solution", "mask", "residual"):
        assert (out / f"{name}.csv").exists()
    mask = read_field_csv(out / "mask.csv")["value"]
    assert set(np.unique(mask)) <= {0.0, 1.0}
    assert rep["solve"]["active_count"] > 0


def test_perron_cases(tmp_path):
    code, out = run(tmp_path, bvp_cfg(case="perron-bvp", perron={"radius": 6, "overlap": 2, "tol": 1e-10}),
                    "--acceptance")
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["perron"]["converged"] and rep["perron"]["gap_to_reference"] <= 1e-8
    code, out = run(tmp_path, put_cfg(case="perron-obstacle", perron={"radius": 6, "overlap": 2, "tol": 1e-10},
                                      solver={"tol": 1e-12}), "--acceptance")
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["perron"]["gap_to_reference"] <= 1e-8


def test_transform_check_table(tmp_path):
    code, out = run(tmp_path, {"case": "transform-check", "transform": {"samples": [5, 3]}}, "--acceptance")
    assert code == 0
    lines = (out / "transform.csv").read_text().splitlines()
    assert lines[0].startswith("w1,wd,a11,a12,a22,b1,b2,c")
    assert len(lines) == 1 + 15


def verify_cfg(**ver):
    return {"case": "verify", "operator": {"heston": HESTON}, "domain": {"bounds": [[-2, 2], [0, 1]]},
            "verify": {"levels": [[9, 9], [17, 17], [33, 33]], "mms_tol": 0.1, **ver}}


def test_verify_clean_and_with_fault(tmp_path):
    code, out = run(tmp_path, verify_cfg(), "--seed", "3")
    assert code == 0
    rep = json.loads((out / "report.json").read_text())
    assert all(r["passed"] for r in rep["oracles"])
    code, out = run(tmp_path, verify_cfg(inject_fault="assembly_sign"), "--seed", "3")
    assert code == 5
    rep = json.loads((out / "report.json").read_text())
    assert rep["error"]["kind"] == "oracle-mismatch"
    assert any(not r["passed"] for r in rep["oracles"])
