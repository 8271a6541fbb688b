import csv
import json
import shutil
import subprocess

import pytest

from drtraffic import cli
from drtraffic import scenarios as S


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def scenario_file(tmp_path, name="freeway-free", edit=None):
    doc = S.scenario_to_dict(S.builtin(name))
    if edit:
        edit(doc)
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_validate_builtin():
    assert cli.main(["validate", "freeway-free"]) == cli.EXIT_OK
    assert cli.main(["validate", "--scenario", "urban-grid"]) == cli.EXIT_OK


def test_missing_file_is_io_error(tmp_path):
    assert cli.main(["validate", str(tmp_path / "none.json")]) == cli.EXIT_IO


def test_malformed_file_is_io_error(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["validate", str(bad)]) == cli.EXIT_IO
    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps({"links": []}))
    assert cli.main(["validate", str(partial)]) == cli.EXIT_IO


def test_non_psd_covariance_is_domain_error(tmp_path):
    def edit(doc):
        doc["nodes"][0]["Gamma"] = [0.005, 0.0, 0.0, -0.001]

    path = scenario_file(tmp_path, edit=edit)
    assert cli.main(["validate", path]) == cli.EXIT_DOMAIN
    assert cli.main(["solve", "--scenario", path, "--alpha", "0.1", "--out", str(tmp_path / "o")]) == cli.EXIT_DOMAIN


def test_bad_alpha_is_domain_error(tmp_path):
    assert cli.main(["solve", "--scenario", "freeway-free", "--alpha", "0.7", "--out", str(tmp_path)]) == cli.EXIT_DOMAIN


def test_infeasible_is_solver_failure(tmp_path):
    def edit(doc):
        doc["name"] = "jammed"
        for link in doc["links"]:
            if link["id"] in (2, 5):
                link["init_density"] = [0.225, 0.225]

    path = scenario_file(tmp_path, "freeway-congested", edit)
    out = tmp_path / "o"
    code = cli.main(["solve", "--scenario", path, "--mode", "det", "--out", str(out)])
    # jammed interior links leave no room for the queued mainline vehicles
    assert code == cli.EXIT_SOLVER
    assert not (out / "controls.csv").exists()


@pytest.fixture(scope="module")
def det_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("det")
    assert cli.main(["solve", "--scenario", "freeway-partial", "--mode", "det", "--out", str(out)]) == 0
    return out


def test_controls_layout(det_run):
    rows = read_rows(det_run / "controls.csv")
    assert list(rows[0]) == cli.CONTROL_HEADER
    per_link = {}
    for r in rows:
        per_link.setdefault(r["link_id"], []).append(int(r["time_step"]))
    assert set(per_link) == {"1", "4", "7", "8"}
    assert all(v == list(range(1, 26)) for v in per_link.values())
    man = json.loads((det_run / "manifest.json").read_text())
    assert man["command"] == "solve" and "controls.csv" in man["outputs"]


def test_det_output_is_byte_identical(det_run, tmp_path):
    assert cli.main(["solve", "--scenario", "freeway-partial", "--mode", "det", "--out", str(tmp_path)]) == 0
    for name in ("controls.csv", "objective.csv", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (det_run / name).read_bytes()


def test_zero_cov_objective_matches_det(det_run, tmp_path):
    args = ["solve", "--scenario", "freeway-partial", "--alpha", "0.1", "--zero-cov", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    det = float(read_rows(det_run / "objective.csv")[0]["objective"])
    rob = float(read_rows(tmp_path / "objective.csv")[0]["objective"])
    assert rob == pytest.approx(det, rel=1e-6)


def test_solve_and_simulate_validation(tmp_path):
    out = tmp_path / "run"
    args = ["solve", "--scenario", "freeway-validation", "--alpha", "0.1", "--with-base", "--mc-samples", "500", "--out", str(out)]
    assert cli.main(args) == 0
    objs = {r["alpha"]: r for r in read_rows(out / "objective.csv")}
    assert set(objs) == {"0.1", "base"}
    mc = read_rows(out / "montecarlo.csv")
    assert mc and all(float(r["satisfaction_rate"]) >= 0.85 for r in mc)
    sim = tmp_path / "sim"
    assert cli.main(["simulate", "--scenario", "freeway-validation", "--controls", str(out / "controls.csv"), "--out", str(sim)]) == 0
    summary = {r["alpha"]: r for r in read_rows(sim / "summary.csv")}
    assert float(summary["0.1"]["blocked_total_veh"]) < float(summary["base"]["blocked_total_veh"])
    metrics = read_rows(sim / "metrics_0.1.csv")
    assert list(metrics[0]) == ["t_s", "blocked_total_veh", "throughput_link6_veh"]


def test_simulate_missing_controls(tmp_path):
    args = ["simulate", "--scenario", "freeway-free", "--controls", str(tmp_path / "none.csv"), "--out", str(tmp_path)]
    assert cli.main(args) == cli.EXIT_IO


def test_console_script():
    exe = shutil.which("drtraffic")
    if exe is None:
        pytest.skip("console script not installed")
    proc = subprocess.run([exe, "validate", "freeway-free"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "ok" in proc.stdout
