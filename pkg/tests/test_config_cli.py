import json

import numpy as np
import pytest

from conftest import DI_COST, bundled
from escp.cli import (
    ADJOINT_HEADER,
    TRAJECTORY_HEADER,
    CONVERGED,
    ArtifactError,
    main,
    read_trajectory_csv,
    resolve_config,
)
from escp.config import ConfigError, ProblemConfig, randomize


@pytest.fixture(scope="module")
def di_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("di")
    code = main(["solve", "double_integrator", "--out", str(out), "--dump-qp"])
    return code, out


@pytest.fixture(scope="module")
def desk_out(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    code = main(["solve", "freeflyer_desk", "--out", str(out), "--variant", "escp"])
    return code, out


# -- config -------------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["double_integrator", "freeflyer_desk", "freeflyer_suite", "torus_suite"])
def test_bundled_configs_round_trip(name, tmp_path):
    cfg = ProblemConfig.load(bundled(name))
    cfg.save(tmp_path / "c.json")
    again = ProblemConfig.load(tmp_path / "c.json")
    assert again.to_dict() == cfg.to_dict()
    assert ProblemConfig.loads(cfg.dumps()).to_dict() == cfg.to_dict()
    prob = again.build_problem()
    assert prob.N == len(cfg.x0)


def _raw(name="double_integrator"):
    return json.loads(bundled(name).read_text())


def test_waypoint_beyond_horizon_names_the_field():
    raw = _raw()
    raw["waypoints"][0]["time"] = 2.0
    with pytest.raises(ConfigError, match=r"field 'waypoints\[0\]\.time' = 2\.0 exceeds the horizon 1\.0"):
        ProblemConfig.from_dict(raw).validate()


@pytest.mark.parametrize("edit, pattern", [
    (lambda r: r.pop("x0"), "missing required field 'x0'"),
    (lambda r: r.update(bogus=1), "unknown field"),
    (lambda r: r.update(nodes=1), "field 'nodes'"),
    (lambda r: r.update(variant="fast"), "field 'variant'"),
    (lambda r: r["model"].update(name="rocket"), "field 'model.name'"),
    (lambda r: r.update(scp={"Delta_zero": 1.0}), "field 'scp'"),
    (lambda r: r.update(waypoints=[]), "field 'waypoints'"),
])
def test_invalid_configs_name_the_field(edit, pattern):
    raw = _raw()
    edit(raw)
    with pytest.raises(ConfigError, match=pattern):
        ProblemConfig.from_dict(raw).validate()


def test_json_syntax_error_reports_line_and_column():
    text = '{\n  "name": "x",\n  "horizon": 1.0,,\n}'
    with pytest.raises(ConfigError, match=r"line 3, column \d+"):
        ProblemConfig.loads(text, source="broken.json")


def test_manifold_mismatch_rejected():
    raw = _raw()
    raw["manifold"] = ["sphere:2"]
    with pytest.raises(ConfigError, match="manifold"):
        ProblemConfig.from_dict(raw).build_problem()


def test_unknown_config_lists_bundled_names():
    with pytest.raises(ConfigError, match="freeflyer_desk"):
        resolve_config("no_such_problem")


def test_randomize_is_seeded_and_collision_free():
    cfg = ProblemConfig.load(bundled("torus_suite"))
    a = randomize(cfg, np.random.default_rng(3))
    b = randomize(cfg, np.random.default_rng(3))
    assert a.to_dict() == b.to_dict()
    prob = a.build_problem()
    assert prob.manifold.residual_norm(prob.x0) <= 1e-12
    assert np.min(prob.clearance(prob.x0[None])) >= 0.1 - 1e-12


def test_randomize_requires_section():
    with pytest.raises(ConfigError, match="randomize"):
        randomize(ProblemConfig.load(bundled("double_integrator")), np.random.default_rng(0))


# -- solve --------------------------------------------------------------------------------


def test_solve_double_integrator(di_out):
    code, out = di_out
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["termination"] in CONVERGED
    assert summary["cost"] == pytest.approx(DI_COST, abs=1e-6)
    for name in ("config.json", "iterations.jsonl", "trajectory.csv", "adjoints.csv", "trajectory_shooting.csv"):
        assert (out / name).exists(), name
    lines = (out / "iterations.jsonl").read_text().splitlines()
    assert len(lines) == summary["scp_iterations"] and "omega" in json.loads(lines[0])


def test_artifact_headers_are_versioned(di_out):
    _, out = di_out
    assert (out / "trajectory.csv").read_text().splitlines()[0] == TRAJECTORY_HEADER
    assert (out / "adjoints.csv").read_text().splitlines()[0] == ADJOINT_HEADER
    assert json.loads((out / "summary.json").read_text())["schema"].endswith("1")
    cols = (out / "trajectory.csv").read_text().splitlines()[1].split(",")
    assert cols[0] == "t" and "source" in cols and "dynamics_defect" in cols


def test_dump_qp_files(di_out):
    _, out = di_out
    for name in ("qp_initial.mtx", "qp_final.mtx"):
        text = (out / name).read_text()
        assert "% block H" in text and "% block Aeq" in text
    traj, _ = read_trajectory_csv(out / "trajectory.csv", 2, 1)
    assert traj.d == 100


def test_solve_desk_clears_obstacles(desk_out, desk_config):
    code, out = desk_out
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["min_clearance"] >= desk_config.d_safe - 1e-3
    assert summary["max_manifold_residual"] <= 1e-2


def test_check_all_green(di_out, capsys):
    _, out = di_out
    assert main(["check", "double_integrator", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "[FAIL]" not in text and text.count("[PASS]") >= 3


def test_check_refuses_soft_constraint_run(tmp_path, capsys):
    raw = _raw()
    raw["control_lo"], raw["control_hi"] = [-0.1], [0.1]
    raw["scp"] = {"omega_max": 100.0}
    raw["variant"] = "escp"
    path = tmp_path / "tight.json"
    path.write_text(json.dumps(raw))
    out = tmp_path / "run"
    assert main(["solve", str(path), "--out", str(out), "--nodes", "20"]) == 2
    capsys.readouterr()
    assert main(["check", str(path), "--out", str(out)]) == 1
    assert "soft constraints only" in capsys.readouterr().err


def test_check_names_corrupted_row(di_out, tmp_path, capsys):
    import shutil

    _, src = di_out
    out = tmp_path / "copy"
    shutil.copytree(src, out)
    lines = (out / "trajectory.csv").read_text().splitlines()
    fields = lines[6].split(",")
    fields[1] = "abc"
    lines[6] = ",".join(fields)
    (out / "trajectory.csv").write_text("\n".join(lines) + "\n")
    assert main(["check", "double_integrator", "--out", str(out)]) == 1
    assert "row 7" in capsys.readouterr().err


def test_check_without_artifacts(tmp_path, capsys):
    assert main(["check", "double_integrator", "--out", str(tmp_path / "empty")]) == 1
    assert "missing summary.json" in capsys.readouterr().err


def test_missing_header_rejected(di_out, tmp_path):
    _, src = di_out
    p = tmp_path / "t.csv"
    p.write_text("\n".join((src / "trajectory.csv").read_text().splitlines()[1:]))
    with pytest.raises(ArtifactError, match="schema header"):
        read_trajectory_csv(p, 2, 1)


def test_bad_config_exits_one(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    assert main(["solve", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "line 1" in capsys.readouterr().err


def test_seed_selects_random_instance(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "torus_suite", "--seed", "5", "--nodes", "20", "--out", str(a)]) == 0
    assert main(["solve", "torus_suite", "--seed", "5", "--nodes", "20", "--out", str(b)]) == 0
    assert (a / "trajectory.csv").read_text() == (b / "trajectory.csv").read_text()
    cfg = json.loads((a / "config.json").read_text())
    assert cfg["x0"] != _raw("torus_suite")["x0"]
