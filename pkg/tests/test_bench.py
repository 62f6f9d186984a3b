import csv
import math

import pytest

from conftest import bundled
from escp.bench import SUMMARY_COLUMNS, TIMING_COLUMNS, TRIAL_COLUMNS, bench, run_trial, summarize, trial_config
from escp.cli import main
from escp.config import ProblemConfig


@pytest.fixture(scope="module")
def torus_cfg():
    return ProblemConfig.load(bundled("torus_suite"))


def test_trial_config_is_seeded(torus_cfg):
    assert trial_config(torus_cfg, 2, 7).to_dict() == trial_config(torus_cfg, 2, 7).to_dict()
    assert trial_config(torus_cfg, 2, 7).x0 != trial_config(torus_cfg, 3, 7).x0


def test_bench_outputs_are_bitwise_reproducible(torus_cfg, tmp_path):
    a = bench([torus_cfg], 2, seed=4, variants=["escp", "penalized_manifold"], workers=3, nodes=20)
    b = bench([torus_cfg], 2, seed=4, variants=["escp", "penalized_manifold"], workers=1, nodes=20)
    pa, pb = a.write(tmp_path / "a"), b.write(tmp_path / "b")
    for key in ("trials", "summary"):
        assert pa[key].read_bytes() == pb[key].read_bytes()
    with open(pa["trials"]) as fh:
        assert fh.readline().startswith("# escp bench v")
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == TRIAL_COLUMNS
    assert [(r["trial"], r["variant"]) for r in rows] == [
        ("0", "escp"), ("0", "penalized_manifold"), ("1", "escp"), ("1", "penalized_manifold")]
    with open(pa["timing"]) as fh:
        fh.readline()
        assert tuple(next(csv.reader(fh)))[:len(TIMING_COLUMNS)] == TIMING_COLUMNS


def test_failed_trial_is_recorded_not_raised(torus_cfg):
    broken = ProblemConfig.from_dict({**torus_cfg.to_dict(), "name": "broken"})
    broken.randomize = {"kind": "no_such_sampler"}
    res = run_trial(broken, 0, "escp", 0)
    assert not res.success and res.termination == "error"
    assert "ConfigError" in res.error and "no_such_sampler" in res.error
    rows = summarize([res])
    assert rows[0]["successes"] == 0 and math.isnan(rows[0]["mean_true_cost"])


def test_summary_columns_and_normalization(torus_cfg):
    res = bench([torus_cfg], 1, seed=0, variants=["escp", "penalized_manifold"], workers=1, nodes=20)
    assert all(set(SUMMARY_COLUMNS) == set(r) for r in res.summary)
    norms = [r["normalized_cost"] for r in res.summary]
    assert max(norms) == pytest.approx(1.0)
    assert all(0 < v <= 1.0 for v in norms)


def test_bench_rejects_bad_arguments(torus_cfg):
    with pytest.raises(ValueError, match="trials"):
        bench([torus_cfg], 0)
    with pytest.raises(ValueError, match="unknown variant"):
        bench([torus_cfg], 1, variants=["fast"])


def test_bench_cli(tmp_path, capsys):
    out = tmp_path / "bench"
    code = main(["bench", "torus_suite", "--trials", "1", "--variant", "escp", "--nodes", "20",
                 "--workers", "1", "--out", str(out)])
    assert code == 0
    assert (out / "bench_trials.csv").exists() and (out / "bench_summary.csv").exists()
    assert "success 1/1" in capsys.readouterr().out
    assert main(["bench", "double_integrator", "--trials", "1", "--out", str(out)]) == 1
