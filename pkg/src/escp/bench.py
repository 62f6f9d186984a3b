"""Batch comparison of solver variants over seeded random start/goal pairs.

Every trial is independent: trial ``i`` draws its start and goal from a
generator seeded by ``(seed, i)``, so all variants see the same pairs and the
sweep is reproducible regardless of how trials are scheduled on threads.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import VARIANTS, ProblemConfig, randomize
from .scp import run_escp
from .transcription import objective_terms, trajectory_diagnostics

TRIAL_COLUMNS = (
    "scenario", "trial", "variant", "success", "termination", "scp_iterations", "polish_attempts",
    "polish_success", "dynamics_error", "manifold_error", "trapezoid_defect", "true_cost", "polished_cost",
    "penetration", "error",
)
SUMMARY_COLUMNS = (
    "scenario", "variant", "trials", "successes", "success_rate", "mean_scp_iterations", "mean_dynamics_error",
    "mean_manifold_error", "mean_true_cost", "normalized_cost", "polish_successes", "polish_not_worse",
)
TIMING_COLUMNS = ("scenario", "trial", "variant", "wall_time")


@dataclass
class TrialResult:
    scenario: str
    trial: int
    variant: str
    success: bool = False
    termination: str = "error"
    scp_iterations: int = 0
    polish_attempts: int = 0
    polish_success: bool = False
    dynamics_error: float = math.nan
    manifold_error: float = math.nan
    trapezoid_defect: float = math.nan
    true_cost: float = math.nan
    polished_cost: float = math.nan
    penetration: float = math.nan
    error: str = ""
    wall_time: float = 0.0

    def row(self) -> dict:
        return {k: getattr(self, k) for k in TRIAL_COLUMNS}


@dataclass
class BenchResult:
    trials: list
    summary: list = field(default_factory=list)

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"trials": out / "bench_trials.csv", "summary": out / "bench_summary.csv",
                 "timing": out / "bench_timing.csv"}
        _write_csv(paths["trials"], TRIAL_COLUMNS, [t.row() for t in self.trials])
        _write_csv(paths["summary"], SUMMARY_COLUMNS, self.summary)
        _write_csv(paths["timing"], TIMING_COLUMNS + ("normalized_mean_time",), _timing_rows(self.trials))
        return paths


def _fmt(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return repr(v)  # shortest round-trip repr keeps the file bitwise stable
    return v


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write("# escp bench v1\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def _timing_rows(trials):
    rows = [{"scenario": t.scenario, "trial": t.trial, "variant": t.variant, "wall_time": t.wall_time} for t in trials]
    means = {}
    for t in trials:
        means.setdefault((t.scenario, t.variant), []).append(t.wall_time)
    means = {k: float(np.mean(v)) for k, v in means.items()}
    for r in rows:
        best = min(v for (s, _), v in means.items() if s == r["scenario"])
        r["normalized_mean_time"] = means[(r["scenario"], r["variant"])] / best if best > 0 else math.nan
    return rows


def trial_config(cfg: ProblemConfig, trial: int, seed: int) -> ProblemConfig:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(trial)]))
    return randomize(cfg, rng)


def run_trial(cfg: ProblemConfig, trial: int, variant: str, seed: int, nodes: Optional[int] = None) -> TrialResult:
    """One variant on one random start/goal pair; failures are recorded, never raised."""
    res = TrialResult(cfg.name, trial, variant)
    t0 = time.perf_counter()
    try:
        tc = trial_config(cfg, trial, seed)
        prob = tc.build_problem()
        params = tc.scp_params(variant)
        run = run_escp(prob, params, nodes or tc.nodes)
        diag = trajectory_diagnostics(prob, run.final, run.omega)
        res.termination = run.termination
        res.scp_iterations = run.scp_iterations
        res.polish_attempts = run.polish_attempts
        res.dynamics_error = diag["dynamics_error"]
        res.manifold_error = diag["manifold_residual"]
        res.trapezoid_defect = diag["trapezoid_defect"]
        res.true_cost = objective_terms(prob, run.final, run.omega)["cost"]
        res.penetration = diag["penetration"]
        if run.polish is not None:
            res.polish_success = bool(run.polish.success)
            res.polished_cost = float(run.polish.cost)
        res.success = bool(run.converged and diag["penetration"] <= params.violation_tol)
    except Exception as exc:  # a failed trial is data, not a crash
        res.error = f"{type(exc).__name__}: {exc}"
    res.wall_time = time.perf_counter() - t0
    return res


def summarize(trials: Sequence[TrialResult]) -> list[dict]:
    groups: dict = {}
    for t in trials:
        groups.setdefault((t.scenario, t.variant), []).append(t)
    rows = []
    for (scen, var), ts in groups.items():
        ok = [t for t in ts if t.success]

        def mean(attr, pool=ok):
            vals = [getattr(t, attr) for t in pool]
            return float(np.mean(vals)) if vals else math.nan

        polished = [t for t in ts if t.polish_success]
        rows.append({
            "scenario": scen, "variant": var, "trials": len(ts), "successes": len(ok),
            "success_rate": len(ok) / len(ts), "mean_scp_iterations": mean("scp_iterations", ts),
            "mean_dynamics_error": mean("dynamics_error"), "mean_manifold_error": mean("manifold_error"),
            "mean_true_cost": mean("true_cost"), "polish_successes": len(polished),
            "polish_not_worse": sum(t.polished_cost <= t.true_cost + 1e-9 for t in polished),
        })
    for scen in {r["scenario"] for r in rows}:
        costs = [r["mean_true_cost"] for r in rows if r["scenario"] == scen and np.isfinite(r["mean_true_cost"])]
        top = max(costs) if costs else math.nan
        for r in rows:
            if r["scenario"] == scen:
                r["normalized_cost"] = r["mean_true_cost"] / top if top and np.isfinite(top) else math.nan
    return rows


def bench(
    configs: Sequence[ProblemConfig],
    trials: int,
    seed: int = 0,
    variants: Sequence[str] = VARIANTS,
    workers: int = 4,
    nodes: Optional[int] = None,
) -> BenchResult:
    """Run every (config, trial, variant) combination on a thread pool; merge by trial index."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown variant(s) {bad}; choose from {list(VARIANTS)}")
    jobs = [(c, i, v) for c in configs for i in range(trials) for v in variants]
    if workers <= 1:
        results = [run_trial(c, i, v, seed, nodes) for c, i, v in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda job: run_trial(job[0], job[1], job[2], seed, nodes), jobs))
    order = {v: k for k, v in enumerate(variants)}
    results.sort(key=lambda t: (t.scenario, t.trial, order[t.variant]))
    return BenchResult(results, summarize(results))
