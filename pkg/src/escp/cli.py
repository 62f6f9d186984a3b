"""Command line interface: ``escp solve | bench | check``.

``solve`` writes into ``--out`` (default ``escp_out/<config name>``):

* ``trajectory.csv``: ``t, x0..x{N-1}, u0..u{m-1}, dynamics_defect, manifold_residual, source``
* ``trajectory_shooting.csv``: the polished extremal, same schema, when a polish succeeded
* ``iterations.jsonl``: one record per SCP iteration
* ``adjoints.csv``: ``t, gamma*, gamma_minus*, gamma_plus*``
* ``summary.json`` and a copy of the resolved ``config.json``
* ``qp_initial.mtx`` / ``qp_final.mtx`` with ``--dump-qp``

Exit codes: 0 converged, 2 soft constraints only (infeasible at the weight cap),
1 errors and runs that hit the iteration cap.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .bench import bench, trial_config
from .config import VARIANTS, ConfigError, ProblemConfig, bundled_config_dir
from .dynamics import DynamicsError
from .manifold import ManifoldError
from .problem import ProblemError
from .qp import Adjoints
from .scp import ScpError, ScpRun, initialize, pmp_residuals, run_escp
from .transcription import DiscreteTrajectory, TranscriptionError, build_subproblem, trajectory_diagnostics

TRAJECTORY_HEADER = "# escp trajectory v1"
ADJOINT_HEADER = "# escp adjoints v1"
SUMMARY_SCHEMA = "escp summary v1"
EXIT_OK, EXIT_ERROR, EXIT_SOFT = 0, 1, 2
CONVERGED = ("fixed_point", "tolerance_converged")


class ArtifactError(RuntimeError):
    pass


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _clean(v):
    """JSON has no inf/nan; write them as strings."""
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def resolve_config(path: str) -> Path:
    """A path, or the name of a bundled config."""
    p = Path(path)
    if p.exists():
        return p
    cand = bundled_config_dir() / (path if path.endswith(".json") else f"{path}.json")
    if cand.exists():
        return cand
    raise ConfigError(f"config {path!r} not found (bundled: {', '.join(sorted(q.stem for q in bundled_config_dir().glob('*.json')))})")


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def trajectory_columns(N: int, m: int) -> list[str]:
    return ["t"] + [f"x{i}" for i in range(N)] + [f"u{j}" for j in range(m)] + ["dynamics_defect", "manifold_residual", "source"]


def write_trajectory_csv(path, times, states, controls, defect, manifold, source: str) -> None:
    N, m = states.shape[1], controls.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(TRAJECTORY_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trajectory_columns(N, m))
        for k in range(len(times)):
            w.writerow([repr(float(times[k]))] + [repr(float(v)) for v in states[k]] + [repr(float(v)) for v in controls[k]]
                       + [repr(float(defect[k])), repr(float(manifold[k])), source])


def read_trajectory_csv(path, N: int, m: int) -> tuple[DiscreteTrajectory, np.ndarray]:
    """Parse a trajectory CSV; errors name the offending row (1-based file line)."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc.strerror}") from None
    if not lines or lines[0].strip() != TRAJECTORY_HEADER:
        raise ArtifactError(f"{path}: line 1: missing schema header {TRAJECTORY_HEADER!r}")
    cols = trajectory_columns(N, m)
    rows = list(csv.reader(lines[1:]))
    if not rows or rows[0] != cols:
        raise ArtifactError(f"{path}: line 2: column header does not match the expected {len(cols)} columns")
    data = []
    for lineno, row in enumerate(rows[1:], start=3):
        if len(row) != len(cols):
            raise ArtifactError(f"{path}: row {lineno}: expected {len(cols)} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[:-1]]
        except ValueError:
            bad = next(c for c, v in zip(cols, row) if not _is_float(v))
            raise ArtifactError(f"{path}: row {lineno}: non-numeric value in column {bad!r}") from None
        if not all(math.isfinite(v) for v in vals[: 1 + N + m]):
            raise ArtifactError(f"{path}: row {lineno}: non-finite state or control")
        data.append(vals)
    if len(data) < 2:
        raise ArtifactError(f"{path}: needs at least two data rows")
    A = np.array(data)
    try:
        traj = DiscreteTrajectory(A[:, 0], A[:, 1:1 + N], A[:, 1 + N:1 + N + m])
    except TranscriptionError as exc:
        raise ArtifactError(f"{path}: {exc}") from None
    return traj, A[:, 1 + N + m:]


def _is_float(v) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def write_adjoints_csv(path, times, adj: Adjoints) -> None:
    N = adj.gamma.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(ADJOINT_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"gamma{i}" for i in range(N)] + [f"gamma_minus{i}" for i in range(N)]
                   + [f"gamma_plus{i}" for i in range(N)])
        for k in range(len(times)):
            w.writerow([repr(float(times[k]))] + [repr(float(v)) for v in np.concatenate(
                [adj.gamma[k], adj.gamma_minus[k], adj.gamma_plus[k]])])


def read_adjoints_csv(path, N: int, lam, nu_init) -> Adjoints:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc.strerror}") from None
    if not lines or lines[0].strip() != ADJOINT_HEADER:
        raise ArtifactError(f"{path}: line 1: missing schema header {ADJOINT_HEADER!r}")
    rows = list(csv.reader(lines[2:]))
    data = []
    for lineno, row in enumerate(rows, start=3):
        if len(row) != 1 + 3 * N:
            raise ArtifactError(f"{path}: row {lineno}: expected {1 + 3 * N} fields, got {len(row)}")
        try:
            data.append([float(v) for v in row])
        except ValueError:
            raise ArtifactError(f"{path}: row {lineno}: non-numeric value") from None
    A = np.array(data)
    return Adjoints(A[:, 1:1 + N], A[:, 1 + N:1 + 2 * N], A[:, 1 + 2 * N:], [np.asarray(l, float) for l in lam],
                    np.asarray(nu_init, float))


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def _load(args) -> ProblemConfig:
    cfg = ProblemConfig.load(resolve_config(args.config))
    if args.variant:
        cfg.variant = args.variant
    if args.nodes is not None:
        cfg.nodes = args.nodes
    if args.seed is not None:
        cfg.seed = args.seed
        if cfg.randomize:
            variant, nodes = cfg.variant, cfg.nodes
            cfg = trial_config(cfg, 0, args.seed)
            cfg.variant, cfg.nodes = variant, nodes
    cfg.validate()
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if args.out else Path("escp_out") / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_solve(args) -> int:
    cfg = _load(args)
    prob = cfg.build_problem()
    params = cfg.scp_params()
    out = _out_dir(args, cfg)
    cfg.save(out / "config.json")
    log = open(out / "iterations.jsonl", "w")

    def on_iteration(rec):
        log.write(json.dumps(_clean(rec), default=_json_default) + "\n")
        log.flush()

    try:
        run = run_escp(prob, params, cfg.nodes, on_iteration=on_iteration)
    finally:
        log.close()
    diag = trajectory_diagnostics(prob, run.final, run.omega)
    traj = run.final
    write_trajectory_csv(out / "trajectory.csv", traj.times, traj.states, traj.controls,
                         diag["node_dynamics_error"], diag["node_manifold_residual"], "scp")
    if run.adjoints is not None:
        write_adjoints_csv(out / "adjoints.csv", traj.times, run.adjoints)
    polish = run.polish
    if polish is not None and polish.success:
        man = np.max(np.abs(prob.manifold.constraint_residual(polish.states)), axis=1) if prob.manifold.codim else np.zeros(len(polish.times))
        write_trajectory_csv(out / "trajectory_shooting.csv", polish.times, polish.states, polish.controls,
                             np.zeros(len(polish.times)), man, "shooting")
    if args.dump_qp:
        build_subproblem(prob, initialize(prob, cfg.nodes), params.Delta0, params.omega0, params).dump(out / "qp_initial.mtx")
        build_subproblem(prob, traj, run.Delta, run.omega, params).dump(out / "qp_final.mtx")

    summary = {
        "schema": SUMMARY_SCHEMA,
        "name": cfg.name,
        "variant": cfg.variant,
        "nodes": cfg.nodes,
        "termination": run.termination,
        "scp_iterations": run.scp_iterations,
        "cost": polish.cost if polish is not None and polish.success else diag["cost"],
        "scp_cost": diag["cost"],
        "energy": diag["energy"],
        "omega": run.omega,
        "Delta": run.Delta,
        "max_dynamics_defect": diag["dynamics_error"],
        "max_trapezoid_defect": diag["trapezoid_defect"],
        "max_flow_defect": diag["flow_defect"],
        "max_manifold_residual": diag["manifold_residual"],
        "penetration": diag["penetration"],
        "min_clearance": diag["min_clearance"],
        "waypoint_violation": diag["waypoint_violation"],
        "wall_time": run.wall_time,
        "polish_attempts": run.polish_attempts,
        "polish": None if polish is None else {
            "success": polish.success, "residual": polish.residual, "newton_steps": polish.steps,
            "cost": polish.cost, "scp_cost": polish.scp_cost, "beats_scp": polish.beats_scp,
            "hamiltonian_drift": polish.hamiltonian_drift,
        },
        "waypoint_multipliers": [np.asarray(l).tolist() for l in run.waypoint_multipliers],
        "initial_multiplier": None if run.adjoints is None else run.adjoints.nu_init.tolist(),
        "warnings": list(getattr(prob, "warnings", [])),
    }
    (out / "summary.json").write_text(json.dumps(_clean(summary), indent=2, default=_json_default) + "\n")
    print(f"{cfg.name} [{cfg.variant}] {run.termination} after {run.scp_iterations} iterations, "
          f"cost {summary['cost']:.10g}, manifold residual {diag['manifold_residual']:.3e}, "
          f"dynamics defect {diag['dynamics_error']:.3e}, {run.wall_time:.2f} s -> {out}")
    if run.termination == "soft_constraints_only":
        print("soft constraints only: the obstacle weight hit its cap while still violating", file=sys.stderr)
        return EXIT_SOFT
    if run.termination not in CONVERGED:
        print(f"not converged: {run.termination}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    target = Path(args.config) if Path(args.config).exists() else None
    if target is not None and target.is_dir():
        paths = sorted(target.glob("*.json"))
    else:
        paths = [resolve_config(args.config)]
    configs = [ProblemConfig.load(p) for p in paths]
    configs = [c for c in configs if c.randomize]
    if not configs:
        raise ConfigError(f"no config with a 'randomize' section under {args.config}")
    variants = args.variant_list or list(VARIANTS)
    seed = 0 if args.seed is None else args.seed
    res = bench(configs, args.trials, seed, variants, workers=args.workers, nodes=args.nodes)
    out = Path(args.out) if args.out else Path("escp_out") / "bench"
    paths = res.write(out)
    for r in res.summary:
        print(f"{r['scenario']:>16} {r['variant']:>18}: success {r['successes']}/{r['trials']}, "
              f"iterations {r['mean_scp_iterations']:.2f}, manifold {r['mean_manifold_error']:.3e}, "
              f"cost {r['mean_true_cost']:.6g} (normalized {r['normalized_cost']:.3f})")
    print(f"wrote {paths['trials']}, {paths['summary']}, {paths['timing']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def certify(cfg: ProblemConfig, out: Path) -> tuple[bool, list[str]]:
    """Recompute the PMP certificate from stored artifacts; returns (all green, report lines)."""
    summary_path = out / "summary.json"
    if not summary_path.exists():
        raise ArtifactError(f"no run artifacts in {out} (missing summary.json); run 'escp solve' first")
    try:
        summary = json.loads(summary_path.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{summary_path}: line {exc.lineno}: {exc.msg}") from None
    if summary.get("schema") != SUMMARY_SCHEMA:
        raise ArtifactError(f"{summary_path}: unknown schema {summary.get('schema')!r}")
    term = summary.get("termination")
    if term == "soft_constraints_only":
        raise ArtifactError("run ended with soft constraints only (the obstacle weight reached its cap while the "
                            "trajectory still violated the safety margin); no extremal exists to certify")
    if term not in CONVERGED:
        raise ArtifactError(f"run did not converge (termination {term!r}); refusing to certify")
    prob = cfg.build_problem()
    traj, _ = read_trajectory_csv(out / "trajectory.csv", prob.N, prob.m)
    adj = read_adjoints_csv(out / "adjoints.csv", prob.N, summary["waypoint_multipliers"], summary["initial_multiplier"])
    if adj.gamma.shape[0] != traj.d:
        raise ArtifactError("adjoints.csv and trajectory.csv have different node counts")
    run = ScpRun([traj], [], term, traj, adj, omega=float(summary["omega"]))
    rep = pmp_residuals(prob, run)
    th = cfg.check_thresholds()
    qp_tol = cfg.scp_params().qp_tol
    adj_lim = th["adjoint_rel"] * (1.0 + rep["gamma_inf_norm"])
    max_lim = th["maximality_factor"] * qp_tol
    full = [w.indices is None or len(w.indices) == prob.N for w in prob.waypoints]
    trans_gate = max([t for t, f in zip(rep["transversality"], full) if f], default=0.0)
    checks = [
        ("adjoint ODE residual", rep["adjoint_residual"], adj_lim),
        ("maximality gap (interior nodes)", rep["maximality_gap"], max_lim),
        ("transversality (full-state waypoints)", trans_gate, th["transversality"]),
    ]
    pol = summary.get("polish")
    if pol and pol.get("success"):
        checks.append(("Hamiltonian drift (polished)", float(pol["hamiltonian_drift"]), 1e-6))
    lines, ok = [], True
    for name, val, lim in checks:
        good = bool(val <= lim)
        ok &= good
        lines.append(f"[{'PASS' if good else 'FAIL'}] {name}: {val:.3e} <= {lim:.3e}")
    lines.append(f"[info] p0 = {rep['p0']:.0f}, normal extremal: {rep['normal_extremal']}, "
                 f"||gamma||_inf = {rep['gamma_inf_norm']:.3e}, interior control nodes: {rep['interior_nodes']}")
    lines.append(f"[info] maximality gap over all nodes: {rep['maximality_gap_all']:.3e}")
    lines.append(f"[info] max costate component normal to the manifold: {rep['costate_normal_max']:.3e}")
    lines.append(f"[info] manifold residual {summary['max_manifold_residual']:.3e}, dynamics defect "
                 f"{summary['max_dynamics_defect']:.3e}")
    return ok, lines


def cmd_check(args) -> int:
    cfg = _load(args)
    out = Path(args.out) if args.out else Path("escp_out") / cfg.name
    stored = out / "config.json"
    if stored.exists() and args.variant is None and args.nodes is None and args.seed is None:
        cfg = ProblemConfig.load(stored)
    ok, lines = certify(cfg, out)
    print("\n".join(lines))
    return EXIT_OK if ok else EXIT_ERROR


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="escp", description="Embedded sequential convex programming on manifolds")
    p.add_argument("--version", action="version", version=f"escp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="config file, directory (bench), or bundled config name")
        sp.add_argument("--out", help="artifact directory (default escp_out/<name>)")
        sp.add_argument("--nodes", type=int, help="number of grid nodes d")
        sp.add_argument("--seed", type=int, help="seed; with a 'randomize' section, solve that random instance")

    s = sub.add_parser("solve", help="run E-SCP on one problem and write artifacts")
    common(s)
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--dump-qp", action="store_true", help="write the first and last subproblems as Matrix Market")
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="compare variants over seeded random start/goal pairs")
    common(b)
    b.add_argument("--variant", dest="variant_list", action="append", choices=VARIANTS,
                   help="variant to include (repeatable; default all)")
    b.add_argument("--trials", type=int, default=20)
    b.add_argument("--workers", type=int, default=4)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("check", help="certify stored artifacts against the PMP conditions")
    common(c)
    c.add_argument("--variant", choices=VARIANTS)
    c.set_defaults(func=cmd_check)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArtifactError, ProblemError, ManifoldError, DynamicsError, TranscriptionError,
            ScpError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
