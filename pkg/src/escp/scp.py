"""The E-SCP outer loop: linearize, solve the QP, update the trust region and penalty weight.

Acceptance uses an l1 merit function: true cost plus ``mu`` times the
nonlinear constraint residuals (initial state, trapezoid defects, waypoints).
At the linearization point the QP model reproduces that merit exactly, so the
ratio of actual to predicted decrease is a standard trust-region test.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .problem import OcpProblem
from .qp import Adjoints, extract_adjoints, solve_qp
from .transcription import (
    DiscreteTrajectory,
    ScpParams,
    build_subproblem,
    constraint_residuals,
    make_grid,
    model_cost,
    objective_terms,
    waypoint_nodes,
)

TERMINATIONS = ("soft_constraints_only", "fixed_point", "tolerance_converged", "iteration_cap")
FIXED_POINT_TOL = 1e-12  # relative sup-norm change that counts as an exact fixed point


class ScpError(RuntimeError):
    pass


@dataclass
class ScpRun:
    iterates: list  # accepted DiscreteTrajectory sequence, starting with the initialization
    records: list  # one dict per iteration
    termination: str
    final: DiscreteTrajectory
    adjoints: Optional[Adjoints]
    adjoint_history: list = field(default_factory=list)
    omega: float = 1.0
    Delta: float = 0.0
    wall_time: float = 0.0
    polish: object = None  # shooting.PolishResult of the successful polish, if any
    polish_attempts: int = 0

    @property
    def converged(self) -> bool:
        return self.termination in ("fixed_point", "tolerance_converged")

    @property
    def scp_iterations(self) -> int:
        return len(self.records)

    @property
    def waypoint_multipliers(self) -> list:
        return [] if self.adjoints is None else self.adjoints.lam


def initialize(prob: OcpProblem, d: int) -> DiscreteTrajectory:
    """Piecewise geodesic through ``x0`` and the waypoint targets, zero controls."""
    times = make_grid(prob, d)
    nodes = waypoint_nodes(prob, times)
    X = np.empty((d, prob.N))
    anchors = [(0, prob.x0)] + [(k, w.target) for k, w in zip(nodes, prob.waypoints)]
    X[0] = prob.x0
    for (k0, a), (k1, b) in zip(anchors, anchors[1:]):
        for k in range(k0 + 1, k1 + 1):
            X[k] = prob.manifold.geodesic_interpolate(a, b, (k - k0) / (k1 - k0))
    return DiscreteTrajectory(times, X, np.zeros((d, prob.m)))


def _merit(prob, traj, omega, mu, manifold_weight):
    terms = objective_terms(prob, traj, omega, manifold_weight)
    init, dyn, wps = constraint_residuals(prob, traj)
    viol = np.sum(np.abs(init)) + np.sum(np.abs(dyn)) + sum(np.sum(np.abs(w)) for w in wps)
    return terms["cost"] + terms["manifold_penalty"] + mu * viol, terms


def run_escp(
    prob: OcpProblem,
    params: ScpParams,
    d: int,
    init: Optional[DiscreteTrajectory] = None,
    on_iteration: Optional[Callable[[dict], None]] = None,
) -> ScpRun:
    """Run E-SCP from ``init`` (default: :func:`initialize`).

    With ``params.polish`` the shooting polish is attempted after accepted
    iterations past ``params.polish_after``; a successful polish ends the run.
    A run that converges before that window is polished once at the end.
    """
    t_start = time.perf_counter()
    traj = init.copy() if init is not None else initialize(prob, d)
    if traj.d != d:
        raise ScpError(f"initial trajectory has {traj.d} nodes, expected {d}")
    Delta, omega, mu = params.Delta0, params.omega0, params.merit_weight
    mw = params.manifold_weight
    iterates = [traj]
    records: list[dict] = []
    history: list = []
    adjoints = None
    warm = None
    termination = "iteration_cap"
    polish_result = None
    attempts = 0

    for k in range(1, params.max_iter + 1):
        data = build_subproblem(prob, traj, Delta, omega, params)
        sol = solve_qp(data, tol=params.qp_tol, max_iter=params.qp_max_iter, warm_start=warm)
        rec = {"iteration": k, "Delta": Delta, "omega": omega, "qp_status": sol.status,
               "qp_iterations": sol.iterations}
        if sol.status == "primal_infeasible":
            rec.update(accepted=False, rho=None, model_cost=None, true_cost=None)
            records.append(rec)
            if on_iteration:
                on_iteration(rec)
            omega *= params.omega_growth
            if omega > params.omega_max:
                termination = "soft_constraints_only"
                break
            continue

        cand = DiscreteTrajectory.from_vector(sol.z, traj.times, prob.N, prob.m)
        mu = max(mu, 2.0 * float(np.max(np.abs(sol.eq_duals), initial=0.0)))
        z_k = traj.to_vector()
        merit_old, _ = _merit(prob, traj, omega, mu, mw)
        merit_new, terms = _merit(prob, cand, omega, mu, mw)
        lin_new = model_cost(data, sol.z)
        model_new = lin_new + mu * float(np.sum(np.abs(data.Aeq @ sol.z - data.beq)))
        pred = merit_old - model_new
        ared = merit_old - merit_new
        if pred <= 1e-12 * (1.0 + abs(merit_old)):
            rho = 1.0 if ared >= -1e-12 * (1.0 + abs(merit_old)) else -np.inf
        else:
            rho = ared / pred
        accepted = sol.ok and rho >= params.rho_reject
        step_x = float(np.max(np.abs(cand.states - traj.states)))
        step_u = float(np.max(np.abs(cand.controls[:-1] - traj.controls[:-1])))
        scale = max(1.0, float(np.max(np.abs(z_k))))
        _, dyn, _ = constraint_residuals(prob, cand)
        pen = prob.penetration(cand.states)
        rec.update(
            accepted=bool(accepted), rho=float(rho), model_cost=lin_new, true_cost=terms["cost"],
            energy=terms["energy"], merit_weight=mu, step_x=step_x, step_u=step_u,
            trapezoid_defect=float(np.max(np.linalg.norm(dyn, axis=1))),
            manifold_residual=prob.manifold.residual_norm(cand.states), penetration=pen,
        )

        if sol.ok and rho >= params.rho_accept:
            Delta = min(params.grow * Delta, params.Delta0)
        elif not accepted:
            # shrink relative to the rejected step so the next model is actually restricted
            step_sq = float(np.max(np.sum((cand.states - traj.states) ** 2, axis=1)))
            Delta = params.shrink * min(Delta, step_sq) if step_sq > 0 else params.shrink * Delta

        if accepted:
            traj = cand
            iterates.append(cand)
            adjoints = extract_adjoints(data, sol)
            history.append(adjoints)
            warm = (sol.z, sol.eq_duals, sol.bound_duals)
            violating = pen > params.violation_tol
            if max(step_x, step_u) <= FIXED_POINT_TOL * scale and not violating:
                termination = "fixed_point"
            elif step_x <= params.eps_conv and step_u <= params.eps_conv and not violating:
                termination = "tolerance_converged"
            elif violating:
                omega *= params.omega_growth
                if omega > params.omega_max:
                    termination = "soft_constraints_only"
            if termination == "iteration_cap" and params.polish and k > params.polish_after and not violating:
                from .shooting import newton_polish

                attempts += 1
                res = newton_polish(prob, traj, adjoints, params, omega=omega)
                rec["polish"] = {"success": res.success, "residual": res.residual, "newton_steps": res.steps}
                if res.success:
                    polish_result = res
                    termination = "tolerance_converged"
            elif termination in ("fixed_point", "tolerance_converged") and params.polish and polish_result is None:
                # converged before the polish window opened: polish the final iterate once
                from .shooting import newton_polish

                attempts += 1
                res = newton_polish(prob, traj, adjoints, params, omega=omega)
                rec["polish"] = {"success": res.success, "residual": res.residual, "newton_steps": res.steps}
                if res.success:
                    polish_result = res
        records.append(rec)
        if on_iteration:
            on_iteration(rec)
        if termination != "iteration_cap":
            break

    return ScpRun(
        iterates=iterates, records=records, termination=termination, final=traj, adjoints=adjoints,
        adjoint_history=history, omega=omega, Delta=Delta, wall_time=time.perf_counter() - t_start,
        polish=polish_result, polish_attempts=attempts,
    )


# ---------------------------------------------------------------------------
# Necessary-condition certificate
# ---------------------------------------------------------------------------


def _box_argmax(R, lin, lo, hi):
    """Maximize ``lin.u - u'Ru`` over the box."""
    u = np.clip(0.5 * np.linalg.solve(R, lin), lo, hi)
    if np.count_nonzero(R - np.diag(np.diag(R))) == 0:
        return u
    # coordinate ascent converges for SPD R; exact enough for a certificate
    for _ in range(500):
        prev = u.copy()
        for j in range(u.size):
            r = lin[j] - 2.0 * (R[j] @ u - R[j, j] * u[j])
            u[j] = np.clip(r / (2.0 * R[j, j]), lo[j], hi[j])
        if np.max(np.abs(u - prev)) < 1e-15:
            break
    return u


def pmp_residuals(prob: OcpProblem, run: ScpRun, interior_margin: float = 1e-6) -> dict:
    """Discrete Pontryagin certificate of a converged run (normal extremal, p0 = -1)."""
    if run.adjoints is None:
        raise ScpError("run has no recorded adjoints")
    if run.termination == "soft_constraints_only":
        raise ScpError("run ended with soft constraints only; no extremal to certify")
    traj, adj = run.final, run.adjoints
    X, U = traj.states, traj.controls[:-1]
    d, dt = traj.d, traj.dt
    sys = prob.system
    nu = adj.gamma[:-1]
    nodes = waypoint_nodes(prob, traj.times)

    _, dG = prob.state_cost_terms(X, run.omega)
    _, Jf = prob.f0u_terms(X[:-1])
    grad = dG.copy()
    grad[:-1] += np.einsum("kmn,km->kn", Jf, U)
    A_in, B_in = sys.eval_jacobians(X[1:], U)  # right end of each interval
    A_out, B_out = sys.eval_jacobians(X[:-1], U)  # left end
    adj_res = np.zeros(d)
    for j in range(1, d - 1):
        if j in nodes:
            continue
        rhs = grad[j] - 0.5 * (A_in[j - 1].T @ nu[j - 1] + A_out[j].T @ nu[j])
        adj_res[j] = np.max(np.abs((nu[j] - nu[j - 1]) / dt - rhs))
    gnorm = float(np.max(np.abs(adj.gamma)))

    f0u, _ = prob.f0u_terms(X[:-1])
    Bbar = 0.5 * (B_in + B_out)
    gaps = np.zeros(d - 1)
    interior = np.zeros(d - 1, dtype=bool)
    for i in range(d - 1):
        lin = Bbar[i].T @ nu[i] - f0u[i]

        def ham(u):
            return float(lin @ u - u @ prob.R @ u)

        ustar = _box_argmax(prob.R, lin, prob.control_lo, prob.control_hi)
        gaps[i] = ham(ustar) - ham(U[i])
        interior[i] = bool(np.all(U[i] > prob.control_lo + interior_margin) and np.all(U[i] < prob.control_hi - interior_margin))

    trans = []
    for w, k, lam in zip(prob.waypoints, nodes, adj.lam):
        J = np.atleast_2d(w.jac(X[k]))
        jump = adj.gamma_minus[k] if k == d - 1 else adj.gamma_minus[k] - adj.gamma_plus[k]
        _, s, Vt = np.linalg.svd(J)
        rank = int(np.sum(s > 1e-12 * s[0]))
        null = Vt[rank:]
        trans.append(float(np.linalg.norm(null @ jump)) if null.size else 0.0)

    normal = np.zeros(d)
    for j in range(d):
        _, rec = prob.manifold.project_costate(prob.manifold.project(X[j]), adj.gamma[j])
        normal[j] = np.linalg.norm(adj.gamma[j] - rec)

    return {
        "adjoint_residual": float(np.max(adj_res)),
        "adjoint_residual_nodes": adj_res,
        "gamma_inf_norm": gnorm,
        "maximality_gap": float(np.max(gaps[interior])) if np.any(interior) else 0.0,
        "maximality_gap_all": float(np.max(gaps)),
        "interior_nodes": int(np.sum(interior)),
        "transversality": trans,
        "transversality_max": float(max(trans)) if trans else 0.0,
        "p0": -1.0,
        "normal_extremal": bool(np.all(np.isfinite(adj.gamma))),
        "costate_normal_component": normal,
        "costate_normal_max": float(np.max(normal)),
    }
