"""Trapezoidal transcription of the linearized embedded subproblem into QP data.

Decision vector layout: ``z = (x_1, ..., x_d, u_1, ..., u_{d-1})``.  The QP is

    min 1/2 z'Hz + q'z   s.t.  Aeq z = beq,  lo <= z <= hi

with equality rows ordered as: initial state (N rows), one block of N
trapezoid rows per interval, then one block per waypoint.  Dynamics never
enter H or q.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .dynamics import ControlAffineSystem, rk4_step
from .problem import OcpProblem
from .smooth import smooth_max, smooth_max_grad  # noqa: F401  (re-exported)


class TranscriptionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass
class DiscreteTrajectory:
    times: np.ndarray  # (d,)
    states: np.ndarray  # (d, N)
    controls: np.ndarray  # (d, m); the last row repeats u_{d-1} and is unused

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        self.controls = np.asarray(self.controls, dtype=float)
        d = self.times.size
        if d < 2:
            raise TranscriptionError("trajectory needs at least two nodes")
        if self.states.shape[0] != d or self.controls.shape[0] != d:
            raise TranscriptionError("states/controls must have one row per time node")
        steps = np.diff(self.times)
        if np.any(steps <= 0) or np.ptp(steps) > 1e-12 * max(1.0, self.times[-1]):
            raise TranscriptionError("time grid must be uniform and strictly increasing")

    @property
    def d(self) -> int:
        return self.times.size

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.states.ravel(), self.controls[:-1].ravel()])

    @classmethod
    def from_vector(cls, z, times, N: int, m: int) -> "DiscreteTrajectory":
        d = len(times)
        X = np.asarray(z[: d * N]).reshape(d, N)
        U = np.asarray(z[d * N:]).reshape(d - 1, m)
        return cls(times, X, np.vstack([U, U[-1:]]))

    def copy(self) -> "DiscreteTrajectory":
        return DiscreteTrajectory(self.times.copy(), self.states.copy(), self.controls.copy())


@dataclass(frozen=True)
class Layout:
    d: int
    N: int
    m: int
    dt: float
    waypoint_nodes: tuple
    waypoint_rows: tuple  # slices into the equality rows

    @property
    def n_x(self) -> int:
        return self.d * self.N

    @property
    def n(self) -> int:
        return self.d * self.N + (self.d - 1) * self.m

    @property
    def init_rows(self) -> slice:
        return slice(0, self.N)

    @property
    def dyn_rows(self) -> slice:
        return slice(self.N, self.N + (self.d - 1) * self.N)

    def x_slice(self, i: int) -> slice:
        return slice(i * self.N, (i + 1) * self.N)

    def u_slice(self, i: int) -> slice:
        base = self.n_x + i * self.m
        return slice(base, base + self.m)


@dataclass
class QpData:
    """Convex QP ``min 1/2 z'Hz + q'z, Aeq z = beq, lo <= z <= hi``.

    ``layout`` and the linearization extras are absent for generic QPs.
    """

    H: sp.csc_matrix
    q: np.ndarray
    Aeq: sp.csc_matrix
    beq: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    layout: Optional[Layout] = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.H = sp.csc_matrix(self.H)
        self.Aeq = sp.csc_matrix(self.Aeq)
        self.q = np.asarray(self.q, dtype=float)
        self.beq = np.asarray(self.beq, dtype=float)
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        n = self.q.size
        if self.H.shape != (n, n) or self.Aeq.shape[1] != n or self.lo.size != n or self.hi.size != n:
            raise TranscriptionError("inconsistent QP dimensions")
        if self.Aeq.shape[0] != self.beq.size:
            raise TranscriptionError("Aeq rows and beq length differ")

    @property
    def n(self) -> int:
        return self.q.size

    def objective(self, z) -> float:
        return float(0.5 * z @ (self.H @ z) + self.q @ z)

    def dump(self, path) -> None:
        """Write every block in Matrix Market coordinate format, one section per block."""
        import io

        import scipy.io

        with open(path, "w") as fh:
            for name, mat in (
                ("H", self.H),
                ("q", sp.csc_matrix(self.q[:, None])),
                ("Aeq", self.Aeq),
                ("beq", sp.csc_matrix(self.beq[:, None])),
                ("lo", np.where(np.isfinite(self.lo), self.lo, np.sign(self.lo) * 1e30)[:, None]),
                ("hi", np.where(np.isfinite(self.hi), self.hi, np.sign(self.hi) * 1e30)[:, None]),
            ):
                buf = io.BytesIO()
                scipy.io.mmwrite(buf, mat if sp.issparse(mat) else np.asarray(mat), precision=17)
                fh.write(f"% block {name}\n")
                fh.write(buf.getvalue().decode())


@dataclass
class ScpParams:
    Delta0: float = 1e4
    omega0: float = 1.0
    omega_max: float = 1e6
    omega_growth: float = 5.0
    beta_sharp: float = 20.0
    rho_accept: float = 0.25
    rho_reject: float = 0.05
    shrink: float = 0.5
    grow: float = 2.0
    eps_conv: float = 1e-4
    max_iter: int = 100
    violation_tol: float = 1e-3
    merit_weight: float = 10.0
    qp_tol: float = 1e-8
    qp_max_iter: int = 20000
    manifold_weight: float = 0.0  # > 0 selects the penalized-manifold variant
    polish: bool = False
    polish_after: int = 3
    shooting_steps: int = 400
    tol_newton: float = 1e-8
    max_newton: int = 12

    def __post_init__(self):
        if not 1.0 <= self.omega0 <= self.omega_max:
            raise ValueError("need 1 <= omega0 <= omega_max")
        if not 0.0 < self.rho_reject < self.rho_accept < 1.0:
            raise ValueError("need 0 < rho_reject < rho_accept < 1")
        if not self.Delta0 > 0:
            raise ValueError("Delta0 must be positive")
        if not (0 < self.shrink < 1 and self.grow >= 1 and self.omega_growth > 1):
            raise ValueError("need 0 < shrink < 1, grow >= 1, omega_growth > 1")
        if self.max_iter < 1 or self.eps_conv <= 0:
            raise ValueError("need max_iter >= 1 and eps_conv > 0")


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def make_grid(prob: OcpProblem, d: int) -> np.ndarray:
    if d < 2:
        raise TranscriptionError("need d >= 2 nodes")
    return np.linspace(0.0, prob.horizon, d)


def waypoint_nodes(prob: OcpProblem, times: np.ndarray) -> list[int]:
    dt = times[1] - times[0]
    nodes = []
    for i, w in enumerate(prob.waypoints):
        k = int(round(w.time / dt))
        if k < 1 or k >= times.size or abs(times[k] - w.time) > 1e-9 * max(1.0, w.time):
            raise TranscriptionError(
                f"waypoint {i} time {w.time} is not on the grid (dt={dt:.6g}); choose d so that it is"
            )
        nodes.append(k)
    return nodes


def linearize_dynamics(sys: ControlAffineSystem, x_k, u_k):
    """Affine model ``F(x,u) ~ A (x - x_k) + B u + c`` around ``(x_k, u_k)``.

    Broadcasts over leading axes.
    """
    A, B = sys.eval_jacobians(x_k, u_k)
    return A, B, sys.drift(np.asarray(x_k, dtype=float))


def trust_penalty(dx, Delta: float, beta: float):
    """Smooth trust-region penalty ``h(||dx||^2 / Delta - 1)`` per node."""
    r = np.sum(np.atleast_2d(dx) ** 2, axis=-1)
    return smooth_max(r / Delta - 1.0, beta)


def trust_majorizer(dx, Delta: float, beta: float):
    """Global quadratic upper bound ``h(-1) + ||dx||^2 / Delta`` of :func:`trust_penalty`."""
    r = np.sum(np.atleast_2d(dx) ** 2, axis=-1)
    return smooth_max(-1.0, beta) + r / Delta


def quadrature_weights(d: int, dt: float) -> np.ndarray:
    w = np.full(d, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def build_subproblem(
    prob: OcpProblem, prev: DiscreteTrajectory, Delta_k: float, omega_k: float, params: ScpParams
) -> QpData:
    """Assemble the convex subproblem linearized around ``prev``."""
    sys = prob.system
    d, N, m = prev.d, prob.N, prob.m
    dt = prev.dt
    nodes = waypoint_nodes(prob, prev.times)
    Xb, Ub = prev.states, prev.controls[:-1]
    nx = d * N
    n = nx + (d - 1) * m

    # -- equality rows --------------------------------------------------------
    A_L, B_L, c_L = linearize_dynamics(sys, Xb[:-1], Ub)
    A_R, B_R, c_R = linearize_dynamics(sys, Xb[1:], Ub)
    I = np.eye(N)
    h2 = 0.5 * dt
    blk_left = -I - h2 * A_L  # (d-1, N, N)
    blk_right = I - h2 * A_R
    blk_u = -h2 * (B_L + B_R)  # (d-1, N, m)
    rhs_dyn = h2 * (c_L + c_R - np.einsum("kij,kj->ki", A_L, Xb[:-1]) - np.einsum("kij,kj->ki", A_R, Xb[1:]))

    rows, cols, vals = [np.arange(N)], [np.arange(N)], [np.ones(N)]
    ii, jj = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    iu, ju = np.meshgrid(np.arange(N), np.arange(m), indexing="ij")
    for k in range(d - 1):
        r0 = N + k * N
        rows += [r0 + ii.ravel(), r0 + ii.ravel(), r0 + iu.ravel()]
        cols += [k * N + jj.ravel(), (k + 1) * N + jj.ravel(), nx + k * m + ju.ravel()]
        vals += [blk_left[k].ravel(), blk_right[k].ravel(), blk_u[k].ravel()]
    beq = [prob.x0, rhs_dyn.ravel()]
    row = N + (d - 1) * N
    wp_rows = []
    for w, k in zip(prob.waypoints, nodes):
        Jw = np.atleast_2d(w.jac(Xb[k]))
        r = Jw.shape[0]
        rr, cc = np.meshgrid(np.arange(r), np.arange(N), indexing="ij")
        rows.append(row + rr.ravel())
        cols.append(k * N + cc.ravel())
        vals.append(Jw.ravel())
        beq.append(Jw @ Xb[k] - np.atleast_1d(w.G(Xb[k])))
        wp_rows.append(slice(row, row + r))
        row += r
    Aeq = sp.csc_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row, n)
    )
    beq = np.concatenate(beq)

    # -- cost -----------------------------------------------------------------
    wq = quadrature_weights(d, dt)
    f0u, Jf = prob.f0u_terms(Xb[:-1])
    # g_a enters linearized; the squared obstacle residuals enter through their
    # Gauss-Newton square plus the convex softplus curvature, which agrees with
    # the linearization to first order
    g, dg = prob.g_a_terms(Xb)
    q_cost = np.zeros(n)
    qx = q_cost[:nx].reshape(d, N)
    qu = q_cost[nx:].reshape(d - 1, m)
    qx += wq[:, None] * dg
    qx[:-1] += dt * np.einsum("kmn,km->kn", Jf, Ub)
    qu += dt * f0u
    const_cost = float(np.sum(wq * (g - np.einsum("kn,kn->k", dg, Xb))) - dt * np.einsum("km,kmn,kn->", Ub, Jf, Xb[:-1]))
    H_blocks = [sp.csc_matrix((nx, nx)), sp.kron(sp.eye(d - 1), 2.0 * dt * prob.R)]
    H_cost = sp.block_diag(H_blocks, format="csc")

    if prob.obstacles:
        # model per residual: (r + J dx)^2 + (kappa - 1) (J dx)^2
        r, Jr, kappa = prob.penalty_model(Xb)  # (d, P), (d, P, N), (d, P)
        wb = omega_k * wq
        JtJ = np.einsum("k,kp,kpi,kpj->kij", 2.0 * wb, kappa, Jr, Jr)
        Jx = np.einsum("kpn,kn->kp", Jr, Xb)
        r0 = r - Jx
        lin = r0 - (kappa - 1.0) * Jx
        qx += np.einsum("k,kpn,kp->kn", 2.0 * wb, Jr, lin)
        const_cost += float(np.sum(wb * np.sum(r0 ** 2 + (kappa - 1.0) * Jx ** 2, axis=-1)))
        H_cost = H_cost + sp.block_diag(
            [sp.block_diag(list(JtJ), format="csc"), sp.csc_matrix(((d - 1) * m, (d - 1) * m))], format="csc"
        )

    # penalized-manifold variant: Gauss-Newton square of linearized residuals
    if params.manifold_weight > 0 and prob.manifold.codim > 0:
        c = prob.manifold.constraint_residual(Xb)  # (d, p)
        Jc = prob.manifold.constraint_jacobian(Xb)  # (d, p, N)
        wm = params.manifold_weight * wq
        JtJ = np.einsum("k,kpi,kpj->kij", 2.0 * wm, Jc, Jc)
        Hm = sp.block_diag(list(JtJ), format="csc")
        r0 = c - np.einsum("kpn,kn->kp", Jc, Xb)
        qx += np.einsum("k,kpn,kp->kn", 2.0 * wm, Jc, r0)
        const_cost += float(np.sum(wm * np.sum(r0 ** 2, axis=-1)))
        H_cost = H_cost + sp.block_diag([Hm, sp.csc_matrix(((d - 1) * m, (d - 1) * m))], format="csc")

    # trust region: global quadratic majorizer of h(||x - x_k||^2 / Delta - 1)
    tw = wq / Delta_k
    H_trust = sp.block_diag(
        [sp.diags(np.repeat(2.0 * tw, N)), sp.csc_matrix(((d - 1) * m, (d - 1) * m))], format="csc"
    )
    q_trust = np.concatenate([(-2.0 * tw[:, None] * Xb).ravel(), np.zeros((d - 1) * m)])
    const_trust = float(np.sum(tw * np.sum(Xb ** 2, axis=1)) + np.sum(wq) * smooth_max(-1.0, params.beta_sharp))

    lo = np.concatenate([np.full(nx, -np.inf), np.tile(prob.control_lo, d - 1)])
    hi = np.concatenate([np.full(nx, np.inf), np.tile(prob.control_hi, d - 1)])
    layout = Layout(d, N, m, dt, tuple(nodes), tuple(wp_rows))
    return QpData(
        H=(H_cost + H_trust).tocsc(),
        q=q_cost + q_trust,
        Aeq=Aeq,
        beq=beq,
        lo=lo,
        hi=hi,
        layout=layout,
        extras={
            "A_left": A_L,
            "A_right": A_R,
            "H_cost": H_cost,
            "q_cost": q_cost,
            "const_cost": const_cost,
            "H_trust": H_trust,
            "q_trust": q_trust,
            "const_trust": const_trust,
            "omega": omega_k,
            "Delta": Delta_k,
        },
    )


def model_cost(data: QpData, z) -> float:
    """Linearized objective at ``z`` without the trust-region term (constants restored)."""
    e = data.extras
    return float(0.5 * z @ (e["H_cost"] @ z) + e["q_cost"] @ z + e["const_cost"])


# ---------------------------------------------------------------------------
# Nonlinear evaluation and diagnostics
# ---------------------------------------------------------------------------


def trapezoid_defects(sys: ControlAffineSystem, traj: DiscreteTrajectory) -> np.ndarray:
    """Per-interval residual of the nonlinear trapezoid equation, shape ``(d-1, N)``."""
    X, U = traj.states, traj.controls[:-1]
    F_L = sys.eval_dynamics(X[:-1], U)
    F_R = sys.eval_dynamics(X[1:], U)
    return X[1:] - X[:-1] - 0.5 * traj.dt * (F_L + F_R)


def constraint_residuals(prob: OcpProblem, traj: DiscreteTrajectory) -> tuple[np.ndarray, np.ndarray, list]:
    nodes = waypoint_nodes(prob, traj.times)
    init = traj.states[0] - prob.x0
    dyn = trapezoid_defects(prob.system, traj)
    wps = [np.atleast_1d(w.G(traj.states[k])) for w, k in zip(prob.waypoints, nodes)]
    return init, dyn, wps


def objective_terms(prob: OcpProblem, traj: DiscreteTrajectory, omega: float, manifold_weight: float = 0.0) -> dict:
    """Discrete objective pieces: energy, full cost, obstacle penalty and manifold penalty."""
    d, dt = traj.d, traj.dt
    X, U = traj.states, traj.controls[:-1]
    wq = quadrature_weights(d, dt)
    energy = float(dt * np.sum(U * U))
    ctrl = float(dt * np.einsum("ki,ij,kj->", U, prob.R, U))
    f0u, _ = prob.f0u_terms(X[:-1])
    ctrl += float(dt * np.sum(U * f0u))
    ga, _ = prob.g_a_terms(X)
    gb, _ = prob.penalty_terms(X)
    man = 0.0
    if manifold_weight > 0 and prob.manifold.codim > 0:
        man = float(manifold_weight * np.sum(wq * np.sum(prob.manifold.constraint_residual(X) ** 2, axis=-1)))
    cost = ctrl + float(np.sum(wq * ga)) + omega * float(np.sum(wq * gb))
    return {"energy": energy, "cost": cost, "penalty": float(np.sum(wq * gb)), "manifold_penalty": man}


def flow_states(sys: ControlAffineSystem, traj: DiscreteTrajectory, substeps: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold flow of the true dynamics.

    Returns the one-step images ``Phi(x_i, u_i)`` of every node (vectorized) and
    the open-loop trajectory from ``x_1`` under the same controls.
    """
    X, U = traj.states, traj.controls[:-1]
    h = traj.dt / substeps
    y = X[:-1].copy()
    for _ in range(substeps):
        y = rk4_step(lambda s: sys.eval_dynamics(s, U), y, h)
    open_loop = np.empty_like(X)
    open_loop[0] = X[0]
    x = X[0].copy()
    for k in range(traj.d - 1):
        u = U[k]
        for _ in range(substeps):
            x = rk4_step(lambda s: sys.eval_dynamics(s, u), x, h)
        open_loop[k + 1] = x
    return y, open_loop


def trajectory_diagnostics(prob: OcpProblem, traj: DiscreteTrajectory, omega: float = 1.0, substeps: int = 20) -> dict:
    """Feasibility and cost report for a discrete trajectory.

    ``trapezoid_defect`` is the residual of the nonlinear trapezoid equation.
    ``flow_defect`` is the one-step error against the exact zero-order-hold
    flow, and ``dynamics_error`` the open-loop drift of the whole trajectory
    from that flow; both measure how well the discrete states satisfy the
    continuous dynamics.
    """
    sys = prob.system
    _, dyn, wps = constraint_residuals(prob, traj)
    one_step, open_loop = flow_states(sys, traj, substeps)
    flow = np.linalg.norm(traj.states[1:] - one_step, axis=1)
    drift = np.linalg.norm(traj.states - open_loop, axis=1)
    man = np.abs(prob.manifold.constraint_residual(traj.states))
    man_node = np.max(man, axis=1) if man.size else np.zeros(traj.d)
    terms = objective_terms(prob, traj, omega)
    return {
        "trapezoid_defect": float(np.max(np.linalg.norm(dyn, axis=1))),
        "flow_defect": float(np.max(flow)),
        "dynamics_error": float(np.max(drift)),
        "node_dynamics_error": drift,
        "node_manifold_residual": man_node,
        "manifold_residual": float(np.max(man_node)),
        "energy": terms["energy"],
        "cost": terms["cost"],
        "penalty_total": terms["penalty"],
        "penetration": prob.penetration(traj.states),
        "min_clearance": float(np.min(prob.clearance(traj.states))),
        "waypoint_violation": float(max(np.max(np.abs(v)) for v in wps)),
    }
