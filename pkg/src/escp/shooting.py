"""Indirect single shooting on the Pontryagin boundary-value problem, warm-started from E-SCP.

State and costate are integrated together with RK4,

    x' = F(x, u*),   gamma' = -(dF/dx)' gamma + grad_x F0(x, u*),

with ``u*`` the pointwise maximizer of the Hamiltonian (normal case,
p0 = -1).  At interior waypoints the costate jumps by
``gamma+ = gamma- - J' lam``.  Unknowns are ``gamma(0)`` and the interior
jump multipliers; residuals are the waypoint constraints plus the component
of the final costate in the null space of the final waypoint Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .problem import OcpProblem

FD_REL_STEP = 1e-6


@dataclass
class ShootingUnknowns:
    gamma0: np.ndarray
    jumps: list = field(default_factory=list)  # one multiplier vector per interior waypoint

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.gamma0, float)] + [np.atleast_1d(j) for j in self.jumps])

    @classmethod
    def from_vector(cls, v, N: int, sizes) -> "ShootingUnknowns":
        v = np.asarray(v, dtype=float)
        out, pos = [], N
        for r in sizes:
            out.append(v[..., pos:pos + r])
            pos += r
        if pos != v.shape[-1]:
            raise ValueError(f"expected {pos} unknowns, got {v.shape[-1]}")
        return cls(v[..., :N], out)


def _jump_sizes(prob: OcpProblem) -> list[int]:
    return [w.rows for w in prob.waypoints[:-1]]


def pointwise_optimal_control(prob: OcpProblem, x, gamma) -> np.ndarray:
    """Box-constrained maximizer of ``gamma.B(x)u - (u'Ru + u.f0_u(x))``; batched."""
    x = np.asarray(x, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    B = prob.system.control_fields(x)
    f0u, _ = prob.f0u_terms(x)
    lin = np.einsum("...nm,...n->...m", B, gamma) - f0u
    R = prob.R
    if np.count_nonzero(R - np.diag(np.diag(R))) == 0:
        return np.clip(0.5 * lin / np.diag(R), prob.control_lo, prob.control_hi)
    from .qp import solve_qp
    from .transcription import QpData

    Rinv = np.linalg.inv(R)
    flat = lin.reshape(-1, prob.m)
    out = np.empty_like(flat)
    for i, c in enumerate(flat):
        u = 0.5 * Rinv @ c
        if np.all(u >= prob.control_lo) and np.all(u <= prob.control_hi):
            out[i] = u
            continue
        data = QpData(2.0 * R, -c, sp.csc_matrix((0, prob.m)), np.zeros(0), prob.control_lo, prob.control_hi)
        out[i] = solve_qp(data, tol=1e-12).z
    return out.reshape(lin.shape)


def _running(prob, x, u, omega):
    """Running cost F0 and its state gradient, batched."""
    f0u, Jf = prob.f0u_terms(x)
    g, dg = prob.state_cost_terms(x, omega)
    val = np.einsum("...i,ij,...j->...", u, prob.R, u) + np.sum(u * f0u, axis=-1) + g
    grad = np.einsum("...mn,...m->...n", Jf, u) + dg
    return val, grad


def _augmented_rhs(prob, omega):
    N = prob.N
    sys = prob.system

    def f(y):
        x, gam = y[..., :N], y[..., N:2 * N]
        u = pointwise_optimal_control(prob, x, gam)
        A, _ = sys.eval_jacobians(x, u)
        F = sys.eval_dynamics(x, u)
        c, dc = _running(prob, x, u, omega)
        gdot = -np.einsum("...ji,...j->...i", A, gam) + dc
        return np.concatenate([F, gdot, c[..., None]], axis=-1)

    return f


def hamiltonian(prob: OcpProblem, x, gamma, omega: float = 1.0) -> np.ndarray:
    u = pointwise_optimal_control(prob, x, gamma)
    c, _ = _running(prob, x, u, omega)
    return np.einsum("...n,...n->...", gamma, prob.system.eval_dynamics(x, u)) - c


def _segment_steps(prob: OcpProblem, steps: int) -> list[int]:
    bounds = [0.0] + [w.time for w in prob.waypoints]
    return [max(10, int(round(steps * (b - a) / prob.horizon))) for a, b in zip(bounds, bounds[1:])]


def _null_bases(prob: OcpProblem):
    """Fixed null-space bases of each waypoint Jacobian, taken at the targets."""
    bases = []
    for w in prob.waypoints:
        J = np.atleast_2d(w.jac(w.target))
        _, s, Vt = np.linalg.svd(J)
        rank = int(np.sum(s > 1e-12 * s[0]))
        bases.append(Vt[rank:])
    return bases


def _integrate(prob, unknowns: ShootingUnknowns, steps, omega, record):
    """Integrate the batched augmented system; returns residuals and optionally the path."""
    N = prob.N
    gamma0 = np.asarray(unknowns.gamma0, float)
    batch = gamma0.shape[:-1]
    x0 = np.broadcast_to(prob.x0, batch + (N,))
    y = np.concatenate([x0, gamma0, np.zeros(batch + (1,))], axis=-1)
    f = _augmented_rhs(prob, omega)
    seg_steps = _segment_steps(prob, steps)
    bases = _null_bases(prob)
    t = 0.0
    res = []
    path_t, path_y, seg_id = [t], [y.copy()], [0]
    finite = np.ones(batch, dtype=bool)
    for i, (w, n_seg) in enumerate(zip(prob.waypoints, seg_steps)):
        h = (w.time - t) / n_seg
        for _ in range(n_seg):
            k1 = f(y)
            k2 = f(y + 0.5 * h * k1)
            k3 = f(y + 0.5 * h * k2)
            k4 = f(y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            finite &= np.all(np.isfinite(y), axis=-1)
            y = np.where(finite[..., None], y, 0.0)
            t += h
            if record:
                path_t.append(t)
                path_y.append(y.copy())
                seg_id.append(i)
        t = w.time
        if record:
            path_t[-1] = t  # snap the accumulated step time onto the waypoint
        x = y[..., :N]
        res.append(np.asarray(w.G(x), dtype=float).reshape(batch + (-1,)))
        J = np.asarray(w.jac(x), dtype=float).reshape(batch + (-1, N))
        if i < len(prob.waypoints) - 1:
            lam = np.asarray(unknowns.jumps[i], float)
            gam = y[..., N:2 * N] - np.einsum("...rn,...r->...n", J, lam)
            y = np.concatenate([x, gam, y[..., 2 * N:]], axis=-1)
            if record:
                # store the post-jump state at the same time, starting the next segment
                path_t.append(t)
                path_y.append(y.copy())
                seg_id.append(i + 1)
        else:
            gam = y[..., N:2 * N]
            # project onto ker J at the current point, then express in the fixed basis
            Jp = np.linalg.pinv(J)
            P = np.eye(N) - np.einsum("...nr,...rm->...nm", Jp, J)
            res.append(np.einsum("kn,...nm,...m->...k", bases[-1], P, gam))
    r = np.concatenate(res, axis=-1)
    r = np.where(finite[..., None], r, np.inf)
    if not record:
        return r, None
    return r, (np.array(path_t), np.stack(path_y), np.array(seg_id))


def shoot(prob: OcpProblem, unknowns: ShootingUnknowns, steps: int = 400, omega: float = 1.0) -> np.ndarray:
    """Boundary residual of the shooting map (infinite entries if integration diverges)."""
    if steps < 10:
        raise ValueError("need at least 10 integration steps")
    r, _ = _integrate(prob, unknowns, steps, omega, record=False)
    return r


@dataclass
class PolishResult:
    success: bool
    residual: float
    steps: int
    unknowns: ShootingUnknowns
    times: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None
    costates: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None
    segments: Optional[np.ndarray] = None
    cost: float = float("nan")
    scp_cost: float = float("nan")
    hamiltonian: Optional[np.ndarray] = None
    hamiltonian_drift: float = float("nan")
    message: str = ""

    @property
    def beats_scp(self) -> bool:
        return self.success and self.cost <= self.scp_cost + 1e-9


Extremal = PolishResult


def _residual_and_jacobian(prob, v, N, sizes, steps, omega):
    n = v.size
    hs = FD_REL_STEP * np.maximum(1.0, np.abs(v))
    V = np.vstack([v, v + np.diag(hs)])
    R, _ = _integrate(prob, ShootingUnknowns.from_vector(V, N, sizes), steps, omega, record=False)
    r0 = R[0]
    Jac = ((R[1:] - r0) / hs[:, None]).T
    return r0, Jac


def newton_polish(
    prob: OcpProblem,
    traj,
    adjoints,
    params,
    omega: float = 1.0,
    damping_levels: int = 10,
    warm: Optional[ShootingUnknowns] = None,
) -> PolishResult:
    """Damped Gauss-Newton on the shooting residual from the E-SCP costate estimates.

    The Jacobian is a forward difference evaluated as one batched integration.
    Least-squares steps handle the singular direction normal to the manifold,
    along which the initial costate does not affect the motion.
    """
    from .transcription import objective_terms

    N = prob.N
    sizes = _jump_sizes(prob)
    steps = params.shooting_steps
    if warm is None:
        warm = ShootingUnknowns(np.asarray(adjoints.gamma_plus[0], float), [np.asarray(l, float) for l in adjoints.lam[:-1]])
    v = warm.to_vector()
    scp_cost = objective_terms(prob, traj, omega)["cost"] if traj is not None else float("nan")
    r, Jac = _residual_and_jacobian(prob, v, N, sizes, steps, omega)
    n_steps = 0
    msg = "max_newton reached"
    for n_steps in range(1, params.max_newton + 1):
        if np.max(np.abs(r)) <= params.tol_newton:
            n_steps -= 1
            break
        if not np.all(np.isfinite(r)):
            msg = "integration diverged at the warm start"
            break
        delta = np.linalg.lstsq(Jac, -r, rcond=1e-10)[0]
        base = np.linalg.norm(r)
        alpha = 1.0
        for _ in range(damping_levels):
            trial = v + alpha * delta
            r_try = shoot(prob, ShootingUnknowns.from_vector(trial, N, sizes), steps, omega)
            if np.all(np.isfinite(r_try)) and np.linalg.norm(r_try) < base:
                break
            alpha *= 0.5
        else:
            msg = "stagnated: no damped step reduced the residual"
            break
        v = trial
        if np.max(np.abs(r_try)) <= params.tol_newton:
            r = r_try
            break
        r, Jac = _residual_and_jacobian(prob, v, N, sizes, steps, omega)
    res_norm = float(np.max(np.abs(r)))
    success = bool(np.isfinite(res_norm) and res_norm <= params.tol_newton)
    unk = ShootingUnknowns.from_vector(v, N, sizes)
    out = PolishResult(success, res_norm, n_steps, unk, scp_cost=scp_cost, message="converged" if success else msg)
    if success:
        _fill_extremal(prob, out, steps, omega)
    return out


def _fill_extremal(prob, out: PolishResult, steps, omega):
    N = prob.N
    _, (t, Y, seg) = _integrate(prob, out.unknowns, steps, omega, record=True)
    X, G = Y[:, :N], Y[:, N:2 * N]
    out.times, out.states, out.costates, out.segments = t, X, G, seg
    out.controls = pointwise_optimal_control(prob, X, G)
    out.cost = float(Y[-1, 2 * N])
    H = hamiltonian(prob, X, G, omega)
    out.hamiltonian = H
    drift = 0.0
    for s in np.unique(seg):
        hs = H[seg == s]
        drift = max(drift, float(np.max(np.abs(hs - hs[0]))))
    out.hamiltonian_drift = drift


def polish_from_unknowns(prob: OcpProblem, unknowns: ShootingUnknowns, steps: int = 400, omega: float = 1.0) -> PolishResult:
    """Integrate a given set of unknowns without Newton iterations."""
    r = shoot(prob, unknowns, steps, omega)
    out = PolishResult(bool(np.all(np.isfinite(r))), float(np.max(np.abs(r))), 0, unknowns)
    _fill_extremal(prob, out, steps, omega)
    return out
