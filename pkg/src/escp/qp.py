"""Sparse convex QP solver (operator splitting with active-set polishing) and adjoint extraction.

The solver follows the OSQP scheme: constraints ``l <= A z <= u`` stack the
equality rows and the finite simple bounds, ADMM runs on a Ruiz-equilibrated
copy, and once the iterates settle the active set is solved exactly with a
regularized KKT system plus iterative refinement.  Dual sign convention:

    H z + q + Aeq' nu + mu = 0,   mu <= 0 at a lower bound, mu >= 0 at an upper bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .transcription import QpData


class QpError(RuntimeError):
    pass


@dataclass
class QpSolution:
    z: np.ndarray
    eq_duals: np.ndarray
    bound_duals: np.ndarray  # one per variable, zero where no bound is active
    status: str  # "optimal" | "primal_infeasible" | "max_iter"
    iterations: int
    polished: bool
    kkt: dict = field(default_factory=dict)
    objective: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def kkt_residuals(data: QpData, z, nu, mu) -> dict:
    """Infinity-norm residuals of the KKT conditions."""
    lo, hi = data.lo, data.hi
    stat = data.H @ z + data.q + data.Aeq.T @ nu + mu
    pb = np.maximum(np.maximum(lo - z, z - hi), 0.0)
    # a multiplier pushing against an absent bound is a sign violation of size |mu|
    gap_lo = np.where(np.isfinite(lo), np.abs(z - lo), 1.0)
    gap_hi = np.where(np.isfinite(hi), np.abs(hi - z), 1.0)
    comp = np.where(mu < 0, -mu * gap_lo, mu * gap_hi)
    return {
        "primal_eq": float(np.max(np.abs(data.Aeq @ z - data.beq), initial=0.0)),
        "primal_bound": float(np.max(pb, initial=0.0)),
        "dual": float(np.max(np.abs(stat), initial=0.0)),
        "complementarity": float(np.max(np.abs(comp), initial=0.0)),
    }


def _ruiz(P: sp.csc_matrix, A: sp.csc_matrix, q: np.ndarray, iters: int = 15):
    n, p = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(p)
    Ps, As, qs = P.copy(), A.copy(), q.copy()
    for _ in range(iters):
        cn = np.maximum(
            np.asarray(abs(Ps).max(axis=0).todense()).ravel() if n else np.zeros(0),
            np.asarray(abs(As).max(axis=0).todense()).ravel() if p else np.zeros(n),
        )
        rn = np.asarray(abs(As).max(axis=1).todense()).ravel() if p else np.zeros(0)
        dD = 1.0 / np.sqrt(np.clip(cn, 1e-4, 1e4))
        dE = 1.0 / np.sqrt(np.clip(rn, 1e-4, 1e4))
        dD[cn == 0] = 1.0
        dE[rn == 0] = 1.0
        Dm, Em = sp.diags(dD), sp.diags(dE)
        Ps = (Dm @ Ps @ Dm).tocsc()
        As = (Em @ As @ Dm).tocsc()
        qs = dD * qs
        D *= dD
        E *= dE
    pmean = np.mean(np.asarray(abs(Ps).max(axis=0).todense()).ravel()) if n else 1.0
    c = 1.0 / np.clip(max(pmean, np.max(np.abs(qs), initial=0.0)), 1e-4, 1e4)
    return (c * Ps).tocsc(), As, c * qs, D, E, c


class _Admm:
    def __init__(self, data: QpData, rho: float = 0.1, sigma: float = 1e-6, alpha: float = 1.6):
        n = data.n
        bounded = np.flatnonzero(np.isfinite(data.lo) | np.isfinite(data.hi))
        S = sp.csc_matrix((np.ones(bounded.size), (np.arange(bounded.size), bounded)), shape=(bounded.size, n))
        self.bounded = bounded
        self.p_eq = data.Aeq.shape[0]
        A = sp.vstack([data.Aeq, S], format="csc")
        l = np.concatenate([data.beq, data.lo[bounded]])
        u = np.concatenate([data.beq, data.hi[bounded]])
        self.P, self.A, self.q, self.D, self.E, self.c = _ruiz(sp.csc_matrix(data.H), A, data.q)
        self.l = np.where(np.isfinite(l), self.E * l, l)
        self.u = np.where(np.isfinite(u), self.E * u, u)
        self.eq = np.abs(self.u - self.l) < 1e-12 * (1 + np.abs(self.l))
        self.sigma, self.alpha = sigma, alpha
        self.n, self.m = n, A.shape[0]
        self.set_rho(rho)

    def set_rho(self, rho: float):
        self.rho = rho
        self.rho_vec = np.where(self.eq, 1e3 * rho, rho)
        K = sp.bmat(
            [[self.P + self.sigma * sp.eye(self.n), self.A.T], [self.A, sp.diags(-1.0 / self.rho_vec)]],
            format="csc",
        )
        self.lu = spla.splu(K)

    def unscale(self, x, y):
        return self.D * x, self.E * y / self.c

    def scale(self, x, y):
        return x / self.D, y * self.c / self.E


def _polish(data: QpData, z, y_eq, y_bnd_full, bounded):
    """Exact solve on the guessed active set; returns ``(z, nu, mu)`` or ``None``."""
    n = data.n
    lo, hi = data.lo, data.hi
    act_lo = bounded[(z[bounded] - lo[bounded] < -y_bnd_full[bounded]) & np.isfinite(lo[bounded])]
    act_hi = bounded[(hi[bounded] - z[bounded] < y_bnd_full[bounded]) & np.isfinite(hi[bounded])]
    act_hi = np.setdiff1d(act_hi, act_lo)
    act = np.concatenate([act_lo, act_hi])
    vals = np.concatenate([lo[act_lo], hi[act_hi]])
    S = sp.csc_matrix((np.ones(act.size), (np.arange(act.size), act)), shape=(act.size, n))
    Ac = sp.vstack([data.Aeq, S], format="csc")
    bc = np.concatenate([data.beq, vals])
    pc = Ac.shape[0]
    K = sp.bmat([[data.H, Ac.T], [Ac, None]], format="csc")
    delta = 1e-9
    Kreg = (K + sp.diags(np.concatenate([np.full(n, delta), np.full(pc, -delta)]))).tocsc()
    try:
        lu = spla.splu(Kreg)
    except RuntimeError:
        return None
    rhs = np.concatenate([-data.q, bc])
    sol = lu.solve(rhs)
    for _ in range(10):
        r = rhs - K @ sol
        if np.max(np.abs(r)) < 1e-14 * (1 + np.max(np.abs(rhs))):
            break
        sol = sol + lu.solve(r)
    if not np.all(np.isfinite(sol)):
        return None
    zp = sol[:n]
    yc = sol[n:]
    nu = yc[: data.Aeq.shape[0]]
    mu = np.zeros(n)
    mu[act] = yc[data.Aeq.shape[0]:]
    return zp, nu, mu


def solve_qp(
    data: QpData,
    tol: float = 1e-8,
    max_iter: int = 20000,
    warm_start: Optional[tuple] = None,
    check_every: int = 25,
    polish: bool = True,
) -> QpSolution:
    """Solve the QP to ``tol`` on the infinity-norm KKT residuals.

    ``warm_start = (z, eq_duals, bound_duals)`` seeds the iterates.
    """
    if data.n == 0:
        raise QpError("empty QP")
    if np.any(data.lo > data.hi):
        return QpSolution(np.full(data.n, np.nan), np.zeros(data.Aeq.shape[0]), np.zeros(data.n),
                          "primal_infeasible", 0, False)
    ad = _Admm(data)
    n, m = ad.n, ad.m
    bounded = ad.bounded
    x = np.zeros(n)
    y = np.zeros(m)
    if warm_start is not None:
        z0, nu0, mu0 = warm_start
        y0 = np.concatenate([nu0, mu0[bounded]]) if nu0 is not None else np.zeros(m)
        x, y = ad.scale(np.asarray(z0, float), y0)
    zc = np.clip(ad.A @ x, ad.l, ad.u)
    scale_ref = max(1.0, np.max(np.abs(data.q), initial=0.0), np.max(np.abs(data.beq), initial=0.0))
    tried_polish_at = -(10 ** 9)
    y_prev = y.copy()
    for it in range(1, max_iter + 1):
        rhs = np.concatenate([ad.sigma * x - ad.q, zc - y / ad.rho_vec])
        sol = ad.lu.solve(rhs)
        xt, nu_k = sol[:n], sol[n:]
        zt = zc + (nu_k - y) / ad.rho_vec
        x = ad.alpha * xt + (1 - ad.alpha) * x
        zr = ad.alpha * zt + (1 - ad.alpha) * zc
        zc = np.clip(zr + y / ad.rho_vec, ad.l, ad.u)
        y = y + ad.rho_vec * (zr - zc)
        if it % check_every:
            continue

        xu, yu = ad.unscale(x, y)
        Ax = (ad.A @ x) / ad.E
        zu = zc / ad.E
        r_prim = np.max(np.abs(Ax - zu), initial=0.0)
        Hx = data.H @ xu
        ATy = ad.A.T @ y
        r_dual = np.max(np.abs(Hx + data.q + ATy / ad.D / ad.c), initial=0.0)
        eps_p = tol * (1 + max(np.max(np.abs(Ax), initial=0), np.max(np.abs(zu), initial=0)))
        eps_d = tol * (1 + max(np.max(np.abs(Hx), initial=0), np.max(np.abs(data.q), initial=0)))

        # primal infeasibility certificate from the dual increment
        dy = (y - y_prev) * ad.E
        y_prev = y.copy()
        ndy = np.max(np.abs(dy), initial=0.0)
        if ndy > 1e-12:
            Atdy = (ad.A.T @ (dy / ad.E)) / ad.D  # A' dy in unscaled variables
            with np.errstate(invalid="ignore"):
                up = np.where(dy > 0, ad.u / ad.E * dy, 0.0)
                dn = np.where(dy < 0, ad.l / ad.E * dy, 0.0)
            lu_term = float(np.sum(np.nan_to_num(up, nan=0.0)) + np.sum(np.nan_to_num(dn, nan=0.0)))
            if np.max(np.abs(Atdy)) <= 1e-6 * ndy and lu_term < -1e-6 * ndy:
                return QpSolution(xu, yu[: ad.p_eq], np.zeros(n), "primal_infeasible", it, False)

        converged = r_prim <= eps_p and r_dual <= eps_d
        loose = r_prim < max(1e-3 * scale_ref, 1e3 * eps_p) and r_dual < max(1e-3 * scale_ref, 1e3 * eps_d)
        if polish and (converged or (loose and it - tried_polish_at >= 4 * check_every)):
            tried_polish_at = it
            mu_full = np.zeros(n)
            mu_full[bounded] = yu[ad.p_eq:]
            out = _polish(data, xu, yu[: ad.p_eq], mu_full, bounded)
            if out is not None:
                zp, nu, mu = out
                res = kkt_residuals(data, zp, nu, mu)
                pref = tol * (1 + np.max(np.abs(data.beq), initial=0.0) + np.max(np.abs(zp), initial=0.0))
                dref = tol * (1 + np.max(np.abs(data.q), initial=0.0) + np.max(np.abs(data.H @ zp), initial=0.0))
                if res["primal_eq"] <= pref and res["primal_bound"] <= pref and res["dual"] <= dref \
                        and res["complementarity"] <= dref:
                    return QpSolution(zp, nu, mu, "optimal", it, True, res, data.objective(zp))
        if converged:
            mu = np.zeros(n)
            mu[bounded] = yu[ad.p_eq:]
            return QpSolution(xu, yu[: ad.p_eq], mu, "optimal", it, False,
                              kkt_residuals(data, xu, yu[: ad.p_eq], mu), data.objective(xu))

        # adaptive step size, refactor only on a large change
        if r_prim > 0 and r_dual > 0:
            ps = r_prim / max(np.max(np.abs(Ax), initial=0), np.max(np.abs(zu), initial=0), 1e-30)
            ds = r_dual / max(np.max(np.abs(Hx), initial=0), np.max(np.abs(data.q), initial=0), 1e-30)
            new_rho = float(np.clip(ad.rho * np.sqrt(ps / max(ds, 1e-30)), 1e-6, 1e6))
            if new_rho > 5 * ad.rho or new_rho < 0.2 * ad.rho:
                ad.set_rho(new_rho)

    xu, yu = ad.unscale(x, y)
    mu = np.zeros(n)
    mu[bounded] = yu[ad.p_eq:]
    return QpSolution(xu, yu[: ad.p_eq], mu, "max_iter", max_iter, False,
                      kkt_residuals(data, xu, yu[: ad.p_eq], mu), data.objective(xu))


# ---------------------------------------------------------------------------
# Adjoints
# ---------------------------------------------------------------------------


@dataclass
class Adjoints:
    """Discrete costates recovered from the QP multipliers.

    ``gamma[i]`` is the dynamics multiplier of the interval starting at node i
    (the last node repeats the last interval).  ``gamma_minus``/``gamma_plus``
    are the one-sided node costates, NaN where undefined, and ``lam[i]`` the
    waypoint multipliers with ``gamma_plus = gamma_minus - J' lam`` at a
    waypoint node and ``gamma_minus = J' lam`` at the final one.
    """

    gamma: np.ndarray
    gamma_minus: np.ndarray
    gamma_plus: np.ndarray
    lam: list
    nu_init: np.ndarray


def extract_adjoints(data: QpData, sol: QpSolution) -> Adjoints:
    L = data.layout
    if L is None:
        raise QpError("adjoint extraction needs a transcribed QP")
    if not sol.ok:
        raise QpError(f"refusing to extract adjoints from a {sol.status} solution")
    d, N, dt = L.d, L.N, L.dt
    nu = sol.eq_duals
    nu_dyn = nu[L.dyn_rows].reshape(d - 1, N)
    gamma = np.vstack([nu_dyn, nu_dyn[-1:]])
    grad = (data.H @ sol.z + data.q)[: L.n_x].reshape(d, N)
    g_minus = 0.5 * grad
    g_plus = 0.5 * grad
    g_plus[0], g_minus[0] = grad[0], 0.0
    g_minus[-1], g_plus[-1] = grad[-1], 0.0
    A_L, A_R = data.extras["A_left"], data.extras["A_right"]
    gm = np.full((d, N), np.nan)
    gp = np.full((d, N), np.nan)
    gm[1:] = nu_dyn - 0.5 * dt * np.einsum("kji,kj->ki", A_R, nu_dyn) + g_minus[1:]
    gp[:-1] = nu_dyn + 0.5 * dt * np.einsum("kji,kj->ki", A_L, nu_dyn) - g_plus[:-1]
    lam = [-nu[s] for s in L.waypoint_rows]
    return Adjoints(gamma, gm, gp, lam, nu[L.init_rows].copy())
