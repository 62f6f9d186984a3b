"""Optimal control problem data: cost terms, control box, waypoints and obstacle penalties."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import ControlAffineSystem
from .smooth import smooth_max, smooth_max_grad


class ProblemError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Obstacles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Obstacle:
    """Sphere ``(center, radius)`` or axis-aligned box ``(lo, hi)`` in workspace coordinates."""

    shape: str
    center: Optional[tuple] = None
    radius: Optional[float] = None
    lo: Optional[tuple] = None
    hi: Optional[tuple] = None

    def __post_init__(self):
        if self.shape == "sphere":
            if self.center is None or self.radius is None or not self.radius > 0:
                raise ProblemError("sphere obstacle needs a center and radius > 0")
        elif self.shape == "box":
            if self.lo is None or self.hi is None or len(self.lo) != len(self.hi):
                raise ProblemError("box obstacle needs lo and hi of equal length")
            if not all(a < b for a, b in zip(self.lo, self.hi)):
                raise ProblemError(f"box obstacle needs lo < hi componentwise, got {self.lo} / {self.hi}")
        else:
            raise ProblemError(f"unknown obstacle shape {self.shape!r}")

    @classmethod
    def sphere(cls, center, radius) -> "Obstacle":
        return cls("sphere", center=tuple(float(c) for c in center), radius=float(radius))

    @classmethod
    def box(cls, lo, hi) -> "Obstacle":
        return cls("box", lo=tuple(float(c) for c in lo), hi=tuple(float(c) for c in hi))

    @property
    def dim(self) -> int:
        return len(self.center) if self.shape == "sphere" else len(self.lo)

    def to_dict(self) -> dict:
        if self.shape == "sphere":
            return {"shape": "sphere", "center": list(self.center), "radius": self.radius}
        return {"shape": "box", "lo": list(self.lo), "hi": list(self.hi)}


def signed_distance_and_grad(obs: Obstacle, p) -> tuple[np.ndarray, np.ndarray]:
    """Exact signed distance (negative inside) and its gradient; ``p`` is ``(..., k)``."""
    p = np.asarray(p, dtype=float)
    if obs.shape == "sphere":
        diff = p - np.asarray(obs.center)
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        safe = np.where(dist > 0, dist, 1.0)
        grad = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)
        return dist - obs.radius, grad
    lo, hi = np.asarray(obs.lo), np.asarray(obs.hi)
    c, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    rel = p - c
    q = np.abs(rel) - half
    qpos = np.maximum(q, 0.0)
    outside = np.sqrt(np.sum(qpos * qpos, axis=-1))
    qmax = np.max(q, axis=-1)
    sd = outside + np.minimum(qmax, 0.0)
    sgn = np.where(rel >= 0, 1.0, -1.0)
    safe = np.where(outside > 0, outside, 1.0)
    grad_out = sgn * qpos / safe[..., None]
    face = np.argmax(q, axis=-1)
    grad_in = np.where(np.arange(p.shape[-1]) == face[..., None], sgn, 0.0)
    grad = np.where((outside > 0)[..., None], grad_out, grad_in)
    return sd, grad


def signed_distance(obs: Obstacle, p) -> float:
    sd, _ = signed_distance_and_grad(obs, p)
    return sd if np.ndim(sd) else float(sd)


# ---------------------------------------------------------------------------
# Workspace extraction maps: state -> points (P, k) with Jacobian (P, k, N)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Extraction:
    name: str
    point_dim: int
    fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))


def position_extraction(start: int, dim: int, state_dim: int) -> Extraction:
    """Workspace point is the contiguous state block ``x[start:start+dim]``."""
    J = np.zeros((1, dim, state_dim))
    J[0, :, start:start + dim] = np.eye(dim)

    def fn(x):
        pts = x[..., None, start:start + dim]
        return pts, np.broadcast_to(J, x.shape[:-1] + J.shape)

    return Extraction(f"position[{start}:{start + dim}]", dim, fn)


def planar_arm_extraction(joints: int, link_length: float = 1.0) -> Extraction:
    """Link end points and link midpoints of a planar arm on T^k.

    The absolute orientation of link i is the complex product of the first i
    joint circles, so every point is polynomial in the embedded state.
    """
    k = joints
    N = 2 * k
    L = float(link_length)

    def fn(x):
        lead = x.shape[:-1]
        # running complex product c_i = z_1 * ... * z_i, z_j = x_j + i y_j
        c = np.zeros(lead + (k, 2))
        dc = np.zeros(lead + (k, 2, N))
        cr, ci = np.ones(lead), np.zeros(lead)
        dcr, dci = np.zeros(lead + (N,)), np.zeros(lead + (N,))
        for j in range(k):
            a, b = x[..., 2 * j], x[..., 2 * j + 1]
            nr, ni = cr * a - ci * b, cr * b + ci * a
            ndr = dcr * a[..., None] - dci * b[..., None]
            ndi = dcr * b[..., None] + dci * a[..., None]
            ndr[..., 2 * j] += cr
            ndr[..., 2 * j + 1] -= ci
            ndi[..., 2 * j] += ci
            ndi[..., 2 * j + 1] += cr
            cr, ci, dcr, dci = nr, ni, ndr, ndi
            c[..., j, 0], c[..., j, 1] = cr, ci
            dc[..., j, 0, :], dc[..., j, 1, :] = dcr, dci
        ends = L * np.cumsum(c, axis=-2)
        dends = L * np.cumsum(dc, axis=-3)
        prev = np.concatenate([np.zeros(lead + (1, 2)), ends[..., :-1, :]], axis=-2)
        dprev = np.concatenate([np.zeros(lead + (1, 2, N)), dends[..., :-1, :, :]], axis=-3)
        mids = 0.5 * (prev + ends)
        dmids = 0.5 * (dprev + dends)
        return np.concatenate([mids, ends], axis=-2), np.concatenate([dmids, dends], axis=-3)

    return Extraction(f"planar_arm[{k}]", 2, fn)


# ---------------------------------------------------------------------------
# Waypoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Waypoint:
    """Pointwise constraint ``G(x(time)) = 0`` with its Jacobian.

    ``target`` is a full state on M used for straight-line initialization;
    ``indices`` records which components an affine state-matching map fixes.
    """

    time: float
    G: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    target: np.ndarray
    indices: Optional[tuple] = None

    @property
    def rows(self) -> int:
        return int(np.size(self.G(self.target)))


def state_waypoint(time: float, target, indices: Optional[Sequence[int]] = None) -> Waypoint:
    """Affine map matching the selected state components to ``target``."""
    target = np.asarray(target, dtype=float)
    N = target.size
    idx = np.arange(N) if indices is None else np.asarray(indices, dtype=int)
    S = np.zeros((idx.size, N))
    S[np.arange(idx.size), idx] = 1.0
    tsel = target[idx]

    def G(x):
        return np.asarray(x, dtype=float)[..., idx] - tsel

    def jac(x):
        return np.broadcast_to(S, np.shape(x)[:-1] + S.shape)

    return Waypoint(float(time), G, jac, target, None if indices is None else tuple(int(i) for i in idx))


# ---------------------------------------------------------------------------
# Problem
# ---------------------------------------------------------------------------


@dataclass
class OcpProblem:
    system: ControlAffineSystem
    R: np.ndarray
    x0: np.ndarray
    waypoints: list
    horizon: float
    control_lo: np.ndarray
    control_hi: np.ndarray
    obstacles: list = field(default_factory=list)
    extraction: Optional[Extraction] = None
    f0_u: Optional[Callable] = None  # x -> (vector (m,), Jacobian (m, N))
    g_a: Optional[Callable] = None  # x -> (value, gradient (N,))
    d_safe: float = 0.05
    sharpness: float = 20.0

    def __post_init__(self):
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.x0 = np.asarray(self.x0, dtype=float)
        self.control_lo = np.broadcast_to(np.asarray(self.control_lo, float), (self.m,)).copy()
        self.control_hi = np.broadcast_to(np.asarray(self.control_hi, float), (self.m,)).copy()
        self.waypoints = sorted(self.waypoints, key=lambda w: w.time)
        self.warnings = self.validate()

    @property
    def N(self) -> int:
        return self.system.state_dim

    @property
    def m(self) -> int:
        return self.system.control_dim

    @property
    def manifold(self):
        return self.system.manifold

    def validate(self) -> list[str]:
        notes = []
        m, N = self.m, self.N
        if self.R.shape != (m, m) or not np.allclose(self.R, self.R.T):
            raise ProblemError(f"R must be a symmetric {m}x{m} matrix")
        try:
            np.linalg.cholesky(self.R)
        except np.linalg.LinAlgError:
            raise ProblemError("R must be positive-definite") from None
        if self.x0.shape != (N,):
            raise ProblemError(f"x0 must have length {N}")
        res = self.manifold.residual_norm(self.x0)
        if res > 1e-10:
            raise ProblemError(f"x0 is off the manifold (residual {res:.3e})")
        if not np.all(self.control_lo < self.control_hi):
            raise ProblemError("control bounds need lo < hi")
        if not np.all(np.isfinite(self.control_lo)) or not np.all(np.isfinite(self.control_hi)):
            raise ProblemError("control set must be compact (finite bounds)")
        if not self.waypoints:
            raise ProblemError("at least one waypoint (the goal) is required")
        times = [w.time for w in self.waypoints]
        if times[0] <= 0 or any(b <= a for a, b in zip(times, times[1:])):
            raise ProblemError(f"waypoint times must satisfy 0 < t_1 < ... < t_l, got {times}")
        if not np.isclose(times[-1], self.horizon, rtol=0, atol=1e-12):
            raise ProblemError(f"last waypoint time {times[-1]} must equal the horizon {self.horizon}")
        for i, w in enumerate(self.waypoints):
            J = np.atleast_2d(w.jac(w.target))
            if np.linalg.matrix_rank(J) < J.shape[0]:
                raise ProblemError(f"waypoint {i} Jacobian is rank deficient")
            if self.manifold.residual_norm(w.target) > 1e-8:
                raise ProblemError(f"waypoint {i} target is off the manifold")
        if self.obstacles and self.extraction is None:
            raise ProblemError("obstacles need a workspace extraction map")
        for o in self.obstacles:
            if o.dim != self.extraction.point_dim:
                raise ProblemError(f"obstacle dimension {o.dim} != workspace dimension {self.extraction.point_dim}")
        goal = self.waypoints[-1]
        if np.linalg.norm(goal.G(self.x0)) == 0.0:
            notes.append("x0 already satisfies the goal constraint (zero distance to the goal set)")
            warnings.warn(notes[-1], stacklevel=3)
        return notes

    # -- cost pieces, batched over leading axes ---------------------------------

    def f0u_terms(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        if self.f0_u is None:
            return np.zeros(X.shape[:-1] + (self.m,)), np.zeros(X.shape[:-1] + (self.m, self.N))
        vals, jacs = zip(*(self.f0_u(x) for x in X.reshape(-1, self.N)))
        lead = X.shape[:-1]
        return np.reshape(vals, lead + (self.m,)), np.reshape(jacs, lead + (self.m, self.N))

    def g_a_terms(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        if self.g_a is None:
            return np.zeros(X.shape[:-1]), np.zeros(X.shape)
        vals, grads = zip(*(self.g_a(x) for x in X.reshape(-1, self.N)))
        return np.reshape(vals, X.shape[:-1]), np.reshape(grads, X.shape)

    def penalty_residuals(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Per-point residuals ``r = h(d_safe - sd(p(x)))`` with ``g_b = sum r^2``.

        Returns ``(..., P * n_obstacles)`` residuals and their state Jacobian.
        """
        r, J, _ = self.penalty_model(X, curvature=False)
        return r, J

    def penalty_model(self, X, curvature: bool = True) -> tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
        """Residuals, Jacobians and the curvature ratio ``kappa = 1 + r h'' / h'^2``.

        The exact Hessian of ``r^2`` is ``2 (J'J + r h'' g g' + r h' Hess(s))``
        with ``J = h' g``; the middle term equals ``2 (kappa - 1) J'J`` and is
        positive semidefinite because softplus is convex.  ``kappa`` is None
        when ``curvature`` is false.
        """
        X = np.asarray(X, dtype=float)
        lead = X.shape[:-1]
        if not self.obstacles:
            z = np.zeros(lead + (0,))
            return z, np.zeros(lead + (0, self.N)), z
        pts, dpts = self.extraction(X)  # (..., P, k), (..., P, k, N)
        sd, dsd = self._signed_distances(pts)  # (..., P, O), (..., P, O, k)
        beta = self.sharpness
        s = self.d_safe - sd
        r = smooth_max(s, beta) * np.ones_like(sd)
        a = smooth_max_grad(s, beta)[..., None] * dsd
        J = -np.matmul(a, dpts)  # (..., P, O, N)
        # obstacle-major residual order
        r_out = np.swapaxes(r, -1, -2).reshape(lead + (-1,))
        J_out = np.swapaxes(J, -2, -3).reshape(lead + (-1, self.N))
        if not curvature:
            return r_out, J_out, None
        z = beta * s
        # r h''/h'^2 = softplus(z) exp(-z): tends to 1 far outside, 0 deep inside
        kappa = 1.0 + np.where(z < -30.0, 1.0, beta * r * np.exp(-np.minimum(z, 700.0)))
        return r_out, J_out, np.swapaxes(kappa, -1, -2).reshape(lead + (-1,))

    def _signed_distances(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Signed distances ``(..., P, O)`` and gradients ``(..., P, O, k)``; spheres in one pass."""
        cache = getattr(self, "_sphere_cache", None)
        if cache is None or cache[0] is not self.obstacles:
            sph = [i for i, o in enumerate(self.obstacles) if o.shape == "sphere"]
            C = np.array([self.obstacles[i].center for i in sph], dtype=float).reshape(len(sph), -1)
            Rs = np.array([self.obstacles[i].radius for i in sph], dtype=float)
            cache = (self.obstacles, sph, C, Rs)
            self._sphere_cache = cache
        _, sph, C, Rs = cache
        O, k = len(self.obstacles), pts.shape[-1]
        sd = np.empty(pts.shape[:-1] + (O,))
        grad = np.empty(pts.shape[:-1] + (O, k))
        if sph:
            diff = pts[..., None, :] - C  # (..., P, S, k)
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            safe = np.where(dist > 0, dist, 1.0)
            sd[..., sph] = dist - Rs
            grad[..., sph, :] = np.where((dist > 0)[..., None], diff / safe[..., None], 0.0)
        for i, o in enumerate(self.obstacles):
            if o.shape != "sphere":
                sd[..., i], grad[..., i, :] = signed_distance_and_grad(o, pts)
        return sd, grad

    def penalty_terms(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Obstacle penalty ``sum h(d_safe - sd(p(x)))^2`` and its state gradient."""
        r, J = self.penalty_residuals(X)
        return np.sum(r ** 2, axis=-1), 2.0 * np.einsum("...r,...rn->...n", r, J)

    def clearance(self, X) -> np.ndarray:
        """Minimum signed distance over obstacles and workspace points (inf without obstacles)."""
        X = np.asarray(X, dtype=float)
        if not self.obstacles:
            return np.full(X.shape[:-1], np.inf)
        pts, _ = self.extraction(X)
        sd, _ = self._signed_distances(pts)
        return np.min(sd, axis=(-1, -2))

    def penetration(self, X) -> float:
        """Largest intrusion into the safety margin, ``max(0, d_safe - clearance)``."""
        c = self.clearance(X)
        return float(np.max(np.maximum(self.d_safe - c, 0.0))) if np.size(c) else 0.0

    def state_cost_terms(self, X, omega: float) -> tuple[np.ndarray, np.ndarray]:
        ga, dga = self.g_a_terms(X)
        gb, dgb = self.penalty_terms(X)
        return ga + omega * gb, dga + omega * dgb


def penalty_g_b(prob: OcpProblem, x) -> tuple[float, np.ndarray]:
    val, grad = prob.penalty_terms(np.asarray(x, dtype=float))
    return float(val), grad


def running_cost(prob: OcpProblem, x, u, omega: float = 1.0) -> float:
    """``u'Ru + u.f0_u(x) + g_a(x) + omega * g_b(x)``."""
    if omega < 1.0:
        raise ProblemError("omega must be >= 1")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    f0u, _ = prob.f0u_terms(x)
    g, _ = prob.state_cost_terms(x, omega)
    return float(u @ prob.R @ u + u @ f0u + g)
