"""Embedded control-affine systems ``xdot = F0(x) + sum_j u_j F_j(x)`` and a small model zoo.

All vector fields and Jacobians broadcast over leading axes: ``x`` may be a
single state ``(N,)`` or a stack ``(..., N)``.  The shooting code relies on this
to integrate a batch of perturbed trajectories at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .manifold import EmbeddedManifold


class DynamicsError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""


@dataclass(frozen=True)
class ControlAffineSystem:
    """Vector fields of an embedded control-affine system.

    ``control_fields(x)`` returns the ``(..., N, m)`` matrix whose columns are
    F_1..F_m; ``control_field_jacobians(x)`` returns ``(..., m, N, N)``.
    """

    name: str
    manifold: EmbeddedManifold
    control_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    control_fields: Callable[[np.ndarray], np.ndarray]
    drift_jacobian: Callable[[np.ndarray], np.ndarray]
    control_field_jacobians: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)

    @property
    def state_dim(self) -> int:
        return self.manifold.ambient_dim

    def _check(self, x, u=None):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.state_dim:
            raise DynamicsError(f"{self.name}: state must have length {self.state_dim}, got shape {x.shape}")
        if u is None:
            return x
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.control_dim:
            raise DynamicsError(f"{self.name}: control must have length {self.control_dim}, got shape {u.shape}")
        return x, u

    def eval_dynamics(self, x, u) -> np.ndarray:
        x, u = self._check(x, u)
        return self.drift(x) + np.einsum("...nm,...m->...n", self.control_fields(x), u)

    def eval_jacobians(self, x, u) -> tuple[np.ndarray, np.ndarray]:
        """State Jacobian ``dF0/dx + sum_j u_j dF_j/dx`` and control matrix ``[F_1 .. F_m]``."""
        x, u = self._check(x, u)
        A = self.drift_jacobian(x) + np.einsum("...m,...mij->...ij", u, self.control_field_jacobians(x))
        return A, self.control_fields(x)


def eval_dynamics(sys: ControlAffineSystem, x, u) -> np.ndarray:
    return sys.eval_dynamics(x, u)


def eval_jacobians(sys: ControlAffineSystem, x, u) -> tuple[np.ndarray, np.ndarray]:
    return sys.eval_jacobians(x, u)


def rk4_step(f, x, h):
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(sys: ControlAffineSystem, x0, u_fn, t_span, steps: int) -> np.ndarray:
    """Fixed-step RK4 with the control held constant over each step.

    ``u_fn(t)`` is sampled at the left end of each step (zero-order hold); it may
    also be a constant array.  Returns the ``steps + 1`` states at step boundaries.
    """
    if steps < 1:
        raise DynamicsError("steps must be >= 1")
    x = sys._check(x0).copy()
    if not np.all(np.isfinite(x)):
        raise DivergenceError("initial state is not finite")
    t0, t1 = float(t_span[0]), float(t_span[1])
    h = (t1 - t0) / steps
    const_u = None if callable(u_fn) else np.asarray(u_fn, dtype=float)
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    for k in range(steps):
        u = const_u if const_u is not None else np.asarray(u_fn(t0 + k * h), dtype=float)
        x = rk4_step(lambda y: sys.eval_dynamics(y, u), x, h)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state at t={t0 + (k + 1) * h:.6g}")
        out[k + 1] = x
    return out


# ---------------------------------------------------------------------------
# Model zoo
# ---------------------------------------------------------------------------


def skew(v) -> np.ndarray:
    """Cross-product matrix, ``skew(v) @ x = v x x``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    a, b, c = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1], out[..., 0, 2] = -c, b
    out[..., 1, 0], out[..., 1, 2] = c, -a
    out[..., 2, 0], out[..., 2, 1] = -b, a
    return out


def omega_matrix(w) -> np.ndarray:
    """4x4 skew matrix with ``qdot = 0.5 * Omega(w) q`` for scalar-first q and body rates w."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (4, 4))
    out[..., 0, 1:] = -w
    out[..., 1:, 0] = w
    out[..., 1:, 1:] = -skew(w)
    return out


def xi_matrix(q) -> np.ndarray:
    """4x3 matrix with ``Omega(w) q = Xi(q) w``."""
    q = np.asarray(q, dtype=float)
    out = np.empty(q.shape[:-1] + (4, 3))
    out[..., 0, :] = -q[..., 1:]
    out[..., 1:, :] = q[..., 0, None, None] * np.eye(3) + skew(q[..., 1:])
    return out


def freeflyer(mass: float = 7.2, inertia=None) -> ControlAffineSystem:
    """Rigid free-flyer: state (r, v, q, w) in R^6 x S^3 x R^3, controls (force, torque)."""
    if inertia is None:
        inertia = np.diag([0.07, 0.07, 0.07])
    J = np.asarray(inertia, dtype=float)
    if J.shape != (3, 3) or not np.allclose(J, J.T):
        raise DynamicsError("inertia must be a symmetric 3x3 matrix")
    try:
        np.linalg.cholesky(J)
    except np.linalg.LinAlgError:
        raise DynamicsError("inertia must be positive-definite") from None
    if mass <= 0:
        raise DynamicsError("mass must be positive")
    Jinv = np.linalg.inv(J)
    manifold = EmbeddedManifold.from_spec(["euclidean:6", "sphere3", "euclidean:3"])
    N, m = 13, 6

    B = np.zeros((N, m))
    B[3:6, 0:3] = np.eye(3) / mass
    B[10:13, 3:6] = Jinv

    def drift(x):
        v, q, w = x[..., 3:6], x[..., 6:10], x[..., 10:13]
        Jw = w @ J.T
        out = np.zeros_like(x)
        out[..., 0:3] = v
        out[..., 6:10] = 0.5 * np.einsum("...ij,...j->...i", omega_matrix(w), q)
        gyro = np.stack([w[..., 1] * Jw[..., 2] - w[..., 2] * Jw[..., 1],
                         w[..., 2] * Jw[..., 0] - w[..., 0] * Jw[..., 2],
                         w[..., 0] * Jw[..., 1] - w[..., 1] * Jw[..., 0]], axis=-1)
        out[..., 10:13] = -gyro @ Jinv.T
        return out

    def fields(x):
        return np.broadcast_to(B, x.shape[:-1] + B.shape)

    def drift_jac(x):
        q, w = x[..., 6:10], x[..., 10:13]
        A = np.zeros(x.shape[:-1] + (N, N))
        A[..., 0:3, 3:6] = np.eye(3)
        A[..., 6:10, 6:10] = 0.5 * omega_matrix(w)
        A[..., 6:10, 10:13] = 0.5 * xi_matrix(q)
        Jw = w @ J.T
        dgyro = skew(w) @ J - skew(Jw)
        A[..., 10:13, 10:13] = -Jinv @ dgyro
        return A

    def field_jacs(x):
        return np.zeros(x.shape[:-1] + (m, N, N))

    return ControlAffineSystem(
        "freeflyer", manifold, m, drift, fields, drift_jac, field_jacs,
        params={"mass": float(mass), "inertia": J.tolist()},
    )


def torus_manipulator(joints: int = 2) -> ControlAffineSystem:
    """Kinematic planar arm on T^k: joint i rotates its circle coordinates at rate u_i."""
    if joints < 1:
        raise DynamicsError("joint count must be >= 1")
    k = joints
    N = 2 * k
    manifold = EmbeddedManifold.from_spec(["circle"] * k)
    rot = np.array([[0.0, -1.0], [1.0, 0.0]])
    dF = np.zeros((k, N, N))
    for i in range(k):
        dF[i, 2 * i:2 * i + 2, 2 * i:2 * i + 2] = rot

    def drift(x):
        return np.zeros_like(x)

    def fields(x):
        B = np.zeros(x.shape[:-1] + (N, k))
        for i in range(k):
            B[..., 2 * i, i] = -x[..., 2 * i + 1]
            B[..., 2 * i + 1, i] = x[..., 2 * i]
        return B

    def drift_jac(x):
        return np.zeros(x.shape[:-1] + (N, N))

    def field_jacs(x):
        return np.broadcast_to(dF, x.shape[:-1] + dF.shape)

    return ControlAffineSystem(
        "torus_manipulator", manifold, k, drift, fields, drift_jac, field_jacs, params={"joints": k}
    )


def double_integrator(dim: int = 1) -> ControlAffineSystem:
    """``p' = v, v' = u`` in R^dim; the linear oracle system."""
    if dim < 1:
        raise DynamicsError("dimension must be >= 1")
    N = 2 * dim
    manifold = EmbeddedManifold.from_spec([f"euclidean:{N}"])
    A = np.zeros((N, N))
    A[:dim, dim:] = np.eye(dim)
    B = np.zeros((N, dim))
    B[dim:, :] = np.eye(dim)

    def drift(x):
        return x @ A.T

    def fields(x):
        return np.broadcast_to(B, x.shape[:-1] + B.shape)

    def drift_jac(x):
        return np.broadcast_to(A, x.shape[:-1] + A.shape)

    def field_jacs(x):
        return np.zeros(x.shape[:-1] + (dim, N, N))

    return ControlAffineSystem(
        "double_integrator", manifold, dim, drift, fields, drift_jac, field_jacs, params={"dim": dim}
    )


MODEL_ZOO = {
    "freeflyer": freeflyer,
    "torus_manipulator": torus_manipulator,
    "double_integrator": double_integrator,
}


def make_model(name: str, **params) -> ControlAffineSystem:
    try:
        factory = MODEL_ZOO[name]
    except KeyError:
        raise DynamicsError(f"unknown model {name!r}; choose from {sorted(MODEL_ZOO)}") from None
    return factory(**params)
