"""Embedded product manifolds built from Euclidean, circle and unit-quaternion factors.

A manifold is an ordered list of factors laid out contiguously in the ambient
coordinate vector.  Every operation here works factor by factor, so residuals,
projections and tangent frames are closed-form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ON_MANIFOLD_TOL = 1e-8
ANTIPODAL_TOL = 1e-9


class ManifoldError(ValueError):
    """Raised for dimension mismatches, off-manifold inputs and degenerate blocks."""


@dataclass(frozen=True)
class Factor:
    kind: str  # "euclidean" | "circle" | "sphere3"
    dim: int  # ambient dimension of the block
    offset: int

    @property
    def intrinsic_dim(self) -> int:
        return self.dim if self.kind == "euclidean" else self.dim - 1

    @property
    def unit_norm(self) -> bool:
        return self.kind != "euclidean"

    @property
    def block(self) -> slice:
        return slice(self.offset, self.offset + self.dim)

    def spec(self) -> str:
        return f"euclidean:{self.dim}" if self.kind == "euclidean" else self.kind


def _parse_factor(token: str) -> tuple[str, int]:
    token = token.strip().lower()
    if token in ("circle", "s1"):
        return "circle", 2
    if token in ("sphere3", "s3", "quaternion"):
        return "sphere3", 4
    if token.startswith("euclidean"):
        _, _, size = token.partition(":")
        try:
            d = int(size)
        except ValueError:
            raise ManifoldError(f"bad euclidean factor {token!r}; expected 'euclidean:<d>'") from None
        if d < 1:
            raise ManifoldError(f"euclidean factor needs d >= 1, got {d}")
        return "euclidean", d
    raise ManifoldError(f"unknown manifold factor {token!r}")


@dataclass(frozen=True)
class EmbeddedManifold:
    """A product of {R^d, S^1, S^3} embedded in R^N by canonical inclusion."""

    factors: tuple[Factor, ...]

    @classmethod
    def from_spec(cls, tokens: Sequence[str]) -> "EmbeddedManifold":
        """Build from a factor list such as ``["euclidean:6", "sphere3", "euclidean:3"]``."""
        factors = []
        offset = 0
        for token in tokens:
            kind, dim = _parse_factor(token)
            factors.append(Factor(kind, dim, offset))
            offset += dim
        if not factors:
            raise ManifoldError("manifold needs at least one factor")
        return cls(tuple(factors))

    @property
    def ambient_dim(self) -> int:
        return sum(f.dim for f in self.factors)

    @property
    def intrinsic_dim(self) -> int:
        return sum(f.intrinsic_dim for f in self.factors)

    @property
    def codim(self) -> int:
        return self.ambient_dim - self.intrinsic_dim

    def spec(self) -> list[str]:
        return [f.spec() for f in self.factors]

    def unit_factors(self) -> list[Factor]:
        return [f for f in self.factors if f.unit_norm]

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.ambient_dim:
            raise ManifoldError(f"expected ambient vector of length {self.ambient_dim}, got shape {x.shape}")
        return x

    def constraint_residual(self, x) -> np.ndarray:
        """Per unit-norm factor ``||block||^2 - 1``; Euclidean factors contribute nothing.

        Accepts a single point or a stack ``(..., N)``.
        """
        x = self._check(x)
        cols = [np.sum(x[..., f.block] ** 2, axis=-1) - 1.0 for f in self.unit_factors()]
        if not cols:
            return np.zeros(x.shape[:-1] + (0,))
        return np.stack(cols, axis=-1)

    def constraint_jacobian(self, x) -> np.ndarray:
        """Jacobian of :meth:`constraint_residual`, shape ``(..., N - n, N)``."""
        x = self._check(x)
        units = self.unit_factors()
        J = np.zeros(x.shape[:-1] + (len(units), self.ambient_dim))
        for row, f in enumerate(units):
            J[..., row, f.block] = 2.0 * x[..., f.block]
        return J

    def residual_norm(self, x) -> float:
        r = self.constraint_residual(x)
        return float(np.max(np.abs(r))) if r.size else 0.0

    def project(self, x) -> np.ndarray:
        """Closest point on M: radial normalization of each unit-norm block."""
        x = self._check(x).copy()
        for f in self.unit_factors():
            norms = np.linalg.norm(x[..., f.block], axis=-1, keepdims=True)
            if np.any(norms == 0.0):
                raise ManifoldError(f"zero-norm {f.kind} block at offset {f.offset} has no unique projection")
            x[..., f.block] = x[..., f.block] / norms
        return x

    def _require_on(self, x: np.ndarray) -> None:
        res = self.residual_norm(x)
        if res > ON_MANIFOLD_TOL:
            raise ManifoldError(f"point is off the manifold (residual {res:.3e} > {ON_MANIFOLD_TOL:g})")

    def tangent_basis(self, x) -> "TangentBasis":
        x = self._check(x)
        if x.ndim != 1:
            raise ManifoldError("tangent_basis expects a single point")
        self._require_on(x)
        cols = []
        for f in self.factors:
            blk = x[f.block]
            if f.kind == "euclidean":
                local = np.eye(f.dim)
            elif f.kind == "circle":
                local = np.array([[-blk[1]], [blk[0]]])
            else:
                local = quat_tangent_frame(blk)
            full = np.zeros((self.ambient_dim, local.shape[1]))
            full[f.block] = local
            cols.append(full)
        raw = np.hstack(cols)
        # Modified Gram-Schmidt; the per-factor frames are already orthogonal so
        # this only removes rounding.
        Q = np.zeros_like(raw)
        for j in range(raw.shape[1]):
            v = raw[:, j].copy()
            for i in range(j):
                v -= (Q[:, i] @ v) * Q[:, i]
            Q[:, j] = v / np.linalg.norm(v)
        return TangentBasis(base_point=x.copy(), columns=Q)

    def project_costate(self, x, gamma) -> tuple[np.ndarray, np.ndarray]:
        """Orthogonal projection of an ambient covector onto T*_x M.

        Returns the coefficients against the tangent frame and the ambient
        reconstruction ``sum_j <gamma, E_j> E_j``.
        """
        basis = self.tangent_basis(x)
        gamma = self._check(gamma)
        coeffs = basis.columns.T @ gamma
        return coeffs, basis.columns @ coeffs

    def geodesic_interpolate(self, x0, x1, s: float) -> np.ndarray:
        """Per-factor geodesic: lerp on R^d, shorter arc on S^1, slerp on S^3."""
        x0 = self._check(x0)
        x1 = self._check(x1)
        self._require_on(x0)
        self._require_on(x1)
        out = np.empty(self.ambient_dim)
        for f in self.factors:
            a, b = x0[f.block], x1[f.block]
            if f.kind == "euclidean":
                out[f.block] = (1.0 - s) * a + s * b
                continue
            a = a / np.linalg.norm(a)
            b = b / np.linalg.norm(b)
            dot = float(a @ b)
            if f.kind == "sphere3" and dot < 0.0:
                # q and -q are the same attitude; take the nearer representative.
                b, dot = -b, -dot
            if dot <= -1.0 + ANTIPODAL_TOL:
                raise ManifoldError(
                    f"antipodal {f.kind} endpoints at offset {f.offset}; geodesic is not unique "
                    "(perturb one of the targets)"
                )
            out[f.block] = _slerp(a, b, min(dot, 1.0), s)
        return out


def _slerp(a: np.ndarray, b: np.ndarray, dot: float, s: float) -> np.ndarray:
    theta = np.arccos(dot)
    if theta < 1e-12:
        v = (1.0 - s) * a + s * b
        return v / np.linalg.norm(v)
    st = np.sin(theta)
    v = (np.sin((1.0 - s) * theta) * a + np.sin(s * theta) * b) / st
    return v / np.linalg.norm(v)


def quat_tangent_frame(q: np.ndarray) -> np.ndarray:
    """Three orthonormal tangents of S^3 at a scalar-first unit quaternion.

    Column i is ``q * e_i`` for the pure quaternion e_i, which also equals the
    matrix mapping body rates w to ``Omega(w) q``.
    """
    q0, q1, q2, q3 = q
    return np.array(
        [
            [-q1, -q2, -q3],
            [q0, -q3, q2],
            [q3, q0, -q1],
            [-q2, q1, q0],
        ]
    )


@dataclass(frozen=True)
class TangentBasis:
    base_point: np.ndarray
    columns: np.ndarray  # (N, n), orthonormal

    @property
    def dim(self) -> int:
        return self.columns.shape[1]

    def projector(self) -> np.ndarray:
        return self.columns @ self.columns.T


# Functional aliases mirroring the method names.
def constraint_residual(m: EmbeddedManifold, x) -> np.ndarray:
    return m.constraint_residual(x)


def project(m: EmbeddedManifold, x) -> np.ndarray:
    return m.project(x)


def tangent_basis(m: EmbeddedManifold, x) -> TangentBasis:
    return m.tangent_basis(x)


def project_costate(m: EmbeddedManifold, x, gamma) -> tuple[np.ndarray, np.ndarray]:
    return m.project_costate(x, gamma)


def geodesic_interpolate(m: EmbeddedManifold, x0, x1, s: float) -> np.ndarray:
    return m.geodesic_interpolate(x0, x1, s)
