import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from escp.manifold import EmbeddedManifold, ManifoldError

S1 = EmbeddedManifold.from_spec(["circle"])
S3 = EmbeddedManifold.from_spec(["sphere3"])
R2 = EmbeddedManifold.from_spec(["euclidean:2"])
MIXED = EmbeddedManifold.from_spec(["euclidean:2", "circle", "sphere3", "circle"])  # N = 10, n = 7

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
ambient = arrays(np.float64, MIXED.ambient_dim, elements=finite)


def random_point(rng, m=MIXED):
    x = rng.normal(size=m.ambient_dim)
    return m.project(x)


def nonzero_blocks(x):
    return all(np.linalg.norm(x[f.block]) > 1e-3 for f in MIXED.unit_factors())


# -- examples -----------------------------------------------------------------


def test_dims():
    assert (MIXED.ambient_dim, MIXED.intrinsic_dim, MIXED.codim) == (10, 7, 3)
    assert MIXED.spec() == ["euclidean:2", "circle", "sphere3", "circle"]


@pytest.mark.parametrize("m, x, expected", [
    (S3, [1, 0, 0, 0], [0.0]),
    (S1, [0.6, 0.8], [0.0]),
    (S1, [1.0, 1.0], [1.0]),
])
def test_constraint_residual_examples(m, x, expected):
    assert np.allclose(m.constraint_residual(x), expected, atol=1e-15)


def test_residual_dimension_mismatch():
    with pytest.raises(ManifoldError):
        S1.constraint_residual([1.0, 0.0, 0.0])


@pytest.mark.parametrize("m, x, expected", [
    (S1, [2, 0], [1, 0]),
    (S3, [0, 0, 0, 2], [0, 0, 0, 1]),
    (R2, [3, -1], [3, -1]),
])
def test_project_examples(m, x, expected):
    assert np.allclose(m.project(x), expected)


def test_project_zero_block():
    with pytest.raises(ManifoldError, match="no unique projection"):
        S1.project([0.0, 0.0])


def test_unknown_factor():
    with pytest.raises(ManifoldError):
        EmbeddedManifold.from_spec(["torus"])


def test_tangent_examples():
    assert np.allclose(S1.tangent_basis([1, 0]).columns, [[0], [1]])
    assert np.allclose(R2.tangent_basis([5, -2]).columns, np.eye(2))
    B = S3.tangent_basis([1, 0, 0, 0]).columns
    # SVD oracle: null space of the constraint Jacobian 2 q'
    _, _, Vt = np.linalg.svd(np.array([[2.0, 0, 0, 0]]))
    null = Vt[1:].T
    assert np.allclose(B @ B.T, null @ null.T)
    assert np.allclose(np.abs(B), np.eye(4)[:, 1:])


def test_tangent_requires_on_manifold():
    with pytest.raises(ManifoldError, match="off the manifold"):
        S1.tangent_basis([1.0, 1.0])


def test_project_costate_examples():
    x = np.array([0.6, 0.8])
    tangent = 3.0 * np.array([-0.8, 0.6])
    _, rec = S1.project_costate(x, tangent)
    assert np.linalg.norm(rec - tangent) <= 1e-12
    _, rec = S1.project_costate(x, x)
    assert np.linalg.norm(rec) <= 1e-12


def test_project_costate_matches_dense_projector():
    rng = np.random.default_rng(3)
    x = random_point(rng)
    g = rng.normal(size=MIXED.ambient_dim)
    coeffs, rec = MIXED.project_costate(x, g)
    B = MIXED.tangent_basis(x).columns
    assert coeffs.shape == (MIXED.intrinsic_dim,)
    assert np.allclose(rec, B @ B.T @ g, atol=1e-12)


def test_geodesic_examples():
    h = np.sqrt(0.5)
    assert np.allclose(S1.geodesic_interpolate([1, 0], [0, 1], 0.5), [h, h])
    theta = np.pi / 2
    q0, q1 = np.array([1.0, 0, 0, 0]), np.array([0, 1.0, 0, 0])
    slerp = (np.sin(0.5 * theta) * q0 + np.sin(0.5 * theta) * q1) / np.sin(theta)
    assert np.allclose(S3.geodesic_interpolate(q0, q1, 0.5), slerp)
    assert np.allclose(S3.geodesic_interpolate(q0, q1, 0.5), [h, h, 0, 0])


def test_geodesic_antipodal_circle():
    with pytest.raises(ManifoldError, match="antipodal"):
        S1.geodesic_interpolate([1, 0], [-1, 0], 0.5)


def test_geodesic_quaternion_uses_nearer_representative():
    q = np.array([1.0, 0, 0, 0])
    mid = S3.geodesic_interpolate(q, -q, 0.5)
    assert np.allclose(np.abs(mid), q)


# -- properties ---------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(ambient)
def test_projection_is_on_manifold_and_idempotent(x):
    if not nonzero_blocks(x):
        return
    p = MIXED.project(x)
    assert MIXED.residual_norm(p) <= 1e-12
    assert np.allclose(MIXED.project(p), p, atol=1e-14)
    # Euclidean blocks untouched
    assert np.array_equal(p[:2], x[:2])


@settings(max_examples=200, deadline=None)
@given(ambient)
def test_projection_is_closest_point(x):
    if not nonzero_blocks(x):
        return
    p = MIXED.project(x)
    rng = np.random.default_rng(0)
    for _ in range(5):
        y = random_point(rng)
        assert np.linalg.norm(x - p) <= np.linalg.norm(x - y) + 1e-12


@settings(max_examples=200, deadline=None)
@given(ambient)
def test_tangent_basis_orthonormal_and_tangent(x):
    if not nonzero_blocks(x):
        return
    p = MIXED.project(x)
    B = MIXED.tangent_basis(p).columns
    assert B.shape == (10, 7)
    assert np.allclose(B.T @ B, np.eye(7), atol=1e-12)
    assert np.max(np.abs(MIXED.constraint_jacobian(p) @ B)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(ambient)
def test_constraint_jacobian_finite_difference(x):
    J = MIXED.constraint_jacobian(x)
    h = 1e-6
    fd = np.empty_like(J)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fd[:, i] = (MIXED.constraint_residual(x + e) - MIXED.constraint_residual(x - e)) / (2 * h)
    assert np.allclose(J, fd, rtol=1e-5, atol=1e-5)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(0, 1))
def test_geodesic_stays_on_manifold(seed, s):
    rng = np.random.default_rng(seed)
    a, b = random_point(rng), random_point(rng)
    try:
        x = MIXED.geodesic_interpolate(a, b, s)
    except ManifoldError:
        return  # antipodal draw
    assert MIXED.residual_norm(x) <= 1e-12
    assert np.allclose(MIXED.geodesic_interpolate(a, b, 0.0), a, atol=1e-12)
    end = MIXED.geodesic_interpolate(a, b, 1.0)
    # S^3 may end at the other representative of the same attitude
    assert np.allclose(np.abs(end), np.abs(b), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_projected_costate_is_tangent(seed):
    rng = np.random.default_rng(seed)
    x = random_point(rng)
    g = rng.normal(size=10)
    _, rec = MIXED.project_costate(x, g)
    assert np.max(np.abs(MIXED.constraint_jacobian(x) @ rec)) <= 1e-12
    _, rec2 = MIXED.project_costate(x, rec)
    assert np.allclose(rec2, rec, atol=1e-12)
