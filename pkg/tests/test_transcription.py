import io

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_di_problem, make_torus_problem
from escp.dynamics import double_integrator, freeflyer, torus_manipulator
from escp.problem import Obstacle, OcpProblem, position_extraction, state_waypoint
from escp.qp import solve_qp
from escp.scp import initialize
from escp.transcription import (
    DiscreteTrajectory,
    ScpParams,
    TranscriptionError,
    build_subproblem,
    linearize_dynamics,
    make_grid,
    trajectory_diagnostics,
    trapezoid_defects,
    trust_majorizer,
    trust_penalty,
)


def ff_problem(obstacles=()):
    x0 = np.zeros(13)
    x0[6] = 1.0
    goal = np.zeros(13)
    goal[:3] = [2.0, 1.0, 0.5]
    goal[6], goal[9] = np.cos(np.pi / 4), np.sin(np.pi / 4)
    return OcpProblem(freeflyer(), np.eye(6), x0, [state_waypoint(20.0, goal)], 20.0, -np.ones(6), np.ones(6),
                      obstacles=list(obstacles), extraction=position_extraction(0, 3, 13))


def random_traj(prob, d, rng):
    times = make_grid(prob, d)
    X = prob.manifold.project(rng.normal(size=(d, prob.N)))
    U = rng.uniform(prob.control_lo, prob.control_hi, size=(d, prob.m))
    return DiscreteTrajectory(times, X, U)


# -- data types -------------------------------------------------------------------


def test_trajectory_validation():
    with pytest.raises(TranscriptionError):
        DiscreteTrajectory([0.0], np.zeros((1, 2)), np.zeros((1, 1)))
    with pytest.raises(TranscriptionError):
        DiscreteTrajectory([0.0, 0.1, 0.3], np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(TranscriptionError):
        DiscreteTrajectory([0.0, 0.5, 1.0], np.zeros((2, 2)), np.zeros((3, 1)))


def test_vector_round_trip():
    rng = np.random.default_rng(0)
    prob = ff_problem()
    t = random_traj(prob, 7, rng)
    z = t.to_vector()
    assert z.size == 7 * 13 + 6 * 6
    back = DiscreteTrajectory.from_vector(z, t.times, 13, 6)
    assert np.array_equal(back.states, t.states) and np.array_equal(back.controls[:-1], t.controls[:-1])


def test_scp_params_invariants():
    with pytest.raises(ValueError):
        ScpParams(omega0=0.5)
    with pytest.raises(ValueError):
        ScpParams(rho_reject=0.3, rho_accept=0.25)
    with pytest.raises(ValueError):
        ScpParams(Delta0=0.0)


# -- linearization ----------------------------------------------------------------


def test_linearize_examples():
    A, B, c = linearize_dynamics(torus_manipulator(1), [1.0, 0.0], [0.0])
    assert np.allclose(A, 0) and np.allclose(B[:, 0], [0, 1]) and np.allclose(c, 0)
    sys = double_integrator(1)
    rng = np.random.default_rng(1)
    for _ in range(5):
        xk, uk, x, u = rng.normal(size=2), rng.normal(size=1), rng.normal(size=2), rng.normal(size=1)
        A, B, c = linearize_dynamics(sys, xk, uk)
        assert np.allclose(A @ (x - xk) + B @ u + c, sys.eval_dynamics(x, u))  # linear: model is exact


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_linearization_exact_at_expansion_point(seed):
    rng = np.random.default_rng(seed)
    for sys in (freeflyer(), torus_manipulator(3)):
        xk = sys.manifold.project(rng.normal(size=sys.state_dim))
        uk = rng.normal(size=sys.control_dim)
        A, B, c = linearize_dynamics(sys, xk, uk)
        assert np.allclose(B @ uk + c, sys.eval_dynamics(xk, uk), atol=1e-14)


# -- subproblem structure --------------------------------------------------------------


def test_hand_assembled_d3_double_integrator():
    prob = make_di_problem(bound=5.0)
    times = make_grid(prob, 3)
    prev = DiscreteTrajectory(times, np.zeros((3, 2)), np.zeros((3, 1)))
    data = build_subproblem(prob, prev, 1e4, 1.0, ScpParams())
    dt = 0.5
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    I = np.eye(2)
    Aeq = np.zeros((8, 8))
    Aeq[0:2, 0:2] = I
    for k in range(2):
        r = 2 + 2 * k
        Aeq[r:r + 2, 2 * k:2 * k + 2] = -I - dt / 2 * A
        Aeq[r:r + 2, 2 * k + 2:2 * k + 4] = I - dt / 2 * A
        Aeq[r:r + 2, 6 + k:7 + k] = -dt * B
    Aeq[6:8, 4:6] = I
    assert np.allclose(data.Aeq.toarray(), Aeq)
    assert np.allclose(data.beq, [0, 0, 0, 0, 0, 0, 1, 0])
    Hc = np.zeros((8, 8))
    Hc[6, 6] = Hc[7, 7] = 2 * dt
    assert np.allclose(data.extras["H_cost"].toarray(), Hc)
    w = np.array([0.25, 0.5, 0.25])
    assert np.allclose(data.extras["H_trust"].diagonal()[:6], np.repeat(2 * w / 1e4, 2))
    assert np.allclose(data.lo, [-np.inf] * 6 + [-5, -5]) and np.allclose(data.hi, [np.inf] * 6 + [5, 5])


def test_dynamics_never_enter_cost():
    # no obstacles, no f0_u, no g_a: the cost is pure control energy whatever the iterate and dynamics
    rng = np.random.default_rng(2)
    prob = ff_problem()
    prev = random_traj(prob, 9, rng)
    data = build_subproblem(prob, prev, 10.0, 1.0, ScpParams())
    nx = 9 * 13
    Hc = data.extras["H_cost"].toarray()
    assert np.all(Hc[:nx] == 0) and np.all(Hc[:, :nx] == 0)
    assert np.allclose(Hc[nx:, nx:], np.kron(np.eye(8), 2 * prev.dt * np.eye(6)))
    assert np.all(data.extras["q_cost"] == 0)
    # dynamics rows carry all the A, B information
    assert data.Aeq.shape[0] == 13 + 8 * 13 + 13


def test_waypoint_off_grid():
    prob = make_di_problem(waypoints=[state_waypoint(0.37, [0.5, 0.0]), state_waypoint(1.0, [1.0, 0.0])])
    prev = DiscreteTrajectory(make_grid(prob, 11), np.zeros((11, 2)), np.zeros((11, 1)))
    with pytest.raises(TranscriptionError, match="not on the grid"):
        build_subproblem(prob, prev, 1.0, 1.0, ScpParams())


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_hessian_psd_and_defect_identity(seed):
    rng = np.random.default_rng(seed)
    prob = ff_problem([Obstacle.sphere([1.0, 0.6, 0.2], 0.3), Obstacle.box([1.6, 0.1, -0.2], [1.9, 0.4, 0.3])])
    prev = random_traj(prob, 6, rng)
    prev.states[:, :3] = rng.uniform([0.5, 0.0, -0.3], [2.0, 1.2, 0.6], size=(6, 3))
    params = ScpParams(manifold_weight=float(rng.uniform(0, 10)))
    data = build_subproblem(prob, prev, float(rng.uniform(0.01, 100)), float(rng.uniform(1, 100)), params)
    H = data.H.toarray()
    assert np.allclose(H, H.T)
    assert np.min(np.linalg.eigvalsh(0.5 * (H + H.T))) >= -1e-9
    # consistency: linearized dynamics rows evaluated at the expansion point give the nonlinear defect
    L = data.layout
    res = (data.Aeq @ prev.to_vector() - data.beq)[L.dyn_rows].reshape(-1, 13)
    assert np.allclose(res, trapezoid_defects(prob.system, prev), atol=1e-12)


def test_model_matches_true_cost_to_first_order():
    from escp.transcription import model_cost, objective_terms

    rng = np.random.default_rng(4)
    prob = ff_problem([Obstacle.sphere([1.0, 0.6, 0.2], 0.3)])
    prev = random_traj(prob, 6, rng)
    prev.states[:, :3] = rng.uniform([0.7, 0.3, -0.1], [1.3, 0.9, 0.5], size=(6, 3))
    data = build_subproblem(prob, prev, 1.0, 3.0, ScpParams())
    z0 = prev.to_vector()
    true0 = objective_terms(prob, prev, 3.0)["cost"]
    assert model_cost(data, z0) == pytest.approx(true0, rel=1e-12)
    dz = rng.normal(size=z0.size)
    for eps in (1e-4, 1e-5):
        t = DiscreteTrajectory.from_vector(z0 + eps * dz, prev.times, 13, 6)
        gap = abs(model_cost(data, z0 + eps * dz) - objective_terms(prob, t, 3.0)["cost"])
        assert gap <= 50 * eps ** 2 * max(1.0, true0)


def test_linear_problem_subproblem_is_global_optimum():
    # convex problem: its own convexification; compare with a dense KKT solve of the discrete problem
    prob = make_di_problem()
    d = 21
    prev = initialize(prob, d)
    data = build_subproblem(prob, prev, 1e12, 1.0, ScpParams())
    sol = solve_qp(data, tol=1e-10)
    Hc = data.extras["H_cost"].toarray() + 1e-14 * np.eye(data.n)
    Aeq = data.Aeq.toarray()
    K = np.block([[Hc, Aeq.T], [Aeq, np.zeros((Aeq.shape[0],) * 2)]])
    z = np.linalg.lstsq(K, np.concatenate([-data.extras["q_cost"], data.beq]), rcond=None)[0][:data.n]
    assert np.max(np.abs(sol.z - z)) <= 1e-6


# -- trust region -------------------------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(1e-3, 1e3), st.floats(0.05, 0.95),
       st.floats(1, 50))
def test_trust_penalty_monotone_and_majorized(dx, Delta, shrink, beta):
    dx = np.array(dx)
    if np.allclose(dx, 0):
        return
    p = trust_penalty(dx, Delta, beta)
    assert trust_penalty(dx, shrink * Delta, beta) >= p
    assert trust_majorizer(dx, Delta, beta) >= p - 1e-12
    assert trust_majorizer(np.zeros(3), Delta, beta) == pytest.approx(trust_penalty(np.zeros(3), Delta, beta))


# -- diagnostics -------------------------------------------------------------------------


def test_diagnostics_exact_linear_solution():
    prob = make_di_problem()
    d = 11
    times = make_grid(prob, d)
    dt = times[1]
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([0.0, 1.0])
    U = np.sin(np.arange(d))[:, None]
    X = np.zeros((d, 2))
    M = np.linalg.inv(np.eye(2) - dt / 2 * A)
    for k in range(d - 1):
        X[k + 1] = M @ ((np.eye(2) + dt / 2 * A) @ X[k] + dt * B * U[k, 0])
    rep = trajectory_diagnostics(prob, DiscreteTrajectory(times, X, U))
    assert rep["trapezoid_defect"] <= 1e-14
    assert rep["energy"] == pytest.approx(dt * np.sum(U[:-1] ** 2))
    assert rep["manifold_residual"] == 0.0


def test_diagnostics_projected_states_on_manifold():
    rng = np.random.default_rng(5)
    prob = make_torus_problem([1, 0, 1, 0], [0, 1, 0, 1])
    t = random_traj(prob, 15, rng)
    assert trajectory_diagnostics(prob, t)["manifold_residual"] <= 1e-12


# -- dump ------------------------------------------------------------------------------------


def test_dump_round_trip(tmp_path):
    prob = make_di_problem(bound=3.0)
    data = build_subproblem(prob, initialize(prob, 5), 10.0, 1.0, ScpParams())
    path = tmp_path / "qp.mtx"
    data.dump(path)
    blocks, name, buf = {}, None, []
    for line in path.read_text().splitlines(keepends=True):
        if line.startswith("% block "):
            if name:
                blocks[name] = "".join(buf)
            name, buf = line.split()[2], []
        else:
            buf.append(line)
    blocks[name] = "".join(buf)
    assert set(blocks) == {"H", "q", "Aeq", "beq", "lo", "hi"}

    def read(key):
        m = scipy.io.mmread(io.StringIO(blocks[key]))
        return m.toarray() if sp.issparse(m) else np.asarray(m)

    assert np.allclose(read("H"), data.H.toarray(), rtol=0, atol=0)
    assert np.array_equal(read("Aeq"), data.Aeq.toarray())
    assert np.array_equal(read("beq").ravel(), data.beq)
    lo = read("lo").ravel()
    assert np.all(lo[:10] == -1e30) and np.all(lo[10:] == -3.0)
