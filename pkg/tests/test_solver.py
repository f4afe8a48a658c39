import numpy as np
import pytest
import scipy.sparse as sp

from tvfem.fem import CR, P1, FeFunction
from tvfem.mesh import (
    Circle,
    grade_towards_set,
    make_graded_interval_mesh,
    make_interval_mesh,
    make_square_mesh,
)
from tvfem.rof import DataFunction, RofProblem, exact_sign_1d, exact_single_disc
from tvfem.solver import (
    FlowConfig,
    FlowSystem,
    flow_step,
    run_flow,
    solve_spd,
    write_flow_log,
)


def toy_1d_problem(alpha=10.0, epsilon=1e-2):
    g = DataFunction.custom(
        lambda x: np.atleast_2d(np.asarray(x, dtype=float))[:, 0] ** 2, dim=1)
    return RofProblem(alpha=alpha, epsilon=epsilon, data=g)


# ----------------------------------------------------------------------
# solve_spd


def test_solve_spd_identity():
    b = np.arange(1.0, 11.0)
    x = solve_spd(sp.eye(10, format="csr"), b)
    assert x == pytest.approx(b)


def test_solve_spd_random_vs_dense_oracle():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(50, 50))
    a = m @ m.T + 50 * np.eye(50)
    b = rng.normal(size=50)
    x = solve_spd(sp.csr_matrix(a), b)
    assert x == pytest.approx(np.linalg.solve(a, b), abs=1e-10)


def test_solve_spd_large_sparse_pcg():
    rng = np.random.default_rng(2)
    n = 700
    main = 4.0 + rng.random(n)
    a = sp.diags([np.full(n - 1, -1.0), main, np.full(n - 1, -1.0)],
                 [-1, 0, 1], format="csr")
    b = rng.normal(size=n)
    x = solve_spd(a, b, tol=1e-12)
    assert np.linalg.norm(a @ x - b) <= 1e-11 * np.linalg.norm(b)


def test_solve_spd_rejects_singular():
    a = sp.csr_matrix(np.diag([1.0, 0.0, 2.0]))
    with pytest.raises(ValueError):
        solve_spd(a, np.ones(3))


def test_solve_spd_rejects_indefinite():
    a = sp.csr_matrix(np.diag([1.0, -1.0, 2.0]))
    with pytest.raises(ValueError):
        solve_spd(a, np.ones(3))


# ----------------------------------------------------------------------
# flow step


def test_flow_step_zero_fixed_point():
    mesh = make_square_mesh(1.0, 4)
    g = DataFunction.custom(
        lambda x: np.zeros(np.atleast_2d(x).shape[0]), dim=2)
    problem = RofProblem(alpha=10.0, epsilon=1e-2, data=g)
    u0 = FeFunction(P1, mesh, np.zeros(len(mesh.vertices)))
    u1 = flow_step(u0, problem, FlowConfig(eps_stop=1e-8))
    assert np.allclose(u1.dofs, 0.0, atol=1e-15)


def test_flow_step_single_free_dof_closed_form():
    # two unit cells on (-1, 1), P1, zero boundary values: the midpoint value
    # solves a scalar equation assembled by hand
    mesh = make_interval_mesh(-1.0, 1.0, [-1.0, 0.0, 1.0])
    problem = toy_1d_problem(alpha=3.0, epsilon=0.05)
    tau = 1.0
    m_k = 0.37
    dofs = np.array([0.0, m_k, 0.0])
    u = FeFunction(P1, mesh, dofs)
    u1 = flow_step(u, problem, FlowConfig(tau=tau, eps_stop=1e-8))
    w = np.sqrt(m_k ** 2 + problem.epsilon ** 2)
    load_m = 1.0 / 6.0  # int x^2 hat(x) dx over (-1, 1)
    lhs = (2.0 / 3.0) / tau + 2.0 / w + problem.alpha * 2.0 / 3.0
    rhs = (2.0 / 3.0) * m_k / tau + problem.alpha * load_m
    assert u1.dofs[1] == pytest.approx(rhs / lhs, abs=1e-14)
    assert u1.dofs[0] == 0.0 and u1.dofs[2] == 0.0


def test_flow_step_requires_positive_epsilon():
    mesh = make_interval_mesh(-1.0, 1.0, [-1.0, 0.0, 1.0])
    g = DataFunction.sign_1d()
    problem = RofProblem(alpha=10.0, epsilon=0.0, data=g)
    u = FeFunction(P1, mesh, np.zeros(3))
    with pytest.raises(ValueError):
        flow_step(u, problem)


# ----------------------------------------------------------------------
# run_flow


def test_run_flow_huge_eps_stop_returns_after_one_step():
    mesh = make_interval_mesh(-1.0, 1.0, np.linspace(-1, 1, 9))
    sol = exact_sign_1d(10.0)
    problem = RofProblem(alpha=10.0, epsilon=1e-2, data=DataFunction.sign_1d(),
                         dirichlet=sol.u)
    system = FlowSystem(problem, mesh, P1)
    state = run_flow(system.initial_iterate(), problem,
                     FlowConfig(eps_stop=1e9), system=system)
    assert state.iterations == 1
    assert state.converged


def test_run_flow_matches_direct_minimization_oracle():
    # coarse graded 1d mesh; compare against a dense minimizer of the
    # discrete regularized energy over the free dofs
    from scipy.optimize import minimize

    mesh = make_graded_interval_mesh(-1.0, 1.0, 8, 2.0)
    sol = exact_sign_1d(10.0)
    problem = RofProblem(alpha=10.0, epsilon=1e-3, data=DataFunction.sign_1d(),
                         dirichlet=sol.u)
    system = FlowSystem(problem, mesh, P1)
    eps_stop = 1e-9
    state = run_flow(system.initial_iterate(), problem,
                     FlowConfig(eps_stop=eps_stop, max_iterations=20000),
                     system=system)
    assert state.converged

    free = system.free
    base = system.initial_iterate().dofs.copy()

    def energy_of(xf):
        d = base.copy()
        d[free] = xf
        return system.energy(FeFunction(P1, mesh, d))

    res = minimize(energy_of, state.u.dofs[free], method="L-BFGS-B",
                   options={"ftol": 1e-16, "gtol": 1e-12, "maxiter": 5000})
    diff = np.zeros_like(base)
    diff[free] = state.u.dofs[free] - res.x
    assert system.increment_norm(diff) <= 10 * eps_stop


def test_run_flow_energy_monotone_on_graded_disc_mesh():
    mesh = grade_towards_set(make_square_mesh(1.0, 2), Circle((0, 0), 0.5), 3)
    sol = exact_single_disc(0.5, 10.0)
    problem = RofProblem(alpha=10.0, epsilon=1e-2,
                         data=DataFunction.char_ball((0.0, 0.0), 0.5),
                         dirichlet=sol.u)
    for space in (P1, CR):
        system = FlowSystem(problem, mesh, space)
        state = run_flow(system.initial_iterate(), problem,
                         FlowConfig(eps_stop=1e-6, max_iterations=3000),
                         system=system)
        assert state.converged
        assert state.iterations < 3000
        assert state.energy_monotone(slack=1e-10)


def test_run_flow_dirichlet_dofs_bit_identical():
    mesh = grade_towards_set(make_square_mesh(1.0, 2), Circle((0, 0), 0.5), 2)
    sol = exact_single_disc(0.5, 10.0)
    problem = RofProblem(alpha=10.0, epsilon=1e-2,
                         data=DataFunction.char_ball((0.0, 0.0), 0.5),
                         dirichlet=sol.u)
    system = FlowSystem(problem, mesh, CR)
    u0 = system.initial_iterate()
    before = u0.dofs[system.constrained].copy()
    state = run_flow(u0, problem, FlowConfig(eps_stop=1e-4), system=system)
    after = state.u.dofs[system.constrained]
    assert np.array_equal(before, after)


def test_fixed_point_zeroes_energy_gradient():
    mesh = make_graded_interval_mesh(-1.0, 1.0, 6, 2.0)
    sol = exact_sign_1d(10.0)
    problem = RofProblem(alpha=10.0, epsilon=5e-3, data=DataFunction.sign_1d(),
                         dirichlet=sol.u)
    system = FlowSystem(problem, mesh, P1)
    state = run_flow(system.initial_iterate(), problem,
                     FlowConfig(eps_stop=1e-12, max_iterations=50000),
                     system=system)
    u_star = state.u.dofs
    h = 1e-7
    for i in system.free[:5]:
        d = u_star.copy()
        d[i] += h
        e_plus = system.energy(FeFunction(P1, mesh, d))
        d[i] -= 2 * h
        e_minus = system.energy(FeFunction(P1, mesh, d))
        grad_fd = (e_plus - e_minus) / (2 * h)
        assert abs(grad_fd) < 1e-6


def test_run_flow_stagnation_is_flagged():
    # eps_stop below the rounding floor: the flow stops at stagnation
    mesh = make_interval_mesh(-1.0, 1.0, np.linspace(-1, 1, 5))
    sol = exact_sign_1d(10.0)
    problem = RofProblem(alpha=10.0, epsilon=1e-2, data=DataFunction.sign_1d(),
                         dirichlet=sol.u)
    system = FlowSystem(problem, mesh, P1)
    state = run_flow(system.initial_iterate(), problem,
                     FlowConfig(eps_stop=1e-18, max_iterations=100000),
                     system=system)
    assert state.stagnated
    assert state.converged
    assert state.iterations < 100000


def test_flow_log_roundtrip(tmp_path):
    mesh = make_interval_mesh(-1.0, 1.0, np.linspace(-1, 1, 9))
    sol = exact_sign_1d(10.0)
    problem = RofProblem(alpha=10.0, epsilon=1e-2, data=DataFunction.sign_1d(),
                         dirichlet=sol.u)
    system = FlowSystem(problem, mesh, P1)
    state = run_flow(system.initial_iterate(), problem,
                     FlowConfig(eps_stop=1e-6), system=system)
    path = tmp_path / "log.csv"
    write_flow_log(state, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "iteration,increment,energy"
    assert len(lines) == 2 + state.iterations
