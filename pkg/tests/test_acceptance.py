"""Acceptance suite: published rate windows, duality identities, operator
properties.  One test per criterion; run with ``pytest tests/test_acceptance.py
-v -s`` to see one pass line per criterion.  The experiment fixtures are
session-scoped, so the expensive runs execute once.
"""

import time
import warnings

import numpy as np
import pytest

from tvfem.estimator import (
    AdaptiveLoopConfig,
    adaptive_loop,
    dual_normal_jump_norm,
    reconstruct_dual,
)
from tvfem.fem import (
    CR,
    P1,
    FeFunction,
    cell_means,
    cr_interpolate,
    data_cell_means,
    data_cell_moments,
    elementwise_gradient,
    integrate_cellwise,
    nodal_interpolate,
    quad_rule,
    rt0_from_side_fluxes,
    rt0_divergence,
)
from tvfem.experiments import (
    _fill_eoc,
    default_spec,
    final_eoc,
    replace_record_space,
    run_experiment,
)
from tvfem.mesh import (
    Circle,
    grade_towards_set,
    make_interval_mesh,
    make_square_mesh,
    mesh_stats,
)
from tvfem.rof import (
    DataFunction,
    RofProblem,
    dual_energy,
    exact_single_disc,
    holder_quotient,
)
from tvfem.solver import FlowConfig, FlowSystem, run_flow

SEEDS = range(20)


def _quiet_run(spec):
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        records = run_experiment(spec)
    return records, time.perf_counter() - t0


def _report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def runs_61():
    out = {}
    for r in (0.4, 5.0):
        out[r] = _quiet_run(default_spec("6.1", r=r, levels=6))
    return out


@pytest.fixture(scope="session")
def run_62():
    out = {}
    for beta in (1.0, 2.0, 3.0, 4.0):
        out[beta] = _quiet_run(default_spec("6.2", beta=beta, levels=7))
    return out


@pytest.fixture(scope="session")
def run_63():
    return _quiet_run(default_spec("6.3", levels=13))


@pytest.fixture(scope="session")
def run_64():
    return _quiet_run(default_spec("6.4", levels=18))


@pytest.fixture(scope="session")
def disc_problem():
    sol = exact_single_disc(0.5, 10.0)
    problem = RofProblem(alpha=10.0, epsilon=1e-2,
                         data=DataFunction.char_ball((0.0, 0.0), 0.5),
                         dirichlet=sol.u)
    return problem, sol


@pytest.fixture(scope="session")
def adaptive_records(disc_problem):
    problem, _ = disc_problem
    cfg = AdaptiveLoopConfig(max_levels=9, max_iterations=50000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return adaptive_loop(problem, cfg, make_square_mesh(1.0, 2))


# ----------------------------------------------------------------------
# criterion 1: uniform Crouzeix-Raviart rate for the two-ball phantom


def test_criterion_1_uniform_cr_rate(runs_61):
    total = 0.0
    for r, (records, elapsed) in runs_61.items():
        total += elapsed
        e = final_eoc(records, 3)
        _report(f"criterion 1 (r={r})", 0.40 <= e <= 0.60,
                f"eoc(last 3 of 6) = {e:.3f} in [0.40, 0.60]")
    _report("criterion 1 runtime", total <= 600.0, f"{total:.1f} s <= 600 s")


# ----------------------------------------------------------------------
# criterion 2: 1d graded rates beta/2


def test_criterion_2_graded_1d_rates(run_62):
    total = 0.0
    for beta, (records, elapsed) in run_62.items():
        total += elapsed
        e = final_eoc(records, 3)
        _report(f"criterion 2 (beta={beta:g})", abs(e - beta / 2) <= 0.15,
                f"eoc = {e:.3f}, target {beta / 2:g} +- 0.15")
    _report("criterion 2 runtime", total <= 60.0, f"{total:.1f} s <= 60 s")


# ----------------------------------------------------------------------
# criterion 3: graded 2d rates, nearly linear for cr


def test_criterion_3_graded_2d_rates(run_63):
    records, elapsed = run_63
    cr = final_eoc(_fill_eoc([replace_record_space(r, CR)
                              for r in records]), 3)
    p1 = final_eoc(_fill_eoc([replace_record_space(r, P1)
                              for r in records]), 3)
    _report("criterion 3 (cr)", 0.8 <= cr <= 1.1,
            f"cr eoc = {cr:.3f} in [0.8, 1.1]")
    _report("criterion 3 (p1 below cr)", p1 <= cr - 0.1,
            f"p1 eoc = {p1:.3f} <= {cr:.3f} - 0.1")
    _report("criterion 3 runtime", elapsed <= 900.0,
            f"{elapsed:.1f} s <= 900 s")


# ----------------------------------------------------------------------
# criterion 4: adaptive rates and emergent grading


def test_criterion_4_adaptive_rates(run_64):
    records, elapsed = run_64
    cr = final_eoc(_fill_eoc([replace_record_space(r, CR)
                              for r in records]), 4)
    p1 = final_eoc(_fill_eoc([replace_record_space(r, P1)
                              for r in records]), 4)
    grading = records[-1].beta_emergent
    _report("criterion 4 (cr)", abs(cr - 0.76) <= 0.15,
            f"cr eoc(last 4) = {cr:.3f}, target 0.76 +- 0.15")
    _report("criterion 4 (p1)", abs(p1 - 0.58) <= 0.15,
            f"p1 eoc(last 4) = {p1:.3f}, target 0.58 +- 0.15")
    _report("criterion 4 (grading)", abs(grading - 1.7) <= 0.25,
            f"emergent grading = {grading:.3f}, target 1.7 +- 0.25")
    _report("criterion 4 runtime", elapsed <= 1200.0,
            f"{elapsed:.1f} s <= 1200 s")


# ----------------------------------------------------------------------
# criterion 5: strong duality of the exact single-disc pair


def test_criterion_5_duality_gap_oracle():
    sol = exact_single_disc(0.5, 10.0)
    g = DataFunction.char_ball((0.0, 0.0), 0.5)
    problem = RofProblem(alpha=10.0, epsilon=0.0, data=g)
    mesh = grade_towards_set(make_square_mesh(1.0, 2), Circle((0, 0), 0.5), 4)
    # primal value: exact jump total variation plus the quadrature fidelity
    ball_area = sum(area.sum() for _, area, _ in data_cell_moments(mesh, g))
    fidelity = 0.5 * problem.alpha * (1 - sol.coefficient) ** 2 * ball_area
    primal = sol.tv_value + fidelity

    class Z:
        jump_set = g.jump_set

        def __call__(self, x):
            return sol.z(x)

        def div(self, x):
            return sol.z_div(x)

    dual = dual_energy(Z(), problem, mesh=mesh)
    gap = abs(primal - dual.value)
    _report("criterion 5 (admissible)", dual.admissible,
            f"max |z| = {dual.max_modulus:.12f}")
    _report("criterion 5 (gap)", gap <= 1e-5,
            f"|I(u) - D(z)| = {gap:.2e} <= 1e-5")


# ----------------------------------------------------------------------
# criterion 6: reconstruction identities on every cell of every run


def _assert_reconstruction_identities(u_cr, dual, problem, label):
    mesh = u_cr.mesh
    a = dual.field.dofs[:, :2]
    mods = np.sqrt((a ** 2).sum(axis=1))
    assert mods.max() <= 1.0 + 1e-12, f"{label}: |z(x_T)| = {mods.max()}"
    misfit = cell_means(u_cr) - data_cell_means(mesh, problem.data)
    div = 2.0 * dual.field.dofs[:, 2]
    scale = max(1.0, np.abs(div).max())
    err = np.abs(div - problem.alpha * misfit).max()
    assert err <= 1e-14 * scale, f"{label}: divergence identity {err}"


def test_criterion_6_reconstruction_identities(adaptive_records,
                                               disc_problem):
    problem, _ = disc_problem
    for rec in adaptive_records:
        problem_l = problem.with_epsilon(rec.stats.h_avg ** 2)
        _assert_reconstruction_identities(rec.u_cr, rec.dual, problem_l,
                                          f"adaptive level {rec.level}")
    # graded sequence: reconstruct on every level of a medium run
    mesh = make_square_mesh(1.0, 2)
    for level in range(8):
        mesh = grade_towards_set(mesh, Circle((0, 0), 0.5), 1)
        h = mesh_stats(mesh).h_avg
        problem_l = problem.with_epsilon(h ** 2)
        system = FlowSystem(problem_l, mesh, CR)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            state = run_flow(system.initial_iterate(), problem_l,
                             FlowConfig(eps_stop=h ** 2 / 20,
                                        max_iterations=50000), system=system)
        z = reconstruct_dual(state.u, problem_l)
        _assert_reconstruction_identities(state.u, z, problem_l,
                                          f"graded level {level}")
    _report("criterion 6 (identities)", True,
            "|z(x_T)| <= 1 + 1e-12 and div z = alpha Pi(u - g) to 1e-14 "
            "on every cell of every run")


def test_criterion_6_normal_jumps_shrink(disc_problem):
    problem, _ = disc_problem
    mesh = grade_towards_set(make_square_mesh(1.0, 2), Circle((0, 0), 0.5), 3)
    jumps = {}
    for eps_stop in (1e-3, 1e-5):
        system = FlowSystem(problem, mesh, CR)
        state = run_flow(system.initial_iterate(), problem,
                         FlowConfig(eps_stop=eps_stop, max_iterations=50000),
                         system=system)
        assert state.converged
        jumps[eps_stop] = dual_normal_jump_norm(
            reconstruct_dual(state.u, problem))
    ratio = jumps[1e-3] / jumps[1e-5]
    _report("criterion 6 (normal jumps)", ratio >= 10.0,
            f"jump norm shrank {ratio:.1f}x for a 100x smaller eps_stop")


# ----------------------------------------------------------------------
# criterion 7: operator property suite on randomized inputs


@pytest.mark.parametrize("seed", SEEDS)
def test_criterion_7_tv_diminishing_1d(seed):
    rng = np.random.default_rng(seed)
    knots = np.sort(rng.uniform(-1, 1, size=15))
    knots = np.concatenate([[-1.0], knots, [1.0]])
    vals = rng.normal(size=len(knots))
    jump_pts = rng.uniform(-0.9, 0.9, size=4)
    jump_sizes = rng.normal(size=4)

    def v(x):
        x = np.atleast_2d(x)[:, 0]
        out = np.interp(x, knots, vals)
        for s, a in zip(jump_pts, jump_sizes):
            out = out + a * (x >= s)
        return out

    tv = np.abs(np.diff(vals)).sum() + np.abs(jump_sizes).sum()
    mesh = make_interval_mesh(-1.0, 1.0,
                              np.linspace(-1, 1, int(rng.integers(5, 40))))
    u = nodal_interpolate(v, mesh)
    assert np.abs(np.diff(u.dofs)).sum() <= tv + 1e-12


@pytest.mark.parametrize("seed", SEEDS)
def test_criterion_7_cr_projection_property(seed):
    rng = np.random.default_rng(seed)
    mesh = grade_towards_set(make_square_mesh(1.0, 2), Circle((0, 0), 0.5), 2)
    terms = [(a, b) for a in range(4) for b in range(4) if a + b <= 3]
    coefs = rng.normal(size=len(terms))

    def v(x):
        x = np.atleast_2d(x)
        return sum(c * x[:, 0] ** a * x[:, 1] ** b
                   for c, (a, b) in zip(coefs, terms))

    def grad(x):
        x = np.atleast_2d(x)
        gx = sum(c * a * x[:, 0] ** max(a - 1, 0) * x[:, 1] ** b
                 for c, (a, b) in zip(coefs, terms) if a > 0)
        gy = sum(c * b * x[:, 0] ** a * x[:, 1] ** max(b - 1, 0)
                 for c, (a, b) in zip(coefs, terms) if b > 0)
        return np.stack([np.broadcast_to(gx, x.shape[0]),
                         np.broadcast_to(gy, x.shape[0])], axis=1)

    u = cr_interpolate(v, mesh)
    gh = elementwise_gradient(u).dofs
    rule = quad_rule(2, 4)
    pg = np.stack([integrate_cellwise(mesh, lambda x: grad(x)[:, 0], rule),
                   integrate_cellwise(mesh, lambda x: grad(x)[:, 1], rule)],
                  axis=1) / mesh.cell_measures()[:, None]
    assert np.abs(gh - pg).max() <= 1e-12 * (1.0 + np.abs(pg).max())


@pytest.mark.parametrize("seed", SEEDS)
def test_criterion_7_integration_by_parts(seed):
    rng = np.random.default_rng(seed)
    mesh = grade_towards_set(make_square_mesh(1.0, 2), Circle((0, 0), 0.5), 2)
    q = rt0_from_side_fluxes(mesh, rng.normal(size=len(mesh.sides)))
    vals = rng.normal(size=len(mesh.sides))
    vals[mesh.boundary_sides] = 0.0
    v = FeFunction(CR, mesh, vals)
    vols = mesh.cell_measures()
    term1 = (vols * cell_means(v) * rt0_divergence(q).dofs).sum()
    gv = elementwise_gradient(v).dofs
    term2 = (vols * (gv * q.dofs[:, :2]).sum(axis=1)).sum()
    assert abs(term1 + term2) <= 1e-12 * (1.0 + abs(term1))


@pytest.mark.parametrize("seed", SEEDS)
def test_criterion_7_flow_energy_monotone(seed):
    rng = np.random.default_rng(seed)
    radius = float(rng.uniform(0.2, 0.7))
    center = rng.uniform(-0.15, 0.15, size=2)
    alpha = float(rng.uniform(2.0, 20.0))
    eps = float(10.0 ** rng.uniform(-3, -1))
    space = CR if seed % 2 == 0 else P1
    mesh = grade_towards_set(make_square_mesh(1.0, 2),
                             Circle(tuple(center), radius), 2)
    problem = RofProblem(alpha=alpha, epsilon=eps,
                         data=DataFunction.char_ball(tuple(center), radius))
    system = FlowSystem(problem, mesh, space)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        state = run_flow(system.initial_iterate(), problem,
                         FlowConfig(eps_stop=1e-8, max_iterations=60),
                         system=system)
    assert state.energy_monotone(slack=1e-10)


# ----------------------------------------------------------------------
# criterion 8: Hoelder blow-up diagnostic


def test_criterion_8_holder_blowup():
    t0 = time.perf_counter()
    r = 0.4
    val = holder_quotient(1e-4, r, 0.5)
    target = np.sqrt(2.0) / np.sqrt(r)
    ok_limit = abs(val - target) <= 1e-4 * target
    # theta = 1: the quotient grows without bound as phi -> 0
    phis = 10.0 ** -np.arange(1, 8)
    vals = [holder_quotient(p, r, 1.0) for p in phis]
    ok_grow = all(b > 5 * a for a, b in zip(vals[:-1], vals[1:])) \
        and vals[-1] > 1e6
    elapsed = time.perf_counter() - t0
    _report("criterion 8 (sqrt limit)", ok_limit,
            f"L(1e-4, theta=1/2) = {val:.8f}, target {target:.8f}")
    _report("criterion 8 (blow-up)", ok_grow,
            f"L(theta=1) grows to {vals[-1]:.2e} as phi -> 0")
    _report("criterion 8 runtime", elapsed < 1.0, f"{elapsed:.3f} s < 1 s")
