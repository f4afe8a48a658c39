import numpy as np
import pytest

from tvfem.fem import FeFunction, P1, cr_interpolate
from tvfem.mesh import make_square_mesh, red_refine, rgb_close
from tvfem.rof import (
    DataFunction,
    RofProblem,
    coefficient,
    dual_energy,
    energies,
    exact_sign_1d,
    exact_single_disc,
    exact_two_disc,
    holder_quotient,
    two_disc_boundary_values,
)


def refined_square(levels):
    m = make_square_mesh(1.0, 2)
    for _ in range(levels):
        m = rgb_close(red_refine(m, range(len(m.cells))))
    return m


# ----------------------------------------------------------------------
# coefficients


def test_coefficient_ball_example():
    assert coefficient(0.5, 10.0, d=2, variant="ball_d") == pytest.approx(0.6)


def test_coefficient_sign_1d_example():
    assert coefficient(2.0, 10.0, variant="sign_1d") == pytest.approx(0.95)


def test_coefficient_two_disc_clamps_at_zero():
    assert coefficient(0.1, 10.0, variant="two_disc") == 0.0
    assert coefficient(0.19, 10.0, variant="two_disc") == 0.0


def test_coefficient_rejects_unknown_variant():
    with pytest.raises(ValueError):
        coefficient(1.0, 1.0, variant="cube")


# ----------------------------------------------------------------------
# single disc exact pair


def test_single_disc_cprime_saturates():
    sol = exact_single_disc(0.5, 10.0)
    # c' = min(1, r alpha / d) = min(1, 2.5) = 1
    on_circle = np.array([[0.5, 0.0]])
    assert np.hypot(*sol.z(on_circle)[0]) == pytest.approx(1.0)


def test_single_disc_dual_modulus_at_twice_radius():
    r = 0.5
    sol = exact_single_disc(r, 10.0)
    x = np.array([[2 * r, 0.0]])
    assert np.hypot(*sol.z(x)[0]) == pytest.approx(0.5)


def test_single_disc_dual_admissible_on_grid():
    sol = exact_single_disc(0.5, 10.0)
    xs = np.linspace(-1, 1, 41)
    grid = np.array([[a, b] for a in xs for b in xs])
    mods = np.sqrt((sol.z(grid) ** 2).sum(axis=1))
    assert mods.max() <= 1.0 + 1e-12


def test_single_disc_divergence_finite_differences():
    sol = exact_single_disc(0.5, 10.0, d=2)
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(40):
        x = rng.uniform(-0.9, 0.9, size=2)
        if abs(np.hypot(*x) - 0.5) < 1e-2:
            continue  # divergence jumps across the circle
        div_fd = ((sol.z(np.array([[x[0] + h, x[1]]]))[0, 0]
                   - sol.z(np.array([[x[0] - h, x[1]]]))[0, 0])
                  + (sol.z(np.array([[x[0], x[1] + h]]))[0, 1]
                     - sol.z(np.array([[x[0], x[1] - h]]))[0, 1])) / (2 * h)
        assert div_fd == pytest.approx(sol.z_div(np.array([[*x]]))[0],
                                       abs=1e-6)


def test_single_disc_divergence_values():
    sol = exact_single_disc(0.5, 10.0)
    inside = sol.z_div(np.array([[0.1, 0.1]]))[0]
    outside = sol.z_div(np.array([[0.9, 0.0]]))[0]
    assert inside == pytest.approx(-1.0 * 2 / 0.5)  # -c' d / r
    assert outside == 0.0


# ----------------------------------------------------------------------
# two-disc solution


def test_two_disc_coefficient_examples():
    assert exact_two_disc(0.4, 10.0).coefficient == pytest.approx(0.5)
    assert exact_two_disc(5.0, 10.0).coefficient == pytest.approx(0.96)


def test_two_disc_antisymmetry_under_transform():
    rot, shift = 70.0, (0.1, 0.0)
    sol = exact_two_disc(0.4, 10.0, rotate_deg=rot, shift=shift)
    phi = np.deg2rad(rot)
    q = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    b = np.asarray(shift)
    rng = np.random.default_rng(7)
    y = rng.uniform(-0.8, 0.8, size=(200, 2))
    y_ref = y * np.array([-1.0, 1.0])
    # u(Phi^{-1}(y)) is antisymmetric in y_1
    x = (y - b) @ q
    x_ref = (y_ref - b) @ q
    assert np.allclose(sol.u(x), -np.asarray(sol.u(x_ref)), atol=1e-14)


def test_two_disc_tv_recorded_only_when_inside():
    inside = exact_two_disc(0.4, 10.0, domain_half_width=1.0)
    assert inside.tv_value == pytest.approx(0.5 * 2 * 2 * np.pi * 0.4)
    outside = exact_two_disc(5.0, 10.0, domain_half_width=1.0)
    assert outside.tv_value is None


def test_two_disc_dual_boundary_relation():
    # z = -nu+ on the positive circle and +nu- on the negative one
    for phi in [0.1, 0.4, 1.2]:
        xp, xm, zp, zm, nup, num = two_disc_boundary_values(phi, 0.4)
        assert zp @ nup == pytest.approx(-1.0)
        assert zm @ num == pytest.approx(1.0)
        assert np.hypot(*zp) == pytest.approx(1.0)


# ----------------------------------------------------------------------
# energies


def test_energies_zero_iterate_chi_data():
    mesh = refined_square(2)
    g = DataFunction.char_ball((0.0, 0.0), 0.5)
    problem = RofProblem(alpha=10.0, epsilon=1e-3, data=g)
    u = FeFunction(P1, mesh, np.zeros(len(mesh.vertices)))
    e = energies(u, problem)
    assert e.i_eps == pytest.approx(1e-3 * 4.0 + 5.0 * np.pi / 4.0, abs=1e-9)
    assert e.tv == 0.0
    assert e.tv_eps == pytest.approx(1e-3 * 4.0)


def test_energies_regularization_band():
    mesh = refined_square(3)
    sol = exact_single_disc(0.5, 10.0)
    problem = RofProblem(alpha=10.0, epsilon=1e-2, data=sol.u.scaled(1 / 0.6))
    u_h = cr_interpolate(sol.u, mesh)
    e = energies(u_h, problem)
    assert 0.0 <= e.tv_eps - e.tv <= problem.epsilon * 4.0 + 1e-12


def test_energies_constant_tv_parts():
    mesh = refined_square(1)
    g = DataFunction.char_ball((0.0, 0.0), 0.5)
    problem = RofProblem(alpha=10.0, epsilon=2e-2, data=g)
    u = FeFunction(P1, mesh, np.full(len(mesh.vertices), 1.7))
    e = energies(u, problem)
    assert e.tv == 0.0
    assert e.tv_eps == pytest.approx(2e-2 * 4.0)


# ----------------------------------------------------------------------
# duality


def test_dual_energy_zero_field_cancels():
    mesh = refined_square(2)
    g = DataFunction.char_ball((0.0, 0.0), 0.5)
    problem = RofProblem(alpha=10.0, epsilon=0.0, data=g)

    class ZeroField:
        jump_set = ()

        def __call__(self, x):
            return np.zeros_like(np.atleast_2d(x))

        def div(self, x):
            return np.zeros(np.atleast_2d(x).shape[0])

    res = dual_energy(ZeroField(), problem, mesh=mesh)
    assert res.value == pytest.approx(0.0, abs=1e-12)
    assert res.admissible


def test_strong_duality_single_disc():
    mesh = refined_square(3)
    sol = exact_single_disc(0.5, 10.0)
    problem = RofProblem(alpha=10.0, epsilon=0.0,
                         data=DataFunction.char_ball((0.0, 0.0), 0.5))
    # I(u) for u = c g: TV is c * perimeter, fidelity (alpha/2)(1-c)^2 |B|
    fid = 0.5 * problem.alpha * (1 - sol.coefficient) ** 2 * np.pi * 0.25
    primal = sol.tv_value + fid

    class Z:
        jump_set = sol.u.jump_set

        def __call__(self, x):
            return sol.z(x)

        def div(self, x):
            return sol.z_div(x)

    dual = dual_energy(Z(), problem, mesh=mesh)
    assert dual.admissible
    assert abs(primal - dual.value) <= 1e-5


def test_weak_duality_for_admissible_fields():
    mesh = refined_square(2)
    g = DataFunction.char_ball((0.0, 0.0), 0.5)
    problem = RofProblem(alpha=10.0, epsilon=0.0, data=g)
    sol = exact_single_disc(0.5, 10.0)

    class Z:
        jump_set = sol.u.jump_set

        def __init__(self, scale):
            self.scale = scale

        def __call__(self, x):
            return self.scale * sol.z(x)

        def div(self, x):
            return self.scale * sol.z_div(x)

    rng = np.random.default_rng(0)
    for scale in [0.0, 0.3, 0.8, 1.0]:
        d = dual_energy(Z(scale), problem, mesh=mesh)
        assert d.admissible
        for _ in range(3):
            vals = rng.normal(scale=0.5, size=len(mesh.vertices))
            u_h = FeFunction(P1, mesh, vals)
            e = energies(u_h, problem)
            assert e.tv + e.fidelity >= d.value - 1e-9


def test_dual_energy_reports_inadmissible():
    mesh = refined_square(1)
    g = DataFunction.char_ball((0.0, 0.0), 0.5)
    problem = RofProblem(alpha=10.0, epsilon=0.0, data=g)

    class Big:
        jump_set = ()

        def __call__(self, x):
            x = np.atleast_2d(x)
            return np.stack([np.full(x.shape[0], 2.0),
                             np.zeros(x.shape[0])], axis=1)

        def div(self, x):
            return np.zeros(np.atleast_2d(x).shape[0])

    res = dual_energy(Big(), problem, mesh=mesh)
    assert not res.admissible
    assert res.max_modulus == pytest.approx(2.0)


# ----------------------------------------------------------------------
# Hoelder quotient


def test_holder_quotient_linear_blowup():
    l1 = holder_quotient(0.01, 1.0, 1.0)
    l2 = holder_quotient(0.1, 1.0, 1.0)
    assert l1 / l2 == pytest.approx(10.0, rel=0.05)


def test_holder_quotient_sqrt_limit():
    r = 0.4
    val = holder_quotient(1e-4, r, 0.5)
    assert val == pytest.approx(np.sqrt(2.0) / np.sqrt(r), rel=1e-4)


def test_holder_quotient_matches_closed_form():
    for phi in [1e-3, 0.2, 1.0]:
        for theta in [0.3, 0.5, 1.0]:
            got = holder_quotient(phi, 0.7, theta)
            expected = np.sin(phi) / (0.7 * (1 - np.cos(phi))) ** theta
            assert got == pytest.approx(expected, rel=1e-12)


def test_holder_quotient_domain_checks():
    with pytest.raises(ValueError):
        holder_quotient(2.0, 1.0, 0.5)
    with pytest.raises(ValueError):
        holder_quotient(0.1, 1.0, 0.0)


# ----------------------------------------------------------------------
# problem container


def test_problem_validates_parameters():
    g = DataFunction.char_ball()
    with pytest.raises(ValueError):
        RofProblem(alpha=0.0, epsilon=0.0, data=g)
    with pytest.raises(ValueError):
        RofProblem(alpha=1.0, epsilon=-1.0, data=g)


def test_sign_solution_values():
    sol = exact_sign_1d(10.0)
    assert sol.coefficient == pytest.approx(0.95)
    x = np.array([[0.5], [-0.5], [0.0]])
    assert sol.u(x) == pytest.approx([0.95, -0.95, 0.95])
