"""Total-variation model problems with closed-form reference solutions.

The model minimizes  |Du|(Omega) + (alpha/2) ||u - g||^2  for given data g.
Two phantom families admit explicit minimizers of the form u = c g: a single
characteristic function of a ball, and the difference of two characteristic
functions of balls touching at the origin.  For the single ball an explicit
dual vector field is available as well; for the two-ball data the dual values
are known only on the jump circles, which is enough to quantify the blow-up
of Hoelder difference quotients at the touching point.
"""

from dataclasses import dataclass, replace

import numpy as np

from .fem import (
    FeFunction,
    RT0CELL,
    data_cell_means,
    data_squared_norm,
    elementwise_gradient,
    integrate_cellwise,
    l2_error,
    quad_rule,
)
from .mesh import Circle


class DataFunction:
    """Input data g, evaluable pointwise and integrable exactly when it is a
    combination of characteristic functions (closed-ball convention: points on
    a jump circle evaluate to the inside value).

    Attributes
    ----------
    chi_pieces : present for characteristic combinations; in 2d a list of
        (coefficient, center, radius), in 1d a list of
        (coefficient, breakpoint, side).
    jump_set : jump geometry used for grading and subdivision quadrature
        (a list of :class:`~tvfem.mesh.Circle` in 2d, of breakpoints in 1d).
    """

    def __init__(self, fn, dim, jump_set=(), chi_pieces=None, label="custom"):
        self._fn = fn
        self.dim = dim
        self.jump_set = list(jump_set)
        if chi_pieces is not None:
            self.chi_pieces = list(chi_pieces)
        self.label = label

    def __call__(self, x):
        return self._fn(x)

    def __repr__(self):
        return f"DataFunction({self.label})"

    @classmethod
    def char_ball(cls, center=(0.0, 0.0), radius=0.5, coef=1.0):
        center = tuple(float(c) for c in center)

        def fn(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            d = np.sqrt(((x - np.asarray(center)) ** 2).sum(axis=1))
            return coef * (d <= radius).astype(float)

        return cls(fn, dim=2, jump_set=[Circle(center, radius)],
                   chi_pieces=[(coef, center, radius)],
                   label=f"char_ball(r={radius})")

    @classmethod
    def two_balls(cls, radius, rotate_deg=0.0, shift=(0.0, 0.0)):
        """Difference of two ball indicators touching at the origin, composed
        with the affine map Phi(x) = Q x + b (Q the rotation, b the shift)."""
        r = float(radius)
        phi = np.deg2rad(rotate_deg)
        q = np.array([[np.cos(phi), -np.sin(phi)],
                      [np.sin(phi), np.cos(phi)]])
        b = np.asarray(shift, dtype=float)
        # Phi(x) in B(c, r)  <=>  x in B(Q^T (c - b), r)
        cplus = tuple(q.T @ (np.array([r, 0.0]) - b))
        cminus = tuple(q.T @ (np.array([-r, 0.0]) - b))
        pieces = [(1.0, cplus, r), (-1.0, cminus, r)]

        def fn(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            out = np.zeros(x.shape[0])
            for coef, c, rr in pieces:
                d = np.sqrt(((x - np.asarray(c)) ** 2).sum(axis=1))
                out += coef * (d <= rr)
            return out

        return cls(fn, dim=2,
                   jump_set=[Circle(cplus, r), Circle(cminus, r)],
                   chi_pieces=pieces,
                   label=f"two_balls(r={r}, rot={rotate_deg})")

    @classmethod
    def sign_1d(cls):
        def fn(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))[:, 0]
            return np.where(x >= 0.0, 1.0, -1.0)

        return cls(fn, dim=1, jump_set=[0.0],
                   chi_pieces=[(1.0, 0.0, +1), (-1.0, 0.0, -1)],
                   label="sign_1d")

    @classmethod
    def custom(cls, fn, dim, jump_set=()):
        return cls(fn, dim=dim, jump_set=jump_set)

    def scaled(self, factor):
        """The same data multiplied by a constant (keeps exact integrability)."""
        pieces = None
        if hasattr(self, "chi_pieces"):
            pieces = [(factor * c, *rest) for c, *rest in self.chi_pieces]
        return DataFunction(lambda x: factor * np.asarray(self._fn(x)),
                            dim=self.dim, jump_set=self.jump_set,
                            chi_pieces=pieces,
                            label=f"{factor} * {self.label}")


@dataclass(frozen=True)
class RofProblem:
    """alpha: fidelity weight; epsilon: modulus regularization; g: data;
    dirichlet: boundary values (callable on coordinates)."""
    alpha: float
    epsilon: float
    data: DataFunction
    dirichlet: object = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    def with_epsilon(self, eps):
        return replace(self, epsilon=eps)

    def dirichlet_values(self, points):
        if self.dirichlet is None:
            return np.zeros(np.atleast_2d(points).shape[0])
        return np.asarray(self.dirichlet(points), dtype=float)


@dataclass(frozen=True)
class ExactSolution:
    u: object                     # callable, and a DataFunction when u = c g
    z: object = None              # dual vector field, callable or None
    z_div: object = None          # divergence of z, callable or None
    coefficient: float = 0.0
    tv_value: float = None        # |Du|(Omega) when available in closed form
    label: str = ""

    @property
    def jump_set(self):
        return getattr(self.u, "jump_set", ())

    @property
    def chi_pieces(self):
        return getattr(self.u, "chi_pieces", None)

    def __call__(self, x):
        return self.u(x)


def coefficient(r, alpha, d=2, variant="ball_d"):
    """Closed-form scaling of the minimizer u = c g, clamped at zero."""
    if r <= 0 or alpha <= 0:
        raise ValueError("r and alpha must be positive")
    if variant == "ball_d":
        return max(1.0 - d / (alpha * r), 0.0)
    if variant == "two_disc":
        return max(1.0 - 2.0 / (alpha * r), 0.0)
    if variant == "sign_1d":
        return max(1.0 - 1.0 / (alpha * r), 0.0)
    raise ValueError(f"unknown coefficient variant {variant!r}")


def exact_single_disc(r, alpha, d=2):
    """Minimizer and dual field for g the indicator of a centered ball.

    u = c g with c = max(1 - d/(alpha r), 0); the dual field is radial,
    continuous, with |z| <= 1, and div z = -c' d / r inside the ball.
    """
    if d != 2:
        raise ValueError("the explicit dual field is implemented for d = 2")
    c = coefficient(r, alpha, d=d, variant="ball_d")
    cprime = min(1.0, r * alpha / d)
    g = DataFunction.char_ball((0.0, 0.0), r)
    u = g.scaled(c)

    def z(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        nrm = np.sqrt((x ** 2).sum(axis=1))
        out = np.zeros_like(x)
        inner = nrm <= r
        out[inner] = -cprime / r * x[inner]
        outer = ~inner
        out[outer] = -cprime * r * x[outer] / (nrm[outer] ** 2)[:, None]
        return out

    def z_div(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        nrm = np.sqrt((x ** 2).sum(axis=1))
        return np.where(nrm <= r, -cprime * d / r, 0.0)

    return ExactSolution(u=u, z=z, z_div=z_div, coefficient=c,
                         tv_value=c * 2.0 * np.pi * r,
                         label=f"single_disc(r={r}, alpha={alpha})")


def exact_two_disc(r, alpha, rotate_deg=0.0, shift=(0.0, 0.0),
                   domain_half_width=None):
    """Minimizer u = c g for the two touching balls; no global dual field.

    The total variation is recorded only when both balls fit inside the
    stated square domain; otherwise the closed form is kept as reference on
    the strength of the scaling towards the touching point, and comparisons
    should rely on differences between refinement levels.
    """
    c = coefficient(r, alpha, variant="two_disc")
    g = DataFunction.two_balls(r, rotate_deg=rotate_deg, shift=shift)
    tv = None
    if domain_half_width is not None:
        inside = all(
            np.abs(np.asarray(center)).max() + rr <= domain_half_width
            for _, center, rr in g.chi_pieces)
        if inside:
            tv = c * 2.0 * (2.0 * np.pi * r)
    return ExactSolution(u=g.scaled(c), coefficient=c, tv_value=tv,
                         label=f"two_disc(r={r}, alpha={alpha})")


def exact_sign_1d(alpha, r=2.0):
    """1d minimizer c sign(x) on (-1, 1); the effective radius is r = 2."""
    c = coefficient(r, alpha, variant="sign_1d")
    g = DataFunction.sign_1d()
    return ExactSolution(u=g.scaled(c), coefficient=c, tv_value=2.0 * c,
                         label=f"sign_1d(alpha={alpha})")


# ----------------------------------------------------------------------
# energies

@dataclass(frozen=True)
class EnergyBreakdown:
    tv: float                 # integral of |grad u_h|
    tv_eps: float             # integral of the regularized modulus
    fidelity: float           # (alpha/2) ||u_h - g||^2
    fidelity_projected: float  # (alpha/2) ||Pi(u_h - g)||^2
    i_eps: float              # tv_eps + fidelity
    i_h: float                # tv + fidelity_projected


def energies(u_h, problem):
    """Energy parts of a p1 or cr iterate; the TV part is exact because the
    integrand is constant per cell."""
    mesh = u_h.mesh
    vols = mesh.cell_measures()
    g = elementwise_gradient(u_h).dofs
    gn = np.sqrt((g ** 2).sum(axis=1))
    tv = float((vols * gn).sum())
    tv_eps = float((vols * np.sqrt(gn ** 2 + problem.epsilon ** 2)).sum())
    fid = 0.5 * problem.alpha * l2_error(u_h, problem.data) ** 2
    fid_proj = 0.5 * problem.alpha * l2_error(u_h, problem.data,
                                              projected=True) ** 2
    return EnergyBreakdown(tv=tv, tv_eps=tv_eps, fidelity=fid,
                           fidelity_projected=fid_proj,
                           i_eps=tv_eps + fid, i_h=tv + fid_proj)


@dataclass(frozen=True)
class DualEnergyResult:
    value: float
    admissible: bool
    max_modulus: float


def dual_energy(z, problem, mesh=None, div=None):
    """Dual objective D(z) = -(1/2 alpha) ||div z + alpha g||^2
    + (alpha/2) ||g||^2, with the admissibility |z| <= 1 checked and reported.

    Continuous fields are integrated by subdivision quadrature on the given
    mesh; cellwise Raviart-Thomas fields evaluate the discrete objective with
    g replaced by its cell averages and the constraint checked at barycenters.
    """
    alpha = problem.alpha
    g = problem.data
    if isinstance(z, FeFunction):
        if z.space != RT0CELL:
            raise ValueError("discrete dual fields must be cellwise RT")
        m = z.mesh
        vols = m.cell_measures()
        gbar = data_cell_means(m, g)
        divz = m.dim * z.dofs[:, m.dim]
        value = (-0.5 / alpha * (vols * (divz + alpha * gbar) ** 2).sum()
                 + 0.5 * alpha * (vols * gbar ** 2).sum())
        mod = np.sqrt((z.dofs[:, :m.dim] ** 2).sum(axis=1))
        max_mod = float(mod.max())
        return DualEnergyResult(float(value), max_mod <= 1.0 + 1e-12, max_mod)
    if mesh is None:
        raise ValueError("a mesh is required to integrate a continuous field")
    if div is None:
        div = getattr(z, "div", None)
    if div is None:
        raise ValueError("continuous dual fields need a divergence callable")
    jumps = list(getattr(z, "jump_set", ())) + list(g.jump_set)
    rule = quad_rule(mesh.dim, 4)

    def residual_sq(x):
        return (np.asarray(div(x)) + alpha * np.asarray(g(x))) ** 2

    res = integrate_cellwise(mesh, residual_sq, rule, jumps=jumps).sum()
    value = -0.5 / alpha * res + 0.5 * alpha * data_squared_norm(mesh, g)
    # admissibility sampled on quadrature points and vertices
    pts = np.vstack([
        np.einsum("qk,mkd->mqd", rule.points,
                  mesh.vertices[mesh.cells]).reshape(-1, mesh.dim),
        mesh.vertices,
    ])
    mod = np.sqrt((np.atleast_2d(z(pts)) ** 2).sum(axis=1))
    max_mod = float(mod.max())
    return DualEnergyResult(float(value), max_mod <= 1.0 + 1e-12, max_mod)


# ----------------------------------------------------------------------
# Hoelder quotient diagnostic at the touching point of the two-ball data

def two_disc_boundary_values(phi, r):
    """Points x+- on the two jump circles at angle phi from the touching
    point, the dual values there, and the outer normals.

    In the untransformed frame the balls touch at the origin; any dual
    solution equals the inward normal on the positive ball and the outward
    normal on the negative one.
    """
    x_plus = r * np.array([1.0 - np.cos(phi), np.sin(phi)])
    x_minus = r * np.array([np.cos(phi) - 1.0, np.sin(phi)])
    z_plus = np.array([np.cos(phi), -np.sin(phi)])
    z_minus = np.array([np.cos(phi), np.sin(phi)])
    nu_plus = (x_plus - np.array([r, 0.0])) / r
    nu_minus = (x_minus - np.array([-r, 0.0])) / r
    return x_plus, x_minus, z_plus, z_minus, nu_plus, nu_minus


def holder_quotient(phi, r, theta):
    """Modulus of the theta-difference quotient of the dual trace values at
    the symmetric pair of circle points with opening angle phi.

    Computed from the boundary values: with |z(x+) - z(x-)| = 2 sin(phi) and
    |x+ - x-| = 2 r (1 - cos(phi)) the quotient is normalized per pair of
    half-differences, giving sin(phi) / (r (1 - cos(phi)))^theta.  It stays
    bounded as phi -> 0 exactly up to theta = 1/2 (limit sqrt(2) r^{-1/2})
    and blows up for every theta > 1/2.
    """
    if not 0.0 < phi < 0.5 * np.pi:
        raise ValueError("phi must lie in (0, pi/2)")
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    if r <= 0:
        raise ValueError("r must be positive")
    x_plus, x_minus, z_plus, z_minus, _, _ = two_disc_boundary_values(phi, r)
    sin_phi = 0.5 * float(np.hypot(*(z_plus - z_minus)))
    one_minus_cos = 0.5 * float(np.hypot(*(x_plus - x_minus))) / r
    return sin_phi / (r * one_minus_cos) ** theta
