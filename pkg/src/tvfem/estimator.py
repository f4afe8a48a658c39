"""Primal-dual gap error estimation and estimator-driven mesh adaptivity.

An approximate dual field is reconstructed from the Crouzeix-Raviart
minimizer by post-processing,

    z_T = grad u_T / |grad u_T|_eps + (alpha/d) (mean_T(u) - mean_T(g)) (x - x_T),

which maximizes the discrete dual objective at the exact discrete minimizer.
The field satisfies |z(x_T)| <= 1 at barycenters, but generally not
everywhere; gamma_T bounds its modulus per cell, and a global or a continuous
local rescaling produces admissible fields (at the price of estimator
efficiency).  Refinement indicators are the local parts of the primal-dual
gap; marking follows the bulk criterion on the squared indicators.
"""

import time
from dataclasses import dataclass, replace

import numpy as np

from .fem import (
    CR,
    P1,
    RT0CELL,
    FeFunction,
    cell_means,
    data_cell_means,
    data_cell_moments,
    elementwise_gradient,
    evaluate_rt0,
    integrate_cellwise,
    quad_rule,
    rt0_normal_jumps,
)
from .mesh import mesh_stats, red_refine, rgb_close
from .solver import FlowConfig, FlowSystem, run_flow


@dataclass(frozen=True)
class DualField:
    """Cellwise Raviart-Thomas form with per-cell modulus bounds.

    scaling: 'unscaled' keeps the reconstruction; 'global' divides by
    max gamma_T; 'local' divides pointwise by the continuous piecewise-linear
    majorant gamma~ with nodal values max over adjacent cells.
    """
    field: FeFunction
    gamma: np.ndarray = None
    scaling: str = "unscaled"
    local_gamma_nodal: np.ndarray = None
    global_factor: float = 1.0

    @property
    def mesh(self):
        return self.field.mesh

    def barycenter_values(self):
        """Pi_h of the field: its value at the cell barycenters."""
        mesh = self.mesh
        a = self.field.dofs[:, :mesh.dim]
        if self.scaling == "local":
            gam = self._local_gamma_at(mesh.cell_barycenters(),
                                       np.arange(len(mesh.cells)))
            return a / gam[:, None]
        return a / self.global_factor

    def cell_divergence(self):
        """Divergence per cell; constant except under local scaling, where the
        value at the barycenter of the exact pointwise divergence is returned."""
        mesh = self.mesh
        d = mesh.dim
        div = d * self.field.dofs[:, d]
        if self.scaling == "local":
            cells = np.arange(len(mesh.cells))
            bary = mesh.cell_barycenters()
            return self.divergence_at(bary, cells)
        return div / self.global_factor

    def values_at(self, points, cells):
        vals = evaluate_rt0(self.field, points, cells)
        if self.scaling == "local":
            gam = self._local_gamma_at(points, cells)
            return vals / gam[:, None]
        return vals / self.global_factor

    def divergence_at(self, points, cells):
        mesh = self.mesh
        d = mesh.dim
        div = d * self.field.dofs[cells, d]
        if self.scaling != "local":
            return div / self.global_factor
        # div(z / s) = div z / s - z . grad s / s^2 with s piecewise affine
        gam = self._local_gamma_at(points, cells)
        grad = self._local_gamma_gradients()[cells]
        vals = evaluate_rt0(self.field, points, cells)
        return div / gam - (vals * grad).sum(axis=1) / gam ** 2

    def _local_gamma_at(self, points, cells):
        mesh = self.mesh
        tri = mesh.cells[cells]
        verts = mesh.vertices[tri]
        nodal = self.local_gamma_nodal[tri]
        if mesh.dim == 1:
            t = (points[:, 0] - verts[:, 0, 0]) / (verts[:, 1, 0]
                                                   - verts[:, 0, 0])
            return nodal[:, 0] * (1 - t) + nodal[:, 1] * t
        # barycentric coordinates of the points in their cells
        d1 = verts[:, 1] - verts[:, 0]
        d2 = verts[:, 2] - verts[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        w = points - verts[:, 0]
        l1 = (w[:, 0] * d2[:, 1] - w[:, 1] * d2[:, 0]) / det
        l2 = (d1[:, 0] * w[:, 1] - d1[:, 1] * w[:, 0]) / det
        l0 = 1.0 - l1 - l2
        return nodal[:, 0] * l0 + nodal[:, 1] * l1 + nodal[:, 2] * l2

    def _local_gamma_gradients(self):
        from .fem import grad_lambdas
        g = grad_lambdas(self.mesh)
        nodal = self.local_gamma_nodal[self.mesh.cells]
        return np.einsum("mk,mkd->md", nodal, g)


@dataclass(frozen=True)
class EstimatorBreakdown:
    eta_sq: np.ndarray          # per-cell squared indicators
    tv_gap: np.ndarray          # first (total-variation gap) part
    residual: np.ndarray        # second (dual residual) part
    oscillation_sq: np.ndarray  # per-cell ||g - Pi g||^2
    alpha: float

    @property
    def eta_sq_total(self):
        return float(self.eta_sq.sum())

    @property
    def osc_total(self):
        return float(np.sqrt(self.oscillation_sq.sum()))

    @property
    def estimate(self):
        """Reliability value (2/alpha sum eta_T^2)^(1/2) + oscillation."""
        return float(np.sqrt(2.0 / self.alpha * max(self.eta_sq_total, 0.0))
                     + self.osc_total)


def reconstruct_dual(u_h, problem):
    """Post-processed dual field of a Crouzeix-Raviart iterate."""
    if u_h.space != CR:
        raise ValueError("the dual reconstruction starts from a cr iterate")
    mesh = u_h.mesh
    d = mesh.dim
    grad = elementwise_gradient(u_h).dofs
    gn = np.sqrt((grad ** 2).sum(axis=1))
    weight = np.sqrt(gn ** 2 + problem.epsilon ** 2)
    a = grad / weight[:, None]
    misfit = cell_means(u_h) - data_cell_means(mesh, problem.data)
    b = (problem.alpha / d) * misfit
    dofs = np.concatenate([a, b[:, None]], axis=1)
    return DualField(FeFunction(RT0CELL, mesh, dofs))


def gamma_bounds(field, u_h, problem):
    """Per-cell bound gamma_T >= sup_T |z|: barycenter modulus plus the
    radial growth (alpha/d) |misfit(x_T)| (d/(d+1)) h_T."""
    mesh = field.mesh
    d = mesh.dim
    misfit = cell_means(u_h) - data_cell_means(mesh, problem.data)
    h = mesh.cell_diameters()
    return 1.0 + (problem.alpha / d) * np.abs(misfit) * (d / (d + 1.0)) * h


def scale_dual(field, mode, gamma=None):
    """Admissible rescaling of a reconstructed field.

    'global' divides by the largest gamma_T; 'local' divides by the
    continuous piecewise-linear function whose nodal values majorize the
    gamma_T of all adjacent cells.
    """
    if gamma is None:
        gamma = field.gamma
    if gamma is None:
        raise ValueError("gamma bounds are required for scaling")
    mesh = field.mesh
    if mode == "global":
        return replace(field, gamma=gamma, scaling="global",
                       global_factor=float(np.max(gamma)))
    if mode == "local":
        nodal = np.zeros(len(mesh.vertices))
        for k in range(mesh.cells.shape[1]):
            np.maximum.at(nodal, mesh.cells[:, k], gamma)
        return replace(field, gamma=gamma, scaling="local",
                       local_gamma_nodal=nodal)
    raise ValueError(f"unknown scaling mode {mode!r}")


def eta_cells(u_h, q, problem):
    """Per-cell squared indicators eta_T^2 and their two parts.

    eta_T^2 = int_T |grad u_h| - grad u_h . Pi_h q
              + (1/2 alpha) int_T (div q - alpha (u_h - g_h))^2,
    with g_h the cellwise data average.  Both integrands are polynomial for
    unscaled and globally scaled fields and are integrated exactly; under
    local scaling they are rational and a degree-4 rule is used.
    """
    mesh = u_h.mesh
    if u_h.space not in (P1, CR):
        raise ValueError("indicators take a p1 or cr primal iterate")
    alpha = problem.alpha
    vols = mesh.cell_measures()
    grad = elementwise_gradient(u_h).dofs
    gn = np.sqrt((grad ** 2).sum(axis=1))
    pq = q.barycenter_values()
    tv_gap = vols * (gn - (grad * pq).sum(axis=1))

    gbar = data_cell_means(mesh, problem.data)
    # the integrand is quadratic per cell except under local scaling
    rule = quad_rule(mesh.dim, 4 if q.scaling == "local" else 2)
    pts = np.einsum("qk,mkd->mqd", rule.points, mesh.vertices[mesh.cells])
    m, nq, dd = pts.shape
    cells = np.repeat(np.arange(m), nq)
    flat = pts.reshape(-1, dd)
    if q.scaling == "local":
        divq = q.divergence_at(flat, cells).reshape(m, nq)
    else:
        divq = q.cell_divergence()[:, None]
    uh = _eval_affine(u_h, flat, cells).reshape(m, nq)
    integrand = (divq - alpha * (uh - gbar[:, None])) ** 2
    residual = vols * (integrand @ rule.weights) / (2.0 * alpha)
    return tv_gap + residual, tv_gap, residual


def _eval_affine(u_h, points, cells):
    mesh = u_h.mesh
    grad = elementwise_gradient(u_h).dofs[cells]
    ubar = cell_means(u_h)[cells]
    bary = mesh.cell_barycenters()[cells]
    return ubar + ((points - bary) * grad).sum(axis=1)


def oscillation_sq(mesh, data):
    """Per-cell squared data oscillation ||g - Pi_h g||^2."""
    vols = mesh.cell_measures()
    gbar = data_cell_means(mesh, data)
    if hasattr(data, "chi_pieces"):
        g_sq = np.zeros(len(mesh.cells))
        for coef, area, _ in data_cell_moments(mesh, data):
            g_sq += coef ** 2 * area
    else:
        rule = quad_rule(mesh.dim, 6)
        g_sq = integrate_cellwise(mesh, lambda x: np.asarray(data(x)) ** 2,
                                  rule, jumps=getattr(data, "jump_set", ()))
    return np.maximum(g_sq - vols * gbar ** 2, 0.0)


def estimate_total(u_h, q, problem, mesh=None):
    """Full estimator breakdown for an iterate and a dual field."""
    mesh = mesh or u_h.mesh
    eta_sq, tv_gap, residual = eta_cells(u_h, q, problem)
    osc = oscillation_sq(mesh, problem.data)
    return EstimatorBreakdown(eta_sq=eta_sq, tv_gap=tv_gap, residual=residual,
                              oscillation_sq=osc, alpha=problem.alpha)


def mark_cells(indicators, fraction=0.5):
    """Minimal cell set carrying a bulk fraction of the indicator total.

    Cells are sorted by decreasing indicator, ties broken by cell index, and
    collected greedily until the partial sum reaches fraction * total.  An
    all-zero indicator vector yields no marks (the loop has converged).
    """
    ind = np.asarray(indicators, dtype=float)
    if np.any(ind < 0) or not np.all(np.isfinite(ind)):
        raise ValueError("indicators must be finite and nonnegative")
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    total = ind.sum()
    if total == 0.0:
        return []
    order = np.lexsort((np.arange(len(ind)), -ind))
    csum = np.cumsum(ind[order])
    count = int(np.searchsorted(csum, fraction * total - 1e-15 * total) + 1)
    marks = order[:count]
    # drop trailing zero-indicator cells that a full-fraction request includes
    marks = marks[ind[marks] > 0.0]
    return sorted(int(i) for i in marks)


@dataclass(frozen=True)
class AdaptiveLoopConfig:
    marking_fraction: float = 0.5
    max_levels: int = 12
    epsilon_rule: object = lambda h: h ** 2
    eps_stop_rule: object = lambda h: h ** 2 / 20.0
    report_space: str = P1
    indicator_space: str = P1   # 'cr' is available but experimental
    max_iterations: int = 100_000
    max_cells: int = None
    mark_on_squares: bool = True  # bulk criterion on eta_T^2 (else on eta_T)

    def __post_init__(self):
        if not 0.0 < self.marking_fraction <= 1.0:
            raise ValueError("marking fraction must lie in (0, 1]")


@dataclass
class AdaptiveLevel:
    level: int
    mesh: object
    stats: object
    u_report: FeFunction
    u_cr: FeFunction
    dual: DualField
    breakdown: EstimatorBreakdown
    flow_converged: bool
    marked: list
    wall_time: float
    scaled_estimates: dict


def adaptive_loop(problem, config, mesh):
    """Solve -> reconstruct -> estimate -> mark -> refine, per level.

    The dual field is always reconstructed from the Crouzeix-Raviart solve;
    indicators pair it with the configured indicator iterate (P1 by default).
    The reported iterate is recomputed in the configured report space.
    Returns one record per level, including the meshes, so error reporting
    against exact solutions stays outside the loop.
    """
    records = []
    for level in range(config.max_levels):
        t0 = time.perf_counter()
        stats = mesh_stats(mesh)
        h = stats.h_avg
        problem_l = problem.with_epsilon(float(config.epsilon_rule(h)))
        fcfg = FlowConfig(eps_stop=float(config.eps_stop_rule(h)),
                          max_iterations=config.max_iterations)
        sys_cr = FlowSystem(problem_l, mesh, CR)
        st_cr = run_flow(sys_cr.initial_iterate(), problem_l, fcfg,
                         system=sys_cr)
        dual = reconstruct_dual(st_cr.u, problem_l)
        gamma = gamma_bounds(dual, st_cr.u, problem_l)
        dual = replace(dual, gamma=gamma)
        states = {CR: st_cr}
        if P1 in (config.report_space, config.indicator_space):
            sys_p1 = FlowSystem(problem_l, mesh, P1)
            states[P1] = run_flow(sys_p1.initial_iterate(), problem_l, fcfg,
                                  system=sys_p1)
        u_ind = states[config.indicator_space].u
        breakdown = estimate_total(u_ind, dual, problem_l)
        scaled = {}
        for mode in ("global", "local"):
            try:
                bd = estimate_total(u_ind, scale_dual(dual, mode), problem_l)
                scaled[mode] = bd.estimate
            except ValueError:
                pass
        marks = mark_cells(
            breakdown.eta_sq if config.mark_on_squares
            else np.sqrt(np.maximum(breakdown.eta_sq, 0.0)),
            config.marking_fraction)
        records.append(AdaptiveLevel(
            level=level, mesh=mesh, stats=stats,
            u_report=states[config.report_space].u, u_cr=st_cr.u, dual=dual,
            breakdown=breakdown,
            flow_converged=all(s.converged for s in states.values()),
            marked=marks, wall_time=time.perf_counter() - t0,
            scaled_estimates=scaled))
        if not marks:
            break
        if config.max_cells and len(mesh.cells) >= config.max_cells:
            break
        if level < config.max_levels - 1:
            mesh = rgb_close(red_refine(mesh, marks))
    return records


def dual_normal_jump_norm(field):
    """Weighted l2 aggregate of the normal jumps of the field at interior
    side midpoints; vanishes at the exact discrete minimizer."""
    _, jumps, lengths = rt0_normal_jumps(field.field)
    return float(np.sqrt((lengths * jumps ** 2).sum()))


def discrete_duality_gap(u_cr, field, problem):
    """I_h(u) - D_h(z) for the unregularized discrete pair; nonnegative, and
    vanishing as the regularization and the stopping tolerance go to zero."""
    from .rof import dual_energy, energies
    e = energies(u_cr, problem)
    d = dual_energy(field.field, problem)
    return e.i_h - d.value
