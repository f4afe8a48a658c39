"""Finite element spaces and operators on simplicial meshes.

Implemented spaces: piecewise constants (scalar and vector), continuous P1,
Crouzeix-Raviart (affine per cell, continuous at side midpoints), and
cellwise Raviart-Thomas fields a_T + b_T (x - x_T).  In one dimension the
Crouzeix-Raviart space coincides with P1; sides are vertices there.

Integration against data of the form sum_j c_j chi_{B_j} (characteristic
functions of closed balls with pairwise disjoint interiors) is exact: cells
cut by a ball boundary are handled through closed-form area/moment formulas
instead of sampling.  Objects exposing a ``chi_pieces`` attribute --
a sequence of (coefficient, center, radius) triples, or (coefficient,
breakpoint, side) in one dimension -- take this exact path; plain callables
are integrated by quadrature with recursive subdivision near declared jump
circles.
"""

import warnings
import weakref
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import circle_intersects_triangle, disc_polygon_moments, triangle_moments

P0 = "p0"
P0VEC = "p0vec"
P1 = "p1"
CR = "cr"
RT0CELL = "rt0cell"

_SPACES = (P0, P0VEC, P1, CR, RT0CELL)


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric quadrature rule; weights sum to one (mean-value form)."""
    points: np.ndarray
    weights: np.ndarray
    degree: int

    def __post_init__(self):
        # tabulated weights are truncated; renormalize so constants are exact
        object.__setattr__(self, "weights",
                           self.weights / self.weights.sum())


def _gauss_1d(n):
    x, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (x + 1.0)
    return np.stack([1.0 - t, t], axis=1), 0.5 * w


_TRI_RULES = {
    1: QuadratureRule(np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0]), 1),
    2: QuadratureRule(
        np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
        np.full(3, 1 / 3), 2),
    4: QuadratureRule(
        np.array(
            [[0.108103018168070, 0.445948490915965, 0.445948490915965],
             [0.445948490915965, 0.108103018168070, 0.445948490915965],
             [0.445948490915965, 0.445948490915965, 0.108103018168070],
             [0.816847572980459, 0.091576213509771, 0.091576213509771],
             [0.091576213509771, 0.816847572980459, 0.091576213509771],
             [0.091576213509771, 0.091576213509771, 0.816847572980459]]),
        np.array([0.223381589678011] * 3 + [0.109951743655322] * 3), 4),
}


def _orbit3(a, b):
    return [[a, b, b], [b, a, b], [b, b, a]]


def _orbit6(a, b, c):
    return [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]]


_TRI_RULES[6] = QuadratureRule(
    np.array(_orbit3(0.501426509658179, 0.249286745170910)
             + _orbit3(0.873821971016996, 0.063089014491502)
             + _orbit6(0.053145049844816, 0.310352451033785,
                       0.636502499121399)),
    np.array([0.116786275726379] * 3 + [0.050844906370207] * 3
             + [0.082851075618374] * 6), 6)


def quad_rule(dim, degree=4):
    """Symmetric rule of at least the requested polynomial exactness;
    triangle rules clamp at the highest tabulated degree."""
    if dim == 1:
        n = max(1, (degree + 2) // 2)
        pts, w = _gauss_1d(n)
        return QuadratureRule(pts, w, 2 * n - 1)
    for d in sorted(_TRI_RULES):
        if d >= degree:
            return _TRI_RULES[d]
    return _TRI_RULES[max(_TRI_RULES)]


@dataclass(frozen=True)
class FeFunction:
    """Degree-of-freedom vector tagged with a space over a mesh.

    dof layout: p1 one per vertex, cr one per side, p0 one per cell,
    p0vec (M, d), rt0cell (M, d + 1) rows (a_T, b_T).
    """
    space: str
    mesh: object
    dofs: np.ndarray

    def __post_init__(self):
        if self.space not in _SPACES:
            raise ValueError(f"unknown space {self.space!r}")
        dofs = np.asarray(self.dofs, dtype=float)
        object.__setattr__(self, "dofs", dofs)
        expected = dof_shape(self.mesh, self.space)
        if dofs.shape != expected:
            raise ValueError(
                f"dof shape {dofs.shape} does not match {self.space} "
                f"(expected {expected})")


def dof_shape(mesh, space):
    m = len(mesh.cells)
    if space == P0:
        return (m,)
    if space == P0VEC:
        return (m, mesh.dim)
    if space == P1:
        return (len(mesh.vertices),)
    if space == CR:
        return (len(mesh.sides),)
    if space == RT0CELL:
        return (m, mesh.dim + 1)
    raise ValueError(space)


def dof_positions(mesh, space):
    """Coordinates attached to the dofs (vertices for p1, midpoints for cr)."""
    if space == P1:
        return mesh.vertices
    if space == CR:
        return mesh.side_midpoints
    raise ValueError(f"no nodal positions for space {space!r}")


def cell_dofmap(mesh, space):
    """(M, k) global dof indices of the local basis on each cell."""
    if space == P1:
        return mesh.cells
    if space == CR:
        return mesh.cell_sides
    raise ValueError(f"no cellwise dof map for space {space!r}")


def dirichlet_dofs(mesh, space, labels=None):
    """Constrained dof indices on the labeled boundary (all labels by default)."""
    bsides = np.flatnonzero(mesh.boundary_sides)
    if labels is not None:
        wanted = set(labels)
        bsides = np.array(
            [s for s in bsides if mesh.boundary_label(s) in wanted], dtype=int)
    if space == CR:
        return np.unique(bsides)
    if space == P1:
        return np.unique(mesh.sides[bsides].reshape(-1))
    raise ValueError(f"no boundary dofs for space {space!r}")


# ----------------------------------------------------------------------
# local geometry of the basis

def grad_lambdas(mesh):
    """(M, d+1, d) gradients of the barycentric coordinates per cell."""
    v = mesh.vertices[mesh.cells]
    if mesh.dim == 1:
        h = (v[:, 1, 0] - v[:, 0, 0])[:, None, None]
        g = np.empty((len(mesh.cells), 2, 1))
        g[:, 0, 0] = -1.0
        g[:, 1, 0] = 1.0
        return g / h
    area2 = 2.0 * mesh.cell_measures()
    g = np.empty((len(mesh.cells), 3, 2))
    for i in range(3):
        e = v[:, (i + 1) % 3] - v[:, (i + 2) % 3]
        g[:, i, 0] = e[:, 1] / area2
        g[:, i, 1] = -e[:, 0] / area2
    return g


def local_basis_gradients(mesh, space):
    g = grad_lambdas(mesh)
    if space == P1 or mesh.dim == 1:
        return g
    if space == CR:
        return -2.0 * g
    raise ValueError(space)


def _local_basis_mean(mesh, space):
    # cell mean of every local basis function (the same on all cells)
    if mesh.dim == 1:
        return 0.5
    return 1.0 / 3.0


def elementwise_gradient(u):
    """Exact per-cell gradient of a p1 or cr function, as a p0 vector field."""
    mesh = u.mesh
    g = local_basis_gradients(mesh, u.space)
    vals = u.dofs[cell_dofmap(mesh, u.space)]
    return FeFunction(P0VEC, mesh, np.einsum("mk,mkd->md", vals, g))


def cell_means(u):
    """Cell averages of an fe function (equals the barycenter value)."""
    mesh = u.mesh
    if u.space == P0:
        return u.dofs.copy()
    if u.space in (P1, CR):
        w = _local_basis_mean(mesh, u.space)
        return u.dofs[cell_dofmap(mesh, u.space)].sum(axis=1) * w
    raise ValueError(u.space)


def evaluate_rt0(q, points, cells):
    """Values of a cellwise Raviart-Thomas field at points inside given cells."""
    mesh = q.mesh
    d = mesh.dim
    a = q.dofs[cells, :d]
    b = q.dofs[cells, d]
    xt = mesh.cell_barycenters()[cells]
    return a + b[:, None] * (points - xt)


# ----------------------------------------------------------------------
# integration of data with jump sets

def _cell_circle_min_max(v, center):
    """Vectorized min/max distance from a point to each closed triangle."""
    c = np.asarray(center, dtype=float)
    m = len(v)
    vdist = np.sqrt(((v - c) ** 2).sum(axis=2))
    dmax = vdist.max(axis=1)
    dmin = np.full(m, np.inf)
    inside = np.ones(m, dtype=bool)
    for i in range(3):
        p0 = v[:, i]
        e = v[:, (i + 1) % 3] - p0
        w = c - p0
        crossv = e[:, 0] * w[:, 1] - e[:, 1] * w[:, 0]
        inside &= crossv >= 0.0
        t = np.clip((w * e).sum(axis=1) / (e ** 2).sum(axis=1), 0.0, 1.0)
        proj = p0 + t[:, None] * e
        dmin = np.minimum(dmin, np.sqrt(((proj - c) ** 2).sum(axis=1)))
    dmin[inside] = 0.0
    return dmin, dmax


def _chi_area_moment(mesh, center, radius, want_moments=False):
    """Per-cell area (and first moments) of cell intersected with a closed disc."""
    v = mesh.vertices[mesh.cells]
    c = np.asarray(center, dtype=float)
    measures = mesh.cell_measures()
    m = len(mesh.cells)
    dmin, dmax = _cell_circle_min_max(v, c)

    area = np.zeros(m)
    moment = np.zeros((m, 2)) if want_moments else None
    full = dmax <= radius
    area[full] = measures[full]
    if want_moments:
        bary = mesh.cell_barycenters()
        moment[full] = measures[full, None] * bary[full]
    cut = (~full) & (dmin <= radius)
    for i in np.flatnonzero(cut):
        a_i, m_i, _ = disc_polygon_moments(v[i], c, radius)
        area[i] = a_i
        if want_moments:
            moment[i] = m_i
    return (area, moment) if want_moments else area


def chi_cell_integrals_1d(mesh, x0, side):
    """Per-cell length and first moment of the part of each interval on one
    side of the breakpoint x0 (side=+1: x >= x0, side=-1: x <= x0)."""
    a = mesh.vertices[mesh.cells[:, 0], 0]
    b = mesh.vertices[mesh.cells[:, 1], 0]
    if side > 0:
        lo = np.maximum(a, x0)
        hi = b
    else:
        lo = a
        hi = np.minimum(b, x0)
    length = np.maximum(hi - lo, 0.0)
    moment = np.where(length > 0, 0.5 * (lo + hi) * length, 0.0)
    return length, moment[:, None]


_MOMENTS_CACHE = weakref.WeakKeyDictionary()


def data_cell_moments(mesh, data):
    """Per-piece (coef, area, moment) of a chi-combination over every cell.

    The circle clipping is memoized per (mesh, data) pair; meshes are
    immutable and the cache entry dies with the mesh.
    """
    cache = _MOMENTS_CACHE.setdefault(mesh, [])
    for cached_data, cached in cache:
        if cached_data is data:
            return cached
    out = []
    for piece in data.chi_pieces:
        if mesh.dim == 1:
            coef, x0, side = piece
            area, moment = chi_cell_integrals_1d(mesh, x0, side)
        else:
            coef, center, radius = piece
            area, moment = _chi_area_moment(mesh, center, radius,
                                            want_moments=True)
        out.append((coef, area, moment))
    cache.append((data, out))
    return out


def data_cell_means(mesh, data, rule=None):
    """Exact cell averages of the data function."""
    if hasattr(data, "chi_pieces"):
        means = np.zeros(len(mesh.cells))
        for coef, area, _ in data_cell_moments(mesh, data):
            means += coef * area
        return means / mesh.cell_measures()
    rule = rule or quad_rule(mesh.dim, 4)
    vals = integrate_cellwise(mesh, data, rule,
                              jumps=getattr(data, "jump_set", ()))
    return vals / mesh.cell_measures()


def data_squared_norm(mesh, data):
    """Integral of data^2 over the mesh (exact for chi combinations)."""
    if hasattr(data, "chi_pieces"):
        total = 0.0
        for coef, area, _ in data_cell_moments(mesh, data):
            total += coef ** 2 * float(area.sum())
        return total
    rule = quad_rule(mesh.dim, 6)
    vals = integrate_cellwise(mesh, lambda x: np.asarray(data(x)) ** 2, rule,
                              jumps=getattr(data, "jump_set", ()))
    return float(vals.sum())


# ----------------------------------------------------------------------
# generic quadrature with recursive subdivision at jump circles

def _apply_rule_tri(f, tri, rule):
    x = rule.points @ tri
    return float(rule.weights @ np.asarray(f(x)))


def _leaf_split_tri(f, tri, circle):
    center, radius = circle
    a_tot, m_tot, _ = triangle_moments(tri)
    a_in, m_in, _ = disc_polygon_moments(tri, center, radius)
    a_out = a_tot - a_in
    val = 0.0
    if a_in > 1e-15 * a_tot:
        val += a_in * float(np.asarray(f((m_in / a_in)[None, :]))[0])
    if a_out > 1e-15 * a_tot:
        c_out = (m_tot - m_in) / a_out
        if np.hypot(*(c_out - center)) <= radius:
            # complement centroid fell inside the disc; use the farthest vertex
            c_out = tri[np.argmax(np.hypot(*(tri - center).T))]
        val += a_out * float(np.asarray(f(c_out[None, :]))[0])
    return val / a_tot


def _eval_tri_depth(f, tri, rule, circles, depth):
    strad = [c for c in circles
             if circle_intersects_triangle(tri, c[0], c[1])]
    if not strad:
        return _apply_rule_tri(f, tri, rule)
    if depth == 0:
        return _leaf_split_tri(f, tri, strad[0])
    mids = 0.5 * (tri + np.roll(tri, -1, axis=0))
    children = [
        np.array([tri[0], mids[0], mids[2]]),
        np.array([mids[0], tri[1], mids[1]]),
        np.array([mids[2], mids[1], tri[2]]),
        np.array([mids[0], mids[1], mids[2]]),
    ]
    return 0.25 * sum(_eval_tri_depth(f, ch, rule, circles, depth - 1)
                      for ch in children)


def _norm_circles(jumps):
    out = []
    for c in jumps:
        if hasattr(c, "center"):
            out.append((np.asarray(c.center, dtype=float), float(c.radius)))
        else:
            out.append((np.asarray(c[0], dtype=float), float(c[1])))
    return out


def integrate_cell(f, tri, rule, jumps=(), max_depth=8, tol=1e-7):
    """Mean of f over a triangle, subdividing recursively near jump circles.

    Returns the cell mean; multiply by the cell measure for the integral.
    Iterative deepening stops when two consecutive depths agree to tol.
    """
    circles = _norm_circles(jumps)
    strad = [c for c in circles
             if circle_intersects_triangle(tri, c[0], c[1])]
    if not strad:
        return _apply_rule_tri(f, tri, rule)
    prev = _eval_tri_depth(f, tri, rule, circles, 0)
    for depth in range(1, max_depth + 1):
        cur = _eval_tri_depth(f, tri, rule, circles, depth)
        if abs(cur - prev) <= tol * (1.0 + abs(cur)):
            return cur
        prev = cur
    warnings.warn(f"subdivision quadrature reached depth {max_depth} with "
                  f"residual {abs(cur - prev):.2e}")
    return cur


def _integrate_cell_1d(f, a, b, rule, breakpoints):
    cuts = sorted({a, b} | {x for x in breakpoints if a < x < b})
    total = 0.0
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        x = (rule.points @ np.array([lo, hi]))[:, None]
        total += (hi - lo) * float(rule.weights @ np.asarray(f(x)))
    return total / (b - a)


def integrate_cellwise(mesh, f, rule=None, jumps=(), max_depth=8, tol=1e-7):
    """Per-cell integrals of a pointwise integrand f((n, d)) -> (n,)."""
    rule = rule or quad_rule(mesh.dim, 4)
    measures = mesh.cell_measures()
    v = mesh.vertices[mesh.cells]
    out = np.empty(len(mesh.cells))
    if mesh.dim == 1:
        breaks = [float(j) for j in jumps]
        for i in range(len(mesh.cells)):
            out[i] = measures[i] * _integrate_cell_1d(
                f, v[i, 0, 0], v[i, 1, 0], rule, breaks)
        return out
    circles = _norm_circles(jumps)
    # vectorized fast path for cells away from every jump circle
    x = np.einsum("qk,mkd->mqd", rule.points, v)
    flat = x.reshape(-1, 2)
    clean = np.ones(len(mesh.cells), dtype=bool)
    for c, r in circles:
        dmin, dmax = _cell_circle_min_max(v, c)
        clean &= (dmax <= r) | (dmin >= r)
    vals = np.asarray(f(flat)).reshape(len(mesh.cells), -1)
    out = measures * (vals @ rule.weights)
    for i in np.flatnonzero(~clean):
        strad = [c for c in circles
                 if circle_intersects_triangle(v[i], c[0], c[1])]
        if strad:
            out[i] = measures[i] * integrate_cell(
                f, v[i], rule, jumps=strad, max_depth=max_depth, tol=tol)
    return out


# ----------------------------------------------------------------------
# interpolation and projection

def project_p0(v, mesh=None, rule=None, jumps=()):
    """Cellwise mean (the L2 projection onto piecewise constants)."""
    if isinstance(v, FeFunction):
        mesh = v.mesh
        if v.space in (P0,):
            return v
        if v.space == P0VEC:
            return v
        if v.space == RT0CELL:
            return FeFunction(P0VEC, mesh, v.dofs[:, :mesh.dim].copy())
        return FeFunction(P0, mesh, cell_means(v))
    if mesh is None:
        raise ValueError("mesh required for callable input")
    if hasattr(v, "chi_pieces"):
        return FeFunction(P0, mesh, data_cell_means(mesh, v))
    jumps = jumps or getattr(v, "jump_set", ())
    rule = rule or quad_rule(mesh.dim, 4)
    vals = integrate_cellwise(mesh, v, rule, jumps=jumps)
    return FeFunction(P0, mesh, vals / mesh.cell_measures())


def nodal_interpolate(v, mesh):
    """P1 function matching v at the mesh vertices."""
    return FeFunction(P1, mesh, np.asarray(v(mesh.vertices), dtype=float))


def _segment_mean(v, p0, p1, rule=None):
    if hasattr(v, "chi_pieces"):
        d = p1 - p0
        # split parameter range at crossings with each piece boundary
        ts = [0.0, 1.0]
        for coef, center, radius in v.chi_pieces:
            a = p0 - np.asarray(center)
            dd = d @ d
            disc = (a @ d) ** 2 - dd * (a @ a - radius ** 2)
            if disc > 0:
                sq = np.sqrt(disc)
                for t in ((-(a @ d) - sq) / dd, (-(a @ d) + sq) / dd):
                    if 1e-12 < t < 1 - 1e-12:
                        ts.append(t)
        ts = sorted(set(ts))
        total = 0.0
        for t0, t1 in zip(ts[:-1], ts[1:]):
            xm = p0 + 0.5 * (t0 + t1) * d
            total += (t1 - t0) * float(np.asarray(v(xm[None, :]))[0])
        return total
    rule = rule or quad_rule(1, 9)
    t = rule.points[:, 1]
    x = p0[None, :] + t[:, None] * (p1 - p0)[None, :]
    return float(rule.weights @ np.asarray(v(x)))


def cr_interpolate(v, mesh):
    """Crouzeix-Raviart quasi-interpolant: dof on a side is the side average."""
    if isinstance(v, FeFunction):
        if v.space == P1:
            vv = v.dofs[mesh.sides]
            return FeFunction(CR, mesh, vv.mean(axis=1))
        raise ValueError("cr_interpolate of fe functions supports p1 input")
    if mesh.dim == 1:
        return FeFunction(CR, mesh,
                          np.asarray(v(mesh.vertices), dtype=float))
    pts = mesh.vertices[mesh.sides]
    dofs = np.array([_segment_mean(v, pts[s, 0], pts[s, 1])
                     for s in range(len(mesh.sides))])
    return FeFunction(CR, mesh, dofs)


# ----------------------------------------------------------------------
# assembly

class StiffnessAssembler:
    """Precomputed sparsity and local matrices for weighted stiffness forms.

    Reassembling for a new cellwise weight only rescales the local blocks,
    which keeps the per-iteration cost of lagged-diffusion solvers low.
    """

    def __init__(self, mesh, space):
        if space not in (P1, CR):
            raise ValueError("stiffness requires p1 or cr")
        self.mesh = mesh
        self.space = space
        g = local_basis_gradients(mesh, space)
        vols = mesh.cell_measures()
        self.local = np.einsum("mkd,mld->mkl", g, g) * vols[:, None, None]
        dofmap = cell_dofmap(mesh, space)
        k = dofmap.shape[1]
        self.rows = np.broadcast_to(dofmap[:, :, None],
                                    (len(dofmap), k, k)).ravel()
        self.cols = np.broadcast_to(dofmap[:, None, :],
                                    (len(dofmap), k, k)).ravel()
        self.n = dof_shape(mesh, space)[0]

    def assemble(self, inverse_weight=None):
        local = self.local
        if inverse_weight is not None:
            local = local * np.asarray(inverse_weight)[:, None, None]
        mat = sp.coo_matrix((local.ravel(), (self.rows, self.cols)),
                            shape=(self.n, self.n))
        return mat.tocsr()


def assemble_weighted_stiffness(mesh, weight, space):
    """Matrix of sum_T (1/w_T) int_T grad u . grad v for p1 or cr bases."""
    w = weight.dofs if isinstance(weight, FeFunction) else np.asarray(weight)
    if np.any(w <= 0):
        raise ValueError("stiffness weight must be positive cellwise")
    return StiffnessAssembler(mesh, space).assemble(1.0 / w)


def assemble_stiffness(mesh, space):
    return StiffnessAssembler(mesh, space).assemble()


def assemble_mass(mesh, space, variant="full"):
    """Mass matrix; the projected variant pairs cell averages (rank one per cell)."""
    if space not in (P1, CR):
        raise ValueError("mass requires p1 or cr")
    dofmap = cell_dofmap(mesh, space)
    k = dofmap.shape[1]
    vols = mesh.cell_measures()
    if variant == "projected":
        mean = _local_basis_mean(mesh, space)
        local = np.full((k, k), mean * mean)
        blocks = vols[:, None, None] * local[None, :, :]
    elif variant == "full":
        if mesh.dim == 1:
            local = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
        elif space == P1:
            local = (np.ones((3, 3)) + np.eye(3)) / 12.0
        else:  # cr mass is diagonal on triangles
            local = np.eye(3) / 3.0
        blocks = vols[:, None, None] * local[None, :, :]
    else:
        raise ValueError(f"unknown mass variant {variant!r}")
    rows = np.broadcast_to(dofmap[:, :, None], blocks.shape).ravel()
    cols = np.broadcast_to(dofmap[:, None, :], blocks.shape).ravel()
    n = dof_shape(mesh, space)[0]
    return sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_data_load(mesh, space, data, projected=False):
    """Load vector int g phi_i (full) or int (Pi g)(Pi phi_i) (projected)."""
    dofmap = cell_dofmap(mesh, space)
    vols = mesh.cell_measures()
    n = dof_shape(mesh, space)[0]
    load = np.zeros(n)
    if projected:
        gbar = data_cell_means(mesh, data)
        mean = _local_basis_mean(mesh, space)
        contrib = vols * gbar * mean
        for j in range(dofmap.shape[1]):
            np.add.at(load, dofmap[:, j], contrib)
        return load
    g = local_basis_gradients(mesh, space)
    mean = _local_basis_mean(mesh, space)
    bary = mesh.cell_barycenters()
    if hasattr(data, "chi_pieces"):
        for coef, area, moment in data_cell_moments(mesh, data):
            # int_{T cap B} phi = phi(x_T) A + grad phi . (M - A x_T)
            shift = moment - area[:, None] * bary
            for j in range(dofmap.shape[1]):
                contrib = coef * (mean * area + (g[:, j] * shift).sum(axis=1))
                np.add.at(load, dofmap[:, j], contrib)
        return load
    # generic callable: per-cell quadrature, subdividing at declared jumps
    rule = quad_rule(mesh.dim, 5)
    jumps = getattr(data, "jump_set", ())
    verts = mesh.vertices[mesh.cells]
    for i in range(len(mesh.cells)):
        for j in range(dofmap.shape[1]):
            def f(x, _i=i, _j=j):
                phi = mean + (x - bary[_i]) @ g[_i, _j]
                return np.asarray(data(x)) * phi
            if mesh.dim == 1:
                val = vols[i] * _integrate_cell_1d(
                    f, verts[i, 0, 0], verts[i, 1, 0], rule,
                    [float(t) for t in jumps])
            else:
                val = vols[i] * integrate_cell(f, verts[i], rule, jumps=jumps)
            load[dofmap[i, j]] += val
    return load


# ----------------------------------------------------------------------
# errors

def _affine_cell_coefficients(u):
    """Per-cell representation u(x) = c0 + c . x for p0/p1/cr functions."""
    mesh = u.mesh
    m = len(mesh.cells)
    if u.space == P0:
        return u.dofs.copy(), np.zeros((m, mesh.dim))
    grad = elementwise_gradient(u).dofs
    bary = mesh.cell_barycenters()
    ubar = cell_means(u)
    c0 = ubar - (grad * bary).sum(axis=1)
    return c0, grad


def l2_error(u_h, exact, rule=None, projected=False, jumps=None):
    """L2 distance between a finite element function and an exact function.

    ``exact`` may be a plain callable (quadrature, with recursive subdivision
    on cells that straddle the declared jump circles) or an object with
    ``chi_pieces`` (closed-form integration, exact for these data).  With
    ``projected=True`` the distance of the piecewise-constant projections
    is computed instead.
    """
    mesh = u_h.mesh
    if jumps is None:
        jumps = getattr(exact, "jump_set", ())
    if projected:
        ubar = cell_means(u_h)
        if hasattr(exact, "chi_pieces"):
            ebar = data_cell_means(mesh, exact)
        else:
            ebar = project_p0(exact, mesh, rule=rule, jumps=jumps).dofs
        return float(np.sqrt((mesh.cell_measures() * (ubar - ebar) ** 2).sum()))
    if hasattr(exact, "chi_pieces"):
        c0, grad = _affine_cell_coefficients(u_h)
        v = mesh.vertices[mesh.cells]
        vols = mesh.cell_measures()
        if mesh.dim == 2:
            a_tot = vols
            m_tot = vols[:, None] * mesh.cell_barycenters()
            s_xx = np.empty((len(v), 2, 2))
            for i in range(len(v)):
                s_xx[i] = triangle_moments(v[i])[2]
        else:
            a_tot = vols
            xm = mesh.cell_barycenters()[:, 0]
            xa = v[:, 0, 0]
            xb = v[:, 1, 0]
            m_tot = (vols * xm)[:, None]
            s_xx = ((xb ** 3 - xa ** 3) / 3.0)[:, None, None]
        # integral of u_h^2 over each cell
        uu = (c0 ** 2 * a_tot + 2.0 * c0 * (grad * m_tot).sum(axis=1)
              + np.einsum("md,mde,me->m", grad, s_xx, grad))
        total = uu.sum()
        for coef, area, moment in data_cell_moments(mesh, exact):
            # cross term -2 int u_h * coef over the piece, plus coef^2 area
            total += (-2.0 * coef * (c0 * area + (grad * moment).sum(axis=1))
                      + coef ** 2 * area).sum()
        return float(np.sqrt(max(total, 0.0)))
    rule = rule or quad_rule(mesh.dim, 4)
    c0, grad = _affine_cell_coefficients(u_h)
    vols = mesh.cell_measures()
    verts = mesh.vertices[mesh.cells]
    total = 0.0
    for i in range(len(mesh.cells)):
        def f(x, _i=i):
            uh = c0[_i] + x @ grad[_i]
            return (uh - np.asarray(exact(x))) ** 2
        if mesh.dim == 1:
            val = vols[i] * _integrate_cell_1d(
                f, verts[i, 0, 0], verts[i, 1, 0], rule,
                [float(j) for j in jumps])
        else:
            val = vols[i] * integrate_cell(f, verts[i], rule, jumps=jumps)
        total += val
    return float(np.sqrt(max(total, 0.0)))


# ----------------------------------------------------------------------
# Raviart-Thomas helpers

def rt0_from_side_fluxes(mesh, fluxes):
    """Cellwise (a_T, b_T) field with prescribed constant normal fluxes.

    ``fluxes[s]`` is the integral of q . n over side s, with n the fixed
    global normal of the side (the 90-degree clockwise rotation of the
    direction from the lower to the higher vertex index).  The resulting
    field has continuous normal components by construction.
    """
    if mesh.dim != 2:
        raise ValueError("rt0 fields require a 2d mesh")
    fluxes = np.asarray(fluxes, dtype=float)
    v = mesh.vertices[mesh.cells]
    vols = mesh.cell_measures()
    bary = mesh.cell_barycenters()
    dofs = np.zeros((len(mesh.cells), 3))
    sides = mesh.sides
    for i in range(3):
        s = mesh.cell_sides[:, i]
        # outward normal of the side opposite local vertex i
        p_opp = v[:, i]
        a_pt = mesh.vertices[sides[s, 0]]
        b_pt = mesh.vertices[sides[s, 1]]
        t = b_pt - a_pt
        n_global = np.stack([t[:, 1], -t[:, 0]], axis=1)
        outward = ((a_pt - p_opp) * n_global).sum(axis=1) > 0
        sign = np.where(outward, 1.0, -1.0)
        scale = sign * fluxes[s] / (2.0 * vols)
        dofs[:, :2] += scale[:, None] * (bary - p_opp)
        dofs[:, 2] += scale
    return FeFunction(RT0CELL, mesh, dofs)


def rt0_divergence(q):
    """Cellwise divergence d * b_T of a cellwise Raviart-Thomas field."""
    d = q.mesh.dim
    return FeFunction(P0, q.mesh, d * q.dofs[:, d])


def rt0_normal_jumps(q):
    """Per interior side: jump of the normal component at the side midpoint."""
    mesh = q.mesh
    interior = np.flatnonzero(~mesh.boundary_sides)
    mids = mesh.side_midpoints[interior]
    a_pt = mesh.vertices[mesh.sides[interior, 0]]
    b_pt = mesh.vertices[mesh.sides[interior, 1]]
    t = b_pt - a_pt
    length = np.sqrt((t ** 2).sum(axis=1))
    n = np.stack([t[:, 1], -t[:, 0]], axis=1) / length[:, None]
    c0 = mesh.side_cells[interior, 0]
    c1 = mesh.side_cells[interior, 1]
    v0 = evaluate_rt0(q, mids, c0)
    v1 = evaluate_rt0(q, mids, c1)
    return interior, ((v0 - v1) * n).sum(axis=1), length


# ----------------------------------------------------------------------
# text dumps

def dump_fefunction(u, path):
    rows = np.atleast_2d(u.dofs.T).T
    with open(path, "w") as fh:
        fh.write(f"{u.space} {rows.shape[0]}\n")
        for row in rows:
            fh.write(" ".join(f"{x:.17g}" for x in np.atleast_1d(row)) + "\n")


def read_fefunction(path, mesh):
    with open(path) as fh:
        header = fh.readline().split()
        space = header[0]
        n = int(header[1])
        vals = [[float(x) for x in fh.readline().split()] for _ in range(n)]
    arr = np.array(vals)
    if arr.shape[1] == 1:
        arr = arr[:, 0]
    return FeFunction(space, mesh, arr)
