"""Simplicial meshes in one and two dimensions with local refinement.

A mesh stores vertices, cells and boundary-side labels.  Two-dimensional
meshes are refined by the red rule (split a triangle into four congruent
children through its edge midpoints); conformity after local refinement is
restored by a red-green-blue closure.  Closure bisections are treated as a
derived layer: when a green or blue child is marked later, its parent is
red-refined instead, so every cell of every mesh is either a red descendant
of an initial cell or a single/double bisection of one.  This keeps the
number of similarity classes finite and the minimal angle bounded.

Midpoint identification is index-based: a registry maps an edge (as a sorted
vertex-index pair) to its midpoint vertex, so no coordinate tolerances enter
the topology.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .geometry import (
    circle_intersects_triangle,
    segment_intersects_triangle,
)

_CLOSURE_GUARD = 64


@dataclass(frozen=True)
class Circle:
    """Circle used as a refinement target or jump-set descriptor."""
    center: tuple
    radius: float


@dataclass(frozen=True)
class Segment:
    """Line segment used as a refinement target."""
    a: tuple
    b: tuple


@dataclass(frozen=True)
class MeshStats:
    n_vertices: int
    n_cells: int
    h_min: float
    h_max: float
    h_avg: float


def _edge_key(a, b):
    return (a, b) if a < b else (b, a)


class Mesh:
    """Conforming simplicial mesh of dimension 1 or 2.

    Meshes are immutable after construction; refinement operations return new
    meshes carrying a ``parent_cells`` array that maps each new cell to the
    cell of the input mesh containing it.
    """

    def __init__(self, vertices, cells, boundary_labels=None, *,
                 _midpoints=None, _closure_groups=(), parent_cells=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] not in (1, 2):
            raise ValueError("vertices must be (N, 1) or (N, 2)")
        self.dim = self.vertices.shape[1]
        if self.cells.ndim != 2 or self.cells.shape[1] != self.dim + 1:
            raise ValueError("cells must be (M, dim + 1)")
        if len(self.cells) == 0:
            raise ValueError("empty mesh")
        if self.cells.min() < 0 or self.cells.max() >= len(self.vertices):
            raise ValueError("cell vertex index out of range")
        if np.any(self.cell_measures() <= 0.0):
            raise ValueError("cells must be positively oriented with "
                             "positive measure")
        self._midpoints = dict(_midpoints) if _midpoints else {}
        # closure bookkeeping: tuple of (parent_triple, child cell indices)
        self._closure_groups = tuple(_closure_groups)
        self.parent_cells = (None if parent_cells is None
                             else np.asarray(parent_cells, dtype=np.int64))
        if boundary_labels is None:
            boundary_labels = {tuple(self.sides[s]): 0
                               for s in np.flatnonzero(self.boundary_sides)}
        self._blabels = dict(boundary_labels)
        self.vertices.setflags(write=False)
        self.cells.setflags(write=False)

    # ------------------------------------------------------------------
    # connectivity

    @cached_property
    def _side_data(self):
        if self.dim == 1:
            sides = np.arange(len(self.vertices), dtype=np.int64)[:, None]
            inv = self.cells.reshape(-1)
            n_sides = len(self.vertices)
        else:
            local = self.cells[:, [[1, 2], [2, 0], [0, 1]]]
            pairs = np.sort(local.reshape(-1, 2), axis=1)
            sides, inv = np.unique(pairs, axis=0, return_inverse=True)
            n_sides = len(sides)
        counts = np.bincount(inv, minlength=n_sides)
        if counts.max() > 2:
            raise ValueError("non-manifold side (more than two adjacent cells)")
        if counts.min() < 1:
            raise ValueError("vertex not contained in any cell")
        per_cell = self.dim + 1
        side_cells = np.full((n_sides, 2), -1, dtype=np.int64)
        order = np.argsort(inv, kind="stable")
        sorted_inv = inv[order]
        starts = np.searchsorted(sorted_inv, np.arange(n_sides))
        side_cells[:, 0] = order[starts] // per_cell
        two = counts == 2
        side_cells[two, 1] = order[starts[two] + 1] // per_cell
        return sides, inv.reshape(len(self.cells), per_cell), side_cells, counts

    @cached_property
    def sides(self):
        """Side vertex tuples: (S, 1) vertex indices in 1d, (S, 2) edges in 2d."""
        return self._side_data[0]

    @cached_property
    def cell_sides(self):
        """(M, dim+1) side index per cell; side i is opposite local vertex i in 2d."""
        return self._side_data[1]

    @cached_property
    def side_cells(self):
        """(S, 2) adjacent cell indices per side, -1 for missing neighbor."""
        return self._side_data[2]

    @cached_property
    def boundary_sides(self):
        """Boolean mask of sides with exactly one adjacent cell."""
        return self._side_data[3] == 1

    def boundary_label(self, side_index):
        key = tuple(self.sides[side_index])
        try:
            return self._blabels[key]
        except KeyError:
            raise KeyError(f"side {key} has no boundary label") from None

    @cached_property
    def side_midpoints(self):
        return self.vertices[self.sides].mean(axis=1)

    # ------------------------------------------------------------------
    # metrics

    def cell_measures(self):
        v = self.vertices[self.cells]
        if self.dim == 1:
            return v[:, 1, 0] - v[:, 0, 0]
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def cell_diameters(self):
        v = self.vertices[self.cells]
        if self.dim == 1:
            return v[:, 1, 0] - v[:, 0, 0]
        e = np.stack([v[:, 1] - v[:, 2], v[:, 2] - v[:, 0], v[:, 0] - v[:, 1]])
        return np.sqrt((e ** 2).sum(axis=2)).max(axis=0)

    def cell_barycenters(self):
        return self.vertices[self.cells].mean(axis=1)

    def min_angle(self):
        """Smallest interior angle over all cells (radians); pi for 1d meshes."""
        if self.dim == 1:
            return np.pi
        v = self.vertices[self.cells]
        angles = []
        for i in range(3):
            a = v[:, (i + 1) % 3] - v[:, i]
            b = v[:, (i + 2) % 3] - v[:, i]
            na = np.sqrt((a ** 2).sum(axis=1))
            nb = np.sqrt((b ** 2).sum(axis=1))
            cosang = np.clip((a * b).sum(axis=1) / (na * nb), -1.0, 1.0)
            angles.append(np.arccos(cosang))
        return float(np.min(angles))

    def shape_regularity(self):
        """Max over cells of diameter / inradius."""
        if self.dim == 1:
            return 2.0
        v = self.vertices[self.cells]
        e = np.stack([v[:, 1] - v[:, 2], v[:, 2] - v[:, 0], v[:, 0] - v[:, 1]])
        lengths = np.sqrt((e ** 2).sum(axis=2))
        perim = lengths.sum(axis=0)
        inradius = 2.0 * self.cell_measures() / perim
        return float((lengths.max(axis=0) / inradius).max())

    def is_conforming(self):
        """Every side is either shared by two cells or a labeled boundary side."""
        for s in np.flatnonzero(self.boundary_sides):
            if tuple(self.sides[s]) not in self._blabels:
                return False
        return True

    def validate(self):
        if not self.is_conforming():
            raise ValueError("mesh is not conforming (hanging nodes present)")
        return self

    # ------------------------------------------------------------------

    def __repr__(self):
        return (f"Mesh(dim={self.dim}, vertices={len(self.vertices)}, "
                f"cells={len(self.cells)})")


# ----------------------------------------------------------------------
# constructors

def make_interval_mesh(a, b, points):
    """1d mesh on (a, b) from strictly increasing points with endpoints a, b."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 1 or len(pts) < 2:
        raise ValueError("need at least two points")
    if not (pts[0] == a and pts[-1] == b):
        raise ValueError("points must start at a and end at b")
    if np.any(np.diff(pts) <= 0):
        raise ValueError("points must be strictly increasing")
    cells = np.stack([np.arange(len(pts) - 1), np.arange(1, len(pts))], axis=1)
    labels = {(0,): 0, (len(pts) - 1,): 0}
    return Mesh(pts[:, None], cells, labels)


def make_square_mesh(half_width, n_initial_cells=2):
    """Triangulation of the square (-l, l)^2 with two or four initial cells."""
    l = float(half_width)
    if l <= 0:
        raise ValueError("half_width must be positive")
    corners = np.array([[-l, -l], [l, -l], [l, l], [-l, l]])
    if n_initial_cells == 2:
        vertices = corners
        cells = np.array([[0, 1, 2], [0, 2, 3]])
    elif n_initial_cells == 4:
        vertices = np.vstack([corners, [[0.0, 0.0]]])
        cells = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    else:
        raise ValueError("n_initial_cells must be 2 or 4")
    return Mesh(vertices, cells)


def beta_graded_interval(J, beta):
    """Points 0 = xi_0 < ... < xi_J = 1 with xi_j = (j/J)^beta."""
    if J < 1:
        raise ValueError("J must be at least 1")
    if beta < 1.0:
        raise ValueError("beta must be at least 1")
    j = np.arange(J + 1, dtype=float)
    return (j / J) ** beta


def make_graded_interval_mesh(a, b, J, beta, towards=0.0):
    """1d mesh on (a, b) graded with strength beta towards an interior point."""
    if not a < towards < b:
        raise ValueError("grading point must lie strictly inside (a, b)")
    xi = beta_graded_interval(J, beta)
    left = towards - (towards - a) * xi[::-1]
    right = towards + (b - towards) * xi
    return make_interval_mesh(a, b, np.concatenate([left, right[1:]]))


# ----------------------------------------------------------------------
# refinement

def _validate_marks(mesh, marks):
    marks = sorted(set(int(m) for m in marks))
    if marks and (marks[0] < 0 or marks[-1] >= len(mesh.cells)):
        raise ValueError("marked cell index out of range")
    return marks


def red_refine(mesh, marks):
    """Split each marked cell into 2 (1d) or 4 (2d) congruent children.

    The result is returned before conformity closure and may contain hanging
    nodes; apply :func:`rgb_close` to restore conformity.  A mark on a
    green/blue closure child refines its parent instead (the closure split is
    undone), which preserves shape regularity under repeated refinement.
    """
    marks = _validate_marks(mesh, marks)
    if not marks:
        return mesh
    if mesh.dim == 1:
        return _red_refine_1d(mesh, marks)

    cells = mesh.cells
    child_group = {}
    for gi, (_, kids) in enumerate(mesh._closure_groups):
        for c in kids:
            child_group[c] = gi

    # skeleton: undo all closure bisections, restoring parent triangles
    skeleton = []
    emitted = set()
    for i in range(len(cells)):
        gi = child_group.get(i)
        if gi is None:
            skeleton.append((tuple(cells[i]), (i,)))
        elif gi not in emitted:
            emitted.add(gi)
            parent, kids = mesh._closure_groups[gi]
            skeleton.append((tuple(parent), tuple(kids)))

    split = set()
    for m in marks:
        gi = child_group.get(m)
        if gi is None:
            split.add(tuple(cells[m]))
        else:
            split.add(tuple(mesh._closure_groups[gi][0]))

    verts = [row for row in mesh.vertices]
    mid = dict(mesh._midpoints)
    blabels = dict(mesh._blabels)

    def midpoint(a, b):
        key = _edge_key(a, b)
        m = mid.get(key)
        if m is None:
            m = len(verts)
            verts.append(0.5 * (verts[a] + verts[b]))
            mid[key] = m
            lab = blabels.get(key)
            if lab is not None:
                blabels[_edge_key(a, m)] = lab
                blabels[_edge_key(m, b)] = lab
        return m

    new_cells = []
    parents = []
    for triple, cands in skeleton:
        if triple in split:
            i, j, k = triple
            mij = midpoint(i, j)
            mjk = midpoint(j, k)
            mki = midpoint(k, i)
            kids = [(i, mij, mki), (mij, j, mjk), (mki, mjk, k),
                    (mij, mjk, mki)]
        else:
            kids = [triple]
        for ch in kids:
            new_cells.append(ch)
            parents.append(_locate_parent(mesh, cands, ch, verts))
    return Mesh(np.array(verts), np.array(new_cells), blabels,
                _midpoints=mid, parent_cells=parents)


def _red_refine_1d(mesh, marks):
    marked = np.zeros(len(mesh.cells), dtype=bool)
    marked[marks] = True
    verts = [row for row in mesh.vertices]
    new_cells = []
    parents = []
    for i, (a, b) in enumerate(mesh.cells):
        if marked[i]:
            m = len(verts)
            verts.append(0.5 * (verts[a] + verts[b]))
            new_cells += [(a, m), (m, b)]
            parents += [i, i]
        else:
            new_cells.append((a, b))
            parents.append(i)
    return Mesh(np.array(verts), np.array(new_cells), dict(mesh._blabels),
                parent_cells=parents)


def _locate_parent(mesh, candidates, triple, verts):
    if len(candidates) == 1:
        return candidates[0]
    bary = (verts[triple[0]] + verts[triple[1]] + verts[triple[2]]) / 3.0
    for c in candidates:
        tri = mesh.vertices[mesh.cells[c]]
        inside = True
        for t in range(3):
            e = tri[(t + 1) % 3] - tri[t]
            w = bary - tri[t]
            if e[0] * w[1] - e[1] * w[0] < -1e-14:
                inside = False
                break
        if inside:
            return c
    return candidates[0]


def _hanging_edges(triple, mid):
    """Local slots (opposite vertex index) of hanged edges, plus deep flag."""
    hang = []
    deep = False
    for t in range(3):
        a = triple[(t + 1) % 3]
        b = triple[(t + 2) % 3]
        key = _edge_key(a, b)
        m = mid.get(key)
        if m is not None:
            hang.append(t)
            if _edge_key(a, m) in mid or _edge_key(m, b) in mid:
                deep = True
    return hang, deep


def rgb_close(mesh):
    """Eliminate hanging nodes by red, green and blue subdivisions.

    Cells with three hanging midpoints (or a hanging node finer than an edge
    midpoint) are red-refined, iterating until stable; the remaining cells
    with one or two hanging midpoints are bisected once (green) or twice
    (blue).  The bisections are recorded so that later refinement can undo
    them.
    """
    if mesh.dim == 1:
        return Mesh(mesh.vertices, mesh.cells, dict(mesh._blabels),
                    parent_cells=np.arange(len(mesh.cells)))

    verts = [row for row in mesh.vertices]
    mid = dict(mesh._midpoints)
    blabels = dict(mesh._blabels)
    cells = [tuple(c) for c in mesh.cells]
    parents = list(range(len(cells)))

    def midpoint(a, b):
        key = _edge_key(a, b)
        m = mid.get(key)
        if m is None:
            m = len(verts)
            verts.append(0.5 * (verts[a] + verts[b]))
            mid[key] = m
            lab = blabels.get(key)
            if lab is not None:
                blabels[_edge_key(a, m)] = lab
                blabels[_edge_key(m, b)] = lab
        return m

    # red propagation: quarter-point hangings and triple hangings force red
    for _ in range(_CLOSURE_GUARD):
        changed = False
        out_cells = []
        out_parents = []
        for tri, par in zip(cells, parents):
            hang, deep = _hanging_edges(tri, mid)
            if len(hang) == 3 or deep:
                i, j, k = tri
                mij = midpoint(i, j)
                mjk = midpoint(j, k)
                mki = midpoint(k, i)
                out_cells += [(i, mij, mki), (mij, j, mjk), (mki, mjk, k),
                              (mij, mjk, mki)]
                out_parents += [par] * 4
                changed = True
            else:
                out_cells.append(tri)
                out_parents.append(par)
        cells = out_cells
        parents = out_parents
        if not changed:
            break
    else:
        raise RuntimeError("red-green-blue closure did not terminate")

    def bisect(tri, slot):
        """Children of the bisection towards the midpoint of edge opposite slot."""
        a = tri[(slot + 1) % 3]
        b = tri[(slot + 2) % 3]
        m = mid[_edge_key(a, b)]
        return (tri[slot], a, m), (tri[slot], m, b)

    final_cells = []
    final_parents = []
    groups = []
    for tri, par in zip(cells, parents):
        hang, _ = _hanging_edges(tri, mid)
        if not hang:
            final_cells.append(tri)
            final_parents.append(par)
            continue
        if len(hang) == 1:
            kids = list(bisect(tri, hang[0]))
        else:
            # blue: bisect towards the midpoint on the longer hanged edge first
            def edge_len(t):
                a = tri[(t + 1) % 3]
                b = tri[(t + 2) % 3]
                return float(np.hypot(*(verts[a] - verts[b]))), _edge_key(a, b)
            t1, t2 = sorted(hang, key=lambda t: (-edge_len(t)[0], edge_len(t)[1]))
            c1, c2 = bisect(tri, t1)
            other = _edge_key(tri[(t2 + 1) % 3], tri[(t2 + 2) % 3])
            kids = []
            for child in (c1, c2):
                h2, _ = _hanging_edges(child, mid)
                # only the second hanged edge can remain in a child
                sub = [t for t in h2
                       if _edge_key(child[(t + 1) % 3], child[(t + 2) % 3]) == other]
                if sub:
                    kids += list(bisect(child, sub[0]))
                else:
                    kids.append(child)
        start = len(final_cells)
        final_cells += kids
        final_parents += [par] * len(kids)
        groups.append((tri, tuple(range(start, start + len(kids)))))

    return Mesh(np.array(verts), np.array(final_cells), blabels,
                _midpoints=mid, _closure_groups=groups,
                parent_cells=final_parents).validate()


def cells_intersecting(mesh, target):
    """Indices of cells whose closed hull meets the target geometry.

    Targets: :class:`Circle` (the curve), :class:`Segment`, a float (1d
    point), a callable on the (dim+1, dim) cell vertex array, or a list of
    any of these.
    """
    if isinstance(target, (list, tuple)):
        hit = set()
        for t in target:
            hit.update(cells_intersecting(mesh, t))
        return sorted(hit)
    out = []
    coords = mesh.vertices[mesh.cells]
    if callable(target):
        test = target
    elif isinstance(target, Circle):
        c = np.asarray(target.center, dtype=float)
        r = float(target.radius)
        def test(tri):
            return circle_intersects_triangle(tri, c, r)
    elif isinstance(target, Segment):
        p = np.asarray(target.a, dtype=float)
        q = np.asarray(target.b, dtype=float)
        def test(tri):
            return segment_intersects_triangle(tri, p, q)
    elif isinstance(target, (int, float)) and mesh.dim == 1:
        x = float(target)
        def test(iv):
            return iv[0, 0] <= x <= iv[1, 0]
    else:
        raise TypeError(f"unsupported refinement target: {target!r}")
    for i in range(len(mesh.cells)):
        if test(coords[i]):
            out.append(i)
    return out


def grade_towards_set(mesh, target, levels):
    """Repeat (mark cells meeting the target, red-refine, close) `levels` times."""
    for _ in range(int(levels)):
        marks = cells_intersecting(mesh, target)
        if not marks:
            raise ValueError("no cell intersects the refinement target")
        mesh = rgb_close(red_refine(mesh, marks))
    return mesh


# ----------------------------------------------------------------------
# statistics

def mesh_stats(mesh):
    diam = mesh.cell_diameters()
    volume = float(mesh.cell_measures().sum())
    n = len(mesh.vertices)
    return MeshStats(
        n_vertices=n,
        n_cells=len(mesh.cells),
        h_min=float(diam.min()),
        h_max=float(diam.max()),
        h_avg=float((volume / n) ** (1.0 / mesh.dim)),
    )


def grading_strength(stats_sequence, window=4):
    """Least-squares slope of log h_min against log h_avg over the last levels.

    The limit of this slope identifies the grading strength of a mesh family;
    early levels are excluded because the notion is asymptotic.
    """
    stats = list(stats_sequence)
    if len(stats) < 2:
        raise ValueError("need at least two refinement levels")
    h_avg = np.array([s.h_avg for s in stats])
    if np.any(np.diff(h_avg) >= 0):
        raise ValueError("mesh sizes must decrease between levels")
    k = min(window, len(stats))
    x = np.log([s.h_avg for s in stats[-k:]])
    y = np.log([s.h_min for s in stats[-k:]])
    return float(np.polyfit(x, y, 1)[0])


# ----------------------------------------------------------------------
# text format

def write_mesh(mesh, path):
    """Write the text mesh format; decimals carry 17 significant digits."""
    lines = []
    b_idx = np.flatnonzero(mesh.boundary_sides)
    lines.append(f"{mesh.dim} {len(mesh.vertices)} {len(mesh.cells)} "
                 f"{len(b_idx)}")
    for v in mesh.vertices:
        lines.append(" ".join(f"{x:.17g}" for x in v))
    for c in mesh.cells:
        lines.append(" ".join(str(i) for i in c))
    for s in b_idx:
        key = tuple(mesh.sides[s])
        lines.append(" ".join(str(i) for i in key)
                     + f" {mesh._blabels[key]}")
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)


def read_mesh(path):
    with open(path) as fh:
        tokens = fh.read().split("\n")
    header = tokens[0].split()
    dim, n_verts, n_cells, n_bsides = (int(t) for t in header)
    row = 1
    verts = np.array([[float(x) for x in tokens[row + i].split()]
                      for i in range(n_verts)])
    row += n_verts
    cells = np.array([[int(x) for x in tokens[row + i].split()]
                      for i in range(n_cells)])
    row += n_cells
    labels = {}
    for i in range(n_bsides):
        parts = tokens[row + i].split()
        labels[tuple(int(x) for x in parts[:dim])] = int(parts[dim])
    if verts.shape[1] != dim:
        raise ValueError("vertex dimension does not match header")
    return Mesh(verts, cells, labels).validate()
