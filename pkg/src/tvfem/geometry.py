"""Planar geometry kernels: triangle moments, circle clipping, intersection tests.

All routines operate on plain numpy arrays.  Triangles are (3, 2) arrays with
positive (counter-clockwise) orientation; circles are (center, radius) pairs.
The clipping routines return exact areas and first/second moments of the
intersection of a polygon with a closed disc, which makes integration of
piecewise-polynomial integrands against characteristic-function data exact up
to floating point rounding.
"""

import numpy as np

_EPS = 1e-14


def cross2(u, v):
    return u[0] * v[1] - u[1] * v[0]


def triangle_area(tri):
    """Signed area of a triangle given as a (3, 2) array."""
    return 0.5 * cross2(tri[1] - tri[0], tri[2] - tri[0])


def triangle_moments(tri):
    """Area, first moment and second moment of a triangle.

    Returns
    -------
    (area, m, s) : area (signed), m = integral of x dA (shape (2,)),
        s = integral of outer(x, x) dA (shape (2, 2)).
    """
    a = triangle_area(tri)
    m = a * tri.sum(axis=0) / 3.0
    vsum = tri.sum(axis=0)
    s = (a / 12.0) * (tri[:, :, None] * tri[:, None, :]).sum(axis=0)
    s = s + (a / 12.0) * np.outer(vsum, vsum)
    return a, m, s


def _sector_moments(r, th0, dth):
    """Moments of the circular sector at the origin from angle th0 sweeping dth."""
    th1 = th0 + dth
    area = 0.5 * r * r * dth
    m = (r ** 3 / 3.0) * np.array([np.sin(th1) - np.sin(th0),
                                   np.cos(th0) - np.cos(th1)])
    # integrals of cos^2, sin^2, cos*sin over [th0, th1]
    ixx = 0.5 * dth + 0.25 * (np.sin(2 * th1) - np.sin(2 * th0))
    iyy = 0.5 * dth - 0.25 * (np.sin(2 * th1) - np.sin(2 * th0))
    ixy = 0.5 * (np.sin(th1) ** 2 - np.sin(th0) ** 2)
    s = (r ** 4 / 4.0) * np.array([[ixx, ixy], [ixy, iyy]])
    return area, m, s


def disc_polygon_moments(poly, center, radius):
    """Exact moments of the intersection of a polygon with a closed disc.

    Walks the directed polygon boundary; pieces inside the disc contribute
    signed origin-triangles, pieces outside contribute circular sectors
    (Green's theorem decomposition).  Works for any mutual position of the
    polygon and the disc, including the disc strictly inside the polygon.

    Parameters
    ----------
    poly : (n, 2) array, counter-clockwise.
    center, radius : disc.

    Returns
    -------
    (area, m, s) with the same meaning as in :func:`triangle_moments`,
    relative to the original (unshifted) coordinates.
    """
    p = np.asarray(poly, dtype=float) - np.asarray(center, dtype=float)
    n = len(p)
    r2 = radius * radius
    area = 0.0
    m = np.zeros(2)
    s = np.zeros((2, 2))
    for i in range(n):
        a = p[i]
        b = p[(i + 1) % n]
        d = b - a
        dd = d @ d
        if dd < _EPS * _EPS:
            continue
        # roots of |a + t d|^2 = r^2 in (0, 1)
        ts = [0.0, 1.0]
        disc = (a @ d) ** 2 - dd * (a @ a - r2)
        if disc > 0.0:
            sq = np.sqrt(disc)
            for t in ((-(a @ d) - sq) / dd, (-(a @ d) + sq) / dd):
                if 1e-12 < t < 1.0 - 1e-12:
                    ts.append(t)
        ts.sort()
        for t0, t1 in zip(ts[:-1], ts[1:]):
            if t1 - t0 < 1e-14:
                continue
            q0 = a + t0 * d
            q1 = a + t1 * d
            mid = a + 0.5 * (t0 + t1) * d
            if mid @ mid <= r2:
                da, dm, ds = triangle_moments(np.array([[0.0, 0.0], q0, q1]))
            else:
                th0 = np.arctan2(q0[1], q0[0])
                dth = np.arctan2(cross2(q0, q1), q0 @ q1)
                da, dm, ds = _sector_moments(radius, th0, dth)
            area += da
            m += dm
            s += ds
    # shift moments back to original coordinates
    c = np.asarray(center, dtype=float)
    s_orig = s + np.outer(m, c) + np.outer(c, m) + area * np.outer(c, c)
    m_orig = m + area * c
    return area, m_orig, s_orig


def disc_triangle_area(tri, center, radius):
    """Area of the intersection of a triangle with a closed disc."""
    return disc_polygon_moments(tri, center, radius)[0]


def point_in_triangle(x, tri, tol=1e-12):
    """Whether x lies in the closed triangle (orientation assumed CCW)."""
    for i in range(3):
        e = tri[(i + 1) % 3] - tri[i]
        if cross2(e, x - tri[i]) < -tol * np.sqrt(e @ e):
            return False
    return True


def point_segment_distance(x, a, b):
    d = b - a
    dd = d @ d
    if dd < _EPS * _EPS:
        return float(np.hypot(*(x - a)))
    t = np.clip(((x - a) @ d) / dd, 0.0, 1.0)
    return float(np.hypot(*(x - a - t * d)))


def circle_triangle_min_max_distance(tri, center):
    """Min and max distance from the circle center to the closed triangle."""
    c = np.asarray(center, dtype=float)
    if point_in_triangle(c, tri):
        dmin = 0.0
    else:
        dmin = min(point_segment_distance(c, tri[i], tri[(i + 1) % 3])
                   for i in range(3))
    dmax = max(float(np.hypot(*(v - c))) for v in tri)
    return dmin, dmax


def circle_intersects_triangle(tri, center, radius):
    """Whether the circle (the curve, not the disc) meets the closed triangle."""
    dmin, dmax = circle_triangle_min_max_distance(tri, center)
    return dmin <= radius <= dmax


def _orient(a, b, c):
    v = cross2(b - a, c - a)
    if v > _EPS:
        return 1
    if v < -_EPS:
        return -1
    return 0


def _on_segment(a, b, c):
    # collinear c on segment [a, b]
    return (min(a[0], b[0]) - _EPS <= c[0] <= max(a[0], b[0]) + _EPS
            and min(a[1], b[1]) - _EPS <= c[1] <= max(a[1], b[1]) + _EPS)


def segments_intersect(p0, p1, q0, q1):
    """Closed-segment intersection test (handles collinear overlap)."""
    o1 = _orient(p0, p1, q0)
    o2 = _orient(p0, p1, q1)
    o3 = _orient(q0, q1, p0)
    o4 = _orient(q0, q1, p1)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and _on_segment(p0, p1, q0):
        return True
    if o2 == 0 and _on_segment(p0, p1, q1):
        return True
    if o3 == 0 and _on_segment(q0, q1, p0):
        return True
    if o4 == 0 and _on_segment(q0, q1, p1):
        return True
    return False


def segment_intersects_triangle(tri, p, q):
    """Whether the closed segment [p, q] meets the closed triangle."""
    if point_in_triangle(p, tri) or point_in_triangle(q, tri):
        return True
    return any(segments_intersect(tri[i], tri[(i + 1) % 3], p, q)
               for i in range(3))
