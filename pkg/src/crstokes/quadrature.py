"""Quadrature on triangles and edges.

Triangle rules are the symmetric Dunavant rules (points taken from
scikit-fem's tables) with weights re-fitted to the exact monomial moments,
so exactness holds to machine precision.  Degrees whose tabulated rule has
negative weights are served by the next positive rule.

Besides plain rules the module builds *composite plans*: flat arrays of
physical points and weights over a batch of triangles, with geometric
grading toward declared singular points and exact splitting of triangles
cut by declared vertical discontinuity lines.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from skfem.quadrature import get_quadrature_tri

MAX_TRIANGLE_DEGREE = 10
MAX_EDGE_DEGREE = 21


@dataclass(frozen=True)
class QuadratureRule:
    """Reference rule in barycentric coordinates.

    For triangles ``points`` has shape (n, 3) and the weights sum to 1/2,
    the area of the reference triangle.  For edges ``points`` has shape
    (n, 2) and the weights sum to 1.
    """

    points: np.ndarray
    weights: np.ndarray
    exactness_degree: int

    def __len__(self):
        return len(self.weights)


def _monomial_moments(degree):
    # exact integrals of x^a y^b over the reference triangle (0,0),(1,0),(0,1)
    from math import factorial
    exps = [(a, b) for a in range(degree + 1) for b in range(degree + 1 - a)]
    vals = np.array([factorial(a) * factorial(b) / factorial(a + b + 2) for a, b in exps])
    return exps, vals


def _refit_weights(xy, degree):
    exps, moments = _monomial_moments(degree)
    V = np.array([xy[:, 0] ** a * xy[:, 1] ** b for a, b in exps])
    w, *_ = np.linalg.lstsq(V, moments, rcond=None)
    return w


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Symmetric Gaussian rule on the reference triangle exact to ``degree``."""
    if not 1 <= degree <= MAX_TRIANGLE_DEGREE:
        raise ValueError(f"unsupported triangle quadrature degree {degree}")
    if degree == 1:
        return QuadratureRule(np.full((1, 3), 1.0 / 3.0), np.array([0.5]), 1)
    n = degree
    while True:
        X, W = get_quadrature_tri(n)
        if np.all(W > 0):
            break
        n += 1
    xy = X.T.copy()
    w = _refit_weights(xy, n)
    bary = np.column_stack([1.0 - xy[:, 0] - xy[:, 1], xy[:, 0], xy[:, 1]])
    return QuadratureRule(bary, w, n)


@lru_cache(maxsize=None)
def edge_rule(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on the unit reference edge exact to ``degree``."""
    if not 1 <= degree <= MAX_EDGE_DEGREE:
        raise ValueError(f"unsupported edge quadrature degree {degree}")
    npts = degree // 2 + 1
    x, w = leggauss(npts)
    s = 0.5 * (x + 1.0)
    return QuadratureRule(np.column_stack([1.0 - s, s]), 0.5 * w, 2 * npts - 1)


def triangle_area(tri):
    """Signed area of triangles given as (..., 3, 2) coordinates."""
    d1 = tri[..., 1, :] - tri[..., 0, :]
    d2 = tri[..., 2, :] - tri[..., 0, :]
    return 0.5 * (d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0])


def barycentric(tri, x):
    """Barycentric coordinates of points ``x`` (..., 2) in triangles (..., 3, 2)."""
    p0 = tri[..., 0, :]
    J = np.stack([tri[..., 1, :] - p0, tri[..., 2, :] - p0], axis=-1)
    rhs = (x - p0)[..., None]
    st = np.linalg.solve(J, rhs)[..., 0]
    return np.concatenate([1.0 - st.sum(axis=-1, keepdims=True), st], axis=-1)


def _point_location(tri, pt, tol):
    """Classify ``pt`` relative to one triangle: ('vertex', i), ('edge', i),
    ('interior', None) or (None, None) when outside the closure."""
    lam = barycentric(tri, np.asarray(pt, dtype=float))
    if np.any(lam < -tol):
        return None, None
    near_zero = np.abs(lam) <= tol
    if near_zero.sum() == 2:
        return "vertex", int(np.argmax(lam))
    if near_zero.sum() == 1:
        return "edge", int(np.argmin(np.abs(lam)))
    return "interior", None


def _red_refine(tri):
    p0, p1, p2 = tri
    m01, m12, m20 = 0.5 * (p0 + p1), 0.5 * (p1 + p2), 0.5 * (p2 + p0)
    return [(p0, m01, m20), (m01, p1, m12), (m20, m12, p2), (m12, m20, m01)]


def _grade_toward_vertex(s, a, b, levels):
    # each halving layer is a trapezoid; it is cut into two triangles and
    # each of those red-refined once, which keeps the distance-to-size ratio
    # of every piece away from the singular point bounded below
    pieces = []
    for _ in range(levels):
        a2 = 0.5 * (s + a)
        b2 = 0.5 * (s + b)
        pieces.extend(_red_refine((a2, a, b)))
        pieces.extend(_red_refine((a2, b, b2)))
        a, b = a2, b2
    pieces.append((s, a, b))
    return [np.array(p) for p in pieces]


def graded_triangles(tri, singular_point, levels, tol=1e-12):
    """Split ``tri`` (3, 2) into sub-triangles geometrically graded toward
    ``singular_point``.  Returns ``[tri]`` when the point is outside."""
    tri = np.asarray(tri, dtype=float)
    kind, i = _point_location(tri, singular_point, tol)
    if kind is None or levels == 0:
        return [tri]
    s = np.asarray(singular_point, dtype=float)
    if kind == "vertex":
        return _grade_toward_vertex(tri[i], tri[(i + 1) % 3], tri[(i + 2) % 3], levels)
    if kind == "edge":
        a, b, c = tri[i], tri[(i + 1) % 3], tri[(i + 2) % 3]
        parts = [(s, a, b), (s, c, a)]
    else:
        parts = [(s, tri[0], tri[1]), (s, tri[1], tri[2]), (s, tri[2], tri[0])]
    out = []
    for p in parts:
        out.extend(_grade_toward_vertex(p[0], p[1], p[2], levels))
    return out


def _clip_vertical(poly, c, keep_left):
    """Sutherland-Hodgman clip of a convex polygon against x <= c or x >= c."""
    out = []
    n = len(poly)
    sign = 1.0 if keep_left else -1.0
    for k in range(n):
        p, q = poly[k], poly[(k + 1) % n]
        fp, fq = sign * (c - p[0]), sign * (c - q[0])
        if fp >= 0:
            out.append(p)
        if (fp > 0 > fq) or (fp < 0 < fq):
            t = fp / (fp - fq)
            out.append(p + t * (q - p))
    return out


def split_by_vertical_line(tri, c, tol=1e-13):
    """Exact sub-triangulation of ``tri`` by the line x = c.

    Returns a list of (sub_triangle, side) with side -1 (x < c) or +1."""
    tri = np.asarray(tri, dtype=float)
    xs = tri[:, 0]
    if xs.max() <= c + tol:
        return [(tri, -1)]
    if xs.min() >= c - tol:
        return [(tri, 1)]
    out = []
    for side, keep_left in ((-1, True), (1, False)):
        poly = _clip_vertical(list(tri), c, keep_left)
        for k in range(1, len(poly) - 1):
            sub = np.array([poly[0], poly[k], poly[k + 1]])
            if abs(triangle_area(sub)) > 0.0:
                out.append((sub, side))
    return out


@dataclass
class QuadraturePlan:
    """Composite rule over a batch of triangles.

    ``points`` (M, 2) physical coordinates, ``weights`` (M,) physical
    weights, ``owner`` (M,) index of the owning triangle, ``bary`` (M, 3)
    barycentric coordinates relative to the owner, and ``side`` (M,) the
    side (-1/+1) of the first cut line, 0 if no cut line was declared.
    """

    points: np.ndarray
    weights: np.ndarray
    owner: np.ndarray
    bary: np.ndarray
    side: np.ndarray
    n_triangles: int

    def integrate(self, values):
        """Per-triangle integrals of point values (M, ...) -> (n_triangles, ...)."""
        values = np.asarray(values)
        wv = values * self.weights.reshape((-1,) + (1,) * (values.ndim - 1))
        out = np.zeros((self.n_triangles,) + values.shape[1:])
        np.add.at(out, self.owner, wv)
        return out


def _touches(tri, pt, tol=1e-12):
    kind, _ = _point_location(tri, pt, tol)
    return kind is not None


def composite_plan(tris, degree, singular_points=(), grading_levels=0, cut_lines=()):
    """Quadrature plan for triangles ``tris`` (N, 3, 2).

    Triangles whose closure contains a singular point are graded toward it
    with ``grading_levels`` halvings; triangles cut by a vertical line
    ``x = c`` in ``cut_lines`` are split exactly along it.  Everything else
    gets the plain rule of the requested degree.
    """
    tris = np.asarray(tris, dtype=float)
    N = len(tris)
    rule = triangle_rule(degree)
    special = np.zeros(N, dtype=bool)
    lo = tris.min(axis=1)
    hi = tris.max(axis=1)
    for sp in singular_points:
        sp = np.asarray(sp, dtype=float)
        cand = np.all((lo <= sp + 1e-12) & (hi >= sp - 1e-12), axis=1)
        for k in np.flatnonzero(cand):
            if grading_levels > 0 and _touches(tris[k], sp):
                special[k] = True
    for c in cut_lines:
        special |= (lo[:, 0] < c - 1e-13) & (hi[:, 0] > c + 1e-13)

    plain = np.flatnonzero(~special)
    area = np.abs(triangle_area(tris[plain]))
    pts = np.einsum("qi,tid->tqd", rule.points, tris[plain])
    w = 2.0 * area[:, None] * rule.weights[None, :]
    points = [pts.reshape(-1, 2)]
    weights = [w.ravel()]
    owner = [np.repeat(plain, len(rule))]
    bary = [np.tile(rule.points, (len(plain), 1))]
    side = [_side_of(points[0], cut_lines)]

    for k in np.flatnonzero(special):
        pieces = [(tris[k], 0)]
        for c in cut_lines[:1]:
            pieces = [(sub, s) for tri, _ in pieces for sub, s in split_by_vertical_line(tri, c)]
        graded = []
        for sub, s in pieces:
            subs = [sub]
            for sp in singular_points:
                subs = [g for t in subs for g in graded_triangles(t, sp, grading_levels)]
            graded.extend((g, s) for g in subs)
        for sub, s in graded:
            a = abs(triangle_area(sub))
            p = rule.points @ sub
            points.append(p)
            weights.append(2.0 * a * rule.weights)
            owner.append(np.full(len(rule), k))
            bary.append(barycentric(np.broadcast_to(tris[k], (len(p), 3, 2)), p))
            side.append(np.full(len(rule), s, dtype=int))

    return QuadraturePlan(
        points=np.concatenate(points),
        weights=np.concatenate(weights),
        owner=np.concatenate(owner),
        bary=np.concatenate(bary),
        side=np.concatenate(side),
        n_triangles=N,
    )


def _side_of(points, cut_lines):
    if not cut_lines:
        return np.zeros(len(points), dtype=int)
    return np.where(points[:, 0] < cut_lines[0], -1, 1)
