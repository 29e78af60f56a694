"""Finite element spaces on triangle meshes.

Vector Crouzeix-Raviart fields carry one value per face and component,
the face mean, numbered ``2 * face + component``.  On an element the
local basis function attached to the face opposite vertex ``i`` is
``1 - 2 lambda_i``, so its gradient is ``-2 grad lambda_i``.

Pressures are piecewise constants (one value per element) and the
conforming P1 space uses ``2 * vertex + component``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh
from .quadrature import barycentric, edge_rule

CR_VECTOR = "CR-vector"
P0_PRESSURE = "P0-pressure"
P1C_VECTOR = "P1C-vector"
SMOOTHED_VECTOR = "Smoothed-vector"


@dataclass(frozen=True, eq=False)
class SpaceDescriptor:
    kind: str
    mesh: Mesh
    dof_count: int
    boundary_dofs: np.ndarray


@dataclass(eq=False)
class FeFunction:
    space: SpaceDescriptor
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.dof_count,):
            raise ValueError("coefficient vector does not match the space")

    def to_csv(self) -> str:
        rows = ["dof,value"] + [f"{i},{v!r}" for i, v in enumerate(self.coefficients.tolist())]
        return "\n".join(rows) + "\n"


def cr_space(mesh: Mesh) -> SpaceDescriptor:
    b = mesh.topology.boundary_faces
    bd = np.sort(np.concatenate([2 * b, 2 * b + 1]))
    return SpaceDescriptor(CR_VECTOR, mesh, 2 * mesh.n_faces, bd)


def p0_space(mesh: Mesh) -> SpaceDescriptor:
    return SpaceDescriptor(P0_PRESSURE, mesh, mesh.n_elements, np.zeros(0, dtype=np.int64))


def p1c_space(mesh: Mesh) -> SpaceDescriptor:
    b = mesh.topology.boundary_vertices
    bd = np.sort(np.concatenate([2 * b, 2 * b + 1]))
    return SpaceDescriptor(P1C_VECTOR, mesh, 2 * mesh.n_vertices, bd)


# local CR structure -------------------------------------------------------------

def cr_element_dofs(mesh: Mesh) -> np.ndarray:
    """Global CR dofs per element, shape (M, 3, 2): [K, local face, component]."""
    ef = mesh.topology.element_faces
    return np.stack([2 * ef, 2 * ef + 1], axis=2)


def cr_basis_gradients(mesh: Mesh) -> np.ndarray:
    """Gradients of the scalar local basis 1 - 2 lambda_i, shape (M, 3, 2)."""
    return -2.0 * mesh.grad_lambda


def local_coefficients(mesh: Mesh, u) -> np.ndarray:
    """CR coefficients gathered per element, shape (M, 3, 2)."""
    return np.asarray(u)[cr_element_dofs(mesh)]


def broken_gradient(mesh: Mesh, u) -> np.ndarray:
    """Element-wise gradient G[K, c, d] = d u_c / d x_d, shape (M, 2, 2)."""
    loc = local_coefficients(mesh, u)
    return np.einsum("kic,kid->kcd", loc, cr_basis_gradients(mesh))


def symmetric_part(G):
    return 0.5 * (G + np.swapaxes(G, -1, -2))


def broken_symgrad(mesh: Mesh, u) -> np.ndarray:
    return symmetric_part(broken_gradient(mesh, u))


def broken_divergence(mesh: Mesh, u) -> np.ndarray:
    G = broken_gradient(mesh, u)
    return G[:, 0, 0] + G[:, 1, 1]


def cr_vertex_values(mesh: Mesh, u) -> np.ndarray:
    """Limits of the CR field at the element vertices, shape (M, 3, 2)."""
    loc = local_coefficients(mesh, u)
    return loc.sum(axis=1, keepdims=True) - 2.0 * loc


def cr_evaluate(mesh: Mesh, u, elements, bary) -> np.ndarray:
    """Values of the CR field at points given by element and barycentrics."""
    loc = local_coefficients(mesh, u)[elements]
    return np.einsum("pic,pi->pc", loc, 1.0 - 2.0 * np.asarray(bary))


def p1_to_cr(mesh: Mesh, w) -> np.ndarray:
    """Embed a conforming P1 vector field (vertex dofs) into CR."""
    w = np.asarray(w).reshape(-1, 2)
    f = mesh.topology.faces
    return (0.5 * (w[f[:, 0]] + w[f[:, 1]])).ravel()


def p1_interpolate(mesh: Mesh, func) -> np.ndarray:
    """Nodal P1 interpolation of a vector field, dofs ``2 * vertex + c``."""
    return np.asarray(func(mesh.vertices), dtype=float).reshape(-1, 2).ravel()


# face quadrature ------------------------------------------------------------

def graded_segment_rule(a, b, point, degree, levels):
    """Points (n, 2) and weights (n,) for a segment, graded toward ``point``
    when it lies on the closed segment."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    rule = edge_rule(degree)
    s_ref = rule.points[:, 1]
    d = b - a
    length = np.linalg.norm(d)
    pieces = [(0.0, 1.0)]
    if point is not None and levels > 0:
        p = np.asarray(point, float)
        s = float(np.dot(p - a, d) / length**2)
        dist = np.linalg.norm(a + s * d - p)
        if dist <= 1e-12 * max(1.0, length) and -1e-12 <= s <= 1 + 1e-12:
            s = min(max(s, 0.0), 1.0)
            pieces = []
            for lo, hi in ((0.0, s), (s, 1.0)):
                if hi - lo <= 0:
                    continue
                # geometric layers toward s
                near, far = (hi, lo) if s == hi else (lo, hi)
                for _ in range(levels):
                    mid = 0.5 * (near + far)
                    pieces.append((min(mid, far), max(mid, far)))
                    far = mid
                pieces.append((min(near, far), max(near, far)))
    pts, wts = [], []
    for lo, hi in pieces:
        ss = lo + (hi - lo) * s_ref
        pts.append(a + ss[:, None] * d)
        wts.append(rule.weights * (hi - lo) * length)
    return np.concatenate(pts), np.concatenate(wts)


def face_means(mesh: Mesh, func, degree=8, singular_points=(), grading_levels=12, faces=None):
    """Face means of a vector field, shape (n_faces, 2)."""
    x = mesh.vertices
    f = mesh.topology.faces if faces is None else mesh.topology.faces[faces]
    rule = edge_rule(degree)
    s = rule.points[:, 1]
    a, b = x[f[:, 0]], x[f[:, 1]]
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    vals = np.asarray(func(pts.reshape(-1, 2))).reshape(len(f), len(s), -1)
    out = np.einsum("q,fqc->fc", rule.weights, vals)
    for sp in singular_points:
        sp = np.asarray(sp, float)
        ab = b - a
        t = np.einsum("ij,ij->i", sp - a, ab) / np.einsum("ij,ij->i", ab, ab)
        close = np.linalg.norm(a + t[:, None] * ab - sp, axis=1) <= 1e-12
        touch = np.flatnonzero(close & (t >= -1e-12) & (t <= 1 + 1e-12))
        for k in touch:
            p, w = graded_segment_rule(a[k], b[k], sp, degree, grading_levels)
            v = np.asarray(func(p)).reshape(len(w), -1)
            out[k] = w @ v / np.linalg.norm(b[k] - a[k])
    return out


def interpolate_cr(mesh: Mesh, func, degree=8, singular_points=(), grading_levels=12) -> FeFunction:
    """I^cr u: face means of ``func`` (callable on (n, 2) arrays -> (n, 2))."""
    fm = face_means(mesh, func, degree, singular_points, grading_levels)
    return FeFunction(cr_space(mesh), fm.ravel())


def face_jump(mesh: Mesh, u, face, s):
    """Jump of a CR field on ``face`` at the point with parameter ``s`` in
    [0, 1] along the sorted vertex pair.  On boundary faces: the trace."""
    t = mesh.topology
    a, b = t.faces[face]
    s = np.atleast_1d(np.asarray(s, float))
    x = mesh.vertices
    pts = x[a] + s[:, None] * (x[b] - x[a])
    vals = []
    for K in t.face_elements[face]:
        if K < 0:
            continue
        lam = barycentric(np.broadcast_to(mesh.coords[K], (len(s), 3, 2)), pts)
        vals.append(cr_evaluate(mesh, u, np.full(len(s), K), lam))
    return vals[0] - vals[1] if len(vals) == 2 else vals[0]


def face_trace_values(mesh: Mesh, u, s):
    """Values of a CR field on all faces from both sides.

    Returns ``(left, right)``, each shape (L, len(s), 2), evaluated at the
    points ``a + s (b - a)`` of each face ``(a, b)``; ``right`` is NaN on
    boundary faces.
    """
    t = mesh.topology
    loc = local_coefficients(mesh, u)
    out = []
    s = np.asarray(s, float)
    for side in range(2):
        K = t.face_elements[:, side]
        i = t.face_local[:, side]
        valid = K >= 0
        Kv = np.where(valid, K, 0)
        el = mesh.elements[Kv]
        fa, fb = t.faces[:, 0], t.faces[:, 1]
        # barycentrics on face i: lambda_i = 0, lambda at vertex a equals 1-s, at b equals s
        lam = np.zeros((len(K), len(s), 3))
        for j in range(3):
            lam[:, :, j] += (el[:, j] == fa)[:, None] * (1.0 - s)[None, :]
            lam[:, :, j] += (el[:, j] == fb)[:, None] * s[None, :]
        vals = np.einsum("fic,fqi->fqc", loc[Kv], 1.0 - 2.0 * lam)
        vals[~valid] = np.nan
        out.append(vals)
    return out[0], out[1]


def project_p0_zero_mean(mesh: Mesh, values) -> FeFunction:
    """Subtract the area-weighted mean of element values."""
    v = np.asarray(values, dtype=float)
    a = mesh.areas
    return FeFunction(p0_space(mesh), v - np.dot(a, v) / a.sum())
