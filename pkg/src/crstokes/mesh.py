"""Conforming triangle meshes with newest-vertex bisection.

Elements are stored as vertex triples ``(v0, v1, v2)`` in counter-clockwise
order where ``(v0, v1)`` is the refinement edge and ``v2`` the newest
vertex.  Bisection at the midpoint ``m`` of the refinement edge yields the
children ``(v2, v0, m)`` and ``(v1, v2, m)``, again counter-clockwise and
again in this convention.

Faces are the unique edges, stored as sorted vertex pairs.  Local face
``i`` of an element is the edge opposite local vertex ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class MeshError(ValueError):
    """Raised for structurally invalid (e.g. non-conforming) meshes."""


@dataclass
class Topology:
    faces: np.ndarray            # (L, 2) sorted vertex pairs
    element_faces: np.ndarray    # (M, 3) face opposite local vertex i
    face_elements: np.ndarray    # (L, 2) adjacent elements, lower index first, -1 if none
    face_local: np.ndarray       # (L, 2) local index of the face in each neighbour
    normals: np.ndarray          # (L, 2) unit normals, out of face_elements[:, 0]
    boundary_faces: np.ndarray   # indices of boundary faces
    boundary_vertices: np.ndarray


@dataclass
class Mesh:
    """Triangle mesh with face topology and geometric data.

    Parameters
    ----------
    vertices : ndarray, shape (N, 2)
    elements : ndarray, shape (M, 3)
        Counter-clockwise vertex triples, refinement edge first.
    level : int
        Uniform refinement level (two bisection sweeps per level).
    parent : ndarray or None
        For refined meshes, the element of the previous level that
        contains each element.
    """

    vertices: np.ndarray
    elements: np.ndarray
    level: int = 0
    parent: np.ndarray | None = None
    topology: Topology = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.elements = np.ascontiguousarray(self.elements, dtype=np.int64)
        if np.any(self.areas <= 0):
            raise MeshError("elements must be counter-clockwise with positive area")
        self.topology = build_topology(self)

    # geometry ---------------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def n_faces(self):
        return len(self.topology.faces)

    @property
    def coords(self):
        """Element vertex coordinates, shape (M, 3, 2)."""
        return self.vertices[self.elements]

    @property
    def areas(self):
        c = self.vertices[self.elements]
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @property
    def centroids(self):
        return self.coords.mean(axis=1)

    @property
    def grad_lambda(self):
        """Gradients of the barycentric coordinates, shape (M, 3, 2)."""
        c = self.coords
        area2 = 2.0 * self.areas
        g = np.empty_like(c)
        for i in range(3):
            a, b = c[:, (i + 1) % 3], c[:, (i + 2) % 3]
            # rotate the opposite edge by -90 degrees and scale
            g[:, i, 0] = (a[:, 1] - b[:, 1]) / area2
            g[:, i, 1] = (b[:, 0] - a[:, 0]) / area2
        return g

    @property
    def face_lengths(self):
        f = self.topology.faces
        return np.linalg.norm(self.vertices[f[:, 1]] - self.vertices[f[:, 0]], axis=1)

    @property
    def face_midpoints(self):
        f = self.topology.faces
        return 0.5 * (self.vertices[f[:, 0]] + self.vertices[f[:, 1]])

    @property
    def element_diameters(self):
        c = self.coords
        e = np.stack([np.linalg.norm(c[:, (i + 1) % 3] - c[:, (i + 2) % 3], axis=1) for i in range(3)], axis=1)
        return e.max(axis=1)

    @property
    def h_max(self):
        return float(self.element_diameters.max())

    @property
    def inradii(self):
        c = self.coords
        per = sum(np.linalg.norm(c[:, (i + 1) % 3] - c[:, (i + 2) % 3], axis=1) for i in range(3))
        return 2.0 * self.areas / per

    @property
    def shape_constant(self):
        """max_K h_K / rho_K with rho_K the diameter of the inscribed ball."""
        return float(np.max(self.element_diameters / (2.0 * self.inradii)))

    @property
    def is_boundary_face(self):
        return self.topology.face_elements[:, 1] < 0


def build_topology(mesh) -> Topology:
    """Face enumeration, adjacency and oriented normals."""
    el = mesh.elements
    M = len(el)
    N = len(mesh.vertices)
    local = np.stack([el[:, [1, 2]], el[:, [2, 0]], el[:, [0, 1]]], axis=1)  # (M,3,2)
    pairs = np.sort(local.reshape(-1, 2), axis=1)
    keys = pairs[:, 0] * N + pairs[:, 1]
    uniq, first, inv, counts = np.unique(keys, return_index=True, return_inverse=True, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("an edge is shared by more than two elements")
    faces = pairs[first]
    L = len(faces)
    element_faces = inv.reshape(M, 3)

    owner = np.repeat(np.arange(M), 3)
    loc = np.tile(np.arange(3), M)
    order = np.lexsort((owner, inv))  # grouped by face, ascending element
    inv_s, own_s, loc_s = inv[order], owner[order], loc[order]
    start = np.searchsorted(inv_s, np.arange(L))
    face_elements = np.full((L, 2), -1, dtype=np.int64)
    face_local = np.full((L, 2), -1, dtype=np.int64)
    face_elements[:, 0] = own_s[start]
    face_local[:, 0] = loc_s[start]
    two = counts == 2
    face_elements[two, 1] = own_s[start[two] + 1]
    face_local[two, 1] = loc_s[start[two] + 1]

    # conformity: every boundary vertex has exactly two boundary edges
    bfaces = np.flatnonzero(~two)
    bdeg = np.bincount(faces[bfaces].ravel(), minlength=N)
    if np.any((bdeg != 0) & (bdeg != 2)):
        bad = np.flatnonzero((bdeg != 0) & (bdeg != 2))
        raise MeshError(f"non-conforming mesh: hanging vertex near {bad[:5].tolist()}")
    V, E, F = N, L, M
    if V - E + F != 1:
        raise MeshError("mesh is not a simply connected conforming triangulation")

    x = mesh.vertices
    t = x[faces[:, 1]] - x[faces[:, 0]]
    n = np.column_stack([t[:, 1], -t[:, 0]])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    mid = 0.5 * (x[faces[:, 0]] + x[faces[:, 1]])
    cen = x[el[face_elements[:, 0]]].mean(axis=1)
    flip = np.einsum("ij,ij->i", n, mid - cen) < 0
    n[flip] *= -1.0
    bverts = np.flatnonzero(bdeg > 0)
    return Topology(faces, element_faces, face_elements, face_local, n, bfaces, bverts)


# construction and refinement -------------------------------------------------

def unit_square_initial(lower=(-1.0, -1.0), upper=(1.0, 1.0)) -> Mesh:
    """Square split by its two diagonals into four triangles.

    Each triangle is ``(c_i, c_{i+1}, centre)``: the boundary edge is the
    refinement edge and the centre the newest vertex.  All refinement
    edges lie on the boundary, so the marking is compatible: uniform
    bisection stays conforming and two sweeps halve the mesh size.
    """
    (x0, y0), (x1, y1) = lower, upper
    v = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1], [0.5 * (x0 + x1), 0.5 * (y0 + y1)]])
    el = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    return Mesh(v, el, level=0)


def _edge_keys(el, n):
    a = np.minimum(el, np.roll(el, -1, axis=1))
    b = np.maximum(el, np.roll(el, -1, axis=1))
    # columns: edges (v0,v1), (v1,v2), (v2,v0); column 0 is the refinement edge
    return a * n + b


def bisect(mesh: Mesh, marked, sweeps_level=None) -> tuple[Mesh, np.ndarray]:
    """Newest-vertex bisection of the ``marked`` elements with closure.

    Returns the refined mesh and, for each new element, the index of the
    element of ``mesh`` that contains it.
    """
    verts = [mesh.vertices]
    nv = len(mesh.vertices)
    el = mesh.elements.copy()
    origin = np.arange(len(el))
    cap = 1 << 31
    ref_keys = _edge_keys(el, cap)[:, 0]
    marked_keys = set(ref_keys[np.asarray(marked)].tolist())

    # closure: an element with any marked edge must bisect its refinement edge
    while True:
        keys = _edge_keys(el, cap)
        hit = np.isin(keys, np.fromiter(marked_keys, dtype=np.int64, count=len(marked_keys)))
        need = hit.any(axis=1) & ~hit[:, 0]
        if not need.any():
            break
        marked_keys.update(keys[need, 0].tolist())

    midpoint = {}
    while True:
        keys = _edge_keys(el, cap)[:, 0]
        mk = np.fromiter(marked_keys, dtype=np.int64, count=len(marked_keys))
        split = np.isin(keys, mk)
        if not split.any():
            break
        idx = np.flatnonzero(split)
        new_keys = np.unique(keys[idx])
        fresh = [k for k in new_keys.tolist() if k not in midpoint]
        if fresh:
            fk = np.array(fresh, dtype=np.int64)
            a, b = fk // cap, fk % cap
            allv = np.concatenate(verts)
            pts = 0.5 * (allv[a] + allv[b])
            for k, j in zip(fresh, range(nv, nv + len(fresh))):
                midpoint[k] = j
            verts.append(pts)
            nv += len(fresh)
        m = np.array([midpoint[k] for k in keys[idx].tolist()], dtype=np.int64)
        v0, v1, v2 = el[idx, 0], el[idx, 1], el[idx, 2]
        c1 = np.column_stack([v2, v0, m])
        c2 = np.column_stack([v1, v2, m])
        keep = np.flatnonzero(~split)
        # children replace parents in place order: deterministic numbering
        el = np.concatenate([el[keep], c1, c2])
        origin = np.concatenate([origin[keep], origin[idx], origin[idx]])
        marked_keys.difference_update(new_keys.tolist())
    # sort elements by (origin, insertion) for a stable, parent-grouped numbering
    order = np.argsort(origin, kind="stable")
    out = Mesh(np.concatenate(verts), el[order], level=mesh.level if sweeps_level is None else sweeps_level)
    return out, origin[order]


def refine_uniform(mesh: Mesh, times: int = 2) -> Mesh:
    """Bisect every element ``times`` times.  Two sweeps make one level."""
    if times < 1:
        raise ValueError("times must be at least 1")
    parent = np.arange(mesh.n_elements)
    cur = mesh
    for _ in range(times):
        cur, origin = bisect(cur, np.arange(cur.n_elements))
        parent = parent[origin]
    cur.level = mesh.level + times // 2
    cur.parent = parent
    return cur


def mesh_hierarchy(max_level, lower=(-1.0, -1.0), upper=(1.0, 1.0)):
    """Meshes of levels 0..max_level on the square."""
    meshes = [unit_square_initial(lower, upper)]
    for _ in range(max_level):
        meshes.append(refine_uniform(meshes[-1], 2))
    return meshes


# neighbourhoods and Alfeld split ----------------------------------------------

@dataclass
class Neighborhoods:
    """Vertex-touching element neighbourhoods in CSR form."""

    indptr: np.ndarray
    indices: np.ndarray
    m0: int
    max_area_ratio: float

    def __getitem__(self, K):
        return self.indices[self.indptr[K]:self.indptr[K + 1]]

    def __len__(self):
        return len(self.indptr) - 1


def element_vertex_matrix(mesh):
    M = mesh.n_elements
    rows = np.repeat(np.arange(M), 3)
    return sp.csr_matrix((np.ones(3 * M), (rows, mesh.elements.ravel())), shape=(M, mesh.n_vertices))


def touching_faces(mesh) -> sp.csr_matrix:
    """Element-to-face incidence (M x L) for faces sharing at least a vertex with K."""
    M, L = mesh.n_elements, mesh.n_faces
    f = mesh.topology.faces
    FV = sp.csr_matrix((np.ones(2 * L), (np.repeat(np.arange(L), 2), f.ravel())), shape=(L, mesh.n_vertices))
    T = (element_vertex_matrix(mesh) @ FV.T).tocsr()
    T.data[:] = 1.0
    return T


def neighborhoods(mesh) -> Neighborhoods:
    """N_K = {K' : K' and K share at least a vertex}."""
    E = element_vertex_matrix(mesh)
    adj = (E @ E.T).tocsr()
    adj.sort_indices()
    counts = np.diff(adj.indptr)
    area = mesh.areas
    patch = np.add.reduceat(area[adj.indices], adj.indptr[:-1])
    return Neighborhoods(adj.indptr.copy(), adj.indices.copy(), int(counts.max()), float(np.max(patch / area)))


@dataclass
class AlfeldSplit:
    """Barycentric split: child i of K is (b_K, P_{i+1}, P_{i+2})."""

    barycenters: np.ndarray   # (M, 2)
    children: np.ndarray      # (M, 3, 3, 2) coordinates of child vertices
    child_areas: np.ndarray   # (M, 3)


def alfeld_split(mesh) -> AlfeldSplit:
    c = mesh.coords
    b = c.mean(axis=1)
    ch = np.empty((mesh.n_elements, 3, 3, 2))
    for i in range(3):
        ch[:, i, 0] = b
        ch[:, i, 1] = c[:, (i + 1) % 3]
        ch[:, i, 2] = c[:, (i + 2) % 3]
    d1 = ch[:, :, 1] - ch[:, :, 0]
    d2 = ch[:, :, 2] - ch[:, :, 0]
    areas = 0.5 * (d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0])
    return AlfeldSplit(b, ch, areas)


def mesh_dump(mesh) -> str:
    """Plain-text dump: header line, then vertices, elements and faces.

    Vertex lines are ``v x y``, element lines ``e a b c`` (refinement
    edge first), face lines ``f a b K1 K2 nx ny`` with ``K2 = -1`` on the
    boundary.
    """
    t = mesh.topology
    lines = [f"vertices {mesh.n_vertices} elements {mesh.n_elements} faces {mesh.n_faces}"]
    lines += [f"v {x!r} {y!r}" for x, y in mesh.vertices.tolist()]
    lines += ["e {} {} {}".format(*e) for e in mesh.elements.tolist()]
    for (a, b), (k1, k2), (nx, ny) in zip(t.faces.tolist(), t.face_elements.tolist(), t.normals.tolist()):
        lines.append(f"f {a} {b} {k1} {k2} {nx!r} {ny!r}")
    return "\n".join(lines) + "\n"
