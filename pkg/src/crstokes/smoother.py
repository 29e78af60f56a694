"""Smoothing operator E = A + B + C from CR into continuous fields.

Stage A averages the element limits of a CR field at interior vertices.
At boundary vertices the value is reconstructed from the boundary face
means alone (linear interpolation along a straight side, linear
extrapolation into a corner); for fields with vanishing boundary face
means this is zero, and global affine fields are reproduced exactly.

Stage B adds one quadratic face bubble ``6 lambda_a lambda_b`` per face
and component, chosen such that the face means of E v and v agree.

Stage C adds, per element, a continuous piecewise quadratic field on the
Alfeld (barycentric) split which vanishes on the element boundary and
removes the remaining divergence deficit, so that div E v = div_h v holds
pointwise.

Everything E v depends on inside an element is collected in a 12-vector

    z_K = (A v at the 3 vertices, x then y;  c_F for the 3 faces, x then y),

and a sparse matrix ``Z`` maps CR coefficients to all z_K at once.  E v on
element K is then a fixed linear function of z_K: the Alfeld coefficients
are ``W_K z_K`` and the gradient, affine on each of the three children,
is stored through its values at the child vertices.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, alfeld_split, neighborhoods, touching_faces
from .quadrature import edge_rule, triangle_rule
from .spaces import FeFunction, broken_gradient, cr_element_dofs, face_trace_values, p1c_space

NZ = 12


class SmootherError(RuntimeError):
    pass


@dataclass
class SmoothedField:
    """E v in structured form.

    ``p1c_part`` is the averaged P1 field, ``face_bubble_coeffs`` (L, 2)
    the bubble coefficients and ``alfeld_correction`` (M, 8) the values at
    the barycentre and at the midpoints of the segments barycentre-vertex
    (x components first).
    """

    p1c_part: FeFunction
    face_bubble_coeffs: np.ndarray
    alfeld_correction: np.ndarray
    z: np.ndarray


def _child_grad_mu(children):
    """Gradients of child barycentrics, children (M, 3, 3, 2) -> (M, 3, 3, 2)."""
    c = children
    d1 = c[..., 1, :] - c[..., 0, :]
    d2 = c[..., 2, :] - c[..., 0, :]
    area2 = d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]
    g = np.empty_like(c)
    for i in range(3):
        a, b = c[..., (i + 1) % 3, :], c[..., (i + 2) % 3, :]
        g[..., i, 0] = (a[..., 1] - b[..., 1]) / area2
        g[..., i, 1] = (b[..., 0] - a[..., 0]) / area2
    return g


def child_to_parent_bary(c):
    """Parent barycentric coordinates of child ``c`` vertices (b, P_{c+1}, P_{c+2}) as a
    (3, 3) matrix: row = child vertex, column = parent barycentric."""
    B = np.zeros((3, 3))
    B[0] = 1.0 / 3.0
    B[1, (c + 1) % 3] = 1.0
    B[2, (c + 2) % 3] = 1.0
    return B


def alfeld_node_slots(c):
    """Alfeld nodes (0 = barycentre, 1 + j = midpoint of b-P_j) that carry the
    P2 basis on child c, in the order (vertex b, edge b-P_{c+1}, edge b-P_{c+2})."""
    return 0, 1 + (c + 1) % 3, 1 + (c + 2) % 3


def alfeld_basis(mu, gmu):
    """Values and gradients of the three nonzero P2 basis functions of a child.

    mu : (..., 3) child barycentrics; gmu : (..., 3, 2) their gradients.
    Returns values (..., 3) and gradients (..., 3, 2) of
    mu0(2mu0-1), 4 mu0 mu1, 4 mu0 mu2.
    """
    m0, m1, m2 = mu[..., 0], mu[..., 1], mu[..., 2]
    g0, g1, g2 = gmu[..., 0, :], gmu[..., 1, :], gmu[..., 2, :]
    val = np.stack([m0 * (2 * m0 - 1), 4 * m0 * m1, 4 * m0 * m2], axis=-1)
    grad = np.stack([
        (4 * m0 - 1)[..., None] * g0,
        4 * (m1[..., None] * g0 + m0[..., None] * g1),
        4 * (m2[..., None] * g0 + m0[..., None] * g2),
    ], axis=-2)
    return val, grad


def _boundary_reconstruction(mesh: Mesh):
    """Rows (vertex, face, weight): boundary vertex value as a combination of
    boundary face means, exact for affine fields."""
    t = mesh.topology
    x = mesh.vertices
    bf = t.boundary_faces
    inc = {}
    for f in bf.tolist():
        a, b = t.faces[f]
        inc.setdefault(int(a), []).append(f)
        inc.setdefault(int(b), []).append(f)

    def other(f, v):
        a, b = t.faces[f]
        return int(b) if a == v else int(a)

    def unit(f, v):
        d = x[other(f, v)] - x[v]
        return d / np.linalg.norm(d)

    rows = []
    for v, (f1, f2) in sorted(inc.items()):
        t1, t2 = unit(f1, v), unit(f2, v)
        h1 = np.linalg.norm(x[other(f1, v)] - x[v])
        h2 = np.linalg.norm(x[other(f2, v)] - x[v])
        if abs(t1[0] * t2[1] - t1[1] * t2[0]) < 1e-10:
            # straight side: midpoints at distances h1/2, h2/2 on opposite sides
            rows += [(v, f1, h2 / (h1 + h2)), (v, f2, h1 / (h1 + h2))]
            continue
        for f in (f1, f2):
            a = other(f, v)
            h = np.linalg.norm(x[a] - x[v])
            g = [ff for ff in inc[a] if ff != f][0]
            tg = unit(g, a)
            tf = (x[a] - x[v]) / h
            if abs(tg[0] * tf[1] - tg[1] * tf[0]) < 1e-10 and np.dot(tg, tf) > 0:
                hg = np.linalg.norm(x[other(g, a)] - x[a])
                s = h / (h + hg)  # extrapolate the two midpoints back to v
                rows += [(v, f, 0.5 * (1 + s)), (v, g, -0.5 * s)]
            else:
                rows.append((v, f, 0.5))
    return rows


def vertex_average_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Stage A as a (2N x 2L) matrix."""
    N = mesh.n_vertices
    el = mesh.elements
    M = len(el)
    dofs = cr_element_dofs(mesh)  # (M, 3, 2)
    interior = np.ones(N, dtype=bool)
    interior[mesh.topology.boundary_vertices] = False
    count = np.bincount(el.ravel(), minlength=N).astype(float)
    rows, cols, vals = [], [], []
    coef = 1.0 - 2.0 * np.eye(3)  # limit at vertex j: sum_i coef[i, j] v_i
    for j in range(3):
        vj = el[:, j]
        keep = interior[vj]
        for i in range(3):
            for c in range(2):
                rows.append(2 * vj[keep] + c)
                cols.append(dofs[keep, i, c])
                vals.append(np.full(keep.sum(), coef[i, j]) / count[vj[keep]])
    for v, f, w in _boundary_reconstruction(mesh):
        for c in range(2):
            rows.append(np.array([2 * v + c]))
            cols.append(np.array([2 * f + c]))
            vals.append(np.array([w]))
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * N, 2 * mesh.n_faces),
    )


class SmootherOperator:
    """Precomputed smoother on a mesh.

    Parameters
    ----------
    mesh : Mesh
    with_correction : bool
        Include stage C.  Disabling it is only useful for diagnostics.
    tol : float
        Relative residual allowed in the local divergence solves.
    """

    def __init__(self, mesh: Mesh, with_correction: bool = True, tol: float = 1e-10):
        self.mesh = mesh
        self.with_correction = with_correction
        M, L = mesh.n_elements, mesh.n_faces
        self.alfeld = alfeld_split(mesh)

        self.Avg = vertex_average_matrix(mesh)
        f = mesh.topology.faces
        # c_F = v_F - (Av(a) + Av(b)) / 2 per component
        rows = np.concatenate([2 * np.arange(L), 2 * np.arange(L), 2 * np.arange(L) + 1, 2 * np.arange(L) + 1])
        cols = np.concatenate([2 * f[:, 0], 2 * f[:, 1], 2 * f[:, 0] + 1, 2 * f[:, 1] + 1])
        S = sp.csr_matrix((np.full(len(rows), 0.5), (rows, cols)), shape=(2 * L, 2 * mesh.n_vertices))
        self.Cb = (sp.identity(2 * L, format="csr") - S @ self.Avg).tocsr()

        el, ef = mesh.elements, mesh.topology.element_faces
        # rows of Z in element-major order
        vert_rows = np.concatenate([2 * el, 2 * el + 1], axis=1)     # (M, 6)
        face_rows = np.concatenate([2 * ef, 2 * ef + 1], axis=1)     # (M, 6)
        Zv = self.Avg[vert_rows.ravel()]
        Zb = self.Cb[face_rows.ravel()]
        stacked = sp.vstack([Zv, Zb]).tocsr()
        base = 6 * np.arange(M)[:, None] + np.arange(6)
        order = np.concatenate([base, 6 * M + base], axis=1).ravel()
        self.Z = stacked[order].tocsr()
        self.Z.eliminate_zeros()

        self._build_local(tol)

    # local maps -------------------------------------------------------------
    def _build_local(self, tol):
        mesh = self.mesh
        M = mesh.n_elements
        gl = mesh.grad_lambda                    # (M, 3, 2)
        gmu = _child_grad_mu(self.alfeld.children)  # (M, 3 child, 3, 2)
        self.grad_mu = gmu

        # parent barycentrics of child vertices, (3 child, 3 node, 3)
        lam_nodes = np.stack([child_to_parent_bary(c) for c in range(3)])

        # gradient of P1 + bubble part at child nodes for each unit z: (M, 3, 3, 2, 2, 12)
        Gpb = np.zeros((M, 3, 3, 2, 2, NZ))
        for comp in range(2):
            for j in range(3):
                Gpb[:, :, :, comp, :, 3 * comp + j] = gl[:, None, None, j, :]
            for i in range(3):
                a, b = (i + 1) % 3, (i + 2) % 3
                # grad b_i = 6 (lambda_b grad lambda_a + lambda_a grad lambda_b)
                g = 6.0 * (lam_nodes[None, :, :, b, None] * gl[:, None, None, a, :]
                           + lam_nodes[None, :, :, a, None] * gl[:, None, None, b, :])
                Gpb[:, :, :, comp, :, 6 + 3 * comp + i] = g

        # discrete divergence from z: div_h = sum_i (-2 grad lambda_i) . v_i
        # with v_i = (z_vert(i+1) + z_vert(i+2)) / 2 + z_bub(i)
        divh = np.zeros((M, NZ))
        for comp in range(2):
            for i in range(3):
                w = -2.0 * gl[:, i, comp]
                divh[:, 3 * comp + (i + 1) % 3] += 0.5 * w
                divh[:, 3 * comp + (i + 2) % 3] += 0.5 * w
                divh[:, 6 + 3 * comp + i] += w

        div_pb = Gpb[..., 0, 0, :] + Gpb[..., 1, 1, :]          # (M, 3, 3, 12)
        T = (divh[:, None, None, :] - div_pb).reshape(M, 9, NZ)

        # Alfeld basis gradients at child nodes: (M, 3 child, 3 node, 3 basis, 2)
        eye = np.eye(3)
        _, bgrad = alfeld_basis(eye[None, None], gmu[:, :, None])
        self.alfeld_basis_grad = bgrad
        # divergence matrix D: rows (child, node), cols (comp, alfeld node)
        D = np.zeros((M, 3, 3, 2, 4))
        for c in range(3):
            for k, slot in enumerate(alfeld_node_slots(c)):
                for comp in range(2):
                    D[:, c, :, comp, slot] += bgrad[:, c, :, k, comp]
        D = D.reshape(M, 9, 8)
        if self.with_correction:
            Dp = np.linalg.pinv(D)
            W = Dp @ T                                        # (M, 8, 12)
            res = np.linalg.norm(D @ W - T, axis=(1, 2))
            scale = np.linalg.norm(T, axis=(1, 2))
            bad = np.flatnonzero(res > tol * scale)
            if bad.size:
                raise SmootherError(f"local divergence solve failed on element {int(bad[0])}")
        else:
            W = np.zeros((M, 8, NZ))
        self.W = W
        self.D = D

        # full nodal gradient maps
        Gw = np.zeros((M, 3, 3, 2, 2, NZ))
        for c in range(3):
            for k, slot in enumerate(alfeld_node_slots(c)):
                for comp in range(2):
                    Gw[:, c, :, comp, :, :] += bgrad[:, c, :, k, :, None] * W[:, None, 4 * comp + slot, None, :]
        self.G = Gpb + Gw
        self.divh = divh

    # application ------------------------------------------------------------
    def z(self, v) -> np.ndarray:
        return (self.Z @ _coeffs(v)).reshape(-1, NZ)

    def apply(self, v) -> SmoothedField:
        v = _coeffs(v)
        z = self.z(v)
        return SmoothedField(
            p1c_part=FeFunction(p1c_space(self.mesh), self.Avg @ v),
            face_bubble_coeffs=(self.Cb @ v).reshape(-1, 2),
            alfeld_correction=np.einsum("kaz,kz->ka", self.W, z),
            z=z,
        )

    def nodal_gradients(self, v) -> np.ndarray:
        """grad E v at the child vertices, shape (M, 3, 3, 2, 2)."""
        return np.einsum("kcnijz,kz->kcnij", self.G, self.z(v))

    def gradients_at(self, v, mu) -> np.ndarray:
        """grad E v at child barycentrics ``mu`` (Q, 3) in every child:
        shape (M, 3, Q, 2, 2)."""
        return np.einsum("qn,kcnij->kcqij", mu, self.nodal_gradients(v))

    def values_at(self, v, child, mu) -> np.ndarray:
        """E v at points given per element by child index (P,) and child
        barycentrics (P, 3); evaluated on every element: (M, P, 2)."""
        z = self.z(v)
        W = np.einsum("kaz,kz->ka", self.W, z)
        child = np.asarray(child)
        mu = np.asarray(mu, float)
        lam = np.einsum("pn,pnj->pj", mu, np.stack([child_to_parent_bary(c) for c in child]))
        out = np.zeros((self.mesh.n_elements, len(child), 2))
        for comp in range(2):
            out[..., comp] = z[:, 3 * comp: 3 * comp + 3] @ lam.T
            for i in range(3):
                a, b = (i + 1) % 3, (i + 2) % 3
                out[..., comp] += z[:, 6 + 3 * comp + i, None] * (6.0 * lam[:, a] * lam[:, b])[None, :]
        val, _ = alfeld_basis(mu, np.zeros(mu.shape + (2,)))
        for p, c in enumerate(child.tolist()):
            for k, slot in enumerate(alfeld_node_slots(c)):
                for comp in range(2):
                    out[:, p, comp] += W[:, 4 * comp + slot] * val[p, k]
        return out


def _coeffs(v):
    if isinstance(v, FeFunction):
        return v.coefficients
    return np.asarray(v, dtype=float)


def build_smoother(mesh: Mesh, alfeld=None, with_correction: bool = True) -> SmootherOperator:
    """Precompute E on ``mesh``; ``alfeld`` is accepted for interface symmetry
    and recomputed when omitted."""
    op = SmootherOperator(mesh, with_correction=with_correction)
    if alfeld is not None:
        op.alfeld = alfeld
    return op


def apply_smoother(op: SmootherOperator, v) -> SmoothedField:
    return op.apply(v)


def element_gradient_integrals(op: SmootherOperator, v) -> np.ndarray:
    """Exact integrals of grad E v over each element, shape (M, 2, 2)."""
    G = op.nodal_gradients(v)
    return np.einsum("kc,kcij->kij", op.alfeld.child_areas, G.mean(axis=2))


def smoother_gradient_matrix_identity_check(op: SmootherOperator, v, Q) -> float:
    """Relative residual of  int Q : grad_h v = int Q : grad E v  for
    piecewise constant ``Q`` (M, 2, 2)."""
    Q = np.asarray(Q, float)
    lhs_k = op.mesh.areas[:, None, None] * broken_gradient(op.mesh, _coeffs(v))
    rhs_k = element_gradient_integrals(op, v)
    lhs = np.einsum("kij,kij->", Q, lhs_k)
    rhs = np.einsum("kij,kij->", Q, rhs_k)
    scale = np.einsum("kij,kij->", np.abs(Q), np.abs(lhs_k)) + np.finfo(float).tiny
    return float(abs(lhs - rhs) / scale)


@dataclass
class StabilityReport:
    """Maxima over elements and samples of the local stability ratios."""

    w11: float
    jump: float
    modular: dict


def _child_rule(degree=6):
    rule = triangle_rule(degree)
    return rule.points, 2.0 * rule.weights  # weights sum to one


def stability_report(op: SmootherOperator, fields, exponents=(1.5, 3.0), epsilon=0.0) -> StabilityReport:
    """Largest local stability ratios of E over the sample ``fields``.

    Ratios (per element K, maximised):

    * ||grad E v||_{1,K} / ||grad_h v||_{1,omega_K}
    * ||grad_h (v - E v)||_{1,K} / sum over faces touching K of int_F |[v]|
    * mean_K phi(|grad E v|) / mean_{omega_K} phi(|grad_h v|) for phi with
      exponent r in ``exponents``

    0/0 counts as 0; jump sums below 1e-10 of the patch gradient norm
    count as 0.
    """
    from .nfunction import NFunctionRE, tensor_norm

    mesh = op.mesh
    nb = neighborhoods(mesh)
    P = sp.csr_matrix((np.ones(len(nb.indices)), nb.indices, nb.indptr), shape=(mesh.n_elements,) * 2)
    T = touching_faces(mesh)
    area = mesh.areas
    carea = op.alfeld.child_areas
    mu, w = _child_rule()
    er = edge_rule(6)
    s = er.points[:, 1]
    flen = mesh.face_lengths
    nfs = {r: NFunctionRE(r, epsilon) for r in exponents}
    best = {"w11": 0.0, "jump": 0.0, **{r: 0.0 for r in exponents}}

    def ratio(num, den, floor=0.0):
        out = np.zeros_like(num)
        pos = den > floor
        out[pos] = num[pos] / den[pos]
        return out.max() if len(out) else 0.0

    for v in fields:
        v = _coeffs(v)
        Gh = broken_gradient(mesh, v)                      # (M, 2, 2)
        GE = op.gradients_at(v, mu)                        # (M, 3, Q, 2, 2)
        nE = tensor_norm(GE)
        nh = tensor_norm(Gh)
        l1E = np.einsum("kc,kcq,q->k", carea, nE, w)
        l1h_patch = P @ (area * nh)
        best["w11"] = max(best["w11"], ratio(l1E, l1h_patch))

        diff = tensor_norm(GE - Gh[:, None, None])
        num = np.einsum("kc,kcq,q->k", carea, diff, w)
        left, right = face_trace_values(mesh, v, s)
        jump = np.where(np.isnan(right), left, left - right)
        jint = flen * np.einsum("q,fq->f", er.weights, np.linalg.norm(jump, axis=-1))
        # jumps at roundoff level count as zero
        best["jump"] = max(best["jump"], ratio(num, T @ jint, 1e-10 * l1h_patch))

        for r, nf in nfs.items():
            mE = np.einsum("kc,kcq,q->k", carea, nf.value(nE), w) / area
            mh = (P @ (area * nf.value(nh))) / (P @ area)
            best[r] = max(best[r], ratio(mE, mh))
    return StabilityReport(best["w11"], best["jump"], {r: best[r] for r in exponents})
