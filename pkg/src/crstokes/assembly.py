"""Discrete operators and loads for the three CR methods.

Method 1 (``GRAD_SMOOTHED``)
    broken gradient in the viscous term, load tested with E v.
Method 2 (``SYMGRAD_SMOOTHED``)
    symmetric gradient of E u in the viscous term, load tested with E v.
Method 3 (``GRAD_PLAIN``)
    broken gradient, load tested with the broken CR function itself.

All three share the pressure coupling ``-int p div_h v``.  The saddle
systems are written on the free (interior) velocity dofs, with the
boundary dofs fixed to face means of the Dirichlet datum.

For Methods 1 and 2 the load is assembled in weak form,
``<f, w> = int (A(Du) - p I) : grad w`` for the conforming ``w = E v``,
so neither the pressure nor the viscous stress is ever differentiated.
Method 3 tests with broken fields; there the load is the genuine
``<f, v> = int (-div A(grad u) + grad p) . v`` including line sources
for pressure jumps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Protocol, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh
from .nfunction import NFunctionRE, tensor_norm
from .quadrature import composite_plan, edge_rule, triangle_rule
from .smoother import SmootherOperator, NZ
from .spaces import (
    broken_gradient,
    cr_element_dofs,
    cr_space,
    face_means,
    symmetric_part,
)


class Method(IntEnum):
    GRAD_SMOOTHED = 1
    SYMGRAD_SMOOTHED = 2
    GRAD_PLAIN = 3

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, Method):
            return value
        if isinstance(value, str):
            key = value.strip().upper().replace("-", "_")
            if key in cls.__members__:
                return cls[key]
            value = int(key)
        return cls(int(value))

    @property
    def smoothed_load(self) -> bool:
        return self is not Method.GRAD_PLAIN

    @property
    def symmetric(self) -> bool:
        return self is Method.SYMGRAD_SMOOTHED


class ExactSolution(Protocol):
    """What the load assembly needs to know about a manufactured solution."""

    singular_points: Sequence
    cut_lines: Sequence[float]

    def u(self, x): ...

    def grad_u(self, x): ...

    def p(self, x): ...

    def f_smooth(self, nf: NFunctionRE, x): ...

    def pressure_jumps(self) -> Sequence[tuple[float, float]]: ...


@dataclass
class QuadratureConfig:
    degree: int = 8
    grading_levels: int = 12


@dataclass
class SaddleSystem:
    """Linearized problem on the free velocity dofs.

    ``A`` is a matrix or LinearOperator, ``B`` the pressure rows restricted
    to free dofs.  The equations are ``A u - B^T p = f`` and ``-B u = -g``.
    ``pressure_mass`` holds |K| / a_K for the pressure preconditioner and
    ``precond_matrix`` an SPD matrix spectrally close to ``A``.
    """

    A: object
    B: sp.csr_matrix
    f: np.ndarray
    g: np.ndarray
    pressure_mass: np.ndarray | None = None
    precond_matrix: sp.csr_matrix | None = None
    gauge: bool = True


def _coo(rows, cols, vals, shape):
    return sp.csr_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape)


def broken_gradient_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Sparse map CR coefficients -> broken gradients, rows ``4K + 2c + d``."""
    M = mesh.n_elements
    dofs = cr_element_dofs(mesh)                   # (M, 3, 2)
    g = -2.0 * mesh.grad_lambda                     # (M, 3, 2)
    rows, cols, vals = [], [], []
    for c in range(2):
        for d in range(2):
            for i in range(3):
                rows.append(4 * np.arange(M) + 2 * c + d)
                cols.append(dofs[:, i, c])
                vals.append(g[:, i, d])
    return _coo(rows, cols, vals, (4 * M, 2 * mesh.n_faces))


def assemble_constraint(mesh: Mesh) -> sp.csr_matrix:
    """B[K, j] = int_K div_h phi_j, shape (M, 2L)."""
    M = mesh.n_elements
    dofs = cr_element_dofs(mesh)
    g = -2.0 * mesh.grad_lambda * mesh.areas[:, None, None]
    rows = np.repeat(np.arange(M), 6)
    cols = dofs.reshape(M, 6)
    vals = np.stack([g[:, :, 0], g[:, :, 1]], axis=2).reshape(M, 6)
    B = _coo(rows, cols, vals, (M, 2 * mesh.n_faces))
    B.eliminate_zeros()
    return B


def assemble_broken_stiffness(mesh: Mesh, weight, Gh=None) -> sp.csr_matrix:
    """sum_K a_K |K| grad_h u : grad_h v over all CR dofs."""
    Gh = broken_gradient_matrix(mesh) if Gh is None else Gh
    a = np.broadcast_to(np.asarray(weight, float), (mesh.n_elements,))
    D = sp.diags(np.repeat(a * mesh.areas, 4))
    A = (Gh.T @ D @ Gh).tocsr()
    A.sum_duplicates()
    A.eliminate_zeros()
    return A


def child_rule(degree: int = 6):
    """Child quadrature: barycentrics (Q, 3) and weights summing to one."""
    rule = triangle_rule(degree)
    return rule.points, 2.0 * rule.weights


class Discretization:
    """Mesh-level data for one method: spaces, constraint, smoother, and
    the point sets on which the method evaluates its strain.

    Parameters
    ----------
    mesh : Mesh
    method : Method or int
    smoother : SmootherOperator, optional
        Built on demand when the method needs it.
    child_degree : int
        Quadrature degree per Alfeld child for the Method 2 forms.
    """

    def __init__(self, mesh: Mesh, method, smoother: SmootherOperator | None = None, child_degree: int = 6):
        self.mesh = mesh
        self.method = Method.parse(method)
        self.space = cr_space(mesh)
        n = self.space.dof_count
        self.n_dofs = n
        self.fixed = self.space.boundary_dofs
        mask = np.ones(n, dtype=bool)
        mask[self.fixed] = False
        self.free = np.flatnonzero(mask)
        self.Gh = broken_gradient_matrix(mesh)
        self.B_full = assemble_constraint(mesh)
        self.B = self.B_full[:, self.free].tocsr()
        self._smoother = smoother
        self._bbt = None
        self.child_mu, self.child_w = child_rule(child_degree)

    @property
    def smoother(self) -> SmootherOperator:
        if self._smoother is None:
            self._smoother = SmootherOperator(self.mesh)
        return self._smoother

    def constraint_rhs(self, lift) -> np.ndarray:
        """g with ``B u_free = g`` for fields carrying the boundary values
        of ``lift`` (made mean free, like the constant pressure gauge)."""
        g = -(self.B_full[:, self.fixed] @ lift[self.fixed])
        return g - g.mean()

    def project_feasible(self, u, lift) -> np.ndarray:
        """Minimal Euclidean correction of the free dofs of ``u`` such that
        ``B u_free = g`` holds to roundoff.

        B B^T is singular only on constant pressures; the first element is
        grounded and the residual is mean free, so the dropped row holds too.
        """
        if self._bbt is None:
            BBt = (self.B @ self.B.T).tocsc()
            self._bbt = spla.splu(BBt[1:, 1:])
        u = np.array(u, float)
        res = self.constraint_rhs(lift) - self.B @ u[self.free]
        res -= res.mean()
        y = np.zeros(self.mesh.n_elements)
        y[1:] = self._bbt.solve(res[1:])
        u[self.free] += self.B.T @ y
        return u

    # strain evaluation ------------------------------------------------------
    def point_weights(self) -> np.ndarray:
        """Quadrature weights matching :meth:`strain`."""
        if self.method.symmetric:
            ca = self.smoother.alfeld.child_areas
            return (ca[:, :, None] * self.child_w[None, None, :]).ravel()
        return self.mesh.areas.copy()

    def strain(self, u) -> np.ndarray:
        """The method's strain D~u at its evaluation points, shape (P, 2, 2).

        Methods 1 and 3: broken gradient, one point per element.
        Method 2: symmetric gradient of E u at child quadrature points.
        """
        if self.method.symmetric:
            G = self.smoother.nodal_gradients(u)
            Gq = np.einsum("qn,kcnij->kcqij", self.child_mu, symmetric_part(G))
            return Gq.reshape(-1, 2, 2)
        return broken_gradient(self.mesh, u)

    def strain_direction(self, du) -> np.ndarray:
        return self.strain(du)

    # operators ----------------------------------------------------------------
    def _block_matrices(self, a_points):
        """Per-element 12x12 blocks of int a D(Eu):D(Ev)."""
        op = self.smoother
        M = self.mesh.n_elements
        a = np.asarray(a_points, float).reshape(M, 3, -1)
        wq = op.alfeld.child_areas[:, :, None] * self.child_w[None, None, :] * a
        S = np.einsum("kcq,qn,qm->kcnm", wq, self.child_mu, self.child_mu)
        Gs = symmetric_part(np.moveaxis(op.G, -1, 3))        # (M,3,3,12,2,2)
        Gs = np.moveaxis(Gs, 3, -1)                           # (M,3,3,2,2,12)
        tmp = np.einsum("kcnm,kcmijy->kcnijy", S, Gs)
        return np.einsum("kcnijz,kcnijy->kzy", Gs, tmp)

    def stiffness(self, a_points):
        """Full (2L x 2L) linearized viscous operator with weight ``a``.

        Methods 1/3: sparse matrix.  Method 2: :class:`SmoothedOperator`.
        """
        if self.method.symmetric:
            return SmoothedOperator(self.smoother.Z, self._block_matrices(a_points))
        return assemble_broken_stiffness(self.mesh, a_points, self.Gh)

    def element_mean_weight(self, a_points) -> np.ndarray:
        if self.method.symmetric:
            a = np.asarray(a_points, float).reshape(self.mesh.n_elements, -1)
            w = self.point_weights().reshape(self.mesh.n_elements, -1)
            return (a * w).sum(axis=1) / w.sum(axis=1)
        return np.asarray(a_points, float)

    def stress_action(self, stress) -> np.ndarray:
        """Vector  int stress : D~phi_j  over all CR dofs for a tensor field
        given at the strain points (P, 2, 2)."""
        stress = np.asarray(stress, float)
        if self.method.symmetric:
            op = self.smoother
            M = self.mesh.n_elements
            w = self.point_weights().reshape(M, 3, -1)
            s = symmetric_part(stress).reshape(M, 3, -1, 2, 2) * w[..., None, None]
            mom = np.einsum("kcqij,qn->kcnij", s, self.child_mu)
            return op.Z.T @ np.einsum("kcnij,kcnijz->kz", mom, op.G).ravel()
        s = stress * self.mesh.areas[:, None, None]
        return self.Gh.T @ s.reshape(-1)

    # loads ----------------------------------------------------------------------
    def load(self, exact: ExactSolution, nf: NFunctionRE, quad: QuadratureConfig | None = None) -> np.ndarray:
        """Load vector over all CR dofs (boundary entries are unused)."""
        quad = quad or QuadratureConfig()
        if self.method.smoothed_load:
            return weak_load(self, exact, nf, quad)
        return strong_load(self.mesh, exact, nf, quad)

    def lifting(self, exact: ExactSolution, quad: QuadratureConfig | None = None) -> np.ndarray:
        quad = quad or QuadratureConfig()
        return dirichlet_lifting(self.mesh, exact.u, quad, exact.singular_points)


class SmoothedOperator(spla.LinearOperator):
    """x -> Z^T K Z x with K block diagonal (12 x 12 per element)."""

    def __init__(self, Z, blocks):
        self.Z = Z
        self.blocks = blocks
        self.ZT = Z.T.tocsr()
        n = Z.shape[1]
        super().__init__(dtype=float, shape=(n, n))

    def _matvec(self, x):
        z = (self.Z @ np.ravel(x)).reshape(-1, NZ)
        return self.ZT @ np.einsum("kzy,ky->kz", self.blocks, z).ravel()

    def _rmatvec(self, x):
        return self._matvec(x)

    def diagonal(self) -> np.ndarray:
        Kb = _block_diag(self.blocks)
        return np.asarray(self.Z.multiply(Kb @ self.Z).sum(axis=0)).ravel()

    def tocsr(self) -> sp.csr_matrix:
        Kb = _block_diag(self.blocks)
        A = (self.ZT @ Kb @ self.Z).tocsr()
        A.sum_duplicates()
        return A

    def restrict(self, rows, cols):
        return _Restricted(self, rows, cols)


class _Restricted(spla.LinearOperator):
    def __init__(self, op: SmoothedOperator, rows, cols):
        self.op = op
        self.rows = np.asarray(rows)
        self.cols = np.asarray(cols)
        self.Zc = op.Z[:, self.cols].tocsr()
        self.ZrT = op.Z[:, self.rows].T.tocsr()
        super().__init__(dtype=float, shape=(len(self.rows), len(self.cols)))

    def _matvec(self, x):
        z = (self.Zc @ np.ravel(x)).reshape(-1, NZ)
        return self.ZrT @ np.einsum("kzy,ky->kz", self.op.blocks, z).ravel()

    def _rmatvec(self, x):
        z = (self.ZrT.T @ np.ravel(x)).reshape(-1, NZ)
        return self.Zc.T @ np.einsum("kyz,ky->kz", self.op.blocks, z).ravel()

    def tocsr(self):
        Kb = _block_diag(self.op.blocks)
        return (self.ZrT @ Kb @ self.Zc).tocsr()

    def diagonal(self):
        Kb = _block_diag(self.op.blocks)
        return np.asarray(self.Zc.multiply(Kb @ self.Zc).sum(axis=0)).ravel()


def _block_diag(blocks):
    M, n, _ = blocks.shape
    r = (np.arange(M)[:, None, None] * n + np.arange(n)[None, :, None]).repeat(n, axis=2)
    c = (np.arange(M)[:, None, None] * n + np.arange(n)[None, None, :]).repeat(n, axis=1)
    return sp.csr_matrix((blocks.ravel(), (r.ravel(), c.ravel())), shape=(M * n, M * n))


def restrict(A, rows, cols):
    if isinstance(A, SmoothedOperator):
        return A.restrict(rows, cols)
    return A[rows][:, cols].tocsr()


# loads ------------------------------------------------------------------------

def _stress_function(exact: ExactSolution, nf: NFunctionRE, symmetric: bool) -> Callable:
    def T(x):
        G = exact.grad_u(x)
        D = symmetric_part(G) if symmetric else G
        S = nf.A(D)
        p = exact.p(x)
        S = S - p[:, None, None] * np.eye(2)
        return S
    return T


def weak_load(disc: Discretization, exact: ExactSolution, nf: NFunctionRE, quad: QuadratureConfig) -> np.ndarray:
    """F_j = sum_K int_K (A(D u) - p I) : grad E phi_j, exact child by child."""
    op = disc.smoother
    M = disc.mesh.n_elements
    children = op.alfeld.children.reshape(-1, 3, 2)
    plan = composite_plan(children, quad.degree, exact.singular_points, quad.grading_levels, tuple(exact.cut_lines))
    T = _stress_function(exact, nf, disc.method.symmetric)(plan.points)
    mom = np.stack([plan.integrate(plan.bary[:, n, None, None] * T) for n in range(3)], axis=1)
    mom = mom.reshape(M, 3, 3, 2, 2)
    return op.Z.T @ np.einsum("kcnij,kcnijz->kz", mom, op.G).ravel()


def weak_load_components(disc: Discretization, exact: ExactSolution, nf: NFunctionRE, quad: QuadratureConfig):
    """Viscous and pressure parts of :func:`weak_load` separately."""
    zero_p = _ZeroPressure(exact)
    visc = weak_load(disc, zero_p, nf, quad)
    return visc, weak_load(disc, exact, nf, quad) - visc


class _ZeroPressure:
    def __init__(self, exact):
        self._e = exact
        self.singular_points = exact.singular_points
        self.cut_lines = exact.cut_lines

    def grad_u(self, x):
        return self._e.grad_u(x)

    def p(self, x):
        return np.zeros(len(x))


def strong_load(mesh: Mesh, exact: ExactSolution, nf: NFunctionRE, quad: QuadratureConfig) -> np.ndarray:
    """F_j = int f . phi_j for broken CR basis functions, with f the strong
    momentum source plus line sources from pressure jumps."""
    M = mesh.n_elements
    dofs = cr_element_dofs(mesh)
    plan = composite_plan(mesh.coords, quad.degree, exact.singular_points, quad.grading_levels)
    f = np.asarray(exact.f_smooth(nf, plan.points), float)     # (P, 2)
    basis = 1.0 - 2.0 * plan.bary                                 # (P, 3)
    loc = plan.integrate(basis[:, :, None] * f[:, None, :])      # (M, 3, 2)
    F = np.zeros(2 * mesh.n_faces)
    np.add.at(F, dofs.ravel(), loc.ravel())
    for c, jump in exact.pressure_jumps():
        F += vertical_line_load(mesh, c, np.array([jump, 0.0]), quad.degree)
    return F


def vertical_line_load(mesh: Mesh, c: float, density, degree: int = 8) -> np.ndarray:
    """int_{x_1 = c} density . phi_j ds for broken CR basis functions."""
    x = mesh.coords
    lo, hi = x[:, :, 0].min(axis=1), x[:, :, 0].max(axis=1)
    cut = np.flatnonzero((lo < c) & (hi > c))
    rule = edge_rule(degree)
    dofs = cr_element_dofs(mesh)
    F = np.zeros(2 * mesh.n_faces)
    for K in cut:
        tri = x[K]
        ys = []
        for i in range(3):
            p, q = tri[i], tri[(i + 1) % 3]
            if (p[0] - c) * (q[0] - c) < 0:
                t = (c - p[0]) / (q[0] - p[0])
                ys.append(p[1] + t * (q[1] - p[1]))
            elif p[0] == c:
                ys.append(p[1])
        y0, y1 = min(ys), max(ys)
        pts = np.column_stack([np.full(len(rule), c), y0 + (y1 - y0) * rule.points[:, 1]])
        w = rule.weights * (y1 - y0)
        from .quadrature import barycentric
        lam = barycentric(np.broadcast_to(tri, (len(pts), 3, 2)), pts)
        basis = w @ (1.0 - 2.0 * lam)                            # (3,)
        for i in range(3):
            for comp in range(2):
                F[dofs[K, i, comp]] += basis[i] * density[comp]
    return F


def dirichlet_lifting(mesh: Mesh, g: Callable, quad: QuadratureConfig, singular_points=()) -> np.ndarray:
    """CR vector with boundary dofs equal to face means of ``g``, zero elsewhere."""
    u = np.zeros(2 * mesh.n_faces)
    bf = mesh.topology.boundary_faces
    if len(bf):
        fm = face_means(mesh, g, quad.degree, singular_points, quad.grading_levels, faces=bf)
        u[2 * bf] = fm[:, 0]
        u[2 * bf + 1] = fm[:, 1]
    return u


def apply_dirichlet(disc: Discretization, A_full, f_full, lift) -> SaddleSystem:
    """Eliminate the fixed dofs of a linear problem with stiffness ``A_full``."""
    free, fixed = disc.free, disc.fixed
    A = restrict(A_full, free, free)
    Ab = restrict(A_full, free, fixed)
    f = f_full[free] - Ab @ lift[fixed]
    return SaddleSystem(A=A, B=disc.B, f=f, g=disc.constraint_rhs(lift))


# nonlinear forms ----------------------------------------------------------------

def kacanov_weight(nf: NFunctionRE, strain, lower=0.0, upper=np.inf) -> np.ndarray:
    """a = phi'(m)/m with m = clamp(|strain|, lower, upper)."""
    m = np.clip(tensor_norm(strain), lower, upper)
    return nf.weight(m)


def nonlinear_residual(disc: Discretization, nf: NFunctionRE, u, p, load) -> tuple[np.ndarray, np.ndarray]:
    """(velocity residual on free dofs, constraint residual).

    Velocity: F - int A(D~u):D~phi + int p div_h phi.  Constraint: B u.
    """
    S = nf.A(disc.strain(u))
    r = load - disc.stress_action(S) + disc.B_full.T @ p
    return r[disc.free], disc.B_full @ u


def export_coo(A, path) -> None:
    """Write a sparse matrix as ``row col value`` lines."""
    C = sp.coo_matrix(A)
    with open(path, "w") as fh:
        for i, j, v in zip(C.row.tolist(), C.col.tolist(), C.data.tolist()):
            fh.write(f"{i} {j} {v!r}\n")
