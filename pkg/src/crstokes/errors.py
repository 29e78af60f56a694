"""Error functionals and diagnostics.

All integrals over elements touching a declared singular point use graded
composite quadrature; elements cut by a declared vertical line are split
exactly along it.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla

from .assembly import QuadratureConfig, assemble_broken_stiffness, assemble_constraint
from .mesh import Mesh, neighborhoods, touching_faces
from .nfunction import NFunctionRE, Shifted, tensor_norm
from .quadrature import composite_plan, edge_rule
from .smoother import SmootherOperator
from .spaces import broken_gradient, cr_space, face_trace_values, symmetric_part


class UndefinedValueError(ValueError):
    """Raised for EOC inputs that are not positive."""


@dataclass
class ErrorBundle:
    """Errors on one mesh level."""

    err_F_broken: float
    err_F_smoothed: float
    err_p: float
    jump_J: float
    dofs: int
    h_max: float

    def to_dict(self) -> dict:
        return asdict(self)


def _plan(tris, quad: QuadratureConfig, singular_points=(), cut_lines=()):
    return composite_plan(tris, quad.degree, tuple(singular_points), quad.grading_levels, tuple(cut_lines))


def f_distance_error(
    nf: NFunctionRE,
    grad_exact: Callable,
    mesh: Mesh,
    u,
    *,
    smoothed: bool = False,
    symmetric: bool = False,
    smoother: SmootherOperator | None = None,
    quad: QuadratureConfig | None = None,
    singular_points=(),
) -> float:
    """||F(D u) - F(D u_h)||_2 in the natural distance.

    Parameters
    ----------
    grad_exact : callable
        (n, 2) points -> (n, 2, 2) exact velocity gradient.
    u : array_like
        CR coefficient vector.
    smoothed : bool
        Use grad E u_h (piecewise P1 on the Alfeld children) instead of the
        broken gradient.
    symmetric : bool
        Compare symmetric parts.
    """
    quad = quad or QuadratureConfig()
    u = np.asarray(u, float)
    if smoothed:
        op = smoother if smoother is not None else SmootherOperator(mesh)
        children = op.alfeld.children.reshape(-1, 3, 2)
        plan = _plan(children, quad, singular_points)
        nodal = op.nodal_gradients(u).reshape(-1, 3, 2, 2)
        Gh = np.einsum("pn,pnij->pij", plan.bary, nodal[plan.owner])
    else:
        plan = _plan(mesh.coords, quad, singular_points)
        Gh = broken_gradient(mesh, u)[plan.owner]
    G = np.asarray(grad_exact(plan.points), float)
    if symmetric:
        G, Gh = symmetric_part(G), symmetric_part(Gh)
    d = nf.F(G) - nf.F(Gh)
    return math.sqrt(max(float(plan.weights @ np.einsum("pij,pij->p", d, d)), 0.0))


def pressure_error(
    r_conj: float,
    p_exact: Callable,
    mesh: Mesh,
    p_h,
    quad: QuadratureConfig | None = None,
    singular_points=(),
    cut_lines=(),
) -> float:
    """(sum_K int_K |p - p_h|^{r'})^{1/r'} for element-wise constant p_h."""
    quad = quad or QuadratureConfig()
    plan = _plan(mesh.coords, quad, singular_points, cut_lines)
    p = np.asarray(p_exact(plan.points), float)
    if cut_lines:
        # evaluate a jump exactly on its own side of the line
        c = cut_lines[0]
        on = np.abs(plan.points[:, 0] - c) < 1e-14
        if np.any(on):
            shifted = plan.points[on].copy()
            shifted[:, 0] += plan.side[on] * 1e-12
            p[on] = p_exact(shifted)
    diff = np.abs(p - np.asarray(p_h, float)[plan.owner])
    return float(plan.weights @ diff**r_conj) ** (1.0 / r_conj)


def jump_functional(
    nf: NFunctionRE,
    mesh: Mesh,
    u,
    degree: int = 8,
    symmetric: bool = True,
    boundary_data: Callable | None = None,
) -> float:
    """sum_K sum_{F touching K} int_F h_F phi_{|D_h u|_K|}(|[u]_F| / h_F).

    On boundary faces the jump is the trace, or the trace minus
    ``boundary_data`` when that callable is given.  ``symmetric=False``
    shifts with the broken gradient instead of its symmetric part.
    """
    u = np.asarray(u, float)
    rule = edge_rule(degree)
    s = rule.points[:, 1]
    left, right = face_trace_values(mesh, u, s)
    bd = np.isnan(right[:, 0, 0])
    jump = np.where(np.isnan(right), left, left - right)          # (L, Q, 2)
    if boundary_data is not None and np.any(bd):
        a, b = mesh.vertices[mesh.topology.faces[bd, 0]], mesh.vertices[mesh.topology.faces[bd, 1]]
        pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
        g = np.asarray(boundary_data(pts.reshape(-1, 2)), float).reshape(pts.shape)
        jump[bd] -= g
    jn = np.linalg.norm(jump, axis=-1)
    h = mesh.face_lengths
    G = broken_gradient(mesh, u)
    shift = tensor_norm(symmetric_part(G) if symmetric else G)    # (M,)
    T = touching_faces(mesh).tocoo()
    K, F = T.row, T.col
    vals = Shifted(nf, shift[K][:, None]).value(jn[F] / h[F][:, None])
    return float(np.sum(h[F] ** 2 * (vals @ rule.weights)))


def local_best_error_oracle(
    nf: NFunctionRE,
    grad_exact: Callable,
    mesh: Mesh,
    symmetric: bool = False,
    quad: QuadratureConfig | None = None,
    singular_points=(),
) -> float:
    """sum_K ||F(D u) - <F(D u)>_{omega_K}||^2_{2, omega_K}.

    ``omega_K`` is the patch of elements sharing a vertex with ``K``; the
    patch mean is the L^2 best constant on the patch.  Returns the squared
    quantity.
    """
    quad = quad or QuadratureConfig()
    plan = _plan(mesh.coords, quad, singular_points)
    G = np.asarray(grad_exact(plan.points), float)
    if symmetric:
        G = symmetric_part(G)
    Fv = nf.F(G)
    I1 = plan.integrate(Fv)                                          # (M, 2, 2)
    I2 = plan.integrate(np.einsum("pij,pij->p", Fv, Fv))             # (M,)
    nb = neighborhoods(mesh)
    seg = nb.indptr[:-1]
    area = np.add.reduceat(mesh.areas[nb.indices], seg)
    s1 = np.add.reduceat(I1[nb.indices], seg, axis=0)
    s2 = np.add.reduceat(I2[nb.indices], seg)
    dev = s2 - np.einsum("kij,kij->k", s1, s1) / area
    return float(np.sum(np.maximum(dev, 0.0)))


def eoc(e_prev: float, e_curr: float) -> float:
    """log2(e_prev / e_curr)."""
    if not (e_prev > 0 and e_curr > 0) or not (math.isfinite(e_prev) and math.isfinite(e_curr)):
        raise UndefinedValueError(f"EOC needs positive errors, got {e_prev!r}, {e_curr!r}")
    return math.log(e_prev / e_curr) / math.log(2.0)


def discrete_infsup_r2(mesh: Mesh, max_level: int = 3) -> float:
    """Discrete inf-sup constant of (CR_0, P0_0) in the Hilbert case.

    Smallest generalised singular value of B with respect to the broken H^1
    seminorm on CR_0 and the L^2 norm on zero-mean pressures, from a dense
    eigenproblem.  Refuses meshes above ``max_level``.
    """
    if mesh.level > max_level:
        raise ValueError(f"discrete_infsup_r2 is limited to level <= {max_level} (got {mesh.level})")
    space = cr_space(mesh)
    free = np.setdiff1d(np.arange(space.dof_count), space.boundary_dofs)
    A = assemble_broken_stiffness(mesh, np.ones(mesh.n_elements))[free][:, free].toarray()
    B = assemble_constraint(mesh)[:, free].toarray()
    S = B @ np.linalg.solve(A, B.T)
    V = sla.null_space(mesh.areas[None, :])                          # zero-mean basis
    Mp = V.T @ (mesh.areas[:, None] * V)
    lam = sla.eigh(V.T @ S @ V, Mp, eigvals_only=True)
    return float(math.sqrt(max(lam[0], 0.0)))
