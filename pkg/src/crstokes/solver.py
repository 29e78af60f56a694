"""Linear saddle-point solves and the relaxed Kacanov iteration.

The linearized problems read

    [ A   -B^T ] [u]   [ f]
    [-B    0   ] [p] = [-g]

and are solved with preconditioned MINRES.  The preconditioner is block
diagonal: an exact sparse factorization of a broken CR stiffness with
element-mean weights for the velocity block (this is ``A`` itself for
Methods 1 and 3) and the weighted pressure mass ``|K| / a_K`` for the
pressure block, with constants projected out.  A direct bordered
factorization is available as an oracle on small meshes.

The nonlinear problem is the Euler-Lagrange equation of the convex energy
``int phi(|D~u|) - <f, u>``.  The relaxed Kacanov iteration clamps
``|D~u|`` to an interval ``[eps_minus, eps_plus]`` in the weight
``phi'(m)/m``, minimizes the relaxed energy along the Kacanov step by an
exact line search, and widens the interval whenever the energy
decrement falls below ``theta`` times the relaxation gap.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from .assembly import (
    Discretization,
    SaddleSystem,
    apply_dirichlet,
    assemble_broken_stiffness,
    kacanov_weight,
)
from .mesh import Mesh
from .nfunction import NFunctionRE, tensor_norm
from .spaces import cr_evaluate
from .quadrature import barycentric


class SolverError(RuntimeError):
    """Raised on Krylov breakdown or outer non-convergence.

    ``best`` holds the last iterate (tuple of arrays) and ``log`` the
    iteration history when available.
    """

    def __init__(self, message, best=None, residual=None, log=None):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.log = log or []


@dataclass
class SolverConfig:
    tol_nonlinear: float = 1e-8
    max_outer: int = 200
    tol_linear: float = 1e-10
    max_inner: int = 5000
    shrink: float = 2.0
    theta: float = 0.5
    interval: tuple[float, float] = (1.0, 1.0)
    linear_solver: str = "minres"          # or "direct"
    preconditioner: str = "factorized"     # or "jacobi"

    def __post_init__(self):
        if self.tol_nonlinear <= 0 or self.tol_linear <= 0:
            raise ValueError("tolerances must be positive")
        if self.shrink <= 1:
            raise ValueError("shrink factor must exceed 1")
        lo, hi = self.interval
        if not 0 < lo <= hi:
            raise ValueError("relaxation interval must satisfy 0 < lower <= upper")
        if self.linear_solver not in ("minres", "direct"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")
        if self.preconditioner not in ("factorized", "jacobi"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class LinearStats:
    solver: str
    iterations: int
    residual: float


# linear saddle problems -------------------------------------------------------------

def _as_matrix(A):
    return A if sp.issparse(A) else A.tocsr()


def _velocity_preconditioner(system: SaddleSystem, kind: str):
    if kind == "jacobi":
        d = system.A.diagonal() if not sp.issparse(system.A) else system.A.diagonal()
        inv = 1.0 / d
        return lambda r: inv * r
    P = system.precond_matrix if system.precond_matrix is not None else _as_matrix(system.A)
    lu = spla.splu(sp.csc_matrix(P))
    return lu.solve


def _saddle_operator(system: SaddleSystem):
    A, B = system.A, system.B
    n, m = B.shape[1], B.shape[0]

    def mv(x):
        u, p = x[:n], x[n:]
        return np.concatenate([A @ u - B.T @ p, -(B @ u)])

    return spla.LinearOperator((n + m, n + m), matvec=mv, rmatvec=mv, dtype=float)


def solve_linear_saddle(system: SaddleSystem, config: SolverConfig | None = None, x0=None):
    """Solve one linearized saddle system.

    Returns ``(u, p, stats)`` on the free velocity dofs.  The pressure is
    fixed up to constants by the system; it is returned with zero
    arithmetic mean over elements, and
    callers normalise to the gauge they need.
    """
    config = config or SolverConfig()
    if config.linear_solver == "direct":
        return _solve_direct(system)
    n, m = system.B.shape[1], system.B.shape[0]
    K = _saddle_operator(system)
    b = np.concatenate([system.f, -system.g])
    vel = _velocity_preconditioner(system, config.preconditioner)
    pm = system.pressure_mass if system.pressure_mass is not None else np.ones(m)
    pinv = 1.0 / pm

    def prec(r):
        ru, rp = r[:n], r[n:]
        rp = rp - rp.mean()
        yp = pinv * rp
        yp -= yp.mean()
        return np.concatenate([vel(ru), yp])

    P = spla.LinearOperator(K.shape, matvec=prec, rmatvec=prec, dtype=float)
    count = [0]

    def cb(_):
        count[0] += 1

    bnorm = max(np.linalg.norm(b), 1e-300)
    rtol = config.tol_linear
    # MINRES stops on the preconditioned residual; restart from the iterate
    # until the true relative residual meets the tolerance
    for _ in range(6):
        x, info = spla.minres(K, b, x0=x0, rtol=rtol, maxiter=config.max_inner, M=P, callback=cb)
        res = float(np.linalg.norm(K @ x - b) / bnorm)
        if info != 0 or not np.all(np.isfinite(x)) or res <= config.tol_linear:
            break
        x0, rtol = x, rtol * max(config.tol_linear / res, 1e-3)
    if info != 0 or not np.all(np.isfinite(x)):
        raise SolverError(f"MINRES failed (info={info}, residual={res:.3e})", best=(x[:n], x[n:]), residual=res)
    p = x[n:] - x[n:].mean()
    return x[:n], p, LinearStats("minres", count[0], res)


def _solve_direct(system: SaddleSystem):
    A = _as_matrix(system.A)
    B = system.B
    n, m = B.shape[1], B.shape[0]
    e = np.ones((m, 1))
    K = sp.bmat([
        [A, -B.T, None],
        [-B, None, sp.csr_matrix(e)],
        [None, sp.csr_matrix(e.T), None],
    ], format="csc")
    b = np.concatenate([system.f, -system.g, [0.0]])
    x = spla.splu(K).solve(b)
    res = float(np.linalg.norm(K @ x - b) / max(np.linalg.norm(b), 1e-300))
    return x[:n], x[n:n + m], LinearStats("direct", 1, res)


# energies ----------------------------------------------------------------------------

def relaxed_phi(nf: NFunctionRE, t, lower, upper):
    """phi with quadratic continuation outside [lower, upper] (C^1, convex)."""
    t = np.asarray(t, float)
    out = nf.value(np.clip(t, lower, upper))
    lo = t < lower
    hi = t > upper
    if np.any(lo):
        out = np.where(lo, nf.value(lower) + 0.5 * nf.weight(lower) * (t**2 - lower**2), out)
    if np.any(hi):
        out = np.where(hi, nf.value(upper) + 0.5 * nf.weight(upper) * (t**2 - upper**2), out)
    return out


def energy(disc: Discretization, nf: NFunctionRE, u, load, interval=None) -> float:
    """int phi(|D~u|) - <f, u>  (relaxed phi when ``interval`` is given).

    The load acts on the free dofs only; the boundary values are data.
    """
    S = tensor_norm(disc.strain(u))
    w = disc.point_weights()
    vals = nf.value(S) if interval is None else relaxed_phi(nf, S, *interval)
    return float(w @ vals - load[disc.free] @ np.asarray(u)[disc.free])


# relaxed Kacanov -------------------------------------------------------------------

@dataclass
class KacanovLogEntry:
    outer: int
    eps_minus: float
    eps_plus: float
    energy_before: float
    energy_after: float
    step: float
    increment: float
    gap: float
    inner_iterations: int


@dataclass
class KacanovState:
    u: np.ndarray
    p: np.ndarray
    interval: tuple[float, float]
    energy: float
    log: list = field(default_factory=list)
    converged: bool = False

    @property
    def outer_iterations(self) -> int:
        return len(self.log)

    @property
    def inner_iterations(self) -> int:
        return int(sum(e.inner_iterations for e in self.log))

    def log_rows(self):
        return [asdict(e) for e in self.log]

    def log_csv(self) -> str:
        rows = self.log_rows()
        if not rows:
            return ""
        keys = list(rows[0])
        lines = [",".join(keys)] + [",".join(repr(r[k]) for k in keys) for r in rows]
        return "\n".join(lines) + "\n"


def linearized_system(disc: Discretization, nf: NFunctionRE, u, load, lift, interval) -> SaddleSystem:
    """Kacanov system at ``u`` with the clamped weight."""
    S = disc.strain(u)
    a = kacanov_weight(nf, S, *interval)
    A_full = disc.stiffness(a)
    system = apply_dirichlet(disc, A_full, load, lift)
    abar = disc.element_mean_weight(a)
    system.pressure_mass = disc.mesh.areas / abar
    if disc.method.symmetric:
        P = assemble_broken_stiffness(disc.mesh, abar, disc.Gh)
        system.precond_matrix = P[disc.free][:, disc.free].tocsc()
    return system


def _line_search(disc, nf, u, d, load, interval, constraint_slope=0.0):
    """Minimizer t >= 0 of the relaxed energy along u + t d.

    ``constraint_slope`` is p . B d for the multiplier of the linear solve.
    In exact arithmetic B d = 0; subtracting the term (i.e. searching on the
    Lagrangian) keeps the residual divergence of an inexact inner solve from
    flipping the sign of the slope near convergence.
    """
    S0 = disc.strain(u)
    D = disc.strain(d)
    w = disc.point_weights()
    lin = load[disc.free] @ d[disc.free] + constraint_slope

    def slope(t):
        St = S0 + t * D
        a = kacanov_weight(nf, St, *interval)
        return float(w @ (a * np.einsum("pij,pij->p", St, D)) - lin)

    if slope(0.0) >= 0.0:
        # only possible through an inexact inner solve; the plain step
        # still decreases the energy up to that tolerance
        return 1.0
    hi = 1.0
    while slope(hi) < 0.0 and hi < 1024.0:
        hi *= 2.0
    if slope(hi) < 0.0:
        return hi
    return brentq(slope, 0.0, hi, xtol=1e-14, rtol=1e-12)


def _f_norm(disc, nf, S):
    return float(np.sqrt(disc.point_weights() @ np.sum(nf.F(S) ** 2, axis=(1, 2))))


def relaxed_kacanov(
    disc: Discretization,
    nf: NFunctionRE,
    load,
    lift,
    config: SolverConfig | None = None,
    u0=None,
    interval=None,
) -> KacanovState:
    """Solve the nonlinear discrete problem.

    Parameters
    ----------
    disc : Discretization
    nf : NFunctionRE
    load : ndarray
        Load vector over all CR dofs.
    lift : ndarray
        CR vector carrying the Dirichlet values on the boundary dofs.
    u0 : ndarray, optional
        Initial guess (boundary entries are overwritten by ``lift``).
        Defaults to the solution of the problem with unit weight.
    interval : tuple, optional
        Initial relaxation interval (defaults to ``config.interval``).
    """
    config = config or SolverConfig()
    lo, hi = interval or config.interval
    log: list[KacanovLogEntry] = []
    fixed = disc.fixed
    quadratic = nf.r == 2.0

    def full(uf):
        u = lift.copy()
        u[disc.free] = uf
        return u

    # all iterates are kept on the constraint set to roundoff, so the energy
    # decreases along the iteration and is not offset by p . B d terms
    if u0 is None:
        system = linearized_system(disc, NFunctionRE(2.0, 0.0), lift, load, lift, (1.0, 1.0))
        uf, p, st = solve_linear_saddle(system, config)
        u = disc.project_feasible(full(uf), lift)
        if quadratic:
            E0 = energy(disc, nf, disc.project_feasible(lift, lift), load)
            log.append(KacanovLogEntry(1, lo, hi, E0, energy(disc, nf, u, load), 1.0, 0.0, 0.0, st.iterations))
            return KacanovState(u, p, (lo, hi), log[-1].energy_after, log, True)
    else:
        u = np.array(u0, float)
        u[fixed] = lift[fixed]
        u = disc.project_feasible(u, lift)
    p = np.zeros(disc.mesh.n_elements)
    x_prev = None

    for outer in range(1, config.max_outer + 1):
        system = linearized_system(disc, nf, u, load, lift, (lo, hi))
        uf, p_new, st = solve_linear_saddle(system, config, x0=x_prev)
        u_new = disc.project_feasible(full(uf), lift)
        d = u_new - u
        E0 = energy(disc, nf, u, load, (lo, hi))
        t = 1.0 if quadratic else _line_search(
            disc, nf, u, d, load, (lo, hi), float(p_new @ (system.B @ d[disc.free])))
        S_old = disc.strain(u)
        # progress is measured by the undamped step, so that a short line
        # search step cannot fake convergence
        w = disc.point_weights()
        inc = float(np.sqrt(w @ np.sum((nf.F(disc.strain(u_new)) - nf.F(S_old)) ** 2, axis=(1, 2))))
        u = u + t * d
        p = p_new
        x_prev = np.concatenate([u[disc.free], p])
        S_new = disc.strain(u)
        E1 = energy(disc, nf, u, load, (lo, hi))
        mags = tensor_norm(S_new)
        gap = float(abs(w @ (nf.value(mags) - relaxed_phi(nf, mags, lo, hi))))
        log.append(KacanovLogEntry(outer, lo, hi, E0, E1, t, inc, gap, st.iterations))
        fnorm = _f_norm(disc, nf, S_new)
        scale = 1.0 + abs(w @ nf.value(mags))
        if quadratic or (inc <= config.tol_nonlinear * (1.0 + fnorm) and gap <= config.tol_nonlinear * scale):
            return KacanovState(u, p, (lo, hi), E1, log, True)
        if (E0 - E1) < config.theta * gap or inc <= config.tol_nonlinear * (1.0 + fnorm):
            lo, hi = lo / config.shrink, hi * config.shrink
    raise SolverError(
        f"relaxed Kacanov did not converge in {config.max_outer} outer iterations",
        best=(u, p),
        residual=log[-1].increment if log else None,
        log=log,
    )


# nested iteration ----------------------------------------------------------------

def prolong_cr(coarse: Mesh, fine: Mesh, u) -> np.ndarray:
    """Face means on ``fine`` of a CR field on ``coarse`` (``fine.parent``
    maps fine elements to coarse ones); faces lying on coarse faces get the
    average of both traces."""
    t = fine.topology
    mid = fine.face_midpoints
    total = np.zeros((fine.n_faces, 2))
    count = np.zeros(fine.n_faces)
    for side in range(2):
        K = t.face_elements[:, side]
        ok = K >= 0
        P = fine.parent[K[ok]]
        lam = barycentric(coarse.coords[P], mid[ok])
        total[ok] += cr_evaluate(coarse, u, P, lam)
        count[ok] += 1
    return (total / count[:, None]).ravel()
