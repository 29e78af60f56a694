"""Independent reference computations used by the tests.

These deliberately avoid the code paths they check: integrals are done by
adaptive quadrature, conjugates by direct maximisation, derivatives by
finite differences.
"""
import numpy as np
from scipy.integrate import quad

from crstokes.spaces import cr_space

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def integrate_prime(prime, t):
    """int_0^t prime(s) ds by adaptive Gauss-Kronrod."""
    val, _ = quad(lambda s: float(prime(s)), 0.0, t, epsabs=0.0, epsrel=1e-13, limit=200)
    return val


def golden_max(f, lo, hi, iters=200):
    """Vectorised golden-section search for the maximum of a unimodal f."""
    lo = np.asarray(lo, dtype=float).copy()
    hi = np.asarray(hi, dtype=float).copy()
    x1 = hi - GOLDEN * (hi - lo)
    x2 = lo + GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        left = f1 > f2
        hi = np.where(left, x2, hi)
        lo = np.where(left, lo, x1)
        x1n = np.where(left, hi - GOLDEN * (hi - lo), x2)
        x2n = np.where(left, x1, lo + GOLDEN * (hi - lo))
        f1n = np.where(left, f(x1n), f2)
        f2n = np.where(left, f1, f(x2n))
        x1, x2, f1, f2 = x1n, x2n, f1n, f2n
    x = 0.5 * (lo + hi)
    return f(x), x


def legendre(f, t, hi):
    """sup_{0 <= s <= hi} (s t - f(s)) by golden section."""
    t = np.asarray(t, dtype=float)
    val, _ = golden_max(lambda s: s * t - f(s), np.zeros_like(t), np.broadcast_to(hi, t.shape))
    return val


def fd_gradient(fun, Q, h):
    """Central finite-difference gradient of a scalar function of a 2x2 tensor."""
    G = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            E = np.zeros((2, 2))
            E[i, j] = h
            G[i, j] = (fun(Q + E) - fun(Q - E)) / (2 * h)
    return G


# manufactured solutions ------------------------------------------------------

class AffineSolution:
    """u = A x + b with zero pressure and zero body force."""

    singular_points = ()
    cut_lines = ()

    def __init__(self, A, b=(0.0, 0.0)):
        self.A = np.asarray(A, float)
        self.b = np.asarray(b, float)

    def u(self, x):
        return np.asarray(x) @ self.A.T + self.b

    def grad_u(self, x):
        return np.broadcast_to(self.A, (len(x), 2, 2)).copy()

    def p(self, x):
        return np.zeros(len(x))

    def f_smooth(self, nf, x):
        return np.zeros((len(x), 2))

    def pressure_jumps(self):
        return []


class PurePressure(AffineSolution):
    """u = 0, p = q(x) smooth with the matching body force grad q."""

    def __init__(self):
        super().__init__(np.zeros((2, 2)))

    def p(self, x):
        x = np.asarray(x)
        return np.sin(2 * x[:, 0]) * x[:, 1] ** 2 + x[:, 0] ** 3

    def f_smooth(self, nf, x):
        x = np.asarray(x)
        return np.column_stack([2 * np.cos(2 * x[:, 0]) * x[:, 1] ** 2 + 3 * x[:, 0] ** 2,
                                2 * np.sin(2 * x[:, 0]) * x[:, 1]])


# smoother traces ---------------------------------------------------------------

def random_cr0(mesh, rng, n=None):
    bd = cr_space(mesh).boundary_dofs
    shape = (2 * mesh.n_faces,) if n is None else (n, 2 * mesh.n_faces)
    v = rng.standard_normal(shape)
    v[..., bd] = 0.0
    return v


def face_values(op, v, s):
    """E v on every face, evaluated from each adjacent element.

    Local face i of K is the side P_{i+1} P_{i+2}, which lies in Alfeld
    child i at mu_0 = 0.  Returns (left, right) of shape (L, len(s), 2)
    with points ordered along the sorted vertex pair of the face.
    """
    mesh = op.mesh
    t = mesh.topology
    out = []
    for side in range(2):
        K = t.face_elements[:, side]
        i = t.face_local[:, side]
        vals = np.full((mesh.n_faces, len(s), 2), np.nan)
        for loc in range(3):
            sel = np.flatnonzero((K >= 0) & (i == loc))
            if sel.size == 0:
                continue
            a = mesh.elements[K[sel], (loc + 1) % 3]
            forward = a == t.faces[sel, 0]
            for flip, ss in ((True, s), (False, 1 - s)):
                pick = sel[forward == flip]
                if pick.size == 0:
                    continue
                mu = np.column_stack([0 * ss, 1 - ss, ss])
                ev = op.values_at(v, np.full(len(ss), loc), mu)
                vals[pick] = ev[K[pick]]
        out.append(vals)
    return out
