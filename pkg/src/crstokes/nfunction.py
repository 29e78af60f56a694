"""N-functions with (r, epsilon)-structure and related tensor fields.

The scalar function is determined by its derivative

    phi'(t) = (epsilon + t)^(r-2) t,

and all derived objects (conjugate, shifted functions, the tensor fields
A and F) are evaluated in closed form where one exists.  The conjugate is
computed through the Young equality ``phi*(t) = t s - phi(s)`` with
``s = (phi')^{-1}(t)``; the inverse of phi' is found by a vectorised
bracketed bisection followed by Newton polishing.

Everything accepts numpy arrays and broadcasts.  Tensors are arrays whose
last two axes have shape (2, 2).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, asdict
from typing import Protocol

import numpy as np


class NFunctionLike(Protocol):
    """Anything exposing value, derivative and inverse derivative."""

    r_minus: float
    r_plus: float

    def value(self, t): ...

    def prime(self, t): ...

    def prime_inverse(self, t): ...

    def conjugate(self, t): ...


def _as_nonneg(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(np.isnan(t)):
        raise ValueError("N-functions are only defined for non-negative arguments")
    return t


@dataclass(frozen=True)
class NFunctionRE:
    """N-function with phi'(t) = (epsilon + t)^(r-2) t.

    Parameters
    ----------
    r : float
        Growth exponent, ``r > 1``.
    epsilon : float
        Shift parameter, ``epsilon >= 0``.
    """

    r: float
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.r > 1:
            raise ValueError(f"r must exceed 1, got {self.r}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")

    # indices of uniform convexity
    @property
    def r_minus(self) -> float:
        return self.r if self.epsilon == 0 else min(self.r, 2.0)

    @property
    def r_plus(self) -> float:
        return self.r if self.epsilon == 0 else max(self.r, 2.0)

    @property
    def r_conj(self) -> float:
        return self.r / (self.r - 1.0)

    def value(self, t):
        """phi(t) = int_0^t phi'(s) ds."""
        t = _as_nonneg(t)
        r, eps = self.r, self.epsilon
        if r == 2.0:
            return 0.5 * t**2
        if eps == 0.0:
            return t**r / r
        x = t / eps
        out = np.empty_like(x)
        small = x < 0.25
        xs = x[small]
        # series of int_0^x (1+y)^(r-2) y dy, stable for small x
        acc = np.zeros_like(xs)
        coef = 1.0
        xp = xs**2
        for k in range(60):
            acc += coef * xp / (k + 2)
            coef *= (r - 2.0 - k) / (k + 1.0)
            xp = xp * xs
        out[small] = acc
        xl = x[~small]
        lg = np.log1p(xl)
        out[~small] = np.expm1(r * lg) / r - np.expm1((r - 1.0) * lg) / (r - 1.0)
        return eps**r * out

    def prime(self, t):
        """phi'(t) = (epsilon + t)^(r-2) t, with phi'(0) = 0."""
        t = _as_nonneg(t)
        if self.r == 2.0:
            return t.copy()
        if self.epsilon == 0.0:
            return t ** (self.r - 1.0)
        return (self.epsilon + t) ** (self.r - 2.0) * t

    def weight(self, t):
        """phi'(t)/t = (epsilon + t)^(r-2) for t > 0."""
        t = _as_nonneg(t)
        with np.errstate(divide="ignore"):
            return (self.epsilon + t) ** (self.r - 2.0)

    def prime_inverse(self, t):
        """The unique s >= 0 with phi'(s) = t."""
        t = _as_nonneg(t)
        r, eps = self.r, self.epsilon
        if r == 2.0:
            return t.copy()
        if eps == 0.0:
            return t ** (1.0 / (r - 1.0))
        # scaled problem (1+x)^(r-2) x = tau, s = eps x
        tau = t / eps ** (r - 1.0)
        shape = tau.shape
        tau = tau.ravel()
        x = np.zeros_like(tau)
        pos = tau > 0
        tp = tau[pos]
        a = np.minimum(tp, tp ** (1.0 / (r - 1.0)))
        b = np.maximum(tp, tp ** (1.0 / (r - 1.0)))
        lo = np.log(a) - np.log(4.0)
        hi = np.log(b) + np.log(4.0)
        g = lambda y: (1.0 + y) ** (r - 2.0) * y
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            above = g(np.exp(mid)) > tp
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        y = np.exp(0.5 * (lo + hi))
        for _ in range(3):
            gp = (1.0 + y) ** (r - 3.0) * (1.0 + (r - 1.0) * y)
            y = y - (g(y) - tp) / gp
        x[pos] = y
        return eps * x.reshape(shape)

    def conjugate(self, t):
        """phi*(t) = sup_s (st - phi(s))."""
        t = _as_nonneg(t)
        r = self.r
        if r == 2.0:
            return 0.5 * t**2
        if self.epsilon == 0.0:
            rc = self.r_conj
            return t**rc / rc
        s = self.prime_inverse(t)
        return t * s - self.value(s)

    # tensor fields --------------------------------------------------------
    def A(self, Q):
        """A(Q) = phi'(|Q|) Q/|Q|, zero at Q = 0."""
        Q = np.asarray(Q, dtype=float)
        n = tensor_norm(Q)
        safe = np.where(n > 0, n, 1.0)
        c = np.where(n > 0, self.weight(safe), 0.0)
        return c[..., None, None] * Q

    def F(self, Q):
        """F(Q) = sqrt(phi'(|Q|)|Q|) Q/|Q|, zero at Q = 0."""
        Q = np.asarray(Q, dtype=float)
        n = tensor_norm(Q)
        safe = np.where(n > 0, n, 1.0)
        c = np.where(n > 0, np.sqrt(self.weight(safe)), 0.0)
        return c[..., None, None] * Q

    def A_inverse(self, P):
        """The unique Q with A(Q) = P."""
        P = np.asarray(P, dtype=float)
        m = tensor_norm(P)
        s = self.prime_inverse(m)
        safe = np.where(m > 0, m, 1.0)
        c = np.where(m > 0, s / safe, 0.0)
        return c[..., None, None] * P


@dataclass(frozen=True)
class Conjugate:
    """The conjugate psi* seen as an N-function in its own right."""

    base: NFunctionLike

    @property
    def r_minus(self):
        return self.base.r_plus / (self.base.r_plus - 1.0)

    @property
    def r_plus(self):
        return self.base.r_minus / (self.base.r_minus - 1.0)

    def value(self, t):
        return self.base.conjugate(t)

    def prime(self, t):
        return self.base.prime_inverse(t)

    def prime_inverse(self, t):
        return self.base.prime(t)

    def conjugate(self, t):
        return self.base.value(t)


@dataclass(frozen=True)
class Shifted:
    """Shifted function psi_a with psi_a'(t) = psi'(max(a,t)) t / max(a,t).

    The shift ``a`` may be an array broadcasting against the arguments.
    """

    base: NFunctionLike
    a: object

    @property
    def r_minus(self):
        return min(self.base.r_minus, 2.0)

    @property
    def r_plus(self):
        return max(self.base.r_plus, 2.0)

    def _slope(self, a):
        # psi'(a)/a, only used where a > 0
        safe = np.where(a > 0, a, 1.0)
        return np.where(a > 0, self.base.prime(safe) / safe, 0.0)

    def value(self, t):
        t = _as_nonneg(t)
        a = np.broadcast_to(_as_nonneg(self.a), np.broadcast_shapes(np.shape(self.a), t.shape))
        t = np.broadcast_to(t, a.shape)
        k = self._slope(a)
        low = t <= a
        quad = 0.5 * k * t**2
        upper = 0.5 * self.base.prime(a) * a + self.base.value(t) - self.base.value(a)
        return np.where(low, quad, upper)

    def prime(self, t):
        t = _as_nonneg(t)
        a = _as_nonneg(self.a)
        m = np.maximum(a, t)
        safe = np.where(m > 0, m, 1.0)
        return np.where(m > 0, self.base.prime(safe) / safe * t, 0.0)

    def prime_inverse(self, u):
        u = _as_nonneg(u)
        a = np.broadcast_to(_as_nonneg(self.a), np.broadcast_shapes(np.shape(self.a), u.shape))
        u = np.broadcast_to(u, a.shape)
        pa = self.base.prime(a)
        k = self._slope(a)
        low = (u <= pa) & (a > 0)
        safe_k = np.where(k > 0, k, 1.0)
        return np.where(low, u / safe_k, self.base.prime_inverse(u))

    def conjugate(self, u):
        u = _as_nonneg(u)
        s = self.prime_inverse(u)
        return np.maximum(u * s - self.value(s), 0.0)


def tensor_norm(Q):
    """Frobenius norm over the last two axes."""
    Q = np.asarray(Q, dtype=float)
    return np.sqrt(np.einsum("...ij,...ij->...", Q, Q))


# functional interface ------------------------------------------------------

def phi_value(nf, t):
    return nf.value(t)


def phi_prime(nf, t):
    return nf.prime(t)


def phi_conjugate(nf, t):
    return nf.conjugate(t)


def shifted_value(psi, a, t):
    """psi_a(t) for any N-function-like ``psi``."""
    return Shifted(psi, a).value(t)


def shifted_prime(psi, a, t):
    return Shifted(psi, a).prime(t)


def shifted_conjugate(psi, a, t):
    """(psi_a)*(t)."""
    return Shifted(psi, a).conjugate(t)


def shifted_conjugate_identity_check(nf, a, t):
    """Relative residual of (phi_a)* = (phi*)_{phi'(a)} at t."""
    lhs = Shifted(nf, a).conjugate(t)
    rhs = Shifted(Conjugate(nf), nf.prime(a)).value(t)
    return np.abs(lhs - rhs) / (1.0 + lhs)


def A_of(nf, Q):
    return nf.A(Q)


def A_inverse(nf, P):
    return nf.A_inverse(P)


def F_of(nf, Q):
    return nf.F(Q)


def natural_density(nf, P, Q):
    """|F(P) - F(Q)|^2."""
    d = nf.F(P) - nf.F(Q)
    return np.einsum("...ij,...ij->...", d, d)


def mean_deviations(nf, Q, weights):
    """The three integral-mean deviations that are equivalent for any choice of mean.

    Parameters
    ----------
    Q : ndarray, shape (n, 2, 2)
        Tensor samples on a patch.
    weights : ndarray, shape (n,)
        Quadrature weights (need not be normalised).

    Returns
    -------
    tuple of float
        Mean-square deviations of F(Q) from the mean of F(Q), from
        F(A^{-1}(mean A(Q))) and from F(mean Q).
    """
    w = np.asarray(weights, dtype=float) / np.sum(weights)
    FQ = nf.F(Q)
    mean = lambda X: np.einsum("n,nij->ij", w, X)
    dev = lambda M: float(np.einsum("n,nij,nij->", w, FQ - M, FQ - M))
    m_F = mean(FQ)
    m_A = nf.F(nf.A_inverse(mean(nf.A(Q))))
    m_Q = nf.F(mean(Q))
    return dev(m_F), dev(m_A), dev(m_Q)


# sampled certification ----------------------------------------------------

@dataclass(frozen=True)
class InequalityReport:
    """Observed extreme ratios LHS/RHS of one inequality family."""

    family: str
    r: float
    epsilon: float
    delta: float
    n: int
    min_ratio: float
    max_ratio: float


CSV_FIELDS = ("family", "r", "epsilon", "delta", "n", "min_ratio", "max_ratio")

LOG_RANGE = (-4.0, 4.0)


def _log_uniform(rng, n):
    return 10.0 ** rng.uniform(*LOG_RANGE, size=n)


def sample_tensor_pairs(rng, n):
    """Pairs (P, Q) with log-uniform magnitudes; half of them with Q a
    relative perturbation of P of size in [1e-6, 1]."""
    dirs = rng.standard_normal((2, n, 4))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    P = (_log_uniform(rng, n)[:, None] * dirs[0]).reshape(n, 2, 2)
    Q = (_log_uniform(rng, n)[:, None] * dirs[1]).reshape(n, 2, 2)
    half = n // 2
    rel = 10.0 ** rng.uniform(-6.0, 0.0, size=half)
    pert = rng.standard_normal((half, 4))
    pert /= np.linalg.norm(pert, axis=1, keepdims=True)
    normP = tensor_norm(P[:half])
    Q[:half] = P[:half] + (rel * normP)[:, None, None] * pert.reshape(half, 2, 2)
    return P, Q


def inequality_ratios(nf, delta, s, t, P, Q):
    """Dictionary family -> array of LHS/RHS ratios (constants set to 1)."""
    rp, rm = nf.r_plus, nf.r_minus
    rm_conj = rm / (rm - 1.0)
    out = {}
    out["young"] = s * t / (delta ** (1.0 - rp) * nf.value(s) + delta * nf.conjugate(t))
    phi_t = nf.value(t)
    phi_st = nf.value(s * t)
    out["phi_st_upper"] = phi_st / (np.maximum(s**rm, s**rp) * phi_t)
    out["phi_st_lower"] = np.minimum(s**rm, s**rp) * phi_t / phi_st
    out["qtriangle"] = nf.value(s + t) / (2.0 ** (rp - 1.0) * (nf.value(s) + nf.value(t)))
    out["t_prime"] = t * nf.prime(t) / phi_t
    out["conjugate_prime"] = nf.conjugate(nf.prime(t)) / phi_t

    nP, nQ = tensor_norm(P), tensor_norm(Q)
    D = P - Q
    nD = tensor_norm(D)
    dA = nf.A(P) - nf.A(Q)
    ndA = tensor_norm(dA)
    dF2 = natural_density(nf, P, Q)
    shP, shQ = Shifted(nf, nP), Shifted(nf, nQ)
    out["zsh_monotone"] = np.einsum("nij,nij->n", dA, D) / dF2
    out["zsh_conjugate"] = shP.conjugate(ndA) / dF2
    out["zsh_shifted"] = shP.value(nD) / dF2
    out["zsh_prime"] = ndA / shP.prime(nD)
    out["shift_symmetry"] = shP.value(nD) / shQ.value(nD)
    out["shift_symmetry_prime"] = shP.prime(nD) / shQ.prime(nD)
    out["prime_shift_change"] = np.abs(shP.prime(t) - shQ.prime(t)) / shQ.prime(np.abs(nP - nQ))
    out["change_of_shift"] = shP.value(t) / (delta ** (1.0 - rp) * shQ.value(t) + delta * dF2)
    out["change_of_shift_conjugate"] = shP.conjugate(t) / (
        delta ** (1.0 - rm_conj) * shQ.conjugate(t) + delta * dF2
    )
    return out


def certify_inequalities(nf, delta=1.0, n=100_000, seed=0):
    """Sample the inequality toolkit and report empirical constants.

    Parameters
    ----------
    nf : NFunctionRE
    delta : float
        Young parameter in (0, 1].
    n : int
        Number of samples per family.
    seed : int
        Seed of the random generator; the result is a pure function of it.

    Returns
    -------
    list of InequalityReport
    """
    if n < 1:
        raise ValueError("need at least one sample")
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    s = _log_uniform(rng, n)
    t = _log_uniform(rng, n)
    P, Q = sample_tensor_pairs(rng, n)
    reports = []
    for fam, ratio in inequality_ratios(nf, delta, s, t, P, Q).items():
        ratio = ratio[np.isfinite(ratio)]
        reports.append(
            InequalityReport(fam, nf.r, nf.epsilon, delta, int(ratio.size),
                             float(ratio.min()), float(ratio.max()))
        )
    return reports


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(rep).items()})
    return buf.getvalue()
