"""Kronecker rearrangement algebra and SVD-based factorization.

A matrix ``Theta = sum_k A_k kron B_k`` of size ``(p1*p2, q1*q2)`` is mapped by
the Van Loan-Pitsianis rearrangement ``permute`` to the ``d1 x d2`` matrix
``sum_k vec(A_k) vec(B_k)^T`` (``d1 = p1*q1``, ``d2 = p2*q2``), so a Kronecker
rank-K matrix becomes an ordinary rank-K matrix ``L R^T``.

``vec`` is column-major (Fortran order) everywhere in the package.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class KroneckerShape:
    """Block dimensions ``(p1, q1, p2, q2)`` and Kronecker rank ``K``."""

    p1: int
    q1: int
    p2: int
    q2: int
    K: int = 1

    def __post_init__(self):
        for name in ("p1", "q1", "p2", "q2", "K"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ParameterError(f"{name} must be a positive integer, got {v!r}")
        if self.K > min(self.d1, self.d2):
            raise ParameterError(
                f"rank K={self.K} exceeds min(d1, d2)={min(self.d1, self.d2)}")

    @property
    def d1(self):
        return self.p1 * self.q1

    @property
    def d2(self):
        return self.p2 * self.q2

    @property
    def p(self):
        return self.p1 * self.p2

    @property
    def q(self):
        return self.q1 * self.q2

    def with_rank(self, K):
        return KroneckerShape(self.p1, self.q1, self.p2, self.q2, K)

    def as_dict(self):
        return {"p1": self.p1, "q1": self.q1, "p2": self.p2, "q2": self.q2, "K": self.K}


@dataclass
class FactorPair:
    """Factors ``(L, R)`` of the rearranged parameter ``P(Theta) = L R^T``."""

    L: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.L = np.atleast_2d(np.asarray(self.L, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        if self.L.ndim != 2 or self.R.ndim != 2 or self.L.shape[1] != self.R.shape[1]:
            raise ShapeError(
                f"factor column counts differ: L{self.L.shape}, R{self.R.shape}")

    @property
    def K(self):
        return self.L.shape[1]

    def product(self):
        return self.L @ self.R.T

    def copy(self):
        return FactorPair(self.L.copy(), self.R.copy())

    def is_finite(self):
        return bool(np.all(np.isfinite(self.L)) and np.all(np.isfinite(self.R)))


@dataclass
class GroundTruth:
    """True parameter with its balanced factors and singular values."""

    shape: KroneckerShape
    factors: FactorPair
    theta: np.ndarray
    sigma: np.ndarray
    supports: tuple = field(default=((), ()))

    @classmethod
    def from_theta(cls, theta, shape):
        """Build the balanced factorization ``L = U S^1/2, R = V S^1/2`` of ``theta``."""
        theta = np.asarray(theta, dtype=float)
        f, sigma = _svd_factors(permute(theta, shape), shape.K)
        if sigma[-1] <= 0:
            raise ParameterError("ground truth has Kronecker rank below K")
        return cls(shape=shape, factors=f, theta=theta, sigma=sigma,
                   supports=(row_support(f.L), row_support(f.R)))

    @classmethod
    def from_factors(cls, L, R, shape):
        theta = compose(FactorPair(L, R), shape)
        return cls.from_theta(theta, shape)

    @property
    def norm(self):
        return float(np.linalg.norm(self.theta))


def row_support(m, rtol=1e-12):
    """Indices of rows of ``m`` whose norm exceeds ``rtol`` times the largest."""
    norms = np.linalg.norm(m, axis=1)
    top = norms.max() if norms.size else 0.0
    if top == 0:
        return ()
    return tuple(int(i) for i in np.flatnonzero(norms > rtol * top))


def _check_theta(theta, shape):
    if theta.shape[-2:] != (shape.p, shape.q):
        raise ShapeError(
            f"expected trailing dims ({shape.p}, {shape.q}) for shape "
            f"{shape.as_dict()}, got {theta.shape}")


def permute(theta, shape):
    """Rearrange ``theta`` (``p1*p2 x q1*q2``) into the ``d1 x d2`` matrix ``P(theta)``.

    The ``p2 x q2`` block at block position ``(a, b)`` is vectorized
    column-major and becomes row ``a + b*p1``, so that
    ``permute(kron(A, B)) == outer(vec(A), vec(B))``.  Leading batch
    dimensions are carried through.
    """
    theta = np.asarray(theta)
    _check_theta(theta, shape)
    lead = theta.shape[:-2]
    t = theta.reshape(*lead, shape.p1, shape.p2, shape.q1, shape.q2)
    nl = len(lead)
    axes = tuple(range(nl)) + (nl + 2, nl, nl + 3, nl + 1)
    return t.transpose(axes).reshape(*lead, shape.d1, shape.d2)


def permute_inverse(m, shape):
    """Exact inverse of :func:`permute`."""
    m = np.asarray(m)
    if m.shape[-2:] != (shape.d1, shape.d2):
        raise ShapeError(
            f"expected trailing dims ({shape.d1}, {shape.d2}), got {m.shape}")
    lead = m.shape[:-2]
    t = m.reshape(*lead, shape.q1, shape.p1, shape.q2, shape.p2)
    nl = len(lead)
    axes = tuple(range(nl)) + (nl + 1, nl + 3, nl, nl + 2)
    return t.transpose(axes).reshape(*lead, shape.p, shape.q)


def vec(a):
    """Column-major vectorization."""
    return np.asarray(a).reshape(-1, order="F")


def compose(f, shape):
    """Return ``P^{-1}(L R^T)``."""
    if f.L.shape[0] != shape.d1 or f.R.shape[0] != shape.d2:
        raise ShapeError(
            f"factors L{f.L.shape}, R{f.R.shape} do not match d1={shape.d1}, d2={shape.d2}")
    return permute_inverse(f.L @ f.R.T, shape)


def _svd_factors(m, K):
    U, s, Vt = np.linalg.svd(m, full_matrices=False)
    root = np.sqrt(s[:K])
    return FactorPair(U[:, :K] * root, Vt[:K].T * root), s[:K].copy()


def factorize(theta, shape, K=None):
    """Balanced rank-K factors ``(U S^1/2, V S^1/2)`` of ``P(theta)``."""
    K = shape.K if K is None else K
    if K > min(shape.d1, shape.d2):
        raise ParameterError(f"K={K} exceeds min(d1, d2)")
    f, _ = _svd_factors(permute(np.asarray(theta, dtype=float), shape), K)
    return f


def relative_error(theta_hat, theta_star):
    """``||theta_hat - theta_star||_F / ||theta_star||_F``."""
    return float(np.linalg.norm(theta_hat - theta_star) / np.linalg.norm(theta_star))


def factor_distance(f, target, restarts=8, seed=0):
    """Factorization distance between ``f`` and the balanced truth factors.

    ``inf_Q sqrt(||(LQ - L*) S^1/2||_F^2 + ||(R Q^-T - R*) S^1/2||_F^2)`` over
    invertible ``Q``.  Exact for K = 1.  For K >= 2 the value comes from
    local quasi-Newton searches and is only an upper bound on the infimum.
    """
    Ls, Rs = target.factors.L, target.factors.R
    sigma = np.asarray(target.sigma, dtype=float)
    if f.L.shape != Ls.shape or f.R.shape != Rs.shape:
        raise ShapeError("factor shapes differ from the target")
    if np.any(sigma <= 0):
        raise ParameterError("target singular values must be positive")
    if f.K == 1:
        return _distance_rank_one(f.L[:, 0], f.R[:, 0], Ls[:, 0], Rs[:, 0], sigma[0])
    return _distance_search(f.L, f.R, Ls, Rs, sigma, restarts, seed)


def _distance_rank_one(l, r, ls, rs, sig):
    a, b = l @ l, l @ ls
    e, h = r @ r, r @ rs

    def obj(q):
        # direct residual form; the expanded quadratic cancels badly near zero
        return sig * (np.sum((q * l - ls) ** 2) + np.sum((r / q - rs) ** 2))

    # Stationary points solve a q^4 - b q^3 + h q - e = 0.
    cands = [np.exp(12.0), -np.exp(12.0), np.exp(-12.0), -np.exp(-12.0), 1.0, -1.0]
    coef = np.array([a, -b, 0.0, h, -e])
    if np.any(coef != 0):
        nz = np.flatnonzero(coef)[0]
        for root in np.roots(coef[nz:]):
            if abs(root.imag) <= 1e-8 * max(1.0, abs(root)) and root.real != 0:
                q = root.real
                # Newton polish on the quartic
                for _ in range(3):
                    p = ((a * q - b) * q * q + h) * q - e
                    dp = (4 * a * q - 3 * b) * q * q + h
                    if dp == 0:
                        break
                    q -= p / dp
                if q != 0 and np.isfinite(q):
                    cands.append(q)
    best = min(obj(q) for q in cands)
    return float(np.sqrt(max(best, 0.0)))


def _distance_search(L, R, Ls, Rs, sigma, restarts, seed):
    K = L.shape[1]
    D2 = sigma  # Sigma^{1/2} squared, applied columnwise
    big = 1e300

    def fun(qflat):
        Q = qflat.reshape(K, K)
        try:
            cond = np.linalg.cond(Q)
        except np.linalg.LinAlgError:
            return big, np.zeros_like(qflat)
        if not np.isfinite(cond) or cond > 1e12:
            return big, np.zeros_like(qflat)
        Qit = np.linalg.inv(Q).T
        EL = L @ Q - Ls
        ER = R @ Qit - Rs
        val = np.sum(EL * EL * D2) + np.sum(ER * ER * D2)
        gL = 2 * L.T @ (EL * D2)
        gM = 2 * R.T @ (ER * D2)
        grad = gL - Qit @ gM.T @ Qit
        return val, grad.ravel()

    rng = np.random.default_rng(seed)
    starts = [np.eye(K)]
    try:
        starts.append(np.linalg.lstsq(L, Ls, rcond=None)[0])
    except np.linalg.LinAlgError:
        pass
    for _ in range(restarts):
        starts.append(rng.standard_normal((K, K)))
    best = np.inf
    for Q0 in starts:
        v0, _ = fun(Q0.ravel())
        if v0 >= big:
            continue
        res = optimize.minimize(fun, Q0.ravel(), jac=True, method="BFGS",
                                options={"gtol": 1e-12, "maxiter": 2000})
        best = min(best, v0, res.fun)
    return float(np.sqrt(max(best, 0.0)))
