"""Robust convex initializers and their conversion into sparse initial factors.

* trace regression and bilinear regression: robust Dantzig selector built on
  element-wise truncated (cross-)covariance estimates;
* logistic regression: Lasso on element-wise truncated predictors.
"""

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInit, Infeasible, MaxIterations, NearSingularGram, ParameterError, ShapeError
from .kron import factorize
from .models import logistic_cumulant
from .robust import truncate
from .sht import SparsityLevels, scaled_hard_threshold

from scipy.special import expit

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InitConfig:
    """Truncation levels and radius of the stage-one estimator.

    ``radius`` is the Dantzig constraint radius, or the Lasso penalty.
    """

    tau_x: float = np.inf
    tau_yx: float = np.inf
    radius: float = 0.0
    tol: float = 1e-8
    gap_tol: float = 1e-5
    max_iter: int = 50000
    strict: bool = True

    def __post_init__(self):
        if not (self.tau_x > 0 and self.tau_yx > 0):
            raise ParameterError("truncation levels must be positive")
        if not self.radius >= 0:
            raise ParameterError("radius must be nonnegative")

    @classmethod
    def scaled(cls, n, d, c_x=1.0, c_y=1.0, radius=0.1, **kw):
        """Levels ``c * sqrt(n / log d)``."""
        base = np.sqrt(n / np.log(d))
        return cls(tau_x=c_x * base, tau_yx=c_y * base, radius=radius, **kw)


# --------------------------------------------------------------------------
# truncated moment estimators


def truncated_covariance(xs, tau_x):
    """``n^-1 sum_i T(x_i x_i^T, tau_x)``.

    Computed as the raw second moment plus a correction restricted to pairs
    that can exceed ``tau_x`` (one factor at least ``sqrt(tau_x)`` in size).
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    n, m = xs.shape
    if n == 0:
        raise ShapeError("empty sample")
    raw = xs.T @ xs
    if np.isinf(tau_x):
        return raw / n
    root = np.sqrt(tau_x)
    # rows touched by a large entry, accumulated one-sided then mirrored;
    # pairs with both entries large would be counted twice and are removed
    rows = np.zeros((m, m))
    both = np.zeros((m, m))
    big = np.abs(xs) >= root
    for i in np.flatnonzero(big.any(axis=1)):
        x = xs[i]
        S = np.flatnonzero(big[i])
        prod = np.outer(x[S], x)
        c = np.clip(prod, -tau_x, tau_x) - prod
        rows[S] += c
        both[np.ix_(S, S)] += c[:, S]
    out = (raw + rows + rows.T - both) / n
    return 0.5 * (out + out.T)


def truncated_cross_covariance(ys, xs, tau_yx):
    """``n^-1 sum_i T(y_i x_i, tau)`` (vector) or ``n^-1 sum_i T(y_i x_i^T, tau)`` (matrix)."""
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ys = np.asarray(ys, dtype=float)
    if ys.shape[0] != xs.shape[0]:
        raise ShapeError(f"{ys.shape[0]} responses for {xs.shape[0]} predictors")
    if ys.ndim == 1:
        return truncate(ys[:, None] * xs, tau_yx).mean(axis=0)
    n = xs.shape[0]
    ys = ys.reshape(n, -1)
    if np.isinf(tau_yx):
        return ys.T @ xs / n
    out = np.zeros((ys.shape[1], xs.shape[1]))
    for i in range(n):
        out += truncate(np.outer(ys[i], xs[i]), tau_yx)
    return out / n


# --------------------------------------------------------------------------
# Dantzig selector


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _power_norm(S, steps=50, seed=0):
    v = np.random.default_rng(seed).standard_normal(S.shape[1])
    est = 0.0
    for _ in range(steps):
        w = S.T @ (S @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        est = np.sqrt(nw / np.linalg.norm(v))
        v = w / nw
    return est


def dantzig_dual_bound(S, s, radius, lam):
    """Lower bound ``-s^T lam - R ||lam||_1`` after scaling ``lam`` so ``||S^T lam||_inf <= 1``."""
    c = np.max(np.abs(S.T @ lam)) if lam.size else 0.0
    if c > 1:
        lam = lam / c
    return float(-s @ lam - radius * np.sum(np.abs(lam)))


def _violation(S, s, radius, th):
    return float(max(np.max(np.abs(S @ th - s)) - radius, 0.0))


def _polish(S, s, radius, th, lam):
    """Solve for the vertex suggested by the approximate support and active set."""
    best = None
    r = S @ th - s
    scale = max(np.max(np.abs(th)), 1e-300)
    for delta in (1e-9, 1e-7, 1e-5, 1e-3):
        supp = np.flatnonzero(np.abs(th) > delta * scale)
        act = np.flatnonzero(np.abs(r) >= radius - delta * max(radius, 1.0))
        if act.size == 0:
            cand = np.zeros_like(th)
            if _violation(S, s, radius, cand) == 0:
                return cand, np.zeros_like(lam)
            continue
        sg = np.sign(r[act])
        cand = np.zeros_like(th)
        if supp.size:
            sol = np.linalg.lstsq(S[np.ix_(act, supp)], s[act] + sg * radius, rcond=None)[0]
            cand[supp] = sol
        if _violation(S, s, radius, cand) > 1e-10 * max(1.0, np.max(np.abs(s))):
            continue
        dual = np.zeros_like(lam)
        if supp.size:
            dual[act] = np.linalg.lstsq(S[np.ix_(supp, act)], -np.sign(cand[supp]), rcond=None)[0]
        # keep the ADMM multiplier if the polished one is worse
        if dantzig_dual_bound(S, s, radius, lam) > dantzig_dual_bound(S, s, radius, dual):
            dual = lam
        obj = np.sum(np.abs(cand))
        gap = obj - dantzig_dual_bound(S, s, radius, dual)
        if best is None or gap < best[2]:
            best = (cand, dual, gap)
    if best is None:
        return None
    return best[0], best[1]


def _dantzig_vector(S, s, radius, tol, gap_tol, max_iter, strict):
    m = S.shape[0]
    # Farkas check: residual of s outside range(S) certifies infeasibility
    th_ls, *_ = np.linalg.lstsq(S, s, rcond=None)
    r_ls = s - S @ th_ls
    if np.max(np.abs(r_ls)) > radius and r_ls @ s > radius * np.sum(np.abs(r_ls)) * (1 + 1e-9):
        raise Infeasible(f"radius {radius:g} too small: constraint set is empty")
    if _violation(S, s, radius, np.zeros(m)) == 0:
        return np.zeros(m), 0.0
    nrm = _power_norm(S)
    if nrm == 0:
        raise Infeasible("zero covariance with nonzero cross-covariance")
    mu = 1.05 * nrm * nrm
    rho = 1.0 / nrm
    th = np.zeros(m)
    z = np.clip(-s, -radius, radius)
    w = np.zeros(m)
    Sth = np.zeros(m)
    gap = np.inf
    for it in range(1, max_iter + 1):
        th = _soft(th - S @ (Sth - z - s + w) / mu, 1.0 / (rho * mu))
        Sth = S @ th
        z_old = z
        z = np.clip(Sth - s + w, -radius, radius)
        prim = Sth - z - s
        w += prim
        if it % 25 == 0 or it == max_iter:
            pres = np.max(np.abs(prim))
            dres = rho * np.max(np.abs(S @ (z - z_old)))
            lam = rho * w
            gap = np.sum(np.abs(th)) - dantzig_dual_bound(S, s, radius, lam)
            if pres <= tol and dres <= tol and gap <= gap_tol:
                break
            if it % 250 == 0:
                pol = _polish(S, s, radius, th, lam)
                if pol is not None:
                    cand, dual = pol
                    g = np.sum(np.abs(cand)) - dantzig_dual_bound(S, s, radius, dual)
                    if g <= gap_tol:
                        return cand, g
                # residual balancing; w is the scaled multiplier
                if pres > 10 * dres:
                    rho *= 2.0
                    w /= 2.0
                elif dres > 10 * pres:
                    rho /= 2.0
                    w *= 2.0
    pol = _polish(S, s, radius, th, rho * w)
    if pol is not None:
        cand, dual = pol
        g = np.sum(np.abs(cand)) - dantzig_dual_bound(S, s, radius, dual)
        if g <= max(gap, gap_tol):
            return cand, g
    viol = _violation(S, s, radius, th)
    if viol > 1e-7 or gap > gap_tol:
        msg = (f"Dantzig ADMM stopped after {max_iter} iterations: "
               f"violation {viol:.2e}, duality gap {gap:.2e}")
        if strict:
            raise MaxIterations(msg, solution=th, residual=max(viol, gap), iterations=max_iter)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return th, gap


def dantzig_select(sigma, sigma_yx, radius, tol=1e-8, gap_tol=1e-5, max_iter=50000,
                   strict=True):
    """``argmin ||theta||_1  s.t.  ||sigma theta - sigma_yx||_inf <= radius``.

    Linearized ADMM on ``min ||theta||_1 + I{||z||_inf <= R}`` subject to
    ``sigma theta - z = sigma_yx``, stopped on feasibility and a certified
    duality gap, with a vertex polishing step.  A matrix ``sigma_yx`` (bilinear
    case, constraint ``||Sigma_yx - Theta Sigma_x||_inf <= R``) decouples
    into one problem per row of ``Theta``.
    """
    S = np.asarray(sigma, dtype=float)
    s = np.asarray(sigma_yx, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError("sigma must be square")
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12):
        raise ShapeError("sigma must be symmetric")
    if radius < 0:
        raise ParameterError("radius must be nonnegative")
    if s.shape[-1] != S.shape[0]:
        raise ShapeError(f"cross-covariance has {s.shape[-1]} columns, sigma is {S.shape}")
    if s.ndim == 1:
        return _dantzig_vector(S, s, radius, tol, gap_tol, max_iter, strict)[0]
    return np.vstack([_dantzig_vector(S, row, radius, tol, gap_tol, max_iter, strict)[0]
                      for row in s])


# --------------------------------------------------------------------------
# robust Lasso (logistic)


def _lasso_objective(Xt, y, theta, radius):
    t = Xt @ theta
    return float(np.mean(logistic_cumulant(t) - y * t) + radius * np.sum(np.abs(theta)))


def robust_lasso(xs, ys, tau_x, radius, tol=1e-6, max_iter=20000, strict=True):
    """Logistic Lasso on element-wise truncated predictors.

    Accelerated proximal gradient with backtracking and adaptive restart.
    Convergence is measured by the proximal-gradient fixed-point residual
    ``||theta - prox(theta - t grad)||_inf / t`` with ``t = 1/Lip``.
    """
    Xt = truncate(np.atleast_2d(np.asarray(xs, dtype=float)), tau_x)
    y = np.asarray(ys, dtype=float)
    n, m = Xt.shape
    if y.shape != (n,):
        raise ShapeError("need one binary response per sample")
    if radius < 0:
        raise ParameterError("radius must be nonnegative")

    def grad(th):
        return Xt.T @ (expit(Xt @ th) - y) / n

    def smooth(th):
        t = Xt @ th
        return float(np.mean(logistic_cumulant(t) - y * t))

    lip = max(_power_norm(Xt) ** 2 / (4 * n), 1e-12)
    t0 = 1.0 / lip

    def residual(th):
        g = grad(th)
        return float(np.max(np.abs(th - _soft(th - t0 * g, t0 * radius))) / t0) if m else 0.0

    th = np.zeros(m)
    yk = th.copy()
    mom = 1.0
    step = t0
    res = residual(th)
    it = 0
    while res > tol and it < max_iter:
        it += 1
        g = grad(yk)
        fy = smooth(yk)
        while True:
            cand = _soft(yk - step * g, step * radius)
            diff = cand - yk
            if smooth(cand) <= fy + g @ diff + diff @ diff / (2 * step) + 1e-15:
                break
            step *= 0.5
        mom_next = 0.5 * (1 + np.sqrt(1 + 4 * mom * mom))
        if _lasso_objective(Xt, y, cand, radius) > _lasso_objective(Xt, y, th, radius):
            # adaptive restart
            yk, mom = th.copy(), 1.0
            continue
        yk = cand + (mom - 1) / mom_next * (cand - th)
        th, mom = cand, mom_next
        step = min(step * 1.1, 10 * t0)
        if it % 10 == 0:
            res = residual(th)
    res = residual(th)
    if res > tol:
        msg = f"robust Lasso stopped after {it} iterations with residual {res:.2e}"
        if strict:
            raise MaxIterations(msg, solution=th, residual=res, iterations=it)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return th


# --------------------------------------------------------------------------
# factors


def init_factors(theta_hat, shape, K=None, levels=None):
    """Matricize (column-major), permute, rank-K SVD, then one SHT step."""
    K = shape.K if K is None else K
    th = np.asarray(theta_hat, dtype=float)
    if th.ndim == 1:
        if th.size != shape.p * shape.q:
            raise ShapeError(f"estimate has {th.size} entries, expected {shape.p * shape.q}")
        th = th.reshape(shape.p, shape.q, order="F")
    if th.shape != (shape.p, shape.q):
        raise ShapeError(f"estimate has shape {th.shape}, expected {(shape.p, shape.q)}")
    f = factorize(th, shape, K)
    if levels is None:
        levels = SparsityLevels.full(shape)
    try:
        return scaled_hard_threshold(f, levels)
    except NearSingularGram as exc:
        raise DegenerateInit(
            f"initial estimate has Kronecker rank below {K}; cannot start") from exc


def robust_estimate(data, config):
    """Stage-one estimate of ``Theta`` as a ``p x q`` matrix for any model family."""
    s = data.shape
    n = data.n
    x = data.xflat if data.model == "bilinear" else data.X.transpose(0, 2, 1).reshape(n, -1)
    # x is vec(X) (column-major) for trace/logistic, vec(X^T) for bilinear
    if data.model == "logistic":
        th = robust_lasso(x, data.y, config.tau_x, config.radius,
                          max_iter=config.max_iter, strict=config.strict)
        return th.reshape(s.p, s.q, order="F")
    Sx = truncated_covariance(x, config.tau_x)
    kw = dict(tol=config.tol, gap_tol=config.gap_tol, max_iter=config.max_iter,
              strict=config.strict)
    if data.model == "trace":
        syx = truncated_cross_covariance(data.y, x, config.tau_yx)
        return dantzig_select(Sx, syx, config.radius, **kw).reshape(s.p, s.q, order="F")
    ys = data.y.reshape(n, -1)  # vec(Y^T)
    Syx = truncated_cross_covariance(ys, x, config.tau_yx)
    return dantzig_select(Sx, Syx, config.radius, **kw)


def robust_init(data, config, levels=None, K=None):
    """Two-stage pipeline, stage one: estimate then sparse initial factors."""
    return init_factors(robust_estimate(data, config), data.shape, K, levels)
