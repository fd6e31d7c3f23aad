"""De-scaled, element-wise truncated factor gradients."""

import numpy as np

from .errors import NearSingularGram, ParameterError

GRAM_RTOL = 1e-10


def check_tau(tau):
    tau = float(tau)
    if not tau > 0:
        raise ParameterError(f"truncation level must be positive or inf, got {tau}")
    return tau


def truncate(m, tau):
    """Sign-preserving element-wise clip ``sgn(m) * min(|m|, tau)``."""
    m = np.asarray(m, dtype=float)
    if np.isinf(tau):
        return m
    return np.clip(m, -tau, tau)


def _gram_eig(m):
    gram = m.T @ m
    K = gram.shape[0]
    w, V = np.linalg.eigh(gram)
    floor = GRAM_RTOL * np.trace(gram) / K
    if w[0] <= floor:
        raise NearSingularGram(w[0], floor)
    return w, V


def gram_inv_sqrt(m):
    """``(m^T m)^{-1/2}`` by symmetric eigendecomposition.

    Raises NearSingularGram when the smallest eigenvalue is at or below
    ``1e-10 * trace / K``; no eigenvalue clamping is done.
    """
    w, V = _gram_eig(np.atleast_2d(m))
    return (V / np.sqrt(w)) @ V.T


def gram_sqrt(m):
    """``(m^T m)^{1/2}``, same nonsingularity contract as :func:`gram_inv_sqrt`."""
    w, V = _gram_eig(np.atleast_2d(m))
    return (V * np.sqrt(w)) @ V.T


def robust_gradient_pair(oracle, f, data, tau, evaluation=None):
    """Averaged truncated de-scaled gradients ``(G_L, G_R)``.

    Each per-sample gradient ``G_i R (R^T R)^{-1/2}`` (and its ``R``
    counterpart) is clipped at ``tau`` before the batch mean is taken.
    ``evaluation`` is an optional ``oracle.evaluate(f, data)`` result to reuse.
    """
    tau = check_tau(tau)
    SR = gram_inv_sqrt(f.R)
    SL = gram_inv_sqrt(f.L)
    res, _, cache = evaluation if evaluation is not None else oracle.evaluate(f, data)
    gl, gr = oracle.factor_gradients(res, f, data, cache)
    GL = truncate(gl @ SR, tau).mean(axis=0)
    GR = truncate(gr @ SL, tau).mean(axis=0)
    return GL, GR
