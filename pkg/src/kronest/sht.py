"""Row-wise hard thresholding and scale-invariant Scaled Hard Thresholding."""

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .kron import FactorPair
from .robust import gram_inv_sqrt


@dataclass(frozen=True)
class SparsityLevels:
    s_L: int
    s_R: int

    @classmethod
    def full(cls, shape):
        return cls(shape.d1, shape.d2)

    def validate(self, d1, d2):
        if not (1 <= self.s_L <= d1 and 1 <= self.s_R <= d2):
            raise ParameterError(
                f"sparsity levels ({self.s_L}, {self.s_R}) outside [1, {d1}] x [1, {d2}]")
        return self

    def disabled(self, d1, d2):
        return self.s_L >= d1 and self.s_R >= d2


def top_rows(norms, s):
    """Indices of the ``s`` largest entries of ``norms``; ties go to the lower index."""
    order = np.argsort(-np.asarray(norms), kind="stable")
    return np.sort(order[:s])


def hard_threshold_rows(m, s):
    """Zero every row of ``m`` except the ``s`` rows with largest Euclidean norm."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    d = m.shape[0]
    if not 1 <= s <= d:
        raise ParameterError(f"sparsity level {s} outside [1, {d}]")
    if s == d:
        return m.copy()
    out = np.zeros_like(m)
    keep = top_rows(np.linalg.norm(m, axis=1), s)
    out[keep] = m[keep]
    return out


def scaled_row_norms(f):
    """Row norms of ``L (R^T R)^{1/2}`` and ``R (L^T L)^{1/2}``.

    Computed as ``sqrt(e_i^T L (R^T R) L^T e_i)``; these are invariant to
    ``(L, R) -> (LQ, R Q^-T)``.
    """
    L, R = f.L, f.R
    nl = np.einsum("ik,kl,il->i", L, R.T @ R, L)
    nr = np.einsum("ik,kl,il->i", R, L.T @ L, R)
    return np.sqrt(np.maximum(nl, 0.0)), np.sqrt(np.maximum(nr, 0.0))


def scaled_hard_threshold(f, levels):
    """One SHT step applied simultaneously to both factors.

    ``HT(L (R^T R)^{1/2}, s_L) (R^T R)^{-1/2}`` keeps exactly the selected
    rows of ``L`` unchanged and zeroes the rest, so it is applied as a row
    mask; selection uses the scaled row norms of the incoming pair.
    """
    d1, d2 = f.L.shape[0], f.R.shape[0]
    levels.validate(d1, d2)
    # both Gram matrices must be invertible for the rescaling to exist
    gram_inv_sqrt(f.L)
    gram_inv_sqrt(f.R)
    if levels.disabled(d1, d2):
        return f.copy()
    nl, nr = scaled_row_norms(f)
    L = np.zeros_like(f.L)
    R = np.zeros_like(f.R)
    kl = top_rows(nl, levels.s_L)
    kr = top_rows(nr, levels.s_R)
    L[kl] = f.L[kl]
    R[kr] = f.R[kr]
    return FactorPair(L, R)
