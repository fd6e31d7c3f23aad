"""SRGD / SRGD-SHT iterations, the ScGD, RGD and Huber-GD baselines, and tau CV.

Variants
--------
srgd
    de-scale, truncate at ``tau``, re-scale (scaled robust gradient descent).
scgd
    srgd with ``tau = inf`` (scaled, not robust).
rgd
    truncate the raw factor gradients ``G_i R`` / ``G_i^T L`` at ``tau`` and
    take a plain gradient step.
huber
    clip each residual at ``tau`` (Huber influence) inside the raw gradient,
    no truncation, plain gradient step.

All variants apply scaled hard thresholding after every step unless the
sparsity levels are the full dimensions.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NearSingularGram, ParameterError
from .kron import FactorPair, compose, relative_error
from .robust import check_tau, gram_inv_sqrt, robust_gradient_pair, truncate
from .sht import SparsityLevels, scaled_hard_threshold

log = logging.getLogger(__name__)

VARIANTS = ("srgd", "scgd", "rgd", "huber")


@dataclass(frozen=True)
class OptimizerConfig:
    eta: float = 0.01
    tau: float = np.inf
    iterations: int = 500
    levels: SparsityLevels = None
    variant: str = "srgd"
    trajectory_every: int = 10
    divergence: float = 1e6
    tol: float = None

    def __post_init__(self):
        if not self.eta >= 0:
            raise ParameterError("step size must be nonnegative")
        check_tau(self.tau)
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ParameterError("iterations must be a nonnegative integer")
        if self.variant not in VARIANTS:
            raise ParameterError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.trajectory_every < 1:
            raise ParameterError("trajectory_every must be >= 1")

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class FitResult:
    factors: FactorPair
    theta: np.ndarray
    trajectory: list = field(default_factory=list)
    status: str = "budget_exhausted"
    reason: str = ""
    iterations: int = 0

    @property
    def failed(self):
        return self.status == "failed"

    def final_error(self):
        return self.trajectory[-1][1] if self.trajectory else float("nan")

    def as_dict(self):
        return {
            "status": self.status,
            "reason": self.reason,
            "iterations": self.iterations,
            "trajectory": [
                {"iteration": int(j), "rel_error": _num(e), "loss": _num(l)}
                for j, e, l in self.trajectory
            ],
        }


def _num(v):
    v = float(v)
    return v if np.isfinite(v) else None


def descent_direction(f, oracle, data, variant, tau, evaluation=None):
    """Update directions ``(D_L, D_R)`` such that the step is ``L - eta * D_L``."""
    if evaluation is None:
        evaluation = oracle.evaluate(f, data)
    if variant in ("srgd", "scgd"):
        tau = np.inf if variant == "scgd" else tau
        GL, GR = robust_gradient_pair(oracle, f, data, tau, evaluation)
        return GL @ gram_inv_sqrt(f.R), GR @ gram_inv_sqrt(f.L)
    res, _, cache = evaluation
    if variant == "huber":
        gl, gr = oracle.factor_gradients(truncate(res, tau), f, data, cache)
        return gl.mean(axis=0), gr.mean(axis=0)
    gl, gr = oracle.factor_gradients(res, f, data, cache)
    return truncate(gl, tau).mean(axis=0), truncate(gr, tau).mean(axis=0)


def srgd_step(f, oracle, data, cfg, evaluation=None):
    """One simultaneous update of both factors from the incoming iterate."""
    DL, DR = descent_direction(f, oracle, data, cfg.variant, cfg.tau, evaluation)
    return FactorPair(f.L - cfg.eta * DL, f.R - cfg.eta * DR)


def fit(f0, oracle, data, cfg, truth=None):
    """Run ``cfg.iterations`` steps, each followed by scaled hard thresholding.

    Failures (near-singular Gram, non-finite iterate, loss blow-up beyond
    ``cfg.divergence`` times the initial loss) end the run with status
    ``failed`` and keep the last valid iterate.
    """
    shape = data.shape
    levels = cfg.levels or SparsityLevels.full(shape)
    levels.validate(shape.d1, shape.d2)
    use_sht = not levels.disabled(shape.d1, shape.d2)
    J = cfg.iterations
    traj = []

    def record(j, theta, loss):
        err = relative_error(theta, truth.theta) if truth is not None else float("nan")
        traj.append((j, err, loss))

    f = f0.copy()
    theta = compose(f, shape)
    ev = oracle.evaluate(f, data)
    loss0 = loss = float(np.mean(ev[1]))
    status, reason, j = "budget_exhausted", "", 0
    while j < J:
        if j % cfg.trajectory_every == 0:
            record(j, theta, loss)
        try:
            nxt = srgd_step(f, oracle, data, cfg, ev)
            if not nxt.is_finite():
                status, reason = "failed", "NonFinite"
                break
            if use_sht:
                nxt = scaled_hard_threshold(nxt, levels)
        except NearSingularGram as exc:
            status, reason = "failed", f"NearSingularGram: {exc}"
            break
        ev_next = oracle.evaluate(nxt, data)
        loss_next = float(np.mean(ev_next[1]))
        if not np.isfinite(loss_next) or loss_next > cfg.divergence * max(loss0, 1e-300):
            status = "failed"
            reason = "NonFinite" if not np.isfinite(loss_next) else "Diverged"
            break
        new_theta = compose(nxt, shape)
        step = np.linalg.norm(new_theta - theta)
        f, theta, ev, loss = nxt, new_theta, ev_next, loss_next
        j += 1
        if cfg.tol is not None and step <= cfg.tol * max(np.linalg.norm(theta), 1e-300):
            status = "converged"
            break
    if status == "failed":
        log.info("fit failed after iteration %d: %s", j, reason)
    if not traj or traj[-1][0] != j:
        record(j, theta, loss)
    return FitResult(f, theta, traj, status, reason, j)


def contiguous_folds(n, folds):
    """Index arrays of ``folds`` contiguous, nearly equal blocks."""
    if folds < 2 or folds > n:
        raise ParameterError(f"need 2 <= folds <= n, got folds={folds}, n={n}")
    return np.array_split(np.arange(n), folds)


def tau_grid(n, d, points=8, low=0.1, high=10.0):
    """Log grid of ``points`` values around ``tau0 = sqrt(n / log d)``."""
    tau0 = np.sqrt(n / np.log(d))
    return list(tau0 * np.geomspace(low, high, points))


def cross_validate_tau(grid, folds, f0, oracle, data, cfg, truth=None):
    """K-fold CV over ``grid``; returns ``(tau, table)``.

    Each candidate is fit on the complement of every contiguous fold and
    scored by mean held-out sample loss.  A failed fit disqualifies the
    candidate.  Ties go to the larger tau.
    """
    grid = [check_tau(t) for t in grid]
    if not grid:
        raise ParameterError("empty tau grid")
    blocks = contiguous_folds(data.n, folds)
    table = []
    for tau in grid:
        scores, failed = [], 0
        for blk in blocks:
            mask = np.ones(data.n, dtype=bool)
            mask[blk] = False
            res = fit(f0, oracle, data.subset(mask), cfg.replace(tau=tau))
            if res.failed:
                failed += 1
                continue
            scores.append(float(np.mean(oracle.sample_losses(res.factors, data.subset(blk)))))
        mean = float(np.mean(scores)) if not failed else np.inf
        table.append({"tau": tau, "fold_losses": scores, "mean_loss": mean, "failed_folds": failed})
    best = None
    for row in sorted(table, key=lambda r: r["tau"], reverse=True):
        if best is None or row["mean_loss"] < best["mean_loss"]:
            best = row
    if not np.isfinite(best["mean_loss"]):
        raise ParameterError("every tau candidate failed during cross-validation")
    return best["tau"], table
