import numpy as np
import pytest

from kronest.errors import ParameterError
from kronest.kron import FactorPair, KroneckerShape, compose, relative_error
from kronest.models import DesignSpec, TailSpec, generate_dataset, get_oracle, huber_losses
from kronest.optimizer import (OptimizerConfig, contiguous_folds, cross_validate_tau,
                               descent_direction, fit, srgd_step, tau_grid)
from kronest.robust import gram_inv_sqrt, robust_gradient_pair
from kronest.sht import SparsityLevels

TRACE = get_oracle("trace")


def instance(seed, n=200, noise="0.5*t1.5", predictors="N", shape=None, s_star=2):
    shape = shape or KroneckerShape(3, 3, 3, 3)
    design = DesignSpec("trace", shape, "constant", s_star,
                        predictors=TailSpec.parse(predictors), noise=TailSpec.parse(noise))
    rng = np.random.default_rng(seed)
    data, truth = generate_dataset(design, n, rng)
    f = truth.factors
    f0 = FactorPair(f.L + 0.2 * rng.standard_normal(f.L.shape),
                    f.R + 0.2 * rng.standard_normal(f.R.shape))
    return data, truth, f0


def test_config_validation():
    for kw in (dict(eta=-1.0), dict(tau=0.0), dict(iterations=-1), dict(iterations=1.5),
               dict(variant="adam"), dict(trajectory_every=0)):
        with pytest.raises(ParameterError):
            OptimizerConfig(**kw)


def test_fixed_point_at_noiseless_truth():
    data, truth, _ = instance(0, noise="0*N")
    out = srgd_step(truth.factors, TRACE, data, OptimizerConfig(eta=0.1, tau=1.0))
    assert np.allclose(out.L, truth.factors.L, atol=1e-14)
    assert np.allclose(out.R, truth.factors.R, atol=1e-14)


def test_zero_step_is_identity():
    data, _, f0 = instance(1)
    out = srgd_step(f0, TRACE, data, OptimizerConfig(eta=0.0, tau=1.0))
    assert np.array_equal(out.L, f0.L) and np.array_equal(out.R, f0.R)


def test_scalar_dynamics():
    s = KroneckerShape(1, 1, 1, 1)
    data, truth = generate_dataset(
        DesignSpec("trace", s, "constant", 1, value=1.5, predictors=TailSpec("gaussian", scale=0.0),
                   noise=TailSpec("gaussian", scale=0.0)), 1, np.random.default_rng(0))
    data.X[:] = 1.0
    data.y[:] = 2.25
    f0 = FactorPair(np.array([[0.4]]), np.array([[3.0]]))
    res = fit(f0, TRACE, data, OptimizerConfig(eta=0.1, tau=np.inf, iterations=500))
    assert abs(res.theta[0, 0] - 2.25) <= 1e-8
    # independent simulation of the same scalar recursion
    l, r = 0.4, 3.0
    for _ in range(500):
        g = l * r - 2.25
        l, r = l - 0.1 * g * np.sign(r) / abs(r), r - 0.1 * g * np.sign(l) / abs(l)
    assert res.theta[0, 0] == pytest.approx(l * r, abs=1e-12)


def test_zero_iterations_returns_start():
    data, truth, f0 = instance(2)
    res = fit(f0, TRACE, data, OptimizerConfig(iterations=0), truth)
    assert np.array_equal(res.factors.L, f0.L) and res.iterations == 0
    assert len(res.trajectory) == 1
    assert res.trajectory[0][1] == pytest.approx(relative_error(compose(f0, data.shape), truth.theta))


def test_scgd_equals_srgd_without_active_truncation():
    data, truth, f0 = instance(3, noise="N")
    cfg = OptimizerConfig(eta=0.05, tau=1e12, iterations=50, trajectory_every=1)
    a = fit(f0, TRACE, data, cfg, truth)
    b = fit(f0, TRACE, data, cfg.replace(variant="scgd"), truth)
    assert np.array_equal(a.theta, b.theta)
    assert a.trajectory == b.trajectory


def test_update_is_simultaneous():
    data, _, f0 = instance(4)
    cfg = OptimizerConfig(eta=0.05, tau=0.7)
    out = srgd_step(f0, TRACE, data, cfg)
    GL, GR = robust_gradient_pair(TRACE, f0, data, 0.7)
    # R first, then L, both from the incoming iterate
    R1 = f0.R - 0.05 * GR @ gram_inv_sqrt(f0.L)
    L1 = f0.L - 0.05 * GL @ gram_inv_sqrt(f0.R)
    assert np.allclose(out.L, L1, rtol=1e-13) and np.allclose(out.R, R1, rtol=1e-13)


def test_huber_direction_is_huber_loss_gradient(rng):
    data, _, f0 = instance(5, n=30)
    tau = 0.7
    DL, _ = descent_direction(f0, TRACE, data, "huber", tau)
    res = TRACE.residuals(f0, data)
    assert np.all(np.abs(np.abs(res) - tau) > 1e-3)

    def hloss(L):
        return np.mean(huber_losses(TRACE.residuals(FactorPair(L, f0.R), data), tau))

    h = 1e-6
    fd = np.zeros_like(f0.L)
    for i in range(f0.L.shape[0]):
        E = np.zeros_like(f0.L)
        E[i, 0] = h
        fd[i, 0] = (hloss(f0.L + E) - hloss(f0.L - E)) / (2 * h)
    assert np.linalg.norm(DL - fd) <= 1e-5 * np.linalg.norm(fd)


def test_rgd_truncates_raw_gradients():
    data, _, f0 = instance(6)
    res, _, cache = TRACE.evaluate(f0, data)
    gl, _ = TRACE.factor_gradients(res, f0, data, cache)
    DL, _ = descent_direction(f0, TRACE, data, "rgd", 0.3)
    assert np.allclose(DL, np.clip(gl, -0.3, 0.3).mean(axis=0))


def test_error_decreases_until_plateau():
    shape = KroneckerShape(6, 6, 6, 6)
    data, truth, f0 = instance(7, n=1000, noise="N", shape=shape, s_star=5)
    cfg = OptimizerConfig(eta=0.01, tau=1e6, iterations=300, levels=SparsityLevels(7, 7))
    res = fit(f0, TRACE, data, cfg, truth)
    errs = [e for _, e, _ in res.trajectory]
    assert errs[-1] < 0.5 * errs[0]
    for a, b in zip(errs, errs[1:]):
        assert b <= 1.05 * a


@pytest.mark.parametrize("variant", ["srgd", "rgd"])
def test_scale_robustness(variant):
    data, truth, f0 = instance(8, predictors="t2.5", noise="0.1*t1.5")
    cfg = OptimizerConfig(eta=0.01, tau=0.5, iterations=200, variant=variant,
                          levels=SparsityLevels(4, 4))
    a = fit(f0, TRACE, data, cfg, truth)
    b = fit(FactorPair(100 * f0.L, f0.R / 100), TRACE, data, cfg, truth)
    diff = np.linalg.norm(a.theta - b.theta) / np.linalg.norm(a.theta)
    if variant == "srgd":
        assert diff <= 1e-6
    else:
        assert diff > 1e-3


def test_divergence_is_reported():
    data, truth, f0 = instance(9, noise="N")
    res = fit(f0, TRACE, data, OptimizerConfig(eta=50.0, tau=np.inf, iterations=100,
                                               variant="rgd"), truth)
    assert res.failed and res.reason in ("Diverged", "NonFinite")
    assert np.isfinite(res.theta).all()


def test_near_singular_gram_fails_fit():
    data, truth, f0 = instance(10)
    z = FactorPair(np.zeros_like(f0.L), f0.R)
    res = fit(z, TRACE, data, OptimizerConfig(iterations=5), truth)
    assert res.failed and res.reason.startswith("NearSingularGram")


def test_tolerance_convergence():
    data, truth, f0 = instance(11, noise="0*N")
    res = fit(f0, TRACE, data, OptimizerConfig(eta=0.1, iterations=5000, tol=1e-10), truth)
    assert res.status == "converged" and res.iterations < 5000


def test_fit_determinism():
    data, truth, f0 = instance(12)
    cfg = OptimizerConfig(eta=0.02, tau=0.5, iterations=40, levels=SparsityLevels(3, 3))
    a, b = fit(f0, TRACE, data, cfg, truth), fit(f0, TRACE, data, cfg, truth)
    assert np.array_equal(a.theta, b.theta) and a.as_dict() == b.as_dict()


def test_contiguous_folds():
    f = contiguous_folds(10, 3)
    assert [list(b) for b in f] == [[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]]
    with pytest.raises(ParameterError):
        contiguous_folds(5, 1)


def test_tau_grid():
    g = tau_grid(100, np.e ** 4, points=3)
    assert np.allclose(g, [0.5, 5.0, 50.0])


def test_cv_single_candidate():
    data, truth, f0 = instance(13)
    tau, table = cross_validate_tau([0.7], 5, f0, TRACE, data, OptimizerConfig(iterations=5))
    assert tau == 0.7 and len(table[0]["fold_losses"]) == 5
    with pytest.raises(ParameterError):
        cross_validate_tau([], 5, f0, TRACE, data, OptimizerConfig(iterations=5))


def test_cv_ties_prefer_larger_tau():
    data, truth, f0 = instance(14, noise="N")
    cfg = OptimizerConfig(iterations=10)
    tau, table = cross_validate_tau([1e8, 1e9], 3, f0, TRACE, data, cfg)
    assert table[0]["mean_loss"] == table[1]["mean_loss"] and tau == 1e9


def cv_choices(noise, factor, trials=50):
    picks = []
    for t in range(trials):
        data, _, f0 = instance(1000 + t, n=200, noise=noise)
        tau0 = np.sqrt(data.n / np.log(81))
        cfg = OptimizerConfig(eta=0.05, iterations=60, levels=SparsityLevels(3, 3))
        tau, _ = cross_validate_tau([factor * tau0, 1e6], 5, f0, TRACE, data, cfg)
        picks.append(tau)
    return np.array(picks)


def test_cv_prefers_no_truncation_under_light_tails():
    assert np.mean(cv_choices("N", 0.01) == 1e6) >= 0.9


def test_cv_prefers_truncation_under_heavy_tails():
    assert np.mean(cv_choices("t1.5", 0.25) < 1e6) >= 0.8
