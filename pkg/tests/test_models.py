import io
import math

import numpy as np
import pytest
from scipy import integrate

from kronest.errors import ParameterError, ShapeError
from kronest.kron import FactorPair, KroneckerShape, compose, permute, permute_inverse
from kronest.models import (Dataset, DesignSpec, TailSpec, draw_student_t, generate_dataset,
                            get_oracle, huber_losses, read_dataset_csv, write_dataset_csv)

# d1 >= d2 so that (P(theta), I) is a valid factor pair for any theta
TRACE_SHAPE = KroneckerShape(2, 3, 2, 2)
BIL_SHAPE = KroneckerShape(2, 3, 3, 2)


def free_pair(m):
    """Factor pair whose product is an arbitrary d1 x d2 matrix ``m``."""
    return FactorPair(np.array(m, dtype=float), np.eye(m.shape[1]))


def random_sample(rng, model, shape):
    if model == "bilinear":
        return rng.standard_normal((shape.q1, shape.q2)), rng.standard_normal((shape.p1, shape.p2))
    X = rng.standard_normal((shape.p, shape.q))
    y = float(rng.integers(0, 2)) if model == "logistic" else float(rng.standard_normal())
    return X, y


@pytest.mark.parametrize("model", ["trace", "logistic", "bilinear"])
def test_gradient_matches_finite_differences(rng, model):
    shape = BIL_SHAPE if model == "bilinear" else TRACE_SHAPE
    o = get_oracle(model)
    h = 1e-6
    for _ in range(20):
        M = rng.standard_normal((shape.d1, shape.d2)) * 0.5
        f = FactorPair(rng.standard_normal((shape.d1, 1)), rng.standard_normal((shape.d2, 1)))
        sample = random_sample(rng, model, shape)
        G = o.permuted_gradient(free_pair(M), sample, shape)
        D = rng.standard_normal(M.shape)
        fd = (o.sample_loss(free_pair(M + h * D), sample, shape)
              - o.sample_loss(free_pair(M - h * D), sample, shape)) / (2 * h)
        assert abs(np.sum(G * D) - fd) <= 1e-5 * max(abs(fd), 1e-3)
        # rank-K factors agree with the free parametrization
        assert np.allclose(o.permuted_gradient(f, sample, shape),
                           o.permuted_gradient(free_pair(f.L @ f.R.T), sample, shape))


def test_sample_loss_closed_forms(rng):
    s = TRACE_SHAPE
    X = rng.standard_normal((s.p, s.q))
    M = rng.standard_normal((s.d1, s.d2))
    t = float(np.sum(X * permute_inverse(M, s)))
    tr, lg = get_oracle("trace"), get_oracle("logistic")
    assert tr.sample_loss(free_pair(M), (X, 1.5), s) == pytest.approx(0.5 * (1.5 - t) ** 2)
    assert tr.sample_loss(free_pair(M), (X, t), s) == pytest.approx(0.0, abs=1e-20)
    assert lg.sample_loss(free_pair(M), (X, 1.0), s) == pytest.approx(math.log1p(math.exp(t)) - t)
    Z = np.zeros((s.d1, s.d2))
    assert lg.sample_loss(free_pair(Z), (X, 1.0), s) == pytest.approx(math.log(2))


def test_logistic_overflow_safe():
    s = KroneckerShape(1, 1, 1, 1)
    lg = get_oracle("logistic")
    f = FactorPair(np.array([[1.0]]), np.array([[1.0]]))
    big = lg.sample_loss(f, (np.array([[800.0]]), 0.0), s)
    assert big == pytest.approx(800.0)
    assert lg.sample_loss(f, (np.array([[800.0]]), 1.0), s) == pytest.approx(0.0, abs=1e-12)
    assert lg.sample_loss(f, (np.array([[-800.0]]), 0.0), s) == pytest.approx(0.0, abs=1e-12)


def test_logistic_gradient_at_zero(rng):
    s = TRACE_SHAPE
    X = rng.standard_normal((s.p, s.q))
    Z = free_pair(np.zeros((s.d1, s.d2)))
    for y in (0.0, 1.0):
        G = get_oracle("logistic").permuted_gradient(Z, (X, y), s)
        assert np.allclose(G, (0.5 - y) * permute(X, s))


def test_logistic_residual_bounded(rng):
    s = TRACE_SHAPE
    design = DesignSpec("logistic", s, "gaussian", 3, sigma1=50.0)
    data, truth = generate_dataset(design, 300, rng)
    assert set(np.unique(data.y)) <= {0.0, 1.0}
    assert np.all(np.abs(get_oracle("logistic").residuals(truth.factors, data)) <= 1)


def test_trace_zero_residual_gives_zero_gradient(rng):
    s = TRACE_SHAPE
    design = DesignSpec("trace", s, "constant", 3, noise=TailSpec("gaussian", scale=0.0))
    data, truth = generate_dataset(design, 10, rng)
    assert np.allclose(data.y, data.xflat @ truth.theta.ravel(), rtol=0, atol=0)
    G = get_oracle("trace").permuted_gradient(truth.factors, data.sample(0), s)
    assert np.allclose(G, 0, atol=1e-12)


def test_bilinear_cross_model(rng):
    s = BIL_SHAPE
    o = get_oracle("bilinear")
    for _ in range(20):
        A = rng.standard_normal((s.p1, s.q1))
        B = rng.standard_normal((s.p2, s.q2))
        theta = np.kron(A, B)
        X, Y = random_sample(rng, "bilinear", s)
        x, y = X.reshape(-1), Y.reshape(-1)  # vec(X^T), vec(Y^T)
        assert np.allclose(theta @ x, (A @ X @ B.T).reshape(-1))
        grad = np.outer(theta @ x - y, x)
        f = FactorPair(A.reshape(-1, 1, order="F"), B.reshape(-1, 1, order="F"))
        assert np.allclose(compose(f, s), theta, atol=1e-12)
        G = o.permuted_gradient(f, (X, Y), s)
        assert np.allclose(G, permute(grad, s), atol=1e-10)
        assert o.sample_loss(f, (X, Y), s) == pytest.approx(0.5 * np.sum((y - theta @ x) ** 2))


def test_huber_derivative_is_clipped_residual(rng):
    tau = 0.8
    for _ in range(20):
        r = rng.standard_normal(7) * 2
        h = 1e-6
        fd = (huber_losses(r + h, tau) - huber_losses(r - h, tau)) / (2 * h)
        assert np.allclose(fd, np.clip(r, -tau, tau), rtol=1e-5, atol=1e-8)
    assert np.allclose(huber_losses(np.array([0.5, 3.0]), 1.0), [0.125, 2.5])


def test_student_t_median():
    x = draw_student_t(np.random.default_rng(7), 1.5, 1.0, 100_000)
    assert -0.02 <= np.median(x) <= 0.02


def test_student_t_tail_matches_quadrature():
    dof = 1.5
    c = math.gamma((dof + 1) / 2) / (math.sqrt(dof * math.pi) * math.gamma(dof / 2))
    dens = lambda t: c * (1 + t * t / dof) ** (-(dof + 1) / 2)
    tail = 2 * integrate.quad(dens, 10, np.inf)[0]
    n = 100_000
    x = draw_student_t(np.random.default_rng(11), dof, 1.0, n)
    emp = np.mean(np.abs(x) > 10)
    assert abs(emp - tail) <= 3 * math.sqrt(tail * (1 - tail) / n)


def test_student_t_deterministic_and_validated():
    a = draw_student_t(np.random.default_rng(1), 2.5, 0.3, 50)
    b = draw_student_t(np.random.default_rng(1), 2.5, 0.3, 50)
    assert np.array_equal(a, b)
    with pytest.raises(ParameterError):
        draw_student_t(np.random.default_rng(1), 0.0)
    with pytest.raises(ParameterError):
        TailSpec("t", 1.0)


def test_tail_spec_parsing():
    assert TailSpec.parse("0.1*t1.5") == TailSpec("t", 1.5, 0.1)
    assert TailSpec.parse("N") == TailSpec("gaussian")
    assert TailSpec.parse("tbar1.1@1000") == TailSpec("truncated_t", 1.1, 1.0, 1000.0)
    assert TailSpec.parse("0.2*t2.1").label() == "0.2*t2.1"
    x = TailSpec.parse("tbar1.1@5").draw(np.random.default_rng(0), 10_000)
    assert np.abs(x).max() <= 5


@pytest.mark.parametrize("kappa", [1.0, 3.0, 7.0])
def test_orthonormal_truth_singular_values(rng, kappa):
    s = KroneckerShape(6, 6, 6, 6, K=2)
    design = DesignSpec("trace", s, "orthonormal", 5, kappa=kappa)
    _, truth = generate_dataset(design, 2, rng)
    sv = np.linalg.svd(permute(truth.theta, s), compute_uv=False)
    assert np.allclose(sv[:2], [1.0, 1.0 / kappa], atol=1e-10)
    assert np.all(sv[2:] < 1e-10)


def test_constant_truth_norms(rng):
    s = KroneckerShape(6, 6, 6, 6)
    _, truth = generate_dataset(DesignSpec("trace", s, "constant", 5), 2, rng)
    assert np.sum(truth.theta ** 2) == pytest.approx(25.0)
    b = KroneckerShape(5, 10, 5, 10)
    _, bt = generate_dataset(DesignSpec("bilinear", b, "constant", 8, value=math.sqrt(5 / 8)), 2, rng)
    assert np.sum(bt.theta ** 2) == pytest.approx(25.0)


def test_gaussian_truth_scaling(rng):
    s = KroneckerShape(6, 6, 6, 6)
    _, truth = generate_dataset(DesignSpec("trace", s, "gaussian", 5, sigma1=2.0), 2, rng)
    assert np.linalg.norm(truth.theta) == pytest.approx(2.0)
    assert len(np.flatnonzero(np.any(truth.factors.L != 0, axis=1))) == 5


def test_inactive_entries_use_separate_tail(rng):
    s = KroneckerShape(3, 3, 3, 3)
    design = DesignSpec("trace", s, "constant", 2,
                        predictors=TailSpec("gaussian", scale=0.0),
                        inactive=TailSpec("gaussian"))
    data, truth = generate_dataset(design, 50, rng)
    active = truth.theta != 0
    assert not data.X[:, active].any()
    assert np.all(data.X[:, ~active] != 0)


def test_dataset_determinism():
    design = DesignSpec("bilinear", KroneckerShape(2, 3, 2, 3), "gaussian", 3,
                        noise=TailSpec.parse("0.2*t1.5"))
    a, ta = generate_dataset(design, 40, np.random.default_rng(99))
    b, tb = generate_dataset(design, 40, np.random.default_rng(99))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)
    assert np.array_equal(ta.theta, tb.theta)


def test_design_validation():
    s = KroneckerShape(2, 2, 2, 2, K=2)
    with pytest.raises(ParameterError):
        DesignSpec("poisson", s)
    with pytest.raises(ParameterError):
        DesignSpec("bilinear", s)
    with pytest.raises(ParameterError):
        DesignSpec("trace", s, "orthonormal", 1)
    with pytest.raises(ShapeError):
        Dataset("trace", s, np.zeros((3, 2, 4)), np.zeros(3))


@pytest.mark.parametrize("model,shape", [("trace", TRACE_SHAPE), ("bilinear", BIL_SHAPE)])
def test_csv_round_trip(rng, model, shape):
    design = DesignSpec(model, shape, "gaussian", 2)
    data, _ = generate_dataset(design, 12, rng)
    buf = io.StringIO()
    write_dataset_csv(data, buf)
    back = read_dataset_csv(io.StringIO(buf.getvalue()), model, shape)
    assert np.array_equal(back.X, data.X) and np.array_equal(back.y, data.y)


def test_csv_column_major_layout():
    s = KroneckerShape(1, 2, 2, 1)  # p = 2, q = 2
    X = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    buf = io.StringIO()
    write_dataset_csv(Dataset("trace", s, X, np.array([5.0])), buf)
    assert buf.getvalue().splitlines() == ["x_1,x_2,x_3,x_4,y", "1.0,3.0,2.0,4.0,5.0"]


def test_csv_malformed():
    s = KroneckerShape(1, 2, 2, 1)
    with pytest.raises(ShapeError, match="header"):
        read_dataset_csv(io.StringIO("x_1,x_2,y\n1,2,3\n"), "trace", s)
    with pytest.raises(ShapeError):
        read_dataset_csv(io.StringIO("x_1,x_2,x_3,x_4,y\n1,2,3\n"), "trace", s)
    with pytest.raises(ShapeError):
        read_dataset_csv(io.StringIO("x_1,x_2,x_3,x_4,y\n1,2,3,4,nan\n"), "trace", s)
    with pytest.raises(ShapeError):
        read_dataset_csv(io.StringIO(""), "trace", s)
