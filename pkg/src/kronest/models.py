"""Model oracles (loss, per-sample gradients) and synthetic data generation.

Three families share one interface: trace regression, matrix logistic
regression (the concrete GLM) and bilinear regression.  Every per-sample
permuted gradient ``G_i = P(grad loss_i)`` is linear in a per-sample
*residual* (a scalar for trace/GLM, a ``p1 x p2`` matrix for bilinear), which
lets the Huber baseline clip residuals without touching the oracle.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import ParameterError, ShapeError
from .kron import FactorPair, GroundTruth, KroneckerShape, compose, permute

MODELS = ("trace", "logistic", "bilinear")


# --------------------------------------------------------------------------
# heavy-tailed sampling


def draw_student_t(rng, dof, scale=1.0, size=None):
    """Student-t draws ``scale * Z / sqrt(V / dof)``, ``V = 2 Gamma(dof/2)``."""
    if not dof > 0:
        raise ParameterError(f"dof must be positive, got {dof}")
    z = rng.standard_normal(size)
    v = 2.0 * rng.standard_gamma(dof / 2.0, size)
    return scale * z / np.sqrt(v / dof)


@dataclass(frozen=True)
class TailSpec:
    """Entry distribution: ``gaussian``, ``t`` (Student-t) or ``truncated_t``."""

    family: str = "gaussian"
    dof: float = None
    scale: float = 1.0
    clip: float = None

    def __post_init__(self):
        if self.family not in ("gaussian", "t", "truncated_t"):
            raise ParameterError(f"unknown tail family {self.family!r}")
        if not self.scale >= 0:
            raise ParameterError("scale must be nonnegative")
        if self.family != "gaussian" and not (self.dof is not None and self.dof > 1):
            raise ParameterError("Student-t families need dof > 1")
        if self.family == "truncated_t" and not (self.clip is not None and self.clip > 0):
            raise ParameterError("truncated_t needs clip > 0")

    def draw(self, rng, size):
        if self.family == "gaussian":
            return self.scale * rng.standard_normal(size)
        x = draw_student_t(rng, self.dof, 1.0, size)
        if self.family == "truncated_t":
            x = np.clip(x, -self.clip, self.clip)
        return self.scale * x

    @classmethod
    def parse(cls, obj):
        """Build from a dict or a short string such as ``"t2.5"``, ``"0.1*t1.5"``, ``"N"``."""
        if isinstance(obj, TailSpec):
            return obj
        if isinstance(obj, dict):
            return cls(**obj)
        s = str(obj).replace(" ", "")
        scale = 1.0
        if "*" in s:
            a, s = s.split("*", 1)
            scale = float(a)
        if s in ("N", "gaussian", "normal"):
            return cls("gaussian", scale=scale)
        if s.startswith("tbar"):
            dof, clip = s[4:].split("@")
            return cls("truncated_t", float(dof), scale, float(clip))
        if s.startswith("t"):
            return cls("t", float(s[1:]), scale)
        raise ParameterError(f"cannot parse tail spec {obj!r}")

    def label(self):
        pre = "" if self.scale == 1 else f"{self.scale:g}*"
        if self.family == "gaussian":
            return pre + "N"
        if self.family == "t":
            return pre + f"t{self.dof:g}"
        return pre + f"tbar{self.dof:g}@{self.clip:g}"


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """``n`` samples of one model family.

    ``X`` is ``(n, p, q)`` for trace/logistic and ``(n, q1, q2)`` for
    bilinear; ``y`` is ``(n,)`` or ``(n, p1, p2)``.
    """

    model: str
    shape: KroneckerShape
    X: np.ndarray
    y: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ParameterError(f"unknown model {self.model!r}")
        s = self.shape
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if self.model == "bilinear":
            xs, ys = (s.q1, s.q2), (s.p1, s.p2)
            ok = self.X.shape[1:] == xs and self.y.shape[1:] == ys
        else:
            xs, ys = (s.p, s.q), ()
            ok = self.X.shape[1:] == xs and self.y.ndim == 1
        if not ok or self.X.shape[0] != self.y.shape[0]:
            raise ShapeError(
                f"{self.model} data needs X (n, {xs[0]}, {xs[1]}) and y (n, {ys}); "
                f"got X{self.X.shape}, y{self.y.shape}")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def xflat(self):
        """Row-major flattened predictors (``vec(X^T)`` for bilinear)."""
        if "xflat" not in self._cache:
            self._cache["xflat"] = self.X.reshape(self.n, -1)
        return self._cache["xflat"]

    @property
    def px(self):
        """``P(X_i)`` stacked as ``(n, d1, d2)`` (trace/logistic only)."""
        if "px" not in self._cache:
            self._cache["px"] = np.ascontiguousarray(permute(self.X, self.shape))
        return self._cache["px"]

    @property
    def pxt(self):
        if "pxt" not in self._cache:
            self._cache["pxt"] = np.ascontiguousarray(self.px.transpose(0, 2, 1))
        return self._cache["pxt"]

    def subset(self, idx):
        return Dataset(self.model, self.shape, self.X[idx], self.y[idx])

    def sample(self, i):
        return self.X[i], self.y[i]


# --------------------------------------------------------------------------
# oracles


class ModelOracle:
    """Loss and gradient oracle of one model family.

    ``evaluate`` computes per-sample residuals and losses at an iterate and
    may stash intermediates in ``cache`` for a following
    ``factor_gradients`` call on the same iterate.
    """

    name = None

    def linear_predictor(self, f, data):
        raise NotImplementedError

    def evaluate(self, f, data):
        """Return ``(residuals, sample_losses, cache)`` at ``f``."""
        raise NotImplementedError

    def permuted_gradients(self, res, data):
        raise NotImplementedError

    def residuals(self, f, data):
        return self.evaluate(f, data)[0]

    def sample_losses(self, f, data):
        return self.evaluate(f, data)[1]

    def loss(self, f, data):
        return float(np.mean(self.sample_losses(f, data)))

    def factor_gradients(self, res, f, data, cache=None):
        """Per-sample raw factor gradients ``(G_i R, G_i^T L)``."""
        G = self.permuted_gradients(res, data)
        return G @ f.R, np.swapaxes(G, 1, 2) @ f.L

    def permuted_gradient(self, f, sample, shape):
        """``G = P(grad loss(P^-1(L R^T); sample))`` for a single sample."""
        X, y = sample
        one = Dataset(self.name, shape, np.asarray(X)[None], np.asarray(y)[None])
        return self.permuted_gradients(self.residuals(f, one), one)[0]

    def sample_loss(self, f, sample, shape):
        X, y = sample
        one = Dataset(self.name, shape, np.asarray(X)[None], np.asarray(y)[None])
        return float(self.sample_losses(f, one)[0])


class _ScalarResponse(ModelOracle):

    def linear_predictor(self, f, data):
        theta = compose(f, data.shape)
        return data.xflat @ theta.reshape(-1)

    def _pxr(self, f, data):
        n, d1, d2 = data.px.shape
        return (data.px.reshape(n * d1, d2) @ f.R).reshape(n, d1, f.K)

    def evaluate(self, f, data):
        # <P(X_i), L R^T> = sum((P(X_i) R) * L); P(X_i) R is reused by the gradient
        pxr = self._pxr(f, data)
        t = np.einsum("ndk,dk->n", pxr, f.L)
        res, losses = self._residual_loss(t, data.y)
        return res, losses, {"pxr": pxr, "L": f.L, "R": f.R}

    def permuted_gradients(self, res, data):
        return res[:, None, None] * data.px

    def factor_gradients(self, res, f, data, cache=None):
        n, d1, d2 = data.px.shape
        if cache is not None and cache["L"] is f.L and cache["R"] is f.R:
            pxr = cache["pxr"]
        else:
            pxr = self._pxr(f, data)
        pxl = (data.pxt.reshape(n * d2, d1) @ f.L).reshape(n, d2, f.K)
        return res[:, None, None] * pxr, res[:, None, None] * pxl


class TraceRegression(_ScalarResponse):
    """``y = <X, Theta> + e`` with loss ``(y - <X, Theta>)^2 / 2``."""

    name = "trace"

    @staticmethod
    def _residual_loss(t, y):
        r = t - y
        return r, 0.5 * r * r


def logistic_cumulant(t):
    """``log(1 + e^t)`` without overflow."""
    return np.logaddexp(0.0, t)


class LogisticGLM(_ScalarResponse):
    """Matrix logistic regression, ``P(y = 1 | X) = 1 / (1 + exp(-<X, Theta>))``."""

    name = "logistic"
    lipschitz = 0.25

    @staticmethod
    def link(t):
        return expit(t)

    @staticmethod
    def _residual_loss(t, y):
        return expit(t) - y, logistic_cumulant(t) - y * t


class BilinearRegression(ModelOracle):
    """``Y = A X B^T + E``, i.e. ``vec(Y^T) = (A kron B) vec(X^T) + vec(E^T)``."""

    name = "bilinear"

    def linear_predictor(self, f, data):
        s = data.shape
        theta = compose(f, s)
        return (data.xflat @ theta.T).reshape(data.n, s.p1, s.p2)

    def evaluate(self, f, data):
        r = self.linear_predictor(f, data) - data.y
        return r, 0.5 * np.sum(r * r, axis=(1, 2)), None

    def permuted_gradients(self, res, data):
        # P((Theta x - y) x^T) = X kron E
        s = data.shape
        G = np.einsum("nbe,nac->nbaec", data.X, res)
        return G.reshape(data.n, s.d1, s.d2)


def get_oracle(model):
    try:
        return {"trace": TraceRegression, "logistic": LogisticGLM,
                "bilinear": BilinearRegression}[model]()
    except KeyError:
        raise ParameterError(f"unknown model {model!r}") from None


def huber_losses(res, tau):
    """Element-wise Huber loss with knot ``tau`` (summed over response entries)."""
    a = np.abs(res)
    h = np.where(a <= tau, 0.5 * res * res, tau * a - 0.5 * tau * tau)
    if h.ndim > 1:
        h = h.reshape(h.shape[0], -1).sum(axis=1)
    return h


# --------------------------------------------------------------------------
# synthetic designs


@dataclass(frozen=True)
class DesignSpec:
    """Recipe for the ground truth and the sampling distributions.

    truth: ``constant`` (first ``s_star`` rows of L and R equal ``value``),
    ``orthonormal`` (``L = [U; 0] S^1/2`` with random orthonormal ``U`` and
    ``S = diag`` geometric from 1 to ``1/kappa``) or ``gaussian`` (first
    ``s_star`` rows Gaussian, each factor rescaled to squared norm ``sigma1``).
    ``inactive`` switches on the heterogeneous predictor design: entries that
    do not touch the signal are drawn from this spec instead.
    """

    model: str
    shape: KroneckerShape
    truth: str = "constant"
    s_star: int = 5
    value: float = 1.0
    kappa: float = 1.0
    sigma1: float = 1.0
    predictors: TailSpec = TailSpec("gaussian")
    noise: TailSpec = TailSpec("gaussian")
    inactive: TailSpec = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ParameterError(f"unknown model {self.model!r}")
        if self.truth not in ("constant", "orthonormal", "gaussian"):
            raise ParameterError(f"unknown truth recipe {self.truth!r}")
        if not 1 <= self.s_star <= min(self.shape.d1, self.shape.d2):
            raise ParameterError("s_star outside [1, min(d1, d2)]")
        if self.truth == "orthonormal" and self.s_star < self.shape.K:
            raise ParameterError("orthonormal truth needs s_star >= K")
        if self.model == "bilinear" and self.shape.K != 1:
            raise ParameterError("bilinear model has Kronecker rank 1")
        if self.kappa < 1:
            raise ParameterError("kappa must be >= 1")

    def replace(self, **kw):
        return replace(self, **kw)


def make_truth(design, rng):
    s = design.shape
    K, k = s.K, design.s_star
    L = np.zeros((s.d1, K))
    R = np.zeros((s.d2, K))
    if design.truth == "constant":
        L[:k] = design.value
        R[:k] = design.value
    elif design.truth == "orthonormal":
        U, _ = np.linalg.qr(rng.standard_normal((k, K)))
        V, _ = np.linalg.qr(rng.standard_normal((k, K)))
        S = np.geomspace(1.0, 1.0 / design.kappa, K) if K > 1 else np.ones(1)
        L[:k] = U * np.sqrt(S)
        R[:k] = V * np.sqrt(S)
    else:
        L[:k] = rng.standard_normal((k, K))
        R[:k] = rng.standard_normal((k, K))
        L *= np.sqrt(design.sigma1) / np.linalg.norm(L)
        R *= np.sqrt(design.sigma1) / np.linalg.norm(R)
    return GroundTruth.from_factors(L, R, s)


def _active_mask(design, truth):
    s = design.shape
    if design.model == "bilinear":
        # X entry (b, e) meets column b of A and column e of B
        A = truth.factors.L[:, 0].reshape(s.p1, s.q1, order="F")
        B = truth.factors.R[:, 0].reshape(s.p2, s.q2, order="F")
        return np.outer(np.any(A != 0, axis=0), np.any(B != 0, axis=0))
    return truth.theta != 0


def generate_dataset(design, n, rng, truth=None):
    """Draw ``n`` i.i.d. samples; returns ``(dataset, truth)``.

    The truth is drawn first from ``rng`` unless supplied.
    """
    n = int(n)
    if n < 1:
        raise ParameterError("n must be positive")
    if truth is None:
        truth = make_truth(design, rng)
    s = design.shape
    xdims = (s.q1, s.q2) if design.model == "bilinear" else (s.p, s.q)
    X = design.predictors.draw(rng, (n,) + xdims)
    if design.inactive is not None:
        mask = _active_mask(design, truth)
        Xin = design.inactive.draw(rng, (n,) + xdims)
        X = np.where(mask, X, Xin)
    if design.model == "bilinear":
        mean = (X.reshape(n, -1) @ truth.theta.T).reshape(n, s.p1, s.p2)
        y = mean + design.noise.draw(rng, (n, s.p1, s.p2))
    else:
        t = X.reshape(n, -1) @ truth.theta.reshape(-1)
        if design.model == "trace":
            y = t + design.noise.draw(rng, n)
        else:
            y = (rng.random(n) < expit(t)).astype(float)
    return Dataset(design.model, s, X, y), truth


# --------------------------------------------------------------------------
# CSV ingestion


def _fmt(v):
    return repr(float(v))


def csv_header(model, shape):
    if model == "bilinear":
        m, r = shape.q1 * shape.q2, shape.p1 * shape.p2
        return [f"x_{i + 1}" for i in range(m)] + [f"y_{i + 1}" for i in range(r)]
    return [f"x_{i + 1}" for i in range(shape.p * shape.q)] + ["y"]


def write_dataset_csv(data, fh):
    """One sample per row; matrices flattened column-major."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(csv_header(data.model, data.shape))
    for i in range(data.n):
        x = data.X[i].reshape(-1, order="F")
        y = np.atleast_1d(data.y[i]).reshape(-1, order="F")
        w.writerow([_fmt(v) for v in x] + [_fmt(v) for v in y])


def read_dataset_csv(fh, model, shape):
    """Parse a dataset written by :func:`write_dataset_csv` (or by hand)."""
    rows = csv.reader(fh)
    try:
        header = [h.strip() for h in next(rows)]
    except StopIteration:
        raise ShapeError("empty dataset file") from None
    expected = csv_header(model, shape)
    if header != expected:
        raise ShapeError(
            f"malformed header: expected {len(expected)} columns "
            f"{expected[0]}..{expected[-1]}, got {len(header)} starting {header[:2]}")
    vals = []
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(expected):
            raise ShapeError(f"line {lineno}: expected {len(expected)} values, got {len(row)}")
        try:
            vals.append([float(v) for v in row])
        except ValueError as exc:
            raise ShapeError(f"line {lineno}: {exc}") from None
    if not vals:
        raise ShapeError("dataset has no samples")
    a = np.array(vals)
    if not np.all(np.isfinite(a)):
        raise ShapeError("dataset contains non-finite values")
    n = a.shape[0]
    if model == "bilinear":
        m = shape.q1 * shape.q2
        X = a[:, :m].reshape(n, shape.q2, shape.q1).transpose(0, 2, 1)
        y = a[:, m:].reshape(n, shape.p2, shape.p1).transpose(0, 2, 1)
    else:
        X = a[:, :-1].reshape(n, shape.q, shape.p).transpose(0, 2, 1)
        y = a[:, -1]
    return Dataset(model, shape, np.ascontiguousarray(X), np.ascontiguousarray(y))
