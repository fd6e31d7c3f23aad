"""Monte Carlo experiment harness.

An experiment is a grid of *cells* (tail specs, sample sizes, condition
numbers) times a number of replications.  Each replication draws one dataset
(and one initial iterate) that every method shares, so method differences
within a replication are paired.  Seeds are derived per ``(cell, rep)`` from
the base seed and recorded, so any single record can be reproduced on its
own with :func:`run_replication`.

Five experiment kinds are supported:

phase_transition
    error vs ``n`` for noise ``t_{1.05+eps}``, log-log slope per ``eps``.
conditioning
    error trajectories vs iteration for several ``kappa``.
robustness
    factorial predictor x noise design, full error distributions.
glm_ablation, bilinear_robustness
    the heterogeneous-predictor studies for the logistic and bilinear models.
"""

import itertools
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import KronestError, ParameterError
from .initializers import InitConfig, robust_estimate, robust_init
from .kron import KroneckerShape, factorize, relative_error
from .models import DesignSpec, TailSpec, generate_dataset, get_oracle
from .optimizer import (VARIANTS, OptimizerConfig, cross_validate_tau, fit,
                        tau_grid)
from .sht import SparsityLevels

log = logging.getLogger(__name__)

EXPERIMENTS = ("phase_transition", "conditioning", "robustness",
               "glm_ablation", "bilinear_robustness")
RECORD_FIELDS = ("experiment", "method", "model", "eps", "kappa", "n", "rep", "seed",
                 "rel_error", "iters", "status", "wall_ms", "cell")
TAU_RULES = ("rate", "scaled", "fixed", "cv")


def _check_keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise ParameterError(f"{where} must be a JSON object")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise ParameterError(f"unknown key(s) in {where}: {', '.join(extra)}")


@dataclass(frozen=True)
class TauRule:
    """How the truncation level is chosen for each cell.

    rate
        ``c * n^(1/(1+eps))`` (needs ``eps``; phase transition).
    scaled
        ``c * sqrt(n / log d)``.
    fixed
        ``c`` itself.
    cv
        ``folds``-fold CV over ``points`` values ``tau0 * geomspace(low, high)``
        with ``tau0 = sqrt(n / log d)``; with ``pilot`` the choice made on
        replication 0 is reused for the whole cell, otherwise every
        replication runs its own CV.
    """

    rule: str = "scaled"
    c: float = 1.0
    points: int = 8
    folds: int = 5
    low: float = 0.1
    high: float = 10.0
    pilot: bool = True

    def __post_init__(self):
        if self.rule not in TAU_RULES:
            raise ParameterError(f"unknown tau rule {self.rule!r}; choose from {TAU_RULES}")
        if not self.c > 0:
            raise ParameterError("tau constant must be positive")
        if self.points < 1 or self.folds < 2:
            raise ParameterError("tau CV needs points >= 1 and folds >= 2")
        if not 0 < self.low <= self.high:
            raise ParameterError("tau CV grid needs 0 < low <= high")

    def value(self, n, d, eps=None):
        if self.rule == "rate":
            if eps is None:
                raise ParameterError("the rate tau rule needs a tail index eps")
            return self.c * n ** (1.0 / (1.0 + eps))
        if self.rule == "scaled":
            return self.c * np.sqrt(n / np.log(d))
        if self.rule == "fixed":
            return self.c
        raise ParameterError("cv tau has no closed form")


@dataclass(frozen=True)
class InitSpec:
    """``truth`` starts at the true factors; ``robust`` runs the stage-one estimator.

    Truncation levels are ``c_x * sqrt(n / log d)`` and ``c_y * sqrt(n / log d)``;
    the Dantzig radius (or Lasso penalty) is ``c_r * sqrt(log d / n)``.
    """

    mode: str = "robust"
    c_x: float = 1.0
    c_y: float = 1.0
    c_r: float = 1.0
    tol: float = 1e-6
    gap_tol: float = 1e-3
    max_iter: int = 2000

    def __post_init__(self):
        if self.mode not in ("truth", "robust"):
            raise ParameterError(f"unknown init mode {self.mode!r}")

    def config(self, n, d):
        base = np.sqrt(n / np.log(d))
        return InitConfig(tau_x=self.c_x * base, tau_yx=self.c_y * base,
                          radius=self.c_r / base, tol=self.tol, gap_tol=self.gap_tol,
                          max_iter=self.max_iter, strict=False)


@dataclass(frozen=True)
class Cell:
    index: int
    predictors: TailSpec
    noise: TailSpec
    inactive: TailSpec
    eps: float
    kappa: float
    n: int

    def label(self):
        parts = [f"X={self.predictors.label()}", f"e={self.noise.label()}"]
        if self.inactive is not None:
            parts.append(f"X0={self.inactive.label()}")
        return "|".join(parts)


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to run one experiment reproducibly.

    ``predictors``, ``noise`` and ``inactive`` are lists of tail specs (short
    strings such as ``"t2.5"``, ``"0.1*t1.5"``, ``"tbar1.1@1000"``).  For the
    phase transition the noise is ``noise_scale * t_{1.05+eps}`` for each
    ``eps`` and ``noise`` is ignored.  ``search`` optionally lists
    ``{"eta", "iterations"}`` alternatives; each method then reports its
    best final error over them.
    """

    experiment: str
    model: str = "trace"
    shape: KroneckerShape = KroneckerShape(6, 6, 6, 6, 1)
    truth: str = "constant"
    s_star: int = 5
    value: float = 1.0
    sigma1: float = 1.0
    predictors: tuple = ("t2.5",)
    noise: tuple = ("N",)
    inactive: tuple = (None,)
    noise_scale: float = 1.0
    eps: tuple = (1.0,)
    n: tuple = (1000,)
    kappa: tuple = (1.0,)
    methods: tuple = ("srgd",)
    replications: int = 50
    seed: int = 0
    levels: tuple = None
    init: InitSpec = InitSpec()
    tau: TauRule = TauRule()
    eta: float = 0.01
    iterations: int = 500
    trajectory_every: int = 10
    search: tuple = ()
    timing: bool = False
    bootstrap: int = 1000

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ParameterError(
                f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.replications < 1:
            raise ParameterError("replications must be >= 1")
        for name in ("predictors", "noise", "inactive", "eps", "n", "kappa", "methods"):
            if len(getattr(self, name)) == 0:
                raise ParameterError(f"{name} grid must be nonempty")
        for m in self.methods:
            if m not in VARIANTS:
                raise ParameterError(f"unknown method {m!r}; choose from {VARIANTS}")
        if any(int(n) != n or n < 2 for n in self.n):
            raise ParameterError("sample sizes must be integers >= 2")
        if self.experiment == "phase_transition" and any(e <= 0 for e in self.eps):
            raise ParameterError("tail indices eps must be positive")
        if self.levels is not None:
            SparsityLevels(*self.levels).validate(self.shape.d1, self.shape.d2)
        if self.tau.rule == "rate" and self.experiment != "phase_transition":
            raise ParameterError("the rate tau rule is only defined for phase_transition")
        # building the designs validates model/truth/shape combinations early
        for c in self.cells():
            self.design(c)

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dict(cls, cfg):
        """Strictly validated construction from a JSON-style dict."""
        names = [f.name for f in cls.__dataclass_fields__.values()]
        _check_keys(cfg, names, "experiment config")
        if "experiment" not in cfg:
            raise ParameterError("experiment config needs an 'experiment' key")
        kw = dict(cfg)
        if "shape" in kw:
            _check_keys(kw["shape"], ("p1", "q1", "p2", "q2", "K"), "shape")
            kw["shape"] = KroneckerShape(**kw["shape"])
        if "init" in kw:
            _check_keys(kw["init"], InitSpec.__dataclass_fields__, "init")
            kw["init"] = InitSpec(**kw["init"])
        if "tau" in kw:
            _check_keys(kw["tau"], TauRule.__dataclass_fields__, "tau")
            kw["tau"] = TauRule(**kw["tau"])
        for name in ("predictors", "noise", "inactive", "eps", "n", "kappa", "methods"):
            if name in kw:
                v = kw[name]
                kw[name] = tuple(v) if isinstance(v, (list, tuple)) else (v,)
        if kw.get("levels") is not None:
            if len(kw["levels"]) != 2:
                raise ParameterError("levels must be [s_L, s_R]")
            kw["levels"] = tuple(int(v) for v in kw["levels"])
        if "search" in kw:
            for alt in kw["search"]:
                _check_keys(alt, ("eta", "iterations"), "search entry")
            kw["search"] = tuple(dict(a) for a in kw["search"])
        for name in ("predictors", "noise", "inactive"):
            if name in kw:
                kw[name] = tuple(None if v is None else TailSpec.parse(v).label()
                                 for v in kw[name])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ParameterError(str(exc)) from exc

    def to_dict(self):
        d = asdict(self)
        d["shape"] = self.shape.as_dict()
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["search"] = [dict(a) for a in self.search]
        return d

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return ExperimentSpec.from_dict(d)

    # -- grid ----------------------------------------------------------------

    def cells(self):
        """Grid cells in deterministic order."""
        parse = lambda v: None if v is None else TailSpec.parse(v)
        if self.experiment == "phase_transition":
            noises = [(e, TailSpec("t", 1.05 + e, self.noise_scale)) for e in self.eps]
        else:
            noises = [(None, parse(v)) for v in self.noise]
        out = []
        grid = itertools.product(noises, self.predictors, self.inactive, self.kappa, self.n)
        for i, ((eps, noise), x, x0, kappa, n) in enumerate(grid):
            out.append(Cell(i, parse(x), noise, parse(x0), eps, float(kappa), int(n)))
        return out

    def design(self, cell):
        return DesignSpec(self.model, self.shape, self.truth, self.s_star, self.value,
                          cell.kappa, self.sigma1, cell.predictors, cell.noise, cell.inactive)

    def sparsity(self):
        if self.levels is None:
            return SparsityLevels.full(self.shape)
        return SparsityLevels(*self.levels)

    def log_dim(self):
        s = self.shape
        return s.q if self.model == "bilinear" else s.p * s.q

    def optimizer_config(self, method, tau):
        return OptimizerConfig(eta=self.eta, tau=tau, iterations=self.iterations,
                               levels=self.sparsity(), variant=method,
                               trajectory_every=self.trajectory_every)

    def seed_for(self, cell, rep):
        ss = np.random.SeedSequence([int(self.seed), int(cell.index), int(rep)])
        return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class ExperimentReport:
    """Long-format records plus summaries of one experiment run.

    ``records`` holds one dict per successful (cell, method, replication);
    failed runs go to ``failures`` with their reason.
    """

    spec: ExperimentSpec
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    trajectories: list = field(default_factory=list)
    taus: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)
    slopes: list = field(default_factory=list)
    trajectory_table: list = field(default_factory=list)

    def errors(self, method, **match):
        """Relative errors of ``method`` in records matching ``match``."""
        out = [r["rel_error"] for r in self.records if r["method"] == method
               and all(r[k] == v for k, v in match.items())]
        return np.array(out)

    def summary(self):
        return {
            "experiment": self.spec.experiment,
            "records": len(self.records),
            "failures": self.failures,
            "aggregates": self.aggregates,
            "slopes": self.slopes,
            "tau": self.taus,
            "trajectories": self.trajectory_table,
        }


# --------------------------------------------------------------------------
# single replication


def _initial(spec, cell, data, truth):
    if spec.init.mode == "truth":
        return truth.factors.copy()
    icfg = spec.init.config(data.n, spec.log_dim())
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        f0 = robust_init(data, icfg, spec.sparsity())
    for w in caught:
        log.debug("cell %d: %s", cell.index, w.message)
    return f0


def _draw(spec, cell, seed):
    rng = np.random.default_rng(seed)
    return generate_dataset(spec.design(cell), cell.n, rng)


def _choose_tau(spec, cell, method, f0, oracle, data):
    if method == "scgd":
        return np.inf, None
    r = spec.tau
    if r.rule != "cv":
        return r.value(cell.n, spec.log_dim(), cell.eps), None
    grid = tau_grid(data.n, spec.log_dim(), r.points, r.low, r.high)
    tau, table = cross_validate_tau(grid, r.folds, f0, oracle, data,
                                    spec.optimizer_config(method, np.inf))
    return tau, table


def _fit_best(spec, method, tau, f0, oracle, data, truth):
    cfg = spec.optimizer_config(method, tau)
    if not spec.search:
        return fit(f0, oracle, data, cfg, truth)
    best = None
    for alt in spec.search:
        res = fit(f0, oracle, data, cfg.replace(**alt), truth)
        if res.failed:
            continue
        if best is None or res.final_error() < best.final_error():
            best = res
    return best if best is not None else res


def run_replication(spec, cell, rep, seed=None, taus=None):
    """All methods on one dataset; returns ``(records, failures, trajectories)``.

    ``taus`` maps method to a pre-chosen truncation level (pilot CV); methods
    not in it choose their own.
    """
    seed = spec.seed_for(cell, rep) if seed is None else int(seed)
    oracle = get_oracle(spec.model)
    base = dict(experiment=spec.experiment, model=spec.model,
                eps=cell.eps, kappa=cell.kappa, n=cell.n, rep=rep, seed=seed,
                cell=cell.label(), cell_index=cell.index)
    records, failures, trajs = [], [], []
    try:
        data, truth = _draw(spec, cell, seed)
        t0 = time.perf_counter()
        f0 = _initial(spec, cell, data, truth)
        init_ms = (time.perf_counter() - t0) * 1e3
    except KronestError as exc:
        for m in spec.methods:
            failures.append(dict(base, method=m, reason=f"init: {type(exc).__name__}: {exc}"))
        return records, failures, trajs
    for m in spec.methods:
        t0 = time.perf_counter()
        try:
            if taus and m in taus:
                tau = taus[m]
            else:
                tau, _ = _choose_tau(spec, cell, m, f0, oracle, data)
            res = _fit_best(spec, m, tau, f0, oracle, data, truth)
        except KronestError as exc:
            failures.append(dict(base, method=m, reason=f"{type(exc).__name__}: {exc}"))
            continue
        wall = (time.perf_counter() - t0) * 1e3 + init_ms
        if res.failed:
            failures.append(dict(base, method=m, reason=res.reason))
            continue
        records.append(dict(base, method=m, rel_error=relative_error(res.theta, truth.theta),
                            iters=res.iterations, status=res.status,
                            wall_ms=round(wall, 3) if spec.timing else None))
        trajs.append(dict(cell=cell.index, method=m, rep=rep,
                          points=[(j, e) for j, e, _ in res.trajectory]))
    return records, failures, trajs


def _pilot(spec, cell):
    """Pilot CV on replication 0 of ``cell``: ``{method: tau}`` and the tables."""
    seed = spec.seed_for(cell, 0)
    oracle = get_oracle(spec.model)
    data, truth = _draw(spec, cell, seed)
    f0 = _initial(spec, cell, data, truth)
    taus, rows = {}, []
    for m in spec.methods:
        try:
            tau, table = _choose_tau(spec, cell, m, f0, oracle, data)
        except KronestError as exc:
            log.warning("cell %d %s: pilot CV failed: %s", cell.index, m, exc)
            continue
        taus[m] = tau
        rows.append({"cell": cell.index, "label": cell.label(), "n": cell.n, "kappa": cell.kappa,
                     "eps": cell.eps, "method": m, "tau": None if np.isinf(tau) else tau,
                     "table": table})
    return cell.index, taus, rows


def _rep_task(args):
    spec_dict, cell_index, rep, taus = args
    spec = ExperimentSpec.from_dict(spec_dict)
    cell = spec.cells()[cell_index]
    return cell_index, rep, run_replication(spec, cell, rep, taus=taus)


def _pilot_task(args):
    spec_dict, cell_index = args
    spec = ExperimentSpec.from_dict(spec_dict)
    return _pilot(spec, spec.cells()[cell_index])


def _map(fn, tasks, workers, progress=None):
    out = []
    if workers <= 1:
        for i, t in enumerate(tasks):
            out.append(fn(t))
            if progress:
                progress(i + 1, len(tasks))
        return out
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for i, r in enumerate(pool.map(fn, tasks)):
            out.append(r)
            if progress:
                progress(i + 1, len(tasks))
    return out


def run_experiment(spec, workers=1, progress=None):
    """Run every (cell, replication) and merge results in grid order."""
    cells = spec.cells()
    sd = spec.to_dict()
    pilot_taus = {}
    report = ExperimentReport(spec)
    if spec.tau.rule == "cv" and spec.tau.pilot:
        for idx, taus, rows in _map(_pilot_task, [(sd, c.index) for c in cells], workers):
            pilot_taus[idx] = taus
            report.taus.extend(rows)
    elif spec.tau.rule != "cv":
        for c in cells:
            for m in spec.methods:
                tau = np.inf if m == "scgd" else spec.tau.value(c.n, spec.log_dim(), c.eps)
                report.taus.append({"cell": c.index, "label": c.label(), "n": c.n,
                                    "kappa": c.kappa, "eps": c.eps, "method": m,
                                    "tau": None if np.isinf(tau) else tau})
    tasks = [(sd, c.index, r, pilot_taus.get(c.index))
             for c in cells for r in range(spec.replications)]
    for _, _, (recs, fails, trajs) in _map(_rep_task, tasks, workers, progress):
        report.records.extend(recs)
        report.failures.extend(fails)
        report.trajectories.extend(trajs)
    for f in report.failures:
        log.warning("failed: cell %d (%s) method %s rep %d: %s",
                    f["cell_index"], f["cell"], f["method"], f["rep"], f["reason"])
    report.aggregates = aggregate(report)
    return report


def tune_init(spec, c_grid=(0.5, 1.0, 2.0, 4.0), r_grid=None, holdout=0.2):
    """Pick ``(c_x = c_y, c_r)`` for the stage-one estimator by validation loss.

    Uses replication 0 of the first cell: the last ``holdout`` fraction of
    the sample is held out and each candidate estimate is scored by the
    model loss there.  Returns ``(best, table)``; failed solves score inf.
    """
    if r_grid is None:
        r_grid = np.geomspace(0.1, 10.0, 8)
    cell = spec.cells()[0]
    data, truth = _draw(spec, cell, spec.seed_for(cell, 0))
    cut = int(round(data.n * (1.0 - holdout)))
    train, val = data.subset(slice(0, cut)), data.subset(slice(cut, None))
    oracle = get_oracle(spec.model)
    full = spec.shape.with_rank(min(spec.shape.d1, spec.shape.d2))
    table = []
    for c in c_grid:
        for r in r_grid:
            ispec = InitSpec("robust", c, c, float(r), spec.init.tol, spec.init.gap_tol,
                             spec.init.max_iter)
            try:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    th = robust_estimate(train, ispec.config(train.n, spec.log_dim()))
                loss = oracle.loss(factorize(th, full), val)
            except KronestError:
                loss = np.inf
            table.append({"c_x": c, "c_y": c, "c_r": float(r), "val_loss": float(loss)})
    best = min(table, key=lambda row: row["val_loss"])
    return best, table


# --------------------------------------------------------------------------
# analysis


def fit_slope(xs, ys):
    """OLS line through ``(xs, ys)``: ``(slope, intercept, stderr of slope)``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ParameterError("xs and ys must be 1-d arrays of equal length")
    if xs.size < 3:
        raise ParameterError(f"slope fit needs at least 3 points, got {xs.size}")
    xc = xs - xs.mean()
    sxx = float(xc @ xc)
    if sxx <= 1e-12 * max(1.0, float(xs @ xs)):
        raise ParameterError("slope fit needs distinct x values")
    slope = float(xc @ (ys - ys.mean())) / sxx
    intercept = float(ys.mean() - slope * xs.mean())
    resid = ys - intercept - slope * xs
    dof = xs.size - 2
    stderr = float(np.sqrt(max(resid @ resid, 0.0) / dof / sxx))
    return slope, intercept, stderr


def bootstrap_median_ci(x, resamples=1000, level=0.95, rng=None):
    """Basic bootstrap interval ``(2 m - q_hi, 2 m - q_lo)`` for the median."""
    x = np.asarray(x, dtype=float)
    rng = np.random.default_rng(rng)
    med = float(np.median(x))
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    boot = np.median(x[idx], axis=1)
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(boot, [a, 1.0 - a])
    return 2.0 * med - float(hi), 2.0 * med - float(lo)


def aggregate(report):
    spec = report.spec
    rows = []
    rng = np.random.default_rng([int(spec.seed), 7])
    for c in spec.cells():
        for m in spec.methods:
            e = np.array([r["rel_error"] for r in report.records
                          if r["cell_index"] == c.index and r["method"] == m])
            nfail = sum(1 for f in report.failures
                        if f["cell_index"] == c.index and f["method"] == m)
            row = {"cell": c.index, "label": c.label(), "method": m, "eps": c.eps,
                   "kappa": c.kappa, "n": c.n, "count": int(e.size), "failures": nfail}
            if e.size:
                q1, med, q3 = np.quantile(e, [0.25, 0.5, 0.75])
                row.update(mean=float(e.mean()), median=float(med),
                           q1=float(q1), q3=float(q3))
                if spec.experiment != "phase_transition" and e.size > 1 and spec.bootstrap:
                    lo, hi = bootstrap_median_ci(e, spec.bootstrap, rng=rng)
                    row.update(median_ci=[lo, hi])
            rows.append(row)
    return rows


def _slopes(report):
    spec = report.spec
    out = []
    for eps in spec.eps:
        for m in spec.methods:
            pts = [(r["n"], r["mean"]) for r in report.aggregates
                   if r["eps"] == eps and r["method"] == m and r.get("mean", 0) > 0]
            entry = {"eps": eps, "method": m, "theory": -eps / (1.0 + eps),
                     "n": [p[0] for p in pts], "mean_error": [p[1] for p in pts]}
            try:
                s, b, se = fit_slope(np.log([p[0] for p in pts]), np.log([p[1] for p in pts]))
                entry.update(slope=s, intercept=b, stderr=se)
            except ParameterError as exc:
                entry.update(slope=None, error=str(exc))
            out.append(entry)
    return out


def _trajectory_table(report):
    spec = report.spec
    out = []
    for c in spec.cells():
        for m in spec.methods:
            runs = [t["points"] for t in report.trajectories
                    if t["cell"] == c.index and t["method"] == m]
            if not runs:
                continue
            # runs may stop early; average over the runs that reached each point
            by_iter = {}
            for pts in runs:
                for j, e in pts:
                    by_iter.setdefault(j, []).append(e)
            for j in sorted(by_iter):
                v = np.array(by_iter[j])
                out.append({"cell": c.index, "label": c.label(), "method": m,
                            "kappa": c.kappa, "n": c.n, "iteration": int(j),
                            "mean_rel_error": float(v.mean()),
                            "median_rel_error": float(np.median(v)), "runs": int(v.size)})
    return out


def _require(spec, kinds):
    if spec.experiment not in kinds:
        raise ParameterError(f"expected a {' or '.join(kinds)} spec, got {spec.experiment!r}")


def run_phase_transition(spec, workers=1, progress=None):
    """Mean error per ``(eps, n)`` and its log-log slope per ``eps``."""
    _require(spec, ("phase_transition",))
    if spec.model not in ("trace", "bilinear"):
        raise ParameterError("phase transition runs on trace or bilinear models")
    report = run_experiment(spec, workers, progress)
    report.slopes = _slopes(report)
    return report


def run_conditioning(spec, workers=1, progress=None):
    """Error trajectories averaged over replications per ``(kappa, method)``."""
    _require(spec, ("conditioning",))
    report = run_experiment(spec, workers, progress)
    report.trajectory_table = _trajectory_table(report)
    return report


def run_robustness(spec, workers=1, progress=None):
    """Per-cell error distributions for the factorial tail designs."""
    _require(spec, ("robustness", "glm_ablation", "bilinear_robustness"))
    return run_experiment(spec, workers, progress)


RUNNERS = {
    "phase_transition": run_phase_transition,
    "conditioning": run_conditioning,
    "robustness": run_robustness,
    "glm_ablation": run_robustness,
    "bilinear_robustness": run_robustness,
}


def run(spec, workers=1, progress=None):
    return RUNNERS[spec.experiment](spec, workers, progress)


# --------------------------------------------------------------------------
# serialization


def _cell_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_csv_rows(report):
    yield list(RECORD_FIELDS)
    for r in report.records:
        yield [_cell_value(r.get(k)) for k in RECORD_FIELDS]


def trajectory_csv_rows(report):
    keys = ("label", "method", "kappa", "n", "iteration", "mean_rel_error",
            "median_rel_error", "runs")
    yield list(keys)
    for r in report.trajectory_table:
        yield [_cell_value(r[k]) for k in keys]
