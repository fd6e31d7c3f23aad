"""Command-line interface.

Subcommands::

    kronest experiment --config exp1.json [--reps N] [--seed S] [--workers W] --out DIR
    kronest generate   --model trace --p1 6 ... --n 500 --seed 1 --out data.csv
    kronest fit        data.csv --model trace --p1 6 ... --out DIR [--cv-tau 8]
    kronest cv-tau     data.csv --model trace --p1 6 ... --cv-tau 8 --out cv.json

Exit codes: 0 success, 2 invalid input or configuration, 3 execution failure.
Set ``KRONEST_LOG`` (e.g. ``INFO``) to change the log level.
"""

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from . import simlab
from .errors import KronestError, ParameterError, ShapeError
from .initializers import InitConfig, robust_init
from .kron import KroneckerShape
from .models import (DesignSpec, TailSpec, generate_dataset, get_oracle, read_dataset_csv,
                     write_dataset_csv)
from .optimizer import OptimizerConfig, cross_validate_tau, fit, tau_grid
from .sht import SparsityLevels

log = logging.getLogger("kronest")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3


class InvalidInput(Exception):
    pass


class ExecutionFailed(Exception):
    pass


# --------------------------------------------------------------------------
# output helpers


def atomic_write(path, text):
    """Write ``text`` to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(o):
    if isinstance(o, (np.floating, float)):
        v = float(o)
        return v if np.isfinite(v) else None
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return [_jsonable(v) for v in o.tolist()]
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    return o


def to_json(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def csv_text(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def matrix_rows(m):
    return [[repr(float(v)) for v in row] for row in np.atleast_2d(m)]


def factor_rows(f):
    yield ["factor", "row", "k", "value"]
    for name, m in (("L", f.L), ("R", f.R)):
        for i in range(m.shape[0]):
            for k in range(m.shape[1]):
                yield [name, str(i), str(k), repr(float(m[i, k]))]


# --------------------------------------------------------------------------
# argument parsing


def _add_shape(p, model_default="trace"):
    g = p.add_argument_group("model and shape")
    g.add_argument("--model", choices=("trace", "logistic", "bilinear"), default=model_default)
    for name in ("p1", "q1", "p2", "q2"):
        g.add_argument(f"--{name}", type=int, default=6)
    g.add_argument("--rank", type=int, default=1, help="Kronecker rank K")
    g.add_argument("--sl", type=int, default=None, help="row sparsity of L (default: no SHT)")
    g.add_argument("--sr", type=int, default=None, help="row sparsity of R (default: no SHT)")


def _add_fit_args(p):
    g = p.add_argument_group("optimizer")
    g.add_argument("--tau", type=float, default=None,
                   help="truncation level (default sqrt(n / log d))")
    g.add_argument("--eta", type=float, default=0.01)
    g.add_argument("--iters", type=int, default=500)
    g.add_argument("--variant", choices=("srgd", "scgd", "rgd", "huber"), default="srgd")
    g.add_argument("--cv-tau", type=int, default=None, metavar="N",
                   help="choose tau by CV over an N-point log grid")
    g.add_argument("--folds", type=int, default=5)
    g.add_argument("--radius", type=float, default=None,
                   help="Dantzig radius / Lasso penalty (default sqrt(log d / n))")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kronest",
        description="Robust Kronecker-structured estimation: experiments, fitting, data.")
    sub = parser.add_subparsers(dest="command", required=True)

    e = sub.add_parser("experiment", help="run a simulation experiment from a JSON config")
    e.add_argument("--config", required=True,
                   help="JSON config path, or the name of a bundled config (exp1, exp2, ...)")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--reps", type=int, default=None)
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--out", required=True)
    e.add_argument("--tau", type=float, default=None, help="fixed truncation level")
    e.add_argument("--eta", type=float, default=None)
    e.add_argument("--iters", type=int, default=None)
    e.add_argument("--cv-tau", type=int, default=None, metavar="N")

    g = sub.add_parser("generate", help="write a synthetic dataset and its truth sidecar")
    _add_shape(g)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--truth", choices=("constant", "orthonormal", "gaussian"), default="constant")
    g.add_argument("--s-star", type=int, default=5)
    g.add_argument("--value", type=float, default=1.0)
    g.add_argument("--kappa", type=float, default=1.0)
    g.add_argument("--sigma1", type=float, default=1.0)
    g.add_argument("--predictors", default="N")
    g.add_argument("--noise", default="N")
    g.add_argument("--zero-noise", action="store_true")
    g.add_argument("--out", required=True, help="dataset CSV path")

    f = sub.add_parser("fit", help="two-stage fit of a dataset CSV")
    f.add_argument("data")
    _add_shape(f)
    _add_fit_args(f)
    f.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("cv-tau", help="cross-validate the truncation level")
    c.add_argument("data")
    _add_shape(c)
    _add_fit_args(c)
    c.add_argument("--out", required=True, help="JSON output path")
    return parser


# --------------------------------------------------------------------------
# commands


def load_config(name):
    path = Path(name)
    if path.is_file():
        text = path.read_text()
    else:
        stem = name[:-5] if name.endswith(".json") else name
        bundled = resources.files("kronest") / "configs" / f"{stem}.json"
        if os.sep in name or not bundled.is_file():
            raise InvalidInput(f"config file not found: {name}")
        text = bundled.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{name}: invalid JSON: {exc}") from None


def cmd_experiment(args):
    cfg = load_config(args.config)
    if not isinstance(cfg, dict):
        raise InvalidInput(f"{args.config}: top level must be a JSON object")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.reps is not None:
        cfg["replications"] = args.reps
    if args.eta is not None:
        cfg["eta"] = args.eta
    if args.iters is not None:
        cfg["iterations"] = args.iters
    if args.tau is not None:
        cfg["tau"] = {"rule": "fixed", "c": args.tau}
    if args.cv_tau is not None:
        cfg["tau"] = dict(cfg.get("tau", {}), rule="cv", points=args.cv_tau)
    if args.workers < 1:
        raise InvalidInput("--workers must be >= 1")
    spec = simlab.ExperimentSpec.from_dict(cfg)
    out = Path(args.out)
    # snapshot first so a failed run still documents what was attempted
    atomic_write(out / "config.resolved.json", to_json(spec.to_dict()))

    def progress(done, total):
        log.info("experiment %s: %d/%d replications", spec.experiment, done, total)

    report = simlab.run(spec, args.workers, progress)
    atomic_write(out / "records.csv", csv_text(simlab.records_csv_rows(report)))
    atomic_write(out / "summary.json", to_json(report.summary()))
    if report.trajectory_table:
        atomic_write(out / "trajectories.csv", csv_text(simlab.trajectory_csv_rows(report)))
    print(f"{len(report.records)} records, {len(report.failures)} failures -> {out}")
    return EXIT_OK


def _shape(args):
    return KroneckerShape(args.p1, args.q1, args.p2, args.q2, args.rank)


def _levels(args, shape):
    if args.sl is None and args.sr is None:
        return SparsityLevels.full(shape)
    sl = shape.d1 if args.sl is None else args.sl
    sr = shape.d2 if args.sr is None else args.sr
    return SparsityLevels(sl, sr).validate(shape.d1, shape.d2)


def cmd_generate(args):
    shape = _shape(args)
    noise = TailSpec.parse(args.noise)
    if args.zero_noise:
        noise = TailSpec("gaussian", scale=0.0)
    design = DesignSpec(args.model, shape, args.truth, args.s_star, args.value, args.kappa,
                        args.sigma1, TailSpec.parse(args.predictors), noise)
    data, truth = generate_dataset(design, args.n, np.random.default_rng(args.seed))
    buf = io.StringIO()
    write_dataset_csv(data, buf)
    out = Path(args.out)
    atomic_write(out, buf.getvalue())
    sidecar = {
        "model": args.model, "shape": shape.as_dict(), "n": args.n, "seed": args.seed,
        "design": {"truth": args.truth, "s_star": args.s_star, "value": args.value,
                   "kappa": args.kappa, "sigma1": args.sigma1,
                   "predictors": design.predictors.label(), "noise": noise.label()},
        "theta": truth.theta, "L": truth.factors.L, "R": truth.factors.R,
        "sigma": truth.sigma,
        "supports": {"L": list(truth.supports[0]), "R": list(truth.supports[1])},
    }
    atomic_write(out.with_name(out.stem + ".truth.json"), to_json(sidecar))
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def _load_data(args):
    shape = _shape(args)
    path = Path(args.data)
    if not path.is_file():
        raise InvalidInput(f"dataset not found: {path}")
    with open(path, newline="") as fh:
        data = read_dataset_csv(fh, args.model, shape)
    return data, shape


def _log_dim(data):
    s = data.shape
    return s.q if data.model == "bilinear" else s.p * s.q


def _prepare(args):
    data, shape = _load_data(args)
    levels = _levels(args, shape)
    d = _log_dim(data)
    base = np.sqrt(data.n / np.log(d))
    radius = args.radius if args.radius is not None else 1.0 / base
    icfg = InitConfig(tau_x=base, tau_yx=base, radius=radius, tol=1e-8, gap_tol=1e-5,
                      max_iter=20000, strict=False)
    f0 = robust_init(data, icfg, levels)
    cfg = OptimizerConfig(eta=args.eta, tau=base if args.tau is None else args.tau,
                          iterations=args.iters, levels=levels, variant=args.variant)
    return data, shape, f0, cfg


def _cv(args, data, f0, cfg):
    grid = tau_grid(data.n, _log_dim(data), args.cv_tau)
    return cross_validate_tau(grid, args.folds, f0, get_oracle(data.model), data, cfg)


def cmd_fit(args):
    data, shape, f0, cfg = _prepare(args)
    report = {"model": data.model, "shape": shape.as_dict(), "n": data.n,
              "variant": cfg.variant, "eta": cfg.eta, "iterations": cfg.iterations,
              "levels": [cfg.levels.s_L, cfg.levels.s_R]}
    if args.cv_tau is not None:
        tau, table = _cv(args, data, f0, cfg)
        cfg = cfg.replace(tau=tau)
        report["cv"] = {"points": args.cv_tau, "folds": args.folds, "table": table}
    report["tau"] = cfg.tau
    res = fit(f0, get_oracle(data.model), data, cfg)
    report.update(res.as_dict())
    out = Path(args.out)
    atomic_write(out / "theta.csv", csv_text(matrix_rows(res.theta)))
    atomic_write(out / "factors.csv", csv_text(factor_rows(res.factors)))
    atomic_write(out / "report.json", to_json(report))
    if res.failed:
        raise ExecutionFailed(f"optimizer failed: {res.reason} (see {out / 'report.json'})")
    print(f"status {res.status} after {res.iterations} iterations -> {out}")
    return EXIT_OK


def cmd_cv_tau(args):
    if args.cv_tau is None:
        args.cv_tau = 8
    data, shape, f0, cfg = _prepare(args)
    tau, table = _cv(args, data, f0, cfg)
    atomic_write(Path(args.out), to_json({"tau": tau, "points": args.cv_tau,
                                          "folds": args.folds, "table": table}))
    print(f"tau = {tau!r}")
    return EXIT_OK


COMMANDS = {"experiment": cmd_experiment, "generate": cmd_generate, "fit": cmd_fit,
            "cv-tau": cmd_cv_tau}


def main(argv=None):
    level = os.environ.get("KRONEST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (InvalidInput, ParameterError, ShapeError) as exc:
        print(f"kronest: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ExecutionFailed, KronestError, ArithmeticError) as exc:
        print(f"kronest: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
