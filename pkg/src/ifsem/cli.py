"""Command-line interface: ``ifsem <subcommand> [flags]``.

Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors.
Set ``IFSEM_LOG`` to ``error``, ``info`` or ``debug`` for diagnostics on
standard error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ifsem import data as datamod
from ifsem.em import TrainConfig, fit_restarts, has_converged
from ifsem.errors import DimensionError, IfsemError
from ifsem.geometry import compose
from ifsem.model import IfsModel, load_model, log_density, mean_depth
from ifsem.model import sample, sample_attractor, save_model
from ifsem.mog import fit_mog, mog_from_dict, mog_log_density, save_mog
from ifsem.report import render_scatter, write_metrics, write_ppm

log = logging.getLogger("ifsem")


class CliError(Exception):
    """Runtime failure reported with exit code 1."""


def _positive(value):
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n


def _non_negative(value):
    n = int(value)
    if n < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return n


def _fraction(value):
    f = float(value)
    if not 0 <= f < 1:
        raise argparse.ArgumentTypeError(f"expected a fraction in [0, 1), got {value}")
    return f


def _readable(path):
    p = Path(path)
    if not p.is_file():
        raise CliError(f"cannot read {path}: no such file")
    return p


def _writable(path):
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise CliError(f"cannot write {path}: directory {parent} does not exist")
    return p


def _load_any_model(path):
    """Load either an IFS model or a mixture baseline from JSON."""
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc.msg})") from None
    if isinstance(obj, dict) and "mode" in obj:
        return mog_from_dict(obj)
    return load_model(path)


def _model_log_density(model, points):
    if model.H != points.shape[1]:
        raise DimensionError(f"model has dimension {model.H} but data has {points.shape[1]}")
    if isinstance(model, IfsModel):
        return log_density(model, points)
    return mog_log_density(model, points)


def _config_from_args(args):
    return TrainConfig(K=args.k, D=args.depth, iterations=args.iters,
                       minibatch=args.minibatch, pool_size=args.pool,
                       pre_iterations=args.pre_iters, pre_depth=args.pre_depth,
                       pre_minibatch=args.pre_minibatch, seed=args.seed,
                       restarts=args.restarts, workers=args.workers)


def _fit_ifs(train, test, config, normalize=True):
    """Fit on ``train`` (normalized unless disabled) and return the model in
    original coordinates, its history and the held-out mean log-likelihood."""
    H = train.H
    if normalize:
        train_n, back = datamod.normalize(train)
        test_pts = (test.points - back.t) / back.s if len(test) else None
        jac = H * math.log(back.s)
    else:
        train_n, back, jac = train, None, 0.0
        test_pts = test.points if len(test) else None
    model, history, _ = fit_restarts(train_n.points, config, test_pts)
    if back is not None:
        model = replace(model, post=compose(back, model.post))
        for rec in history.records:
            if rec["mean_ll_test"] is not None:
                rec["mean_ll_test"] -= jac
    score = float(np.mean(log_density(model, test.points))) if len(test) else None
    return model, history, score


def cmd_generate(args):
    out = _writable(args.out)
    params = {"burn_in": args.burn_in}
    if args.source == "from-ifs":
        if not args.model:
            raise CliError("--source from-ifs needs --model")
        params["model"] = load_model(_readable(args.model))
    rng = np.random.default_rng(args.seed)
    ds = datamod.generate(args.source, args.n, rng, params)
    datamod.write_csv(ds, out)
    print(len(ds))


def cmd_fit(args):
    data_path = _readable(args.data)
    out = _writable(args.out)
    hist_path = _writable(args.history) if args.history else out.with_suffix(".history.jsonl")
    config = _config_from_args(args)
    ds = datamod.load_csv(data_path)
    if len(ds) == 0:
        raise CliError(f"{data_path}: no data rows")
    train, test = datamod.split(ds, args.holdout, np.random.default_rng([args.seed, 1]))
    model, history, score = _fit_ifs(train, test, config, not args.no_normalize)
    save_model(model, out)
    hist_path.write_text(history.to_jsonl(include_time=args.record_time))
    converged = has_converged(model, config.convergence_threshold)
    print(json.dumps({"converged": converged, "v_last": float(model.v[-1]),
                      "mean_depth": mean_depth(model), "mean_ll_test": score}))
    log.info("%s (v_D = %.4f)", "converged" if converged else "not converged", model.v[-1])


def cmd_eval(args):
    model = _load_any_model(_readable(args.model))
    ds = datamod.load_csv(_readable(args.data))
    if len(ds) == 0:
        raise CliError("no data rows to evaluate")
    ll = _model_log_density(model, ds.points)
    n = ll.size
    stderr = float(np.std(ll, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    print(json.dumps({"mean_ll": float(np.mean(ll)), "stderr": stderr, "n": n}))


def cmd_sample(args):
    model = load_model(_readable(args.model))
    out = _writable(args.out)
    rng = np.random.default_rng(args.seed)
    if args.attractor:
        pts = sample_attractor(model, args.n, rng, args.burn_in)
    else:
        pts = sample(model, args.n, rng)
    datamod.write_csv(pts, out)
    print(len(pts))


def cmd_render(args):
    ds = datamod.load_csv(_readable(args.data))
    out = _writable(args.out)
    model = load_model(_readable(args.model)) if args.model else None
    if ds.H != 2 and len(ds):
        if args.dims is None:
            raise DimensionError(f"data has dimension {ds.H}; pick two with --dims")
    pts = ds.points
    if args.dims is not None:
        i, j = args.dims
        if max(i, j) >= ds.H:
            raise DimensionError(f"--dims {i} {j} out of range for dimension {ds.H}")
        pts = pts[:, [i, j]]
        if model is not None and model.H != 2:
            model = None
    image = render_scatter(pts, args.resolution, model)
    write_ppm(image, out)


def cmd_fit_mog(args):
    ds = datamod.load_csv(_readable(args.data))
    out = _writable(args.out)
    rng = np.random.default_rng(args.seed)
    train, test = datamod.split(ds, args.holdout, rng)
    model, trace = fit_mog(train.points, args.k, args.mode, args.iters, rng)
    save_mog(model, out)
    score = float(np.mean(mog_log_density(model, test.points))) if len(test) else None
    print(json.dumps({"mean_ll_train": trace[-1], "mean_ll_test": score}))


def cmd_compare(args):
    ds = datamod.load_csv(_readable(args.data))
    out = _writable(args.out) if args.out else None
    if len(ds) < 2:
        raise CliError("compare needs at least two data points")
    config = TrainConfig(K=args.k, D=args.depth, iterations=args.iters,
                         minibatch=args.minibatch, pool_size=args.pool,
                         pre_iterations=args.pre_iters, pre_depth=args.pre_depth,
                         pre_minibatch=args.pre_minibatch, workers=args.workers)
    seeds = np.random.SeedSequence(args.seed).spawn(args.repeats)
    results = {"ifs": [], "iso": [], "mog": []}
    for r, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        train, test = datamod.split(ds, args.holdout, rng)
        if len(test) == 0:
            test = train
        run_cfg = replace(config, seed=int(rng.integers(2 ** 31)))
        _, _, score = _fit_ifs(train, test, run_cfg)
        results["ifs"].append(score)
        for name, mode in (("iso", "spherical"), ("mog", "full")):
            mog, _ = fit_mog(train.points, args.k, mode, args.iters, rng)
            results[name].append(float(np.mean(mog_log_density(mog, test.points))))
        log.info("repeat %d: %s", r, {k: v[-1] for k, v in results.items()})
    text = write_metrics(results, out)
    sys.stdout.write(text)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ifsem", description="Fit iterated function systems to point clouds by EM.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    p.add_argument("--source", required=True, choices=datamod.SOURCES)
    p.add_argument("--n", type=_non_negative, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="IFS model JSON for --source from-ifs")
    p.add_argument("--burn-in", type=_non_negative, default=32)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit an IFS model to a CSV point cloud")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--history", help="history JSONL path (default: <out>.history.jsonl)")
    p.add_argument("--k", type=_positive, default=3)
    p.add_argument("--depth", type=_non_negative, default=6)
    p.add_argument("--iters", type=_non_negative, default=300)
    p.add_argument("--minibatch", type=_positive, default=500)
    p.add_argument("--pool", type=_positive, default=10)
    p.add_argument("--pre-iters", type=_non_negative, default=100)
    p.add_argument("--pre-depth", type=_non_negative, default=3)
    p.add_argument("--pre-minibatch", type=_positive, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=_positive, default=1)
    p.add_argument("--holdout", type=_fraction, default=0.1)
    p.add_argument("--workers", type=_positive, default=1)
    p.add_argument("--no-normalize", action="store_true")
    p.add_argument("--record-time", action="store_true",
                   help="store per-iteration wall-clock seconds in the history")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="mean log-likelihood of a model on CSV data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw points from an IFS model")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=_non_negative, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--attractor", action="store_true", help="use the chaos game")
    p.add_argument("--burn-in", type=_non_negative, default=32)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("render", help="rasterize 2D points to a PPM image")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="IFS model JSON to overlay")
    p.add_argument("--resolution", type=_positive, default=512)
    p.add_argument("--dims", type=_non_negative, nargs=2, metavar=("I", "J"),
                   help="coordinate pair to project onto")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit-mog", help="fit a mixture-of-Gaussians baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=_positive, default=3)
    p.add_argument("--mode", choices=("spherical", "full"), default="spherical")
    p.add_argument("--iters", type=_non_negative, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=_fraction, default=0.1)
    p.set_defaults(func=cmd_fit_mog)

    p = sub.add_parser("compare", help="compare IFS, spherical MOG and full MOG")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="metrics JSON path (also printed)")
    p.add_argument("--repeats", type=_positive, default=20)
    p.add_argument("--k", type=_positive, default=4)
    p.add_argument("--depth", type=_non_negative, default=5)
    p.add_argument("--iters", type=_non_negative, default=100)
    p.add_argument("--minibatch", type=_positive, default=10000)
    p.add_argument("--pool", type=_positive, default=1)
    p.add_argument("--pre-iters", type=_non_negative, default=0)
    p.add_argument("--pre-depth", type=_non_negative, default=3)
    p.add_argument("--pre-minibatch", type=_positive, default=500)
    p.add_argument("--holdout", type=_fraction, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=_positive, default=1)
    p.set_defaults(func=cmd_compare)
    return parser


def _setup_logging():
    level = os.environ.get("IFSEM_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, IfsemError, OSError, ValueError) as exc:
        print(f"ifsem {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
