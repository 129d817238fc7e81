"""Command-line entry point: ``ifou <command> [options]``.

Every run writes its data files plus ``run-manifest.json`` into
``--output-dir``. Exit status is 0 on success, 2 for usage or input errors
and 1 when a numerical step fails.
"""

import argparse
import logging
import os
import sys
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._io import write_json, write_rows
from .errors import ConfigurationError, FormatError, IfouError, InsufficientDataError
from .inference import (
    FITTERS,
    FitConfig,
    compare_models,
    format_table,
    write_fit_json,
    write_profile_csv,
)
from .kernels import InitialState, ModelParams, TimeGrid, Trajectory, propagation_matrix, sigma_hb_matrix
from .predictor import predict_positions, predict_velocity, write_draws_csv, write_summary_csv
from .quadrature import QuadratureConfig
from .simulator import SimRequest, simulate_positions, write_paths_csv
from .telemetry import aggregate_daily, read_csv, to_trajectories

log = logging.getLogger("ifou")

USAGE_ERRORS = (ConfigurationError, FormatError, InsufficientDataError, LookupError, ValueError, OSError)


class UsageError(Exception):
    pass


def _seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return v


def _add_common(p):
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--output-dir", default=".")
    p.add_argument("--nodes-per-panel", type=int, default=32)
    p.add_argument("--max-refinements", type=int, default=8)
    p.add_argument("--rel-tol", type=float, default=1e-9)
    p.add_argument("--abs-tol", type=float, default=1e-12)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_params(p, required=True):
    p.add_argument("--sigma", type=float, required=required)
    p.add_argument("--beta", type=float, required=required)
    p.add_argument("--hurst", type=float, required=required)


def _add_data(p):
    p.add_argument("--input", required=True, help="telemetry CSV (id,timestamp,lon,lat) or series CSV (t,value)")
    p.add_argument("--id", help="animal id (telemetry input)")
    p.add_argument("--axis", choices=("lon", "lat"), default="lat")


def _add_fit(p):
    p.add_argument("--beta-max", type=float, default=400.0)
    p.add_argument("--beta-min", type=float, default=1e-2)
    p.add_argument("--flat-threshold", type=float, default=1e-2)
    p.add_argument("--h-min", type=float, default=0.01)
    p.add_argument("--h-max", type=float, default=0.99)
    p.add_argument("--n-beta", type=int, default=40)
    p.add_argument("--n-h", type=int, default=40)
    p.add_argument("--no-refine", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="ifou", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ifou {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate position paths")
    _add_common(p)
    _add_params(p)
    p.add_argument("--mu0", type=float, default=0.0)
    p.add_argument("--t-max", type=float, required=True)
    p.add_argument("--n", type=int, required=True, help="number of steps on [0, t-max]")
    p.add_argument("--paths", type=int, default=1)

    for name, hlp in (("fit", "fit one model"), ("compare", "fit and rank all three models")):
        p = sub.add_parser(name, help=hlp)
        _add_common(p)
        _add_data(p)
        _add_fit(p)
        if name == "fit":
            p.add_argument("--model", choices=sorted(FITTERS), default="ifou")
            p.add_argument("--compare", action="store_true")

    p = sub.add_parser("predict-position", help="forecast future positions")
    _add_common(p)
    _add_data(p)
    _add_params(p, required=False)
    _add_fit(p)
    p.add_argument("--m", type=int, required=True, help="forecast horizon")
    p.add_argument("--gap", type=float, help="future gap (default: last observed gap)")
    p.add_argument("--holdout", type=int, default=0, help="hold out the last N observations and score them")
    p.add_argument("--draws", type=int, default=1000)

    p = sub.add_parser("predict-velocity", help="reconstruct velocity paths")
    _add_common(p)
    _add_data(p)
    _add_params(p, required=False)
    _add_fit(p)
    p.add_argument("--v0", type=float, default=0.0)
    p.add_argument("--draws", type=int, default=1000)

    p = sub.add_parser("cov-surface", help="tabulate the position covariance Q(s, t)")
    _add_common(p)
    _add_params(p)
    p.add_argument("--s-max", type=float, required=True)
    p.add_argument("--t-max", type=float, required=True)
    p.add_argument("--step", type=float, required=True)
    return parser


def _qcfg(args):
    return QuadratureConfig(args.nodes_per_panel, args.max_refinements, args.rel_tol, args.abs_tol)


def _fitcfg(args):
    return FitConfig(
        beta_max=args.beta_max,
        beta_min=args.beta_min,
        flat_threshold=args.flat_threshold,
        h_bounds=(args.h_min, args.h_max),
        grid_resolution=(args.n_beta, args.n_h),
        refine=not args.no_refine,
        workers=_threads() or 1,
    )


def _params(args):
    if None in (args.sigma, args.beta, args.hurst):
        return None
    return ModelParams(args.sigma, args.beta, args.hurst)


def _threads():
    raw = os.environ.get("IFOU_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError("IFOU_THREADS must be a positive integer") from None
    if n < 1:
        raise UsageError("IFOU_THREADS must be a positive integer")
    return n


def load_series(path):
    """Read a ``t,value`` CSV (extra columns ignored) into a trajectory."""
    data = np.genfromtxt(path, delimiter=",", names=True, dtype=float, encoding="utf-8")
    names = data.dtype.names or ()
    if "t" not in names or "value" not in names:
        raise FormatError("series CSV needs columns t and value")
    return Trajectory(TimeGrid(np.atleast_1d(data["t"])), np.atleast_1d(data["value"]), "value")


def load_data(args):
    with open(args.input) as fh:
        head = fh.readline().strip().lower()
    if head.startswith("id,"):
        report = read_csv(args.input)
        for rej in report.rejects:
            log.warning("line %d rejected: %s", rej.line, rej.reason)
        ids = report.ids()
        if args.id is None:
            if len(ids) != 1:
                raise UsageError(f"--id is required; input holds ids {ids}")
            args.id = ids[0]
        lon, lat = to_trajectories(aggregate_daily(report, args.id))
        return lon if args.axis == "lon" else lat
    return load_series(args.input)


def emit_profile_surface(fit, path):
    """Write the profile CSV and a JSON marker for its maximum next to it.

    Returns the path of the marker file.
    """
    samples = fit.profile_samples
    if samples is None or len(samples) == 0:
        raise ValueError("fit carries no profile samples")
    path = Path(path)
    write_profile_csv(path, fit)
    vals = np.where(np.isfinite(samples[:, 2]), samples[:, 2], -np.inf)
    best = samples[int(np.argmax(vals))]
    marker = path.with_name(path.stem + "-argmax.json")
    write_json(
        marker,
        {
            "model": fit.model,
            "grid_argmax": {"beta": best[0], "hurst": best[1], "profile_loglik": best[2]},
            "mle": dict(fit.mle),
            "loglik": fit.loglik,
            "flat_beta": fit.flat_beta,
        },
    )
    return marker


def _run_simulate(args, out, qcfg):
    if args.n < 1 or args.paths < 1 or args.t_max <= 0:
        raise UsageError("--n, --paths and --t-max must be positive")
    grid = TimeGrid.regular(args.n, args.t_max / args.n)
    req = SimRequest(grid, _params(args), InitialState(args.mu0), args.paths, args.seed)
    body = simulate_positions(req, qcfg)
    values = np.hstack((np.full((args.paths, 1), args.mu0), body))
    path = out / "paths.csv"
    write_paths_csv(path, grid.times, values)
    return [path]


def _fit_outputs(out, results, table_label):
    files = []
    if isinstance(results, list):
        path = out / "compare.json"
        write_fit_json(path, results)
        txt = out / "compare.txt"
        txt.write_text(format_table(results, table_label) + "\n")
        files += [path, txt]
        print(format_table(results, table_label))
        for r in results:
            if r.profile_samples is not None:
                p = out / f"profile-{r.model}.csv"
                files += [p, emit_profile_surface(r, p)]
    else:
        path = out / "fit.json"
        write_fit_json(path, results)
        p = out / "profile.csv"
        files += [path, p, emit_profile_surface(results, p)]
    return files


def _run_fit(args, out, qcfg):
    data = load_data(args)
    cfg = _fitcfg(args)
    label = f"{Path(args.input).name} {args.axis if args.id else data.label}"
    if args.command == "compare" or getattr(args, "compare", False):
        results = compare_models(data, cfg, qcfg)
        failed = [r for r in results if r.error]
        for r in failed:
            print(f"{r.model} failed: {r.error}", file=sys.stderr)
        files = _fit_outputs(out, results, label)
        if len(failed) == len(results):
            raise IfouError("every model fit failed")
        return files
    return _fit_outputs(out, FITTERS[args.model](data, cfg, qcfg), label)


def _params_or_fit(args, data, qcfg):
    params = _params(args)
    if params is not None:
        return params, None
    if any(v is not None for v in (args.sigma, args.beta, args.hurst)):
        raise UsageError("give all of --sigma, --beta, --hurst or none of them")
    fit = FITTERS["ifou"](data, _fitcfg(args), qcfg)
    return ModelParams(**fit.mle), fit


def _run_predict_position(args, out, qcfg):
    data = load_data(args)
    if args.m < 0 or args.draws < 1 or args.holdout < 0:
        raise UsageError("--m, --holdout must be non-negative and --draws positive")
    holdout = None
    if args.holdout:
        if args.holdout >= data.n:
            raise UsageError("--holdout must leave at least one increment")
        if args.holdout != args.m:
            raise UsageError("--holdout must equal --m")
        holdout = data.values[-args.holdout :]
        gaps = data.grid.gaps[-args.holdout :]
        data = data.prefix(data.n - args.holdout)
    else:
        gaps = None if args.gap is None else np.full(args.m, args.gap)
    params, fit = _params_or_fit(args, data, qcfg)
    res = predict_positions(data, params, args.m, gaps, args.draws, args.seed, qcfg, holdout)
    draws, summ, js = out / "forecast-draws.csv", out / "forecast-summary.csv", out / "forecast.json"
    write_draws_csv(draws, res.times, res.draws)
    write_summary_csv(summ, res)
    info = res.summary()
    info["params"] = asdict(params)
    if fit is not None:
        info["fit"] = fit.to_dict()
    write_json(js, info)
    return [draws, summ, js]


def _run_predict_velocity(args, out, qcfg):
    data = load_data(args)
    if args.draws < 1:
        raise UsageError("--draws must be positive")
    params, fit = _params_or_fit(args, data, qcfg)
    v = predict_velocity(data, params, InitialState(data.mu0, args.v0), args.draws, args.seed, qcfg)
    path = out / "velocity-draws.csv"
    write_draws_csv(path, data.grid.times, v)
    files = [path]
    if fit is not None:
        js = out / "fit.json"
        write_fit_json(js, fit)
        files.append(js)
    return files


def _run_cov_surface(args, out, qcfg):
    if args.step <= 0 or args.s_max <= 0 or args.t_max <= 0:
        raise UsageError("--step, --s-max and --t-max must be positive")
    top = max(args.s_max, args.t_max)
    n = int(round(top / args.step))
    if n < 1 or abs(n * args.step - top) > 1e-9 * top:
        raise UsageError("--step must divide max(--s-max, --t-max)")
    params = _params(args)
    grid = TimeGrid.regular(n, args.step)
    m = propagation_matrix(grid, params)
    q = np.zeros((n + 1, n + 1))
    q[1:, 1:] = m @ sigma_hb_matrix(grid, params, qcfg) @ m.T
    q = 0.5 * (q + q.T)
    ns = int(round(args.s_max / args.step))
    nt = int(round(args.t_max / args.step))
    rows = ((float(grid.times[i]), float(grid.times[j]), float(q[i, j])) for i in range(ns + 1) for j in range(nt + 1))
    path = out / "cov-surface.csv"
    write_rows(path, ["s", "t", "Q"], rows)
    return [path]


COMMANDS = {
    "simulate": _run_simulate,
    "fit": _run_fit,
    "compare": _run_fit,
    "predict-position": _run_predict_position,
    "predict-velocity": _run_predict_velocity,
    "cov-surface": _run_cov_surface,
}


def _limit_threads(n):
    if n is None:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.info("threadpoolctl not installed; IFOU_THREADS only sets fit workers")
        return None
    return threadpool_limits(limits=n)


def run(argv=None):
    """Parse ``argv``, execute one command and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.output_dir)
    limiter = None
    try:
        limiter = _limit_threads(_threads())
        qcfg = _qcfg(args)
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](args, out, qcfg)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"ifou: error: {exc}", file=sys.stderr)
        return 2
    except IfouError as exc:
        print(f"ifou: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    config = {k: v for k, v in vars(args).items()}
    write_json(
        out / "run-manifest.json",
        {
            "command": args.command,
            "config": config,
            "seed": args.seed,
            "version": __version__,
            "argv": list(sys.argv[1:] if argv is None else argv),
            "files": sorted(Path(f).name for f in files),
            "created": datetime.now(timezone.utc).isoformat(),
        },
    )
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
