"""Command-line interface.

Subcommands: fit-mle, fit-penalized, select-lambda, simulate, test,
bootstrap.  Options resolve with precedence flags > config file > defaults;
a config file (``--config``, and the ``--spec`` file of ``simulate``) is
flat ``key=value`` text with '#' comments.  Every run records its seed and a
digest of the resolved configuration in all output files, and reruns with
identical configuration and seed produce byte-identical outputs.
"""

from __future__ import annotations

import argparse
import math
import os
import re
import sys
from dataclasses import dataclass

from scipy import stats

from .composite import PenaltyConfig, fit_penalized
from .data_io import (config_digest, header_line, read_dataset, read_fit_dir,
                      write_edges_long, write_fit, write_table_csv, _fmt)
from .errors import CdexggmError, DataFormatError
from .inference import EstimatorConfig, TestReport, bootstrap_se, wald_joint, wald_single
from .mle import MleFitResult, fit_mle
from .model import coordinate_index, pack, packed_block_length, packed_indices, \
    packed_length
from .selection import default_lambda_grid, select_lambda
from .simulation import SimSpec, run_study


@dataclass(frozen=True)
class RunConfig:
    """A resolved CLI invocation: the subcommand plus its option mapping."""

    command: str
    options: dict


def _cast_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"cannot interpret {text!r} as a boolean")


def _cast_opt_float(text: str):
    return None if text.strip() == "" else float(text)


_SCHEMAS = {
    "fit-mle": {"y": (str, None), "x": (str, None), "out": (str, None),
                "tol": (float, 1e-6), "max_sweeps": (int, 500),
                "grad_tol": (_cast_opt_float, None), "seed": (int, 0),
                "center": (_cast_bool, True), "x_bounds": (str, None)},
    "fit-penalized": {"y": (str, None), "x": (str, None), "out": (str, None),
                      "lam": (float, None), "constant_diagonal": (_cast_bool, False),
                      "tol": (float, 1e-5), "max_sweeps": (int, 200),
                      "seed": (int, 0), "center": (_cast_bool, True),
                      "x_bounds": (str, None)},
    "select-lambda": {"y": (str, None), "x": (str, None), "out": (str, None),
                      "gamma": (float, 1.0), "grid_size": (int, 20),
                      "grid_ratio": (float, 0.01),
                      "constant_diagonal": (_cast_bool, False),
                      "tol": (float, 1e-5), "seed": (int, 0),
                      "center": (_cast_bool, True), "x_bounds": (str, None)},
    "simulate": {"spec": (str, None), "replicates": (int, 20), "seed": (int, None),
                 "out": (str, None), "jobs": (int, 0)},
    "test": {"fit": (str, None), "null": (str, None), "bootstrap": (int, 0),
             "y": (str, None), "x": (str, None), "seed": (int, 0),
             "estimator": (str, "mle"), "lam": (float, 0.05)},
    "bootstrap": {"y": (str, None), "x": (str, None), "b": (int, 200),
                  "seed": (int, 0), "out": (str, None), "jobs": (int, 0),
                  "estimator": (str, "mle"), "lam": (float, 0.05),
                  "center": (_cast_bool, True)},
}

_SPEC_SCHEMA = {"p": (int, None), "n": (int, None), "h": (int, 1),
                "dgp_kind": (str, "general"), "covariate_levels": (int, 5),
                "constant_diagonal": (_cast_bool, False), "seed": (int, 0),
                "pd_shift_c": (float, 1.0), "sparsity": (float, 0.21),
                "gamma": (float, 1.0), "grid_size": (int, 20),
                "grid_ratio": (float, 0.01), "lam": (_cast_opt_float, None),
                "penalty_tol": (float, 1e-5), "mle_tol": (float, 1e-6),
                "mle_max_sweeps": (int, 3000), "entry_low": (_cast_opt_float, None)}


def parse_kv_file(path) -> dict:
    """Flat key=value configuration text; '#' lines are comments."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise DataFormatError(f"{path}:{lineno}: expected key=value")
            key, _, value = stripped.partition("=")
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve_options(command: str, flag_values: dict, file_values: dict) -> dict:
    schema = _SCHEMAS[command]
    resolved = {}
    for key, (cast, default) in schema.items():
        if flag_values.get(key) is not None:
            resolved[key] = flag_values[key]
        elif key in file_values:
            resolved[key] = cast(file_values[key])
        else:
            resolved[key] = default
    unknown = set(file_values) - set(schema)
    if unknown:
        raise ValueError(f"unknown config keys for {command}: {sorted(unknown)}")
    return resolved


def _parse_x_bounds(text):
    if text is None:
        return None
    pairs = []
    for part in text.split(","):
        lo, _, hi = part.partition(":")
        pairs.append((float(lo), float(hi)))
    return pairs


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdexggm",
                                     description="Covariate-dependent Gaussian "
                                                 "graphical models")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_opts(sp, scaled=True):
        sp.add_argument("--y", help="response CSV (n x p, headerless)")
        sp.add_argument("--x", help="covariate CSV (n x H); omit for a static model")
        sp.add_argument("--center", dest="center", action="store_const", const=True)
        sp.add_argument("--no-center", dest="center", action="store_const", const=False)
        if scaled:
            sp.add_argument("--x-bounds", dest="x_bounds",
                            help="per-column min:max pairs, comma separated")

    sp = sub.add_parser("fit-mle", help="exact maximum-likelihood fit (small p)")
    add_data_opts(sp)
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--tol", type=float)
    sp.add_argument("--max-sweeps", dest="max_sweeps", type=int)
    sp.add_argument("--grad-tol", dest="grad_tol", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--config", help="key=value config file")

    sp = sub.add_parser("fit-penalized", help="l1-penalized composite-likelihood fit")
    add_data_opts(sp)
    sp.add_argument("--out")
    sp.add_argument("--lambda", dest="lam", type=float, help="penalty level")
    sp.add_argument("--constant-diagonal", dest="constant_diagonal",
                    action="store_const", const=True)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--max-sweeps", dest="max_sweeps", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--config")

    sp = sub.add_parser("select-lambda", help="EBIC selection over a penalty grid")
    add_data_opts(sp)
    sp.add_argument("--out")
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--grid-size", dest="grid_size", type=int)
    sp.add_argument("--grid-ratio", dest="grid_ratio", type=float)
    sp.add_argument("--constant-diagonal", dest="constant_diagonal",
                    action="store_const", const=True)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--config")

    sp = sub.add_parser("simulate", help="run a simulation study")
    sp.add_argument("--spec", help="key=value study specification file")
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int)

    sp = sub.add_parser("test", help="hypothesis tests on a saved fit")
    sp.add_argument("--fit", help="directory written by a fit command")
    sp.add_argument("--null", help="'theta-all' or 'edge:i,j,h' (1-based i,j)")
    sp.add_argument("--bootstrap", type=int, help="bootstrap replicates for the SE")
    sp.add_argument("--y")
    sp.add_argument("--x")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--estimator", choices=["mle", "penalized"])
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--config")

    sp = sub.add_parser("bootstrap", help="bootstrap standard errors")
    sp.add_argument("--y")
    sp.add_argument("--x")
    sp.add_argument("--B", dest="b", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--estimator", choices=["mle", "penalized"])
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--no-center", dest="center", action="store_const", const=False)
    sp.add_argument("--config")
    return parser


def _require(options: dict, *keys) -> None:
    for key in keys:
        if options.get(key) is None:
            raise ValueError(f"missing required option --{key.replace('_', '-')}")


def _echo(command: str, options: dict) -> dict:
    """Config echo for output headers; the output directory is location
    metadata, not configuration, so it stays out of the digest."""
    echo = {"command": command}
    echo.update({k: v for k, v in options.items() if k != "out"})
    return echo


def _print_report(report: TestReport, seed, config: dict) -> None:
    print(header_line(seed, config_digest(config)))
    print(f"null={report.null_description}")
    print(f"statistic={_fmt(report.statistic)}")
    print(f"df={report.df}")
    print(f"p_value={_fmt(report.p_value)}")
    if report.se is not None:
        print(f"se={_fmt(report.se)}")


def _cmd_fit_mle(options: dict) -> int:
    _require(options, "y", "out")
    data = read_dataset(options["y"], options["x"], center=options["center"],
                        scale_bounds=_parse_x_bounds(options["x_bounds"]))
    fit = fit_mle(data, tol=options["tol"], max_sweeps=options["max_sweeps"],
                  grad_tol=options["grad_tol"])
    config = _echo("fit-mle", options)
    write_fit(fit, options["out"], options["seed"], config)
    write_edges_long(fit.estimate, options["out"], options["seed"], config)
    print(f"fit-mle: converged={str(fit.converged).lower()} sweeps={fit.sweeps} "
          f"loglik={_fmt(fit.loglik_trace[-1])}")
    return 0


def _cmd_fit_penalized(options: dict) -> int:
    _require(options, "y", "out", "lam")
    data = read_dataset(options["y"], options["x"], center=options["center"],
                        scale_bounds=_parse_x_bounds(options["x_bounds"]))
    cfg = PenaltyConfig(lam=options["lam"],
                        constant_diagonal=options["constant_diagonal"],
                        tol=options["tol"], max_outer_sweeps=options["max_sweeps"])
    fit = fit_penalized(data, cfg)
    config = _echo("fit-penalized", options)
    write_fit(fit, options["out"], options["seed"], config)
    write_edges_long(fit.estimate, options["out"], options["seed"], config)
    print(f"fit-penalized: converged={str(fit.converged).lower()} "
          f"cycles={fit.sweeps} active={len(fit.active_set)} "
          f"objective={_fmt(fit.objective_trace[-1])}")
    return 0


def _cmd_select_lambda(options: dict) -> int:
    _require(options, "y", "out")
    data = read_dataset(options["y"], options["x"], center=options["center"],
                        scale_bounds=_parse_x_bounds(options["x_bounds"]))
    cfg = PenaltyConfig(lam=0.0, constant_diagonal=options["constant_diagonal"],
                        tol=options["tol"])
    grid = default_lambda_grid(data, size=options["grid_size"],
                               ratio=options["grid_ratio"])
    result = select_lambda(data, grid=grid, gamma=options["gamma"], cfg=cfg)
    config = _echo("select-lambda", options)
    digest = config_digest(config)
    rows = []
    for idx, point in enumerate(result.fits):
        rows.append({"lambda": point.lam, "df": point.df,
                     "neg2_composite_loglik": point.neg2_composite_loglik,
                     "ebic": result.ebic_values[idx],
                     "chosen": 1 if idx == result.chosen_index else 0,
                     "error": point.error})
    os.makedirs(options["out"], exist_ok=True)
    write_table_csv(os.path.join(options["out"], "selection.csv"),
                    ["lambda", "df", "neg2_composite_loglik", "ebic", "chosen", "error"],
                    rows, header_line(options["seed"], digest))
    write_fit(result.chosen.fit, options["out"], options["seed"], config)
    write_edges_long(result.chosen.fit.estimate, options["out"], options["seed"], config)
    print(f"select-lambda: chosen_lambda={_fmt(result.chosen.lam)} "
          f"df={result.chosen.df} gamma={_fmt(result.gamma)}")
    return 0


def _cmd_simulate(options: dict) -> int:
    _require(options, "spec", "out")
    file_values = parse_kv_file(options["spec"])
    spec_opts = {}
    for key, (cast, default) in _SPEC_SCHEMA.items():
        spec_opts[key] = cast(file_values[key]) if key in file_values else default
    unknown = set(file_values) - set(_SPEC_SCHEMA)
    if unknown:
        raise ValueError(f"unknown spec keys: {sorted(unknown)}")
    if spec_opts["p"] is None or spec_opts["n"] is None:
        raise ValueError("the spec file must define p and n")
    if options["seed"] is not None:
        spec_opts["seed"] = options["seed"]
    spec = SimSpec(p=spec_opts["p"], n=spec_opts["n"], n_covariates=spec_opts["h"],
                   dgp_kind=spec_opts["dgp_kind"],
                   covariate_levels=spec_opts["covariate_levels"],
                   constant_diagonal=spec_opts["constant_diagonal"],
                   seed=spec_opts["seed"], pd_shift_c=spec_opts["pd_shift_c"],
                   sparsity=spec_opts["sparsity"], gamma=spec_opts["gamma"],
                   grid_size=spec_opts["grid_size"], grid_ratio=spec_opts["grid_ratio"],
                   lam=spec_opts["lam"], penalty_tol=spec_opts["penalty_tol"],
                   mle_tol=spec_opts["mle_tol"],
                   mle_max_sweeps=spec_opts["mle_max_sweeps"],
                   entry_low=spec_opts["entry_low"])
    jobs = options["jobs"] or os.cpu_count() or 1
    result = run_study(spec, options["replicates"], jobs=jobs)
    config = _echo("simulate", {**spec_opts, "replicates": options["replicates"]})
    digest = config_digest(config)
    head = header_line(spec.seed, digest)
    os.makedirs(options["out"], exist_ok=True)
    rep_cols = ["replicate", "matrix", "err_l2", "err_per_param", "sensitivity",
                "specificity", "mcc", "tp", "tn", "fp", "fn", "chosen_lambda",
                "df", "converged"]
    write_table_csv(os.path.join(options["out"], "study_replicates.csv"),
                    rep_cols, list(result.rows), head)
    write_table_csv(os.path.join(options["out"], "study_summary.csv"),
                    ["matrix", "metric", "mean", "sd"], list(result.aggregates), head)
    print(f"simulate: replicates={options['replicates']} "
          f"failed={len(result.failures)} out={options['out']}")
    return 0


def _cmd_test(options: dict) -> int:
    _require(options, "fit", "null")
    basis, cov = read_fit_dir(options["fit"])
    null = options["null"]
    config = _echo("test", options)
    if null == "theta-all":
        if basis.n_covariates == 0:
            raise ValueError("theta-all needs a fit with at least one covariate")
        if cov is None:
            raise ValueError("theta-all requires asymptotic_cov.csv in the fit "
                             "directory (run fit-mle)")
        fit = MleFitResult(estimate=basis, loglik_trace=(), converged=True, sweeps=0,
                           asymptotic_cov=cov, max_abs_score=math.nan)
        d_block = packed_block_length(basis.p)
        coords = range(d_block, packed_length(basis.p, basis.n_covariates))
        report = wald_joint(fit, coords)
    elif null.startswith("edge:"):
        parts = null[len("edge:"):].split(",")
        if len(parts) != 3:
            raise ValueError("edge null must look like edge:i,j,h")
        i, j, h = (int(v) for v in parts)
        if not (1 <= i <= basis.p and 1 <= j <= basis.p and i != j):
            raise ValueError(f"edge vertices must be distinct and in 1..{basis.p}")
        if not 0 <= h <= basis.n_covariates:
            raise ValueError(f"block h must be in 0..{basis.n_covariates}")
        coord = coordinate_index(basis.p, i - 1, j - 1, h)
        if options["bootstrap"]:
            _require(options, "y")
            data = read_dataset(options["y"], options["x"])
            estimator = EstimatorConfig(kind=options["estimator"],
                                        penalty=PenaltyConfig(lam=options["lam"])
                                        if options["estimator"] == "penalized" else None)
            se = float(bootstrap_se(data, estimator, [coord],
                                    n_boot=options["bootstrap"],
                                    seed=options["seed"])[0])
            value = float(pack(basis).values[coord])
            if se == 0.0:
                statistic = 0.0 if value == 0.0 else math.copysign(math.inf, value)
            else:
                statistic = value / se
            report = TestReport(statistic=statistic, df=0,
                                p_value=2.0 * float(stats.norm.sf(abs(statistic))),
                                null_description=f"edge ({i},{j}) block {h} = 0 "
                                                 "(bootstrap SE)",
                                se=se)
        else:
            if cov is None:
                raise ValueError("no asymptotic_cov.csv in the fit directory; "
                                 "use --bootstrap B with --y/--x instead")
            fit = MleFitResult(estimate=basis, loglik_trace=(), converged=True,
                               sweeps=0, asymptotic_cov=cov, max_abs_score=math.nan)
            report = wald_single(fit, coord)
    else:
        raise ValueError(f"unknown null {null!r}; use theta-all or edge:i,j,h")
    _print_report(report, options["seed"], config)
    return 0


def _cmd_bootstrap(options: dict) -> int:
    _require(options, "y", "out")
    data = read_dataset(options["y"], options["x"], center=options["center"])
    estimator = EstimatorConfig(kind=options["estimator"],
                                penalty=PenaltyConfig(lam=options["lam"])
                                if options["estimator"] == "penalized" else None)
    d = packed_length(data.p, data.design.n_covariates)
    jobs = options["jobs"] or os.cpu_count() or 1
    ses = bootstrap_se(data, estimator, range(d), n_boot=options["b"],
                       seed=options["seed"], jobs=jobs)
    config = _echo("bootstrap", options)
    rows_idx, cols_idx = packed_indices(data.p)
    d_block = packed_block_length(data.p)
    rows = []
    for flat in range(d):
        h, within = divmod(flat, d_block)
        name = "Q0" if h == 0 else f"P{h}"
        rows.append({"matrix": name, "i": int(rows_idx[within]),
                     "j": int(cols_idx[within]), "se": float(ses[flat])})
    os.makedirs(options["out"], exist_ok=True)
    write_table_csv(os.path.join(options["out"], "bootstrap_se.csv"),
                    ["matrix", "i", "j", "se"], rows,
                    header_line(options["seed"], config_digest(config)))
    print(f"bootstrap: B={options['b']} coordinates={d} out={options['out']}")
    return 0


_DISPATCH = {"fit-mle": _cmd_fit_mle, "fit-penalized": _cmd_fit_penalized,
             "select-lambda": _cmd_select_lambda, "simulate": _cmd_simulate,
             "test": _cmd_test, "bootstrap": _cmd_bootstrap}


def _error_category(exc: Exception) -> str:
    if isinstance(exc, ValueError):
        return "invalid-argument"
    if isinstance(exc, OSError):
        return "io"
    name = type(exc).__name__
    name = name.removesuffix("Error")
    return re.sub(r"(?<!^)(?=[A-Z])", "-", name).lower()


def run(config: RunConfig) -> int:
    """Dispatch a resolved configuration; returns the process exit status."""
    try:
        handler = _DISPATCH[config.command]
    except KeyError:
        print(f"error: invalid-argument: unknown command {config.command!r}",
              file=sys.stderr)
        return 2
    try:
        return handler(config.options)
    except (CdexggmError, ValueError, OSError) as exc:
        print(f"error: {_error_category(exc)}: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    flag_values = vars(args)
    command = flag_values.pop("command")
    config_path = flag_values.pop("config", None)
    try:
        file_values = parse_kv_file(config_path) if config_path else {}
        options = _resolve_options(command, flag_values, file_values)
    except (CdexggmError, ValueError, OSError) as exc:
        print(f"error: {_error_category(exc)}: {exc}", file=sys.stderr)
        return 1
    return run(RunConfig(command=command, options=options))


if __name__ == "__main__":
    sys.exit(main())
