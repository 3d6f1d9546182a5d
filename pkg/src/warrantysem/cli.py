"""Command-line front end.

Exit codes: 0 success, 1 invalid input, 2 imputation stall, 3 fit
degeneracy (or a study in which every replication failed), 4 information
matrix not positive definite.  Failures print one ``ERROR <code>: <reason>``
line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import direct_fit, model_aic
from .data import RunConfig, dataset_summary, load_dataset
from .distributions import ParamSet, make_structure
from .errors import (ConfigError, DataParseError, FitDegenerateError, ImputationStallError,
                     NotPositiveDefiniteError, StudyError, WarrantySemError)
from .information import louis_information, wald_intervals
from .sem import SemConfig, check_compatible, initial_params, run_sem
from .simulation import load_scenario, run_study, scenario_lines, write_reports


class CliFailure(Exception):
    def __init__(self, code, reason):
        super().__init__(reason)
        self.code = code


def _exit_code(exc):
    if isinstance(exc, CliFailure):
        return exc.code
    if isinstance(exc, ImputationStallError):
        return 2
    if isinstance(exc, (FitDegenerateError, StudyError)):
        return 3
    if isinstance(exc, NotPositiveDefiniteError):
        return 4
    return 1


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run(args):
    cfg = RunConfig.load(args.config)
    try:
        structure = make_structure(cfg.model_x, cfg.model_t, cfg.model_y, cfg.dependence)
    except KeyError as exc:
        raise ConfigError(f"bad model specification: {exc.args[0]}") from None
    data = load_dataset(args.data, cfg)
    check_compatible(data, structure)
    return cfg, structure, data


def _echo_config(cfg, out=None):
    lines = cfg.resolved_lines()
    print("# resolved configuration")
    for line in lines:
        print(line)
    if out is not None:
        (out / "config_resolved.txt").write_text("\n".join(lines) + "\n")


def write_estimate(params: ParamSet, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "estimate"])
        for n, v in zip(params.names, params.values):
            w.writerow([n, f"{v:.17g}"])


def read_estimate(path, structure):
    values = {}
    try:
        with Path(path).open(newline="") as fh:
            for row in csv.DictReader(fh):
                values[row["param"].strip()] = float(row["estimate"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DataParseError(f"bad estimate file {path}: {exc}") from None
    missing = [n for n in structure.param_names if n not in values]
    if missing:
        raise DataParseError(f"estimate file lacks parameter(s): {', '.join(missing)}")
    return structure.params([values[n] for n in structure.param_names])


def cmd_fit(args):
    out = _out_dir(args.out_dir)
    cfg, structure, data = _load_run(args)
    _echo_config(cfg, out)
    sem_cfg = SemConfig(burn_in=cfg.burn_in, iterations=cfg.iterations, seed=cfg.seed,
                        max_reject_attempts=cfg.max_reject_attempts)
    start = time.perf_counter()
    est = run_sem(data, structure, sem_cfg)
    runtime = time.perf_counter() - start
    write_estimate(est.estimate, out / "estimate.csv")
    est.trace.write_csv(out / "trace.csv")
    summary = dataset_summary(data).lines()
    summary += [f"model: {structure!r}", f"cycles: {cfg.burn_in} burn-in + {cfg.iterations}"]
    summary += [f"{n} = {v:.6g}" for n, v in zip(est.estimate.names, est.estimate.values)]
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    for line in summary:
        print(line)
    print(f"runtime: {runtime:.2f} s")
    return 0


def cmd_stderr(args):
    out = _out_dir(args.out_dir)
    cfg, structure, data = _load_run(args)
    _echo_config(cfg, out)
    theta = read_estimate(args.estimate, structure)
    info = louis_information(theta, data, structure, cfg.info_imputations, cfg.seed,
                             cfg.max_reject_attempts)
    with (out / "information.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", *info.names])
        for n, row in zip(info.names, info.matrix):
            w.writerow([n, *(f"{v:.17g}" for v in row)])
    if not info.positive_definite:
        eig = np.linalg.eigvalsh(info.matrix)
        raise CliFailure(4, "information matrix not positive definite (smallest eigenvalue "
                            f"{eig[0]:.3g}); increase info_imputations or collect more data")
    table = wald_intervals(theta, info, args.level)
    table.write_csv(out / "ci.csv")
    print(f"M = {info.imputations}")
    print(f"{'param':>10} {'estimate':>12} {'se':>10} {'lower':>12} {'upper':>12}")
    for r in table:
        print(f"{r.param:>10} {r.estimate:>12.6g} {r.se:>10.4g} {r.lower:>12.6g} "
              f"{r.upper:>12.6g}")
    return 0


def cmd_simulate(args):
    out = _out_dir(args.out_dir)
    scenario, threads = load_scenario(args.scenario)
    print("# resolved scenario")
    lines = scenario_lines(scenario, threads)
    for line in lines:
        print(line)
    (out / "scenario_resolved.txt").write_text("\n".join(lines) + "\n")
    report = run_study(scenario, workers=threads)
    write_reports([report], out / "report.csv")
    for line in report.table():
        print(line)
    return 0


def cmd_direct(args):
    cfg, structure, data = _load_run(args)
    _echo_config(cfg, None)
    init = initial_params(data, structure)
    report = direct_fit(data, structure, init)
    lines = report.lines()
    if report.estimate is not None:
        _, aic = model_aic(report.estimate, data, structure)
        lines += [f"parameters: {structure.n_params}", f"AIC: {aic:.10g}"]
    for line in lines:
        print(line)
    if args.out_dir:
        out = _out_dir(args.out_dir)
        (out / "direct_report.txt").write_text("\n".join(lines) + "\n")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="warrantysem",
        description="Stochastic EM for warranty returns with unknown sales dates.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="run SEM and write estimate, trace and summary")
    fit.add_argument("--data", required=True)
    fit.add_argument("--config", required=True)
    fit.add_argument("--out-dir", default=".")
    fit.set_defaults(func=cmd_fit)

    se = sub.add_parser("stderr", help="standard errors and Wald intervals")
    se.add_argument("--data", required=True)
    se.add_argument("--config", required=True)
    se.add_argument("--estimate", required=True)
    se.add_argument("--level", type=float, default=0.95)
    se.add_argument("--out-dir", default=".")
    se.set_defaults(func=cmd_stderr)

    sim = sub.add_parser("simulate", help="bias/RMSE study from a scenario file")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--out-dir", default=".")
    sim.set_defaults(func=cmd_simulate)

    direct = sub.add_parser("direct", help="direct likelihood maximization and AIC")
    direct.add_argument("--data", required=True)
    direct.add_argument("--config", required=True)
    direct.add_argument("--out-dir", default=None)
    direct.set_defaults(func=cmd_direct)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (WarrantySemError, CliFailure, OSError, ValueError) as exc:
        code = _exit_code(exc)
        reason = " ".join(str(exc).split()) or type(exc).__name__
        print(f"ERROR {code}: {reason}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
