"""Command line entry point: ``tdbo run | suite | summarize | plot-data``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import bench
from .testbed import CASES, payoff, synthetic_oracle

log = logging.getLogger("tdbo")

THREADS_ENV = "TDBO_THREADS"
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# keys accepted in --config files, mapped to argparse destinations
CONFIG_KEYS = {
    "case", "cases", "method", "methods", "reps", "seed", "mc_samples", "steps", "horizon",
    "noise", "n_initial", "t_train_end", "fit_starts", "initial_design", "threads", "out",
    "summary", "lookahead", "acquisition",
}


class ConfigError(ValueError):
    pass


def _csv_list(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--reps", type=int, help="replications per case and method")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--mc-samples", dest="mc_samples", type=int, help="Monte Carlo samples for r2ley")
    p.add_argument("--steps", type=int, help="optimization steps after the initial design")
    p.add_argument("--horizon", type=float, help="horizon time T")
    p.add_argument("--noise", type=float, help="observation noise stddev (default: 1%% of the payoff range)")
    p.add_argument("--n-initial", dest="n_initial", type=int, help="initial design size")
    p.add_argument("--t-train-end", dest="t_train_end", type=float, help="last time of the initial design")
    p.add_argument("--fit-starts", dest="fit_starts", type=int, help="hyperparameter fit restarts")
    p.add_argument("--initial-design", dest="initial_design", choices=["uniform", "lhs"])
    p.add_argument("--out", help="JSON-lines file for run records")
    p.add_argument("--summary", help="CSV file for the summary (default: stdout)")
    p.add_argument("--config", help="JSON or YAML file with default option values")
    p.add_argument("--threads", type=int, help=f"worker processes (overridden by ${THREADS_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tdbo", description="Time-dependent Bayesian optimization benchmarks.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="replicate one case with one method")
    run.add_argument("--case", help=f"test case, one of {', '.join(CASES)}")
    run.add_argument("--method", choices=sorted(bench.METHODS))
    _add_common(run)

    suite = sub.add_parser("suite", help="sweep cases x methods")
    suite.add_argument("--cases", "--case", dest="cases", type=_csv_list, help="comma-separated test cases")
    suite.add_argument("--methods", "--method", dest="methods", type=_csv_list, help="comma-separated methods")
    _add_common(suite)

    summ = sub.add_parser("summarize", help="aggregate record files into a summary CSV")
    summ.add_argument("records", nargs="+", help="JSON-lines record files")
    summ.add_argument("--out", help="CSV output (default: stdout)")

    plot = sub.add_parser("plot-data", help="emit CSV data for regret and trajectory figures")
    plot.add_argument("records", nargs="+", help="JSON-lines record files")
    plot.add_argument("--out-dir", dest="out_dir", required=True)
    plot.add_argument("--grid", type=int, default=101, help="contour grid points per axis")
    return parser


def load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if p.suffix.lower() == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config file {p}: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {p} must hold a mapping, got {type(data).__name__}")
    data = {str(k).replace("-", "_"): v for k, v in data.items()}
    unknown = sorted(set(data) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown keys in config file {p}: {', '.join(unknown)}")
    return data


def _merged(args: argparse.Namespace) -> dict:
    """Command-line values over config-file values over built-in defaults."""
    opts = load_config(args.config) if args.config else {}
    for key, val in vars(args).items():
        if val is not None and key not in ("config", "command", "verbose"):
            opts[key] = val
    for single, plural in (("case", "cases"), ("method", "methods")):
        if single in opts and plural not in opts:
            val = opts.pop(single)
            opts[plural] = val if isinstance(val, list) else _csv_list(str(val))
        opts.pop(single, None)
    for key in ("cases", "methods"):
        if isinstance(opts.get(key), str):
            opts[key] = _csv_list(opts[key])
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            opts["threads"] = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return opts


def _configs(opts: dict) -> list[bench.RunConfig]:
    cases, methods = opts.get("cases"), opts.get("methods")
    if not cases:
        raise ConfigError("no test case given (--case/--cases)")
    if not methods:
        raise ConfigError("no method given (--method/--methods)")
    for c in cases:
        if c.lower() not in CASES:
            raise ConfigError(f"unknown test case {c!r}; expected one of {', '.join(CASES)}")
    for m in methods:
        if m.lower() not in bench.METHODS:
            raise ConfigError(f"unknown method {m!r}; expected one of {', '.join(sorted(bench.METHODS))}")
    kwargs = {
        k: opts[k]
        for k in ("reps", "seed", "mc_samples", "steps", "horizon", "noise", "n_initial",
                  "t_train_end", "fit_starts", "initial_design", "lookahead", "acquisition")
        if opts.get(k) is not None
    }
    try:
        return bench.suite_configs(cases, methods, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _emit(records, opts: dict, summary_path: str | None = None) -> None:
    out = opts.get("out")
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            bench.write_records(records, fh)
        timing = Path(out).with_suffix(Path(out).suffix + ".timing.csv")
        with open(timing, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "method", "replication", "seconds"])
            for rec in records:
                w.writerow([rec.case, rec.method, rec.replication, f"{rec.wall_clock:.3f}"])
    text = bench.summary_csv(bench.summarize(records))
    summary_path = summary_path or opts.get("summary")
    if summary_path:
        Path(summary_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    failed = [r for r in records if not r.ok]
    for r in failed:
        log.warning("%s/%s replication %d failed: %s", r.case, r.method, r.replication, r.error)


def cmd_run(args) -> int:
    opts = _merged(args)
    configs = _configs(opts)
    if len(configs) != 1:
        raise ConfigError("`run` takes exactly one case and one method; use `suite` for sweeps")
    records = bench.replicate(configs[0], workers=int(opts.get("threads") or 1))
    _emit(records, opts)
    return EXIT_OK


def cmd_suite(args) -> int:
    opts = _merged(args)
    records = bench.run_suite(_configs(opts), workers=int(opts.get("threads") or 1))
    _emit(records, opts)
    return EXIT_OK


def _read_all(paths) -> list[bench.RunRecord]:
    records = []
    for path in paths:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"record file not found: {p}")
        with open(p, encoding="utf-8") as fh:
            try:
                records.extend(bench.read_records(fh))
            except (json.JSONDecodeError, TypeError) as exc:
                raise ConfigError(f"malformed record file {p}: {exc}") from None
    return records


def cmd_summarize(args) -> int:
    text = bench.summary_csv(bench.summarize(_read_all(args.records)))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_plot_data(args) -> int:
    records = _read_all(args.records)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "regret.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "d", "method", "replication", "seed", "regret"])
        for r in records:
            if r.ok:
                w.writerow([r.case, r.d, r.method, r.replication, r.seed, repr(r.regret)])
    one_d = [r for r in records if r.ok and r.d == 1]
    with open(out / "trajectories.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case", "method", "replication", "phase", "index", "t", "x", "y"])
        for r in one_d:
            for i, (x, t, y) in enumerate(zip(r.initial_x, r.initial_t, r.initial_y)):
                w.writerow([r.case, r.method, r.replication, "initial", i, repr(t), repr(x[0]), repr(y)])
            last = len(r.step_t) - 1
            for i, (x, t, y) in enumerate(zip(r.step_x, r.step_t, r.step_y)):
                w.writerow([r.case, r.method, r.replication, "final" if i == last else "step", i, repr(t), repr(x[0]), repr(y)])
    for case in sorted({r.case for r in one_d if r.case in CASES}):
        spec = synthetic_oracle(case, noise_stddev=0.0)
        xs = np.linspace(spec.domain.lower[0], spec.domain.upper[0], args.grid)
        ts = np.linspace(*spec.time_range, args.grid)
        with open(out / f"contour_{case}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "x", "f"])
            for t in ts:
                for x, f in zip(xs, payoff(spec, xs[:, None], t)):
                    w.writerow([repr(float(t)), repr(float(x)), repr(float(f))])
    return EXIT_OK


COMMANDS = {"run": cmd_run, "suite": cmd_suite, "summarize": cmd_summarize, "plot-data": cmd_plot_data}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"tdbo: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"tdbo: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
