"""Command line entry point: ``varsig detect``, ``varsig test`` and ``varsig simulate``.

Exit codes: 0 success, 2 input error, 3 configuration error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .core import DegenerateInputError, NumericalUnderflowError, TimeSeries
from .detect import DetectorConfig, detect
from .exact import CONDITIONINGS, TAU_IN_MODEL
from .harness import ScenarioError, default_workers, holm_adjusted, holm_bonferroni, load_scenario, run_scenario
from .inference import ENGINES, METHODS, WHOLE, InferenceSettings, detect_and_test, detector_config
from .mc import MODES, AllRejectedError, SamplerConfig

SCHEMA = 1
EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4


class InputError(Exception):
    pass


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# input


def _number(token: str, lineno: int) -> float:
    try:
        v = float(token)
    except ValueError:
        raise InputError(f"line {lineno}: not a number: {token!r}") from None
    if not math.isfinite(v):
        raise InputError(f"line {lineno}: non-finite value {token!r}")
    return v


def read_series(path, column: str | None = None) -> np.ndarray:
    """Read one value per line, or one CSV column selected by header name or 0-based index.

    Blank lines are skipped. Any other token that is not a finite number is
    an error reporting its line number.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    values = []
    with fh:
        if column is None:
            for lineno, line in enumerate(fh, 1):
                tok = line.strip()
                if tok:
                    values.append(_number(tok, lineno))
        else:
            reader = csv.reader(fh)
            idx = int(column) if column.isdigit() else None
            for row in reader:
                lineno = reader.line_num
                if not row or all(not c.strip() for c in row):
                    continue
                if idx is None:
                    header = [c.strip() for c in row]
                    if column not in header:
                        raise InputError(f"line {lineno}: no column named {column!r} in header {header}")
                    idx = header.index(column)
                    continue
                if idx >= len(row):
                    raise InputError(f"line {lineno}: row has {len(row)} fields, column {idx} missing")
                values.append(_number(row[idx].strip(), lineno))
    if len(values) < 2:
        raise InputError(f"{path}: need at least 2 values, found {len(values)}")
    return np.asarray(values)


def _series(args) -> tuple[TimeSeries, dict]:
    x = read_series(args.input, args.column)
    mu = float(np.mean(x)) if args.center else args.mu
    meta = {"file": Path(args.input).name, "T": int(x.size), "mu": mu, "centered_by_sample_mean": bool(args.center)}
    return TimeSeries(x, mu), meta


# ---------------------------------------------------------------------------
# configuration


def _detector(args) -> DetectorConfig:
    stops = [v is not None for v in (args.threshold, args.k, args.penalty)]
    if sum(stops) != 1:
        raise ConfigError("give exactly one of --threshold, --k or --penalty")
    if args.method == "lr-pelt" and args.penalty is None:
        raise ConfigError("lr-pelt takes --penalty")
    if args.method != "lr-pelt" and args.penalty is not None:
        raise ConfigError("--penalty only applies to lr-pelt")
    try:
        return detector_config(args.method, threshold=args.threshold, n_changepoints=args.k,
                               penalty=args.penalty, n_intervals=args.n_intervals, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _settings(args) -> InferenceSettings:
    h = WHOLE if args.h == WHOLE else int(args.h)
    if args.engine == "exact" and not args.method.startswith("cusum-"):
        raise ConfigError(f"the exact engine needs a cusum-* method, got {args.method}")
    try:
        sampler = SamplerConfig(N=args.N, N_tilde=args.N_tilde, l=args.l, mode=args.mode, seed=args.seed)
        return InferenceSettings(h, args.conditioning, args.engine, sampler, args.n_w)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _emit(doc: dict, output) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if output in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(output).write_text(text)


# ---------------------------------------------------------------------------
# commands


def cmd_detect(args) -> int:
    config = _detector(args)
    series, meta = _series(args)
    result = detect(series, config)
    _emit({"schema": SCHEMA, "command": "detect", "input": meta, "method": args.method,
           "detection": result.to_dict()}, args.output)
    return EXIT_OK


def cmd_test(args) -> int:
    config = _detector(args)
    settings = _settings(args)
    series, meta = _series(args)
    result, reports = detect_and_test(series, config, settings)
    tested = [i for i, r in enumerate(reports) if r.p_value is not None]
    p = np.array([reports[i].p_value for i in tested])
    flags = holm_bonferroni(p, args.alpha) if p.size else np.zeros(0, bool)
    adj = holm_adjusted(p) if p.size else np.zeros(0)
    out = []
    for i, r in enumerate(reports):
        d = r.to_dict()
        if i in tested:
            k = tested.index(i)
            d["holm_adjusted_p_value"] = float(adj[k])
            d["significant"] = bool(flags[k])
        else:
            d["holm_adjusted_p_value"] = None
            d["significant"] = None
        out.append(d)
    doc = {
        "schema": SCHEMA,
        "command": "test",
        "input": meta,
        "method": args.method,
        "alpha": args.alpha,
        "inference": {"h": settings.h, "conditioning": settings.conditioning, "engine": settings.engine,
                      "N": args.N, "N_tilde": args.N_tilde, "l": args.l, "mode": args.mode,
                      "n_w": args.n_w, "seed": args.seed},
        "detection": result.to_dict(),
        "reports": out,
    }
    _emit(doc, args.output)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    overrides = {}
    if args.replicates is not None:
        overrides["replicates"] = args.replicates
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        scenario = replace(scenario, **overrides)
    out_dir = args.output or f"varsig-{scenario.name}"
    manifest = run_scenario(scenario, out_dir, workers=args.workers)
    sys.stdout.write(json.dumps({"schema": SCHEMA, "command": "simulate", "output_dir": str(out_dir),
                                 "outputs": sorted(manifest["outputs"])}, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("input", help="one value per line, or CSV with --column")
    p.add_argument("--column", help="CSV column: header name or 0-based index (no header)")
    mu = p.add_mutually_exclusive_group(required=True)
    mu.add_argument("--mu", type=float, help="known mean of the series")
    mu.add_argument("--center", action="store_true", help="subtract the sample mean instead of a known mean")
    p.add_argument("--method", choices=METHODS, default="cusum-binseg")
    p.add_argument("--threshold", type=float, help="detection threshold lambda (binseg/wbs)")
    p.add_argument("--k", type=int, help="number of changepoints to estimate (binseg/wbs)")
    p.add_argument("--penalty", type=float, help="PELT penalty per changepoint")
    p.add_argument("--n-intervals", type=int, default=100, help="WBS random intervals (default 100)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", "-o", help="write JSON here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="varsig", description="Variance changepoints with post-selection p-values.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("detect", help="detect changepoints and report every segmentation step")
    _common(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("test", help="detect changepoints and attach post-selection p-values")
    _common(p)
    p.add_argument("--h", default="20", help="window half-width, or 'whole' (default 20)")
    p.add_argument("--conditioning", choices=CONDITIONINGS, default=TAU_IN_MODEL)
    p.add_argument("--engine", choices=ENGINES, default="auto",
                   help="auto: exact for cusum-*, Monte Carlo otherwise")
    p.add_argument("--N", type=int, default=100, help="GP design size")
    p.add_argument("--N-tilde", dest="N_tilde", type=int, default=100, help="importance samples (gp-is)")
    p.add_argument("--l", type=float, default=100.0, help="GP kernel length-scale")
    p.add_argument("--mode", choices=MODES, default="gp-direct")
    p.add_argument("--n-w", dest="n_w", type=int, default=1, help="nuisance resamples; 1 conditions on W")
    p.add_argument("--alpha", type=float, default=0.05, help="Holm-Bonferroni family-wise level")
    p.add_argument("--workers", type=int, default=default_workers(),
                   help="accepted for symmetry; single-series inference runs in one process")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("simulate", help="run a scenario file or bundled scenario")
    p.add_argument("scenario", help="path to a scenario file, or a bundled name such as fig4a or table1")
    p.add_argument("--output", "-o", help="output directory (default varsig-<name>)")
    p.add_argument("--replicates", type=int, help="override the scenario's replicate count")
    p.add_argument("--seed", type=int, help="override the scenario's master seed")
    p.add_argument("--workers", type=int, default=default_workers(),
                   help="worker processes (default $VARSIG_WORKERS or 1)")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if getattr(args, "h", None) not in (None, WHOLE):
        try:
            if int(args.h) < 1:
                raise ValueError
        except ValueError:
            parser.error(f"--h must be a positive integer or 'whole', got {args.h!r}")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"varsig: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DegenerateInputError as exc:
        print(f"varsig: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ScenarioError as exc:
        print("varsig: invalid scenario:", file=sys.stderr)
        for prob in exc.problems:
            print(f"  {prob}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, ValueError) as exc:
        print(f"varsig: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalUnderflowError, AllRejectedError, FloatingPointError) as exc:
        print(f"varsig: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
