"""Command-line front end: ``capture-mse estimate|simulate|calibrate|report``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import numbers
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .estimators import nhat_from_fixed_fit, nhat_from_mixed_fit, stratified_estimate
from .glm import FitConvergenceError, fit_fixed
from .glmm import MixedFitError, fit_mixed
from .harness import METHODS, PROBABILITIES, ScenarioConfig, run_scenarios, scenario_grid
from .simgen import CalibrationError, Distribution, calibrate_variances, stream
from .tables import (
    SpecificationError, TableFormatError, conditional_independence_spec, mixed_dual_spec,
    mixed_triple_spec, read_table_csv, triple_maximal_spec,
)

log = logging.getLogger("capture_mse")

EXIT_INPUT = 2
EXIT_USAGE = 64
EXIT_SCHEMA = 65
SEED_ENV = "CAPTURE_MSE_SEED"

ESTIMATE_HEADER = ("stratum", "method", "mu00_hat", "nhat_l", "is_infinite")
SUMMARY_HEADER = ("scenario_id", "method", "distribution", "N", "regions", "piA", "piB",
                  "marb_pct", "cv_pct", "mse", "infinite_count")
LONG_HEADER = ("scenario_id", "method", "distribution", "N", "regions", "piA", "piB",
               "metric", "value")
REPLICATE_HEADER = ("scenario_id", "method", "population", "sample", "stratum", "nhat", "truth")
ESTIMATE_METHODS = ("lp", "chapman", "fienberg", "fixed", "mixed")


class UsageError(Exception):
    pass


def fmt(x) -> str:
    """Shortest round-trip text for a number, so outputs are byte-reproducible."""
    if isinstance(x, str):
        return x
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, numbers.Integral):
        return str(x)
    return repr(float(x))


def _writer(stream_):
    return csv.writer(stream_, lineterminator="\n")


# ---------------------------------------------------------------------------
# estimate

def _estimate_one(table, method: str):
    dual = table.lists == 2
    if method == "lp":
        if not dual:
            raise UsageError("lp applies to two-list tables; use fienberg for three lists")
        return stratified_estimate(table, "LP"), None
    if method == "chapman":
        if not dual:
            raise UsageError("chapman applies to two-list tables")
        return stratified_estimate(table, "Chapman"), None
    if method == "fienberg":
        if dual:
            raise UsageError("fienberg applies to three-list tables")
        return stratified_estimate(table, "FienbergTriple"), None
    if method == "fixed":
        spec = conditional_independence_spec() if dual else triple_maximal_spec()
        fit = fit_fixed(table, spec)
        return nhat_from_fixed_fit(fit, table, spec), fit.as_dict()
    spec = mixed_dual_spec() if dual else mixed_triple_spec()
    fit = fit_mixed(table, spec)
    for w in fit.convergence_warnings:
        log.warning("mixed fit: %s", w)
    return nhat_from_mixed_fit(fit, table, spec), fit.as_dict()


def _parse_methods(values, allowed) -> list[str]:
    methods = []
    for value in values:
        for m in value.split(","):
            m = m.strip()
            if not m:
                continue
            if m not in allowed:
                raise UsageError(f"unknown method {m!r}; choose from {', '.join(allowed)}")
            if m not in methods:
                methods.append(m)
    if not methods:
        raise UsageError("no method given")
    return methods


def cmd_estimate(args) -> int:
    methods = _parse_methods(args.method, ESTIMATE_METHODS)
    try:
        table = read_table_csv(args.table)
    except TableFormatError as exc:
        print(f"error: {args.table}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    buf = io.StringIO()
    w = _writer(buf)
    w.writerow(ESTIMATE_HEADER)
    fits = {}
    for method in methods:
        try:
            est, fit = _estimate_one(table, method)
        except (SpecificationError, FitConvergenceError, MixedFitError) as exc:
            print(f"error: {method}: {exc}", file=sys.stderr)
            return 1
        if fit is not None:
            fits[method] = fit
        for lab, s in zip(table.labels, est.per_stratum):
            w.writerow((lab, est.method.value, fmt(s.mu00_hat), fmt(s.nhat), fmt(s.is_infinite)))
        total_mu = sum(s.mu00_hat for s in est.per_stratum)
        w.writerow(("TOTAL", est.method.value, fmt(total_mu), fmt(est.nhat_total),
                    fmt(est.is_infinite)))
    _emit(buf.getvalue(), args.out)
    if args.fit_json:
        Path(args.fit_json).write_text(json.dumps(fits, indent=2, sort_keys=True) + "\n")
    return 0


def _emit(text: str, out):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, newline="")


# ---------------------------------------------------------------------------
# simulate

def load_config(path, seed_override=None, methods_override=None) -> list[ScenarioConfig]:
    """Scenario list from a TOML file.

    ``[simulation]`` holds shared settings; ``[grid]`` crosses lists of
    distributions, N, regions and probabilities; each ``[[scenario]]`` entry
    adds one explicit scenario (its keys override the shared settings).
    """
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    common = dict(raw.get("simulation", {}))
    if seed_override is not None:
        common["base_seed"] = seed_override
    if methods_override is not None:
        common["methods"] = methods_override
    allowed = {"methods", "populations", "samples_per_population", "base_seed",
               "variances", "scale"}
    unknown = set(common) - allowed
    if unknown:
        raise UsageError(f"unknown [simulation] keys: {sorted(unknown)}")
    configs = []
    grid = raw.get("grid")
    if grid is not None:
        configs += scenario_grid(
            distributions=grid.get("distributions", [d.value for d in Distribution]),
            Ns=grid["N"], regions=grid["regions"],
            probabilities=grid.get("probabilities", list(PROBABILITIES)), **common)
    for entry in raw.get("scenario", []):
        merged = {**common, **entry}
        if seed_override is not None:
            merged["base_seed"] = seed_override
        if methods_override is not None:
            merged["methods"] = methods_override
        configs.append(ScenarioConfig(**merged))
    if not configs:
        raise UsageError("config defines no scenarios ([grid] or [[scenario]])")
    return configs


def _resolve_seed(flag):
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env:
        return int(env, 0)
    return None


def summary_rows(results):
    for res in results:
        c = res.config
        for method, s in res.summaries.items():
            yield (c.scenario_id, method, c.distribution.value, c.N, c.regions, c.pi_a, c.pi_b,
                   s.marb_percent, s.cv_percent, s.mse, s.infinite_count)


def write_summary(results, path):
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(SUMMARY_HEADER)
        for row in summary_rows(results):
            w.writerow([fmt(x) for x in row])


def write_replicates(results, path):
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(REPLICATE_HEADER)
        for res in results:
            for method, grid in res.grids.items():
                P, S, r = grid.shape
                for p in range(P):
                    for s in range(S):
                        for l in range(r):
                            w.writerow((res.config.scenario_id, method, p, s, l + 1,
                                        fmt(grid.estimates[p, s, l]), fmt(grid.truths[p, l])))


def cmd_simulate(args) -> int:
    methods = _parse_methods([args.methods], METHODS) if args.methods else None
    configs = load_config(args.config, _resolve_seed(args.seed), methods)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("running %d scenarios with %d job(s)", len(configs), args.jobs)
    results = run_scenarios(configs, jobs=args.jobs)
    write_summary(results, out / "summary.csv")
    if args.replicate_log:
        write_replicates(results, out / "replicates.csv")
    warnings = sum(r.warnings for r in results)
    failures = sum(r.failures for r in results)
    if warnings or failures:
        log.info("%d mixed fits carried convergence warnings, %d were rejected", warnings, failures)
    return 0


# ---------------------------------------------------------------------------
# calibrate

def cmd_calibrate(args) -> int:
    seed = _resolve_seed(args.seed)
    seed = 0 if seed is None else seed
    try:
        result = calibrate_variances(stream(seed), replicates=args.replicates)
    except CalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    u0, u1, u2 = result.sigma2
    print(f"sigma2_u0 = {u0!r}")
    print(f"sigma2_u1 = {u1!r}")
    print(f"sigma2_u2 = {u2!r}")
    print(f"# {result.warning_free} warning-free fits out of {result.fits}")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(
            f"# calibrate --seed {seed} --replicates {args.replicates}; "
            f"{result.warning_free} warning-free fits of {result.fits}\n"
            "[variances]\n"
            f"sigma2_u0 = {u0!r}\nsigma2_u1 = {u1!r}\nsigma2_u2 = {u2!r}\n")
    return 0


# ---------------------------------------------------------------------------
# report

class SchemaError(Exception):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")


def read_summary(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(path, "empty file") from None
        if tuple(header) != SUMMARY_HEADER:
            raise SchemaError(path, f"expected header {','.join(SUMMARY_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(SUMMARY_HEADER):
                raise SchemaError(path, f"line {lineno}: expected {len(SUMMARY_HEADER)} fields")
            rec = dict(zip(SUMMARY_HEADER, row))
            try:
                for key in ("N", "regions", "infinite_count"):
                    int(rec[key])
                for key in ("piA", "piB", "marb_pct", "cv_pct", "mse"):
                    float(rec[key])
            except ValueError:
                raise SchemaError(path, f"line {lineno}: non-numeric field") from None
            rows.append(rec)
    return rows


def _sort_key(rec):
    return (int(rec["N"]), int(rec["regions"]), rec["distribution"], rec["method"],
            rec["scenario_id"])


def cmd_report(args) -> int:
    in_dir = Path(args.in_dir)
    files = sorted(p for p in in_dir.rglob("*.csv") if p.name != "replicates.csv")
    out = Path(args.out).resolve() if args.out else None
    files = [p for p in files if p.resolve() != out]
    if not files:
        print(f"error: no summary CSV files under {in_dir}", file=sys.stderr)
        return EXIT_INPUT
    rows = []
    try:
        for path in files:
            rows += read_summary(path)
    except SchemaError as exc:
        print(f"error: schema mismatch in {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    rows.sort(key=_sort_key)
    buf = io.StringIO()
    w = _writer(buf)
    if args.long:
        w.writerow(LONG_HEADER)
        for rec in rows:
            for metric in ("marb_pct", "cv_pct", "mse", "infinite_count"):
                w.writerow([rec[k] for k in LONG_HEADER[:7]] + [metric, rec[metric]])
    else:
        w.writerow(SUMMARY_HEADER)
        for rec in rows:
            w.writerow([rec[k] for k in SUMMARY_HEADER])
    _emit(buf.getvalue(), args.out)
    return 0


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="capture-mse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("estimate", help="population-size estimates for a table CSV")
    p.add_argument("table")
    p.add_argument("--method", action="append", required=True,
                   help=f"one of {', '.join(ESTIMATE_METHODS)}; repeat or comma-separate")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.add_argument("--fit-json", help="write fitted model parameters as JSON")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run the scenario grid from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=lambda s: int(s, 0), help=f"base seed (overrides ${SEED_ENV})")
    p.add_argument("--replicate-log", action="store_true", help="also write replicates.csv")
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="estimate perturbation variances (calibration study)")
    p.add_argument("--seed", type=lambda s: int(s, 0))
    p.add_argument("--replicates", type=int, default=1000)
    p.add_argument("--out", help="write a TOML [variances] fragment here")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="concatenate and sort summary CSVs")
    p.add_argument("in_dir")
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.add_argument("--long", action="store_true", help="one row per scenario, method and metric")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TypeError, ValueError, KeyError, tomllib.TOMLDecodeError) as exc:
        if args.command != "simulate":
            raise
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
