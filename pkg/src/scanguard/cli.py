"""``scanguard`` command line: simulate, fit-var, grid, detect, report.

Exit codes: 0 success, 1 runtime or data failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
import warnings
from typing import List, Optional

import numpy as np

from . import __version__
from .core import RatioSeries
from .detectors import (
    Method,
    MethodConfig,
    classify,
    fit_constant_method,
    oracle_limits,
    var_limits,
)
from .errors import ScanguardError
from .ingest import SplitSpec, WeekFilter, parse_scanner_csv, train_test_split
from .metrics import COLUMNS, fmt
from .simulate import (
    ScenarioConfig,
    VarianceCase,
    generate_path,
    read_report,
    run_scenario,
    true_sigma,
    variance_case,
    worker_count,
    write_report_csv,
    write_report_json,
)
from .varest import (
    BandwidthSearchConfig,
    fit_variance_surface,
    load_surface,
    save_surface,
    search_bandwidth,
    surface_grid,
)

log = logging.getLogger("scanguard")

DETECT_SCHEMA = "scanguard.detect/1"
CHART_SCHEMA = "scanguard.chart/1"
GRID_SCHEMA = "scanguard.grid/1"
DEFAULT_DETECT_METHODS = "VAR,CONST,QUARTILE,HB,RF,TUKEY"


class UsageError(Exception):
    pass


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path in (None, "-"):
        yield sys.stdout
    else:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            yield fh


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0 <= v < 1:
        raise argparse.ArgumentTypeError("fraction must lie in [0, 1)")
    return v


def _grid_axis(text: str):
    try:
        lo, hi, steps = text.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN:MAX:STEPS, got {text!r}") from None
    if steps < 2 or not hi > lo:
        raise argparse.ArgumentTypeError("need MAX > MIN and STEPS >= 2")
    return lo, hi, steps


def _week_filter(text: str) -> WeekFilter:
    try:
        return WeekFilter.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_method_constants(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("method constants")
    g.add_argument("--c-u", type=float, default=4.5, help="quartile/HB upper constant")
    g.add_argument("--c-l", type=float, default=None, help="quartile/HB lower constant (default: --c-u)")
    g.add_argument("--rf-c", type=float, default=1.75, help="resistant fence constant")
    g.add_argument("--tukey-c", type=float, default=2.5, help="Tukey algorithm constant")
    g.add_argument("--sigma-mult", type=float, default=3.0, help="multiplier on sigma for CONST/VAR/ORACLE")
    g.add_argument("--hb-literal", action="store_true", help="use the q2/R - 1 upper HB branch")
    g.add_argument("--eps", type=float, default=0.0, help="treat |R-1| <= eps as unchanged")


def _method_config(args, log_scale: bool) -> MethodConfig:
    try:
        return MethodConfig(c_u=args.c_u, c_l=args.c_l, rf_c=args.rf_c, tukey_c=args.tukey_c,
                            sigma_mult=args.sigma_mult, hb_literal=args.hb_literal,
                            log_scale=log_scale, tukey_eps=args.eps)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _bandwidth_args(p: argparse.ArgumentParser, fixed: bool = True) -> None:
    g = p.add_argument_group("bandwidth")
    if fixed:
        _fixed_bandwidth_args(g)
    g.add_argument("--grid-points", type=_positive_int, default=16, help="CV grid points per dimension")
    g.add_argument("--span", type=float, nargs=2, default=(1 / 8, 8.0), metavar=("LO", "HI"),
                   help="CV grid multipliers around the rule-of-thumb pilot")


def _fixed_bandwidth_args(g) -> None:
    g.add_argument("--h1", type=float, help="fixed bandwidth for V_{t-1} (skips cross-validation)")
    g.add_argument("--h2", type=float, help="fixed bandwidth for V_t")


def _bandwidth_config(args) -> BandwidthSearchConfig:
    try:
        return BandwidthSearchConfig(args.grid_points, tuple(args.span))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _fixed_bandwidth(args):
    if (args.h1 is None) != (args.h2 is None):
        raise UsageError("give both --h1 and --h2, or neither")
    if args.h1 is None:
        return None
    if not (args.h1 > 0 and args.h2 > 0):
        raise UsageError("bandwidths must be positive")
    return args.h1, args.h2


def _data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scanner data")
    g.add_argument("--data", help="transaction CSV")
    g.add_argument("--item", help="item id (needed when the file holds several items)")
    g.add_argument("--store", help="store monitored in the test period")
    g.add_argument("--train-filter", type=_week_filter, default=WeekFilter(),
                   help='training rows, e.g. "weeks=1-52" or "store=S01|S02;weeks=1-52"')
    g.add_argument("--test-filter", type=_week_filter, default=WeekFilter(),
                   help='test rows, e.g. "weeks=53-104"; store defaults to --store')
    g.add_argument("--drop-unchanged", action="store_true",
                   help="reduce training and test data to price changes before fitting any method")
    g.add_argument("--unweighted", action="store_true",
                   help="weekly price as the plain mean of transaction prices")
    for name in ("store_id", "item_id", "week", "price", "volume"):
        g.add_argument(f"--col-{name.replace('_', '-')}", dest=f"col_{name}", default=name,
                       help=f"CSV header holding {name}")


def _load_split(args):
    cols = {k: getattr(args, f"col_{k}") for k in ("store_id", "item_id", "week", "price", "volume")}
    with open(args.data, "rb") as fh:
        parsed = parse_scanner_csv(fh, cols)
    for err in parsed.errors:
        log.warning("skipped malformed row: %s", err)
    test_filter = args.test_filter
    if args.store is not None:
        test_filter = test_filter.with_store(args.store)
    spec = SplitSpec(args.train_filter, test_filter)
    split = train_test_split(parsed.records, spec, item_id=args.item, drop_unchanged=args.drop_unchanged,
                             eps=args.eps, weighted=not args.unweighted)
    return parsed, split


# --- simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cases = list(VarianceCase) if args.case == "all" else [VarianceCase(args.case)]
    mc = _method_config(args, log_scale=not args.ratio_scale)
    bc = _bandwidth_config(args)
    workers = args.workers if args.workers is not None else worker_count()
    reports = []
    for frac in args.fraction:
        for case in cases:
            try:
                cfg = ScenarioConfig(
                    variance_case=case, anomaly_fraction=frac, delta=args.delta, n_train=args.n_train,
                    n_test=args.n_test, n_replicates=args.replicates, base_seed=args.seed,
                    anomaly_shape=args.shape, methods=mc, bandwidth=bc,
                )
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            log.info("case %s, fraction %.2f: %d replicates", case.value, frac, args.replicates)
            rep = run_scenario(cfg, workers=workers)
            for r in rep.replicates:
                for m, msg in r.errors.items():
                    log.warning("replicate %d, %s: %s", r.index, m.value, msg)
            reports.append(rep)
    with _output(args.out) as fh:
        if args.format == "json":
            write_report_json(reports, fh)
        else:
            write_report_csv(reports, fh)
    return 0


# --- fit-var / grid -------------------------------------------------------------

def _training_series(args) -> RatioSeries:
    if args.data:
        _, split = _load_split(args)
        return split.train
    if args.sim_case is None:
        raise UsageError("give --data or --sim-case")
    try:
        cfg = ScenarioConfig(variance_case=args.sim_case, base_seed=args.seed, n_train=args.n_train,
                             n_test=args.n_test, n_replicates=1)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return generate_path(cfg, args.replicate).split()[0]


def cmd_fit_var(args) -> int:
    train = _training_series(args)
    h = _fixed_bandwidth(args)
    if h is None:
        sel = search_bandwidth(train, _bandwidth_config(args))
        h = sel.bandwidth
        n_under = int(sel.underflows[list(sel.grid_h1).index(h[0]), list(sel.grid_h2).index(h[1])])
        log.info("selected bandwidth (%.6g, %.6g); pilot (%.6g, %.6g); %d LOO underflows",
                 h[0], h[1], sel.pilot[0], sel.pilot[1], n_under)
    surface = fit_variance_surface(train, h)
    if args.out in (None, "-"):
        json.dump(surface.to_dict(), sys.stdout)
        sys.stdout.write("\n")
    else:
        save_surface(surface, args.out)
    return 0


def cmd_grid(args) -> int:
    surface = load_surface(args.surface)
    truth = None
    if args.true_case is not None:
        case = VarianceCase(args.true_case)
        truth = lambda a, b: variance_case(case, a, b)  # noqa: E731
    grid = surface_grid(surface, args.v1, args.v2, truth,
                        fallback="nearest" if args.nearest_fallback else None)
    with _output(args.out) as fh:
        fh.write(f"# schema: {GRID_SCHEMA}\n")
        grid.write_csv(fh)
    return 0


# --- detect -----------------------------------------------------------------------

def _parse_methods(text: str) -> List[Method]:
    out = []
    for tok in filter(None, (t.strip().upper() for t in text.split(","))):
        try:
            out.append(Method(tok))
        except ValueError:
            raise UsageError(f"unknown method {tok!r}") from None
    if not out:
        raise UsageError("no methods selected")
    return out


def _limits_record(limits) -> dict:
    return {
        "space": limits.space.value,
        "lower": limits.lower.tolist(),
        "upper": limits.upper.tolist(),
        "center": limits.center,
        "hb_literal": limits.hb_literal,
        "warnings": list(limits.warnings),
    }


def run_detect(split, methods: List[Method], mc: MethodConfig, bc: BandwidthSearchConfig,
               fixed_h=None, nearest_fallback: bool = False, true_case=None) -> dict:
    """Fit every requested method on ``split.train`` and classify ``split.test``.

    A method that fails is reported under ``errors`` and does not stop the rest.
    """
    train, test = split.train, split.test
    results, errors = {}, {}
    for method in methods:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                extra = {}
                if method is Method.VAR:
                    h = fixed_h or search_bandwidth(train, bc).bandwidth
                    surface = fit_variance_surface(train, h)
                    limits = var_limits(surface, test.vol_pairs, mc,
                                        fallback="nearest" if nearest_fallback else None)
                    extra["bandwidth"] = list(h)
                elif method is Method.ORACLE:
                    if true_case is None:
                        raise ScanguardError("ORACLE needs --true-case")
                    limits = oracle_limits(true_sigma(true_case), test.vol_pairs, mc)
                else:
                    limits = fit_constant_method(method, train, mc)
            flags = classify(test, limits)
            results[method.value] = {
                "limits": _limits_record(limits),
                "flagged": flags.flagged().tolist(),
                "n_flagged": flags.n_flagged,
                **extra,
                "_limits": limits,
                "_flags": flags,
            }
        except ScanguardError as exc:
            errors[method.value] = f"{type(exc).__name__}: {exc}"
    return {"results": results, "errors": errors}


def write_chart_csv(fh, split, results: dict) -> None:
    """One row per test ratio: week, price, log-ratio and each method's limits on the log-ratio axis."""
    test, series = split.test, split.test_series
    price_at = dict(zip(series.weeks.tolist(), series.prices.tolist()))
    methods = list(results)
    fh.write(f"# schema: {CHART_SCHEMA}\n")
    w = csv.writer(fh, lineterminator="\n")
    header = ["t", "gap", "price", "log_ratio"]
    for m in methods:
        header += [f"{m}_lower", f"{m}_upper", f"{m}_flag"]
    w.writerow(header)
    cols = {}
    for m in methods:
        lo, hi = results[m]["_limits"].to_log_ratio()
        n = len(test)
        cols[m] = (np.broadcast_to(lo, (n,)), np.broadcast_to(hi, (n,)), results[m]["_flags"].is_outlier)
    for i, t in enumerate(test.t_index.tolist()):
        row = [t, int(test.gaps[i]), repr(price_at[t]), repr(float(test.log_ratios[i]))]
        for m in methods:
            lo, hi, fl = cols[m]
            row += [repr(float(lo[i])), repr(float(hi[i])), int(fl[i])]
        w.writerow(row)


def cmd_detect(args) -> int:
    methods = _parse_methods(args.methods)
    mc = _method_config(args, log_scale=args.log_scale)
    bc = _bandwidth_config(args)
    if not args.data:
        raise UsageError("--data is required")
    parsed, split = _load_split(args)
    out = run_detect(split, methods, mc, bc, _fixed_bandwidth(args), args.nearest_fallback, args.true_case)
    doc = {
        "schema": DETECT_SCHEMA,
        "version": __version__,
        "item": split.test_series.item_id,
        "test_store": split.test_series.store_id,
        "train_stores": list(split.train_stores),
        "n_train": len(split.train),
        "n_test": len(split.test),
        "drop_unchanged": args.drop_unchanged,
        "malformed_rows": [str(e) for e in parsed.errors],
        "methods": {m: {k: v for k, v in r.items() if not k.startswith("_")} for m, r in out["results"].items()},
        "errors": out["errors"],
        "t_index": split.test.t_index.tolist(),
    }
    for m, msg in out["errors"].items():
        log.error("%s failed: %s", m, msg)
    with _output(args.out) as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    if args.chart:
        with _output(args.chart) as fh:
            write_chart_csv(fh, split, out["results"])
    return 0 if out["results"] else 1


# --- report -----------------------------------------------------------------------

def cmd_report(args) -> int:
    with open(args.input, encoding="utf-8") as fh:
        rows = read_report(fh)
    with _output(args.out) as fh:
        if args.format == "csv":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "fraction", "method"] + [c.upper() for c in COLUMNS])
            for r in rows:
                w.writerow([r["case"], r["fraction"], r["method"]] +
                           [f"{fmt(r[c + '_mean'])} ({fmt(r[c + '_sd'])})" for c in COLUMNS])
            return 0
        last = None
        head = f"{'Case':<6}{'Method':<10}" + "".join(f"{c.upper():>16}" for c in COLUMNS)
        for r in rows:
            key = (r["fraction"],)
            if key != last:
                fh.write(f"\nAnomaly fraction {r['fraction']:.2f}\n{head}\n{'-' * len(head)}\n")
                last = key
            cells = "".join(f"{fmt(r[c + '_mean']) + ' (' + fmt(r[c + '_sd']) + ')':>16}" for c in COLUMNS)
            note = f"  [{r['n_failed']} failed]" if r.get("n_failed") else ""
            fh.write(f"({r['case'].lower()})   {r['method']:<10}{cells}{note}\n")
    return 0


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scanguard", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="replicated simulation study, table layout output")
    s.add_argument("--case", choices=["A", "B", "C", "all"], default="all")
    s.add_argument("--fraction", type=_fraction, nargs="+", default=[0.05],
                   help="anomaly fraction(s) of the test period")
    s.add_argument("--replicates", type=_positive_int, default=50)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--delta", type=float, default=2.0, help="anomaly size on the log-price scale")
    s.add_argument("--n-train", type=int, default=300)
    s.add_argument("--n-test", type=int, default=300)
    s.add_argument("--shape", choices=["spike", "level"], default="spike")
    s.add_argument("--ratio-scale", action="store_true",
                   help="run quartile, RF and Tukey on R_t instead of log R_t")
    s.add_argument("--workers", type=_positive_int, default=None,
                   help="parallel replicates (default: SCANGUARD_THREADS or CPU count)")
    s.add_argument("--out", help="output file (default stdout)")
    s.add_argument("--format", choices=["csv", "json"], default="csv")
    _add_method_constants(s)
    _bandwidth_args(s, fixed=False)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit-var", parents=[common], help="fit and save a variance surface")
    _data_args(f)
    f.add_argument("--sim-case", choices=["A", "B", "C"], help="fit on a simulated training period instead")
    f.add_argument("--seed", type=_seed, default=0)
    f.add_argument("--replicate", type=int, default=0)
    f.add_argument("--n-train", type=int, default=300)
    f.add_argument("--n-test", type=int, default=300)
    f.add_argument("--eps", type=float, default=0.0, help="treat |R-1| <= eps as unchanged")
    _bandwidth_args(f)
    f.add_argument("--out", help="surface JSON (default stdout)")
    f.set_defaults(func=cmd_fit_var)

    g = sub.add_parser("grid", parents=[common], help="evaluate a saved surface on a grid, CSV output")
    g.add_argument("--surface", required=True)
    g.add_argument("--v1", type=_grid_axis, required=True, metavar="MIN:MAX:STEPS")
    g.add_argument("--v2", type=_grid_axis, required=True, metavar="MIN:MAX:STEPS")
    g.add_argument("--true-case", choices=["A", "B", "C"], help="add squared error against a known case")
    g.add_argument("--nearest-fallback", action="store_true",
                   help="use the nearest training value where kernel weights underflow")
    g.add_argument("--out")
    g.set_defaults(func=cmd_grid)

    d = sub.add_parser("detect", parents=[common], help="fit methods on a training period and flag a test store")
    _data_args(d)
    d.add_argument("--methods", default=DEFAULT_DETECT_METHODS, help="comma-separated method names")
    d.add_argument("--log-scale", action="store_true", help="quartile, RF and Tukey on log R_t")
    d.add_argument("--true-case", choices=["A", "B", "C"], help="variance case for ORACLE")
    d.add_argument("--nearest-fallback", action="store_true",
                   help="use the nearest training value where kernel weights underflow")
    _add_method_constants(d)
    _bandwidth_args(d)
    d.add_argument("--out", help="detection JSON (default stdout)")
    d.add_argument("--chart", help="chart-data CSV")
    d.set_defaults(func=cmd_detect)

    r = sub.add_parser("report", parents=[common], help="render a saved simulation report as a table")
    r.add_argument("input")
    r.add_argument("--format", choices=["text", "csv"], default="text")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"scanguard: error: {exc}", file=sys.stderr)
        return 2
    except (ScanguardError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"scanguard: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
