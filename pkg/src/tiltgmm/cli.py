"""Command-line entry points.

Subcommands
-----------
site-export   fit a site's reduced model and summarize its reference sample
aggregate     run the lead-site GMM on its own data plus received payloads
simulate      Monte Carlo comparison of the four methods
sweep-ref     dist-GMM RMSE against reference sample size
sweep-grid    dist-GMM-C metrics against grid density
report        re-render a metrics CSV (e.g. as markdown)

Exit status is 0 on success, 1 on a usage error (bad flags, unreadable or
malformed input files) and 2 on a numerical failure, in which case the
message names the failing stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import protocol, simulation
from .copula import GridConfig
from .exceptions import PayloadError, TiltGMMError
from .glm import FAMILIES, FitConfig, ModelSpec, ReducedModelSpec
from .gmm import WEIGHT_SCHEMES, GmmConfig

log = logging.getLogger(__name__)

PROG = "tiltgmm"
CONFIG_KEYS = {"settings", "methods", "reps", "seed", "n_study", "n_ref", "m",
               "synthetic_size", "jobs", "format"}


class UsageError(Exception):
    """Bad command line or unusable input file (exit status 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# argument helpers
# --------------------------------------------------------------------------


def _int_list(text):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _name_list(text):
    names = tuple(t.strip() for t in text.split(",") if t.strip())
    if not names:
        raise argparse.ArgumentTypeError("expected at least one name")
    return names


def _bound(text):
    """``NAME=LO:HI`` -> (name, (lo, hi))."""
    try:
        name, rng = text.split("=", 1)
        lo, hi = (float(v) for v in rng.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NAME=LO:HI, got {text!r}")
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"empty support in {text!r}")
    return name.strip(), (lo, hi)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _existing(path):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    return p


def _writable(path):
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    return p


def _read_csv(path):
    try:
        return pd.read_csv(_existing(path), float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}")


def _add_grid_args(p):
    g = p.add_argument_group("density summary")
    g.add_argument("--m", type=_positive_int, default=GridConfig.m,
                   help="grid points per continuous covariate (default %(default)s)")
    g.add_argument("--scheme", choices=("quantile", "equal"), default=GridConfig.scheme)
    g.add_argument("--bounds", type=_bound, action="append", default=[], metavar="NAME=LO:HI",
                   help="declared support of a continuous covariate; repeatable")
    g.add_argument("--discrete", type=_name_list, default=None, metavar="NAMES",
                   help="comma-separated stratifying covariates (default: auto-detect)")
    g.add_argument("--min-stratum-n", type=_positive_int, default=GridConfig.min_stratum_n)


def _grid_config(args):
    return GridConfig(m=args.m, scheme=args.scheme, bounds=dict(args.bounds),
                      discrete=args.discrete, min_stratum_n=args.min_stratum_n)


def _add_model_args(p):
    p.add_argument("--family", choices=FAMILIES, default=FAMILIES[0])
    p.add_argument("--no-intercept", action="store_true")
    p.add_argument("--dispersion", type=float, default=1.0,
                   help="known dispersion for gaussian-linear models")


def _study_mask(study, mask):
    if mask is not None:
        return mask
    return tuple(c for c in study.columns if c != protocol.OUTCOME)


def _check_columns(frame, names, path):
    missing = [n for n in names if n not in frame.columns]
    if missing:
        raise UsageError(f"{path}: missing column(s) {', '.join(missing)}")


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_site_export(args):
    study, ref = _read_csv(args.study), _read_csv(args.ref)
    mask = _study_mask(study, args.mask)
    _check_columns(study, list(mask) + [protocol.OUTCOME], args.study)
    _check_columns(ref, mask, args.ref)
    out = _writable(args.out)
    site_id = args.site_id or out.stem
    spec = ReducedModelSpec(args.family, mask, not args.no_intercept, args.dispersion)
    payload = protocol.site_export(study, ref, spec, site_id, _grid_config(args),
                                   FitConfig(tol=args.tol))
    data = protocol.encode_payload(payload)
    out.write_bytes(data)
    print(f"wrote {out} ({len(data)} bytes, site {site_id})")
    return 0


def _read_payload(path):
    try:
        return protocol.decode_payload(_existing(path).read_bytes())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}")
    except PayloadError as exc:
        raise UsageError(f"invalid payload file {path}: {exc}")


def cmd_aggregate(args):
    study, ref = _read_csv(args.study), _read_csv(args.ref)
    mask = _study_mask(study, args.mask)
    _check_columns(study, list(mask) + [protocol.OUTCOME], args.study)
    covariates = args.covariates or tuple(c for c in ref.columns if c != protocol.OUTCOME)
    _check_columns(ref, covariates, args.ref)
    out = _writable(args.out)
    payloads = [_read_payload(p) for p in args.payload]
    main = ModelSpec(args.family, covariates, not args.no_intercept, args.dispersion)
    lead_spec = ReducedModelSpec(args.family, mask, not args.no_intercept, args.dispersion)
    gmm = GmmConfig(weight_scheme=args.weight_scheme, max_weight_iter=args.max_weight_iter,
                    level=args.level)
    result = protocol.lead_aggregate(study, ref.loc[:, list(covariates)], lead_spec, payloads,
                                     main, gmm, _grid_config(args), FitConfig(tol=args.tol),
                                     tilt=not args.no_tilt, lead_id=args.lead_id)
    out.write_bytes(protocol.encode_result(result))
    ci = result.confidence_intervals()
    print(f"{'parameter':<14}{'estimate':>12}{'se':>12}{'lower':>12}{'upper':>12}")
    for name, b, se, (lo, hi) in zip(result.param_names, result.beta_hat,
                                     result.standard_errors, ci):
        print(f"{name:<14}{b:>12.5f}{se:>12.5f}{lo:>12.5f}{hi:>12.5f}")
    print(f"wrote {out}")
    return 0


def _load_config(path):
    if path is None:
        return {}
    try:
        doc = protocol.canonical_loads(_existing(path).read_bytes())
    except TiltGMMError as exc:
        raise UsageError(f"invalid config file {path}: {exc}")
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(doc) - CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config key(s) in {path}: {', '.join(unknown)}")
    return doc


def _merged(args, doc, key, default):
    """Command-line value, else config-file value, else ``default``."""
    val = getattr(args, key, None)
    if val is not None:
        return val
    return doc.get(key, default)


def _bench_config(m, synthetic_size=None):
    return simulation.BenchConfig(grid=simulation.default_grid_config(m),
                                  synthetic_size=synthetic_size)


def _check_methods(methods):
    bad = [m for m in methods if m not in simulation.METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {', '.join(bad)}; "
                         f"choose from {', '.join(simulation.METHODS)}")
    return tuple(methods)


def _check_settings(settings):
    bad = [s for s in settings if s not in (1, 2, 3, 4)]
    if bad or not settings:
        raise UsageError("settings must be drawn from 1,2,3,4")
    return tuple(int(s) for s in settings)


def cmd_simulate(args):
    doc = _load_config(args.config)
    settings = _check_settings(tuple(_merged(args, doc, "settings", (1, 2, 3, 4))))
    methods = _check_methods(tuple(_merged(args, doc, "methods", simulation.METHODS)))
    reps = int(_merged(args, doc, "reps", 100))
    if reps < 1:
        raise UsageError("reps must be at least 1")
    fmt = _merged(args, doc, "format", "csv")
    if fmt not in ("csv", "markdown"):
        raise UsageError(f"unknown format {fmt!r}")
    out = _writable(args.out)
    records_path = _writable(args.records) if args.records else None
    config = _bench_config(int(_merged(args, doc, "m", 100)), doc.get("synthetic_size"))
    metrics, records = simulation.run_study(
        settings, methods, reps, int(_merged(args, doc, "seed", 7)), config,
        jobs=_merged(args, doc, "jobs", None), n_study=int(_merged(args, doc, "n_study", 1000)),
        n_ref=int(_merged(args, doc, "n_ref", 500)), return_records=True,
    )
    simulation.emit_report(metrics, out, fmt)
    if records_path is not None:
        records.drop(columns="seconds").to_csv(records_path, index=False, lineterminator="\n")
    n_fail = int(metrics.groupby(["setting", "method"])["n_fail"].max().sum())
    print(f"wrote {out} ({len(metrics)} rows, {n_fail} failed method runs)")
    return 0


def cmd_sweep_ref(args):
    settings = _check_settings(args.settings)
    methods = _check_methods(args.methods)
    out = _writable(args.out)
    table = simulation.sweep_reference_size(
        settings, args.n_values, methods, args.reps, args.seed, _bench_config(args.m),
        jobs=args.jobs, n_study=args.n_study, min_stratum_n=args.min_stratum_n,
    )
    out.write_text(table.to_csv(index=False, lineterminator="\n"), encoding="utf-8")
    print(f"wrote {out} ({len(table)} rows)")
    return 0


def cmd_sweep_grid(args):
    settings = _check_settings(args.settings)
    out = _writable(args.out)
    table = simulation.sweep_grid_density(settings, args.m_values, args.reps, args.seed,
                                          jobs=args.jobs, n_study=args.n_study,
                                          n_ref=args.n_ref)
    simulation.emit_report(table, out, args.format)
    print(f"wrote {out} ({len(table)} rows)")
    return 0


def cmd_report(args):
    metrics = simulation.read_metrics(_existing(args.input))
    missing = [c for c in ("setting", "coefficient", "bias", "sd", "esd", "ci")
               if c not in metrics.columns]
    if missing:
        raise UsageError(f"{args.input}: not a metrics table (missing {', '.join(missing)})")
    text = simulation.emit_report(metrics, _writable(args.out) if args.out else None, args.format)
    if not args.out:
        sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog=PROG, description="Density-ratio-tilted GMM for distributed regression.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("site-export", help="write a site payload (.fmpay)")
    p.add_argument("--study", required=True, help="CSV with the observed covariates and y")
    p.add_argument("--ref", required=True, help="CSV reference sample of all covariates")
    p.add_argument("--mask", type=_name_list, default=None,
                   help="observed covariates (default: study columns except y)")
    p.add_argument("--site-id", default=None, help="default: output file stem")
    p.add_argument("--out", required=True)
    p.add_argument("--tol", type=float, default=FitConfig.tol)
    _add_model_args(p)
    _add_grid_args(p)
    p.set_defaults(func=cmd_site_export)

    p = sub.add_parser("aggregate", help="combine payloads at the lead site (.fmres)")
    p.add_argument("--study", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--payload", action="append", default=[], metavar="FILE",
                   help="site payload; repeatable")
    p.add_argument("--mask", type=_name_list, default=None,
                   help="lead-site observed covariates (default: study columns except y)")
    p.add_argument("--covariates", type=_name_list, default=None,
                   help="full-model covariates in order (default: reference columns)")
    p.add_argument("--lead-id", default="site1")
    p.add_argument("--out", required=True)
    p.add_argument("--no-tilt", action="store_true",
                   help="disable density-ratio tilting (homogeneous baseline)")
    p.add_argument("--weight-scheme", choices=WEIGHT_SCHEMES, default=GmmConfig.weight_scheme)
    p.add_argument("--max-weight-iter", type=_positive_int, default=GmmConfig.max_weight_iter)
    p.add_argument("--level", type=float, default=GmmConfig.level)
    p.add_argument("--tol", type=float, default=FitConfig.tol)
    _add_model_args(p)
    _add_grid_args(p)
    p.set_defaults(func=cmd_aggregate)

    # None defaults let a --config file fill the gaps
    p = sub.add_parser("simulate", help="Monte Carlo method comparison")
    p.add_argument("--settings", type=_int_list, default=None)
    p.add_argument("--methods", type=_name_list, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-study", dest="n_study", type=_positive_int, default=None)
    p.add_argument("--n-ref", dest="n_ref", type=_positive_int, default=None)
    p.add_argument("--m", type=_positive_int, default=None)
    p.add_argument("--jobs", type=_positive_int, default=None,
                   help="parallel workers (default: $TILTGMM_JOBS or 1)")
    p.add_argument("--format", choices=("csv", "markdown"), default=None)
    p.add_argument("--config", default=None, help="JSON file with any of the options above")
    p.add_argument("--records", default=None, help="also write per-replicate records (CSV)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep-ref", help="RMSE against reference sample size")
    p.add_argument("--settings", type=_int_list, default=(1, 2, 3, 4))
    p.add_argument("--n-values", type=_int_list, default=(50, 100, 200, 300, 400, 500, 1000))
    p.add_argument("--methods", type=_name_list, default=("dist-GMM-C", "dist-GMM-S"))
    p.add_argument("--reps", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-study", type=_positive_int, default=1000)
    p.add_argument("--m", type=_positive_int, default=100)
    p.add_argument("--min-stratum-n", type=_positive_int, default=5)
    p.add_argument("--jobs", type=_positive_int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_ref)

    p = sub.add_parser("sweep-grid", help="dist-GMM-C metrics against grid density")
    p.add_argument("--settings", type=_int_list, default=(1, 2, 3, 4))
    p.add_argument("--m-values", type=_int_list, default=(50, 100, 200))
    p.add_argument("--reps", type=_positive_int, default=100)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n-study", type=_positive_int, default=1000)
    p.add_argument("--n-ref", type=_positive_int, default=500)
    p.add_argument("--jobs", type=_positive_int, default=None)
    p.add_argument("--format", choices=("csv", "markdown"), default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_grid)

    p = sub.add_parser("report", help="render a metrics CSV")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    p.add_argument("--out", default=None, help="default: standard output")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    """Run the command line; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except TiltGMMError as exc:
        print(f"{PROG}: {exc.stage} failed: {exc}", file=sys.stderr)
        return 2
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"{PROG}: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
