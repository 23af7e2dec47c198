"""Command-line interface.

Exit codes: 0 success (rejections are data, not errors), 2 input/output or
parse failure, 3 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .pvalues import (
    batch_conformal_pvalue,
    multi_quantile_pvalue,
    permutation_pvalue,
    ranksum_pvalue,
    subsampling_pvalue,
    ztest_pvalue,
)
from .scores import (
    KINDS as SCORE_KINDS,
    REFERENCE,
    SampleGroup,
    apply_scores,
    control_arm_specs,
    fit_score,
)
from .simulate import ScenarioError, bundled_scenarios, load_scenario, run_monte_carlo
from .testing import QuantileRule, batch_pvalues, bh_procedure

SEED_ENV = "BATCHCONF_SEED"

EXIT_IO = 2
EXIT_CONFIG = 3


class InputError(Exception):
    """Unreadable or malformed input file."""


class ConfigError(Exception):
    """Invalid combination of options."""


def _default_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# --- CSV ingestion -------------------------------------------------------------

def read_table(path):
    """Read a headed CSV into a header list and a list of (line number, row dict)."""
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise InputError(f"{path}: empty file (a header row is required)") from None
            header = [h.strip() for h in header]
            rows = []
            for row in reader:
                if not row:
                    continue
                if len(row) != len(header):
                    raise InputError(
                        f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}"
                    )
                rows.append((reader.line_num, dict(zip(header, (c.strip() for c in row)))))
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror or exc}") from None
    return header, rows


def _number(path, line, column, text):
    if text == "":
        raise InputError(f"{path}:{line}: missing value in column {column!r}")
    try:
        value = float(text)
    except ValueError:
        raise InputError(f"{path}:{line}: column {column!r}: cannot parse {text!r} as a number") from None
    if not np.isfinite(value):
        raise InputError(f"{path}:{line}: column {column!r}: non-finite value {text!r}")
    return value


def _matrix(path, rows, columns):
    return np.array([[_number(path, line, c, row[c]) for c in columns] for line, row in rows],
                    dtype=float).reshape(len(rows), len(columns))


def _check_columns(path, header, columns):
    missing = [c for c in columns if c not in header]
    if missing:
        raise InputError(f"{path}: missing column(s) {missing}; header is {header}")


def build_group(gid, path, rows, header, outcome_cols, feature_cols, arm_col, control_value):
    needed = list(outcome_cols) + list(feature_cols) + ([arm_col] if arm_col else [])
    _check_columns(path, header, needed)
    control = None
    if arm_col:
        is_control = [row[arm_col] == control_value for _, row in rows]
        ctrl_rows = [r for r, c in zip(rows, is_control) if c]
        rows = [r for r, c in zip(rows, is_control) if not c]
        control = _matrix(path, ctrl_rows, outcome_cols[:1]).ravel()
    if not rows:
        raise InputError(f"{path}: group {gid!r} has no rows")
    y = _matrix(path, rows, outcome_cols)
    x = _matrix(path, rows, feature_cols) if feature_cols else None
    return SampleGroup(gid, y, x, control)


def load_groups(args):
    """Reference and comparison groups from per-file or long-format input."""
    outcomes = args.outcome
    features = args.features or []
    arm = args.arm_column
    ctrl = args.control_value
    if args.long:
        if not args.group_column or args.reference_group is None:
            raise ConfigError("--long needs --group-column and --reference-group")
        header, rows = read_table(args.long)
        _check_columns(args.long, header, [args.group_column])
        by_group: dict = {}
        for line, row in rows:
            by_group.setdefault(row[args.group_column], []).append((line, row))
        if args.reference_group not in by_group:
            raise InputError(f"{args.long}: reference group {args.reference_group!r} not found")
        reference = build_group(args.reference_group, args.long, by_group.pop(args.reference_group),
                                header, outcomes, features, arm, ctrl)
        groups = [build_group(g, args.long, r, header, outcomes, features, arm, ctrl)
                  for g, r in sorted(by_group.items())]
    else:
        if not args.reference or not args.groups:
            raise ConfigError("give --reference and --groups, or --long")
        header, rows = read_table(args.reference)
        reference = build_group("reference", args.reference, rows, header,
                                outcomes, features, arm, ctrl)
        groups = []
        for path in args.groups:
            header, rows = read_table(path)
            groups.append(build_group(Path(path).stem, path, rows, header,
                                      outcomes, features, arm, ctrl))
        ids = [g.id for g in groups]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"group files must have distinct names, got {ids}")
    if not groups:
        raise InputError("no comparison groups found")
    return reference, groups


# --- commands --------------------------------------------------------------------

def _quantile_rule(args):
    if args.eta is not None and args.q is not None:
        raise ConfigError("give either --eta or --q, not both")
    if args.eta is not None:
        if args.eta < 1:
            raise ConfigError("--eta must be a positive integer")
        return QuantileRule("rank", args.eta)
    q = 0.5 if args.q is None else args.q
    if not 0 < q <= 1:
        raise ConfigError("--q must lie in (0, 1]")
    return QuantileRule("q-ceil" if args.rounding == "ceil" else "q-floor", q)


def cmd_detect(args) -> int:
    if not 0 < args.alpha < 1:
        raise ConfigError("--alpha must lie in (0, 1)")
    if not 0 < args.train_fraction < 1:
        raise ConfigError("--train-fraction must lie in (0, 1)")
    seed = args.seed if args.seed is not None else _default_seed()
    rule = _quantile_rule(args)
    reference, groups = load_groups(args)

    config = {
        "reference": args.reference, "groups": args.groups, "long": args.long,
        "group_column": args.group_column, "reference_group": args.reference_group,
        "outcome": args.outcome, "features": args.features, "arm_column": args.arm_column,
        "score": args.score, "train_fraction": args.train_fraction, "seed": seed,
        "quantile_rule": {"rule": rule.rule, "value": rule.value},
        "alpha": args.alpha, "tie_policy": args.tie_policy,
    }

    if args.score == "empirical-cdf":
        if not args.arm_column:
            raise ConfigError("--score empirical-cdf needs --arm-column")
        spec = control_arm_specs(reference, groups)
        inference_ref = reference
    elif args.score in ("identity", "negated-identity"):
        spec = fit_score(args.score)
        inference_ref = reference
    else:
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(reference))
        n_train = int(np.floor(args.train_fraction * len(reference)))
        if n_train < 1 or n_train >= len(reference):
            raise ConfigError("--train-fraction leaves an empty training or reference split")
        train = reference.subset(np.sort(perm[:n_train]))
        inference_ref = reference.subset(np.sort(perm[n_train:]))
        config["n_train"] = n_train
        spec = fit_score(args.score, train, k=args.knn_k)

    scores = apply_scores(spec, inference_ref, groups, tie_policy=args.tie_policy, seed=seed)
    records = batch_pvalues(scores, rule, workers=args.workers)
    outcome = bh_procedure([r.p for r in records], args.alpha, [r.group_id for r in records])
    sizes = {g.id: len(g) for g in groups}
    report = {
        "version": __version__,
        "config": config,
        "n_reference": int(scores.reference.size),
        "pvalues": [{**r.to_dict(), "n": sizes[r.group_id]} for r in records],
        "bh": outcome.to_dict(),
    }
    _emit(json.dumps(report, indent=2, sort_keys=False) + "\n", args.output)
    return 0


def _emit(text, output):
    if output in (None, "-"):
        sys.stdout.write(text)
    else:
        try:
            Path(output).write_text(text)
        except OSError as exc:
            raise InputError(f"{output}: {exc.strerror or exc}") from None


def cmd_simulate(args) -> int:
    if args.list:
        sys.stdout.write("\n".join(bundled_scenarios()) + "\n")
        return 0
    if not args.scenario:
        raise ConfigError("simulate needs a scenario path or bundled name")
    try:
        scenario = load_scenario(args.scenario)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from None
    changes = {}
    if args.replicates is not None:
        changes["replicates"] = args.replicates
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        try:
            scenario = scenario.replace(**changes)
        except ScenarioError as exc:
            raise ConfigError(str(exc)) from None
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    result = run_monte_carlo(scenario, workers=args.workers)
    if scenario.replicates == 1:
        warnings.warn("only one replicate: standard errors are reported as 0")
    _emit(result.to_csv(), args.output)
    return 0


_PVALUE_FLAGS = {
    "batch": {"eta", "q", "rounding", "seed"},
    "multiquantile": {"eta", "eta2", "seed"},
    "subsample": {"seed"},
    "permutation": {"L", "seed", "statistic", "tau"},
    "ranksum": {"mode"},
    "ztest": {"sigma"},
}


def _read_values(path, column):
    header, rows = read_table(path)
    col = column or header[0]
    _check_columns(path, header, [col])
    return _matrix(path, rows, [col]).ravel()


def cmd_pvalue(args) -> int:
    given = {f for f in ("eta", "eta2", "q", "seed", "L", "statistic", "tau", "mode", "sigma")
             if getattr(args, f) is not None}
    if args.rounding != "ceil":
        given.add("rounding")
    extra = given - _PVALUE_FLAGS[args.method]
    if extra:
        flags = ", ".join("--" + f.replace("_", "-") for f in sorted(extra))
        raise ConfigError(f"{flags} not valid for method {args.method!r}")
    ref = _read_values(args.ref_path, args.column)
    cmp = _read_values(args.cmp_path, args.column)
    seed = args.seed if args.seed is not None else _default_seed()

    if args.method in ("batch", "multiquantile"):
        ref_g, cmp_g = SampleGroup(REFERENCE, ref), SampleGroup("comparison", cmp)
        scores = apply_scores(fit_score("identity"), ref_g, [cmp_g], tie_policy="noise", seed=seed)
        ref, cmp = scores.reference, scores.groups["comparison"]
    try:
        if args.method == "batch":
            if args.eta is not None and args.eta > cmp.size:
                raise ConfigError(f"--eta {args.eta} exceeds the comparison size {cmp.size}")
            eta = _quantile_rule(args).eta(cmp.size)
            rec = batch_conformal_pvalue(ref, cmp, eta)
        elif args.method == "multiquantile":
            if args.eta is None or args.eta2 is None:
                raise ConfigError("multiquantile needs --eta and --eta2")
            rec = multi_quantile_pvalue(ref, cmp, args.eta, args.eta2)
        elif args.method == "subsample":
            rec = subsampling_pvalue(ref, cmp, seed)
        elif args.method == "permutation":
            rec = permutation_pvalue(np.concatenate([ref, cmp]), ref.size,
                                     args.statistic or "mean-diff", args.L or 1000, seed,
                                     tau=0.5 if args.tau is None else args.tau)
        elif args.method == "ranksum":
            rec = ranksum_pvalue(ref, cmp, args.mode or "exact")
        else:
            rec = ztest_pvalue(ref, cmp, args.sigma)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    sys.stdout.write(json.dumps(rec.to_dict()) + "\n")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="batchconf",
        description="Detect groups whose distribution differs from a reference, with FDR control.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    d = sub.add_parser("detect", help="run batch conformal detection on CSV data")
    src = d.add_argument_group("input")
    src.add_argument("--reference", help="reference CSV (one file per group mode)")
    src.add_argument("--groups", nargs="+", help="comparison CSVs; group id is the file stem")
    src.add_argument("--long", help="long-format CSV holding all groups")
    src.add_argument("--group-column", help="group column of the long-format CSV")
    src.add_argument("--reference-group", help="value of the group column marking the reference")
    src.add_argument("--outcome", nargs="+", default=["value"], help="outcome column(s)")
    src.add_argument("--features", nargs="+", help="feature columns for fitted scores")
    src.add_argument("--arm-column", help="treatment-arm column; control rows build empirical CDFs")
    src.add_argument("--control-value", default="0", help="arm value marking control rows")
    d.add_argument("--score", choices=SCORE_KINDS, default="identity")
    d.add_argument("--train-fraction", type=float, default=0.5,
                   help="share of reference rows used to fit the score")
    d.add_argument("--knn-k", type=int, default=10)
    d.add_argument("--eta", type=int, help="fixed comparison rank")
    d.add_argument("--q", type=float, help="quantile level for the comparison rank (default 0.5)")
    d.add_argument("--rounding", choices=("ceil", "floor"), default="ceil")
    d.add_argument("--alpha", type=float, default=0.1)
    d.add_argument("--tie-policy", choices=("noise", "uniform", "none"), default="noise")
    d.add_argument("--seed", type=int, help=f"random seed (default ${SEED_ENV} or 0)")
    d.add_argument("--workers", type=int, default=1)
    d.add_argument("--output", "-o", help="report path (default stdout)")
    d.set_defaults(func=cmd_detect)

    s = sub.add_parser("simulate", help="run a Monte Carlo scenario and write a CSV table")
    s.add_argument("scenario", nargs="?", help="scenario JSON path or bundled scenario name")
    s.add_argument("--output", "-o", help="CSV path (default stdout)")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--replicates", type=int, help="override the replicate count")
    s.add_argument("--seed", type=int, help="override the master seed")
    s.add_argument("--list", action="store_true", help="list bundled scenarios")
    s.set_defaults(func=cmd_simulate)

    p = sub.add_parser("pvalue", help="compute a single two-sample p-value")
    p.add_argument("method", choices=sorted(_PVALUE_FLAGS))
    p.add_argument("ref_path")
    p.add_argument("cmp_path")
    p.add_argument("--column", help="value column (default: first column)")
    p.add_argument("--eta", type=int)
    p.add_argument("--eta2", type=int)
    p.add_argument("--q", type=float)
    p.add_argument("--rounding", choices=("ceil", "floor"), default="ceil")
    p.add_argument("--seed", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--statistic", choices=("mean-diff", "quantile-diff"))
    p.add_argument("--tau", type=float)
    p.add_argument("--mode", choices=("exact", "normal"))
    p.add_argument("--sigma", type=float)
    p.set_defaults(func=cmd_pvalue)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse reports usage errors with status 2; those are configuration errors here
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except InputError as exc:
        print(f"batchconf: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ScenarioError) as exc:
        print(f"batchconf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, np.linalg.LinAlgError) as exc:
        print(f"batchconf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
