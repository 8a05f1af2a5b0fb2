"""Command-line entry point.

Exit codes: 0 success, 1 runtime or data error, 2 usage error. Every command
writes a JSON manifest next to its output (``<out>.manifest.json``);
``coolish rerun <manifest>`` replays the recorded invocation.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .errors import CoolishError
from .genomics import (
    evaluate_imputation,
    prepare_pair,
    read_expression_csv,
    select_panel_kmeans,
    synthetic_pair,
    write_expression_csv,
)
from .ols import Dataset, fit_ols
from .shrinkage import DEFAULT_M, RULES, predict
from .simulation import ScenarioConfig, Structure, replication_rng, run_scenario

logger = logging.getLogger("coolish")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def default_threads() -> int:
    env = os.environ.get("COOLISH_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"COOLISH_THREADS must be an integer, got {env!r}")
    return os.cpu_count() or 1


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, command: str, argv, config: dict, seed, started: str):
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": _now(),
        "output": str(out),
    }
    path = out.with_name(out.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------


def cmd_simulate(args, argv) -> int:
    started = _now()
    if not 0.0 <= args.rho < 1.0:
        raise UsageError(f"--rho must lie in [0, 1), got {args.rho}")
    if args.p < 1:
        raise UsageError(f"--p must be >= 1, got {args.p}")
    if args.n_train <= args.p:
        raise UsageError(f"--n-train must exceed --p ({args.n_train} <= {args.p})")
    if args.q <= args.p + 1:
        raise UsageError(f"--q must exceed --p + 1 ({args.q} <= {args.p + 1})")
    if args.reps < 1 or args.n_test < 1:
        raise UsageError("--reps and --n-test must be positive")
    if not args.M > 0:
        raise UsageError(f"--M must be positive, got {args.M}")
    if args.structure == "group" and args.p < 5:
        raise UsageError("--structure group needs --p >= 5")
    cfg = ScenarioConfig(
        n_train=args.n_train,
        n_test=args.n_test,
        p=args.p,
        q=args.q,
        rho=args.rho,
        structure=Structure(args.structure),
        n_replications=args.reps,
        M=args.M,
        seed=args.seed,
    )
    report = run_scenario(cfg, threads=args.threads)
    out = Path(args.out)
    _write_text(out, report.to_csv())
    write_manifest(out, "simulate", argv, cfg.to_dict(), args.seed, started)
    for method, loss in report.per_method_mean_loss.items():
        logger.info("%-22s mean loss %.6g", method, loss)
    return 0


# --------------------------------------------------------------------------
# fit-predict
# --------------------------------------------------------------------------


def read_matrix(path, name: str):
    """Numeric CSV with an optional header row; returns ``(values, header)``."""
    try:
        frame = pd.read_csv(path, header=None, dtype=str, compression="infer")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"{name} ({path}): cannot read CSV: {exc}") from exc
    header = None
    try:
        frame.iloc[0].astype(np.float64)
    except ValueError:
        header = [str(h).strip() for h in frame.iloc[0]]
        frame = frame.iloc[1:]
    try:
        values = frame.astype(np.float64).to_numpy()
    except ValueError as exc:
        raise DataError(f"{name} ({path}): non-numeric entry: {exc}") from exc
    if values.size == 0 or not np.all(np.isfinite(values)):
        raise DataError(f"{name} ({path}): empty matrix or non-finite entries")
    return values, header


def matrix_to_csv(values, header) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in values:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def cmd_fit_predict(args, argv) -> int:
    started = _now()
    if not args.M > 0:
        raise UsageError(f"--M must be positive, got {args.M}")
    X, _ = read_matrix(args.train_x, "train-x")
    Y, y_header = read_matrix(args.train_y, "train-y")
    X0, _ = read_matrix(args.test_x, "test-x")
    if X.shape[0] != Y.shape[0]:
        raise DataError(f"train-x has {X.shape[0]} rows but train-y has {Y.shape[0]}")
    if X0.shape[1] != X.shape[1]:
        raise DataError(f"test-x has {X0.shape[1]} columns but train-x has {X.shape[1]}")
    try:
        fit = fit_ols(Dataset(X, Y))
    except CoolishError as exc:
        raise DataError(f"train-x: {exc}") from exc
    try:
        pred = predict(fit, X0, rule=args.rule, M=args.M, threads=args.threads)
    except CoolishError as exc:
        raise DataError(f"rule {args.rule}: {exc}") from exc
    header = y_header or [f"y{k}" for k in range(Y.shape[1])]
    out = Path(args.out)
    _write_text(out, matrix_to_csv(pred, header))
    config = {"rule": args.rule, "M": args.M, "train_x": args.train_x,
              "train_y": args.train_y, "test_x": args.test_x}
    write_manifest(out, "fit-predict", argv, config, None, started)
    return 0


# --------------------------------------------------------------------------
# panel / impute
# --------------------------------------------------------------------------


def _load_pair(args):
    try:
        a = read_expression_csv(args.train)
        b = read_expression_csv(args.test)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    if args.swap:
        a, b = b, a
    try:
        train, test = prepare_pair(a, b, args.min_cells)
    except CoolishError as exc:
        raise DataError(str(exc)) from exc
    for K in args.k:
        if not 1 <= K < train.n_genes:
            raise UsageError(
                f"--k {K} must be >= 1 and below the number of filtered genes ({train.n_genes})"
            )
    return train, test


def _panel_config(args) -> dict:
    return {"train": args.train, "test": args.test, "k": list(args.k),
            "min_cells": args.min_cells, "swap": args.swap}


def _check_panel_args(args):
    if args.min_cells < 0:
        raise UsageError(f"--min-cells must be non-negative, got {args.min_cells}")


def cmd_panel(args, argv) -> int:
    started = _now()
    _check_panel_args(args)
    train, _ = _load_pair(args)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["K", "cluster", "gene_index", "gene_id", "cluster_size"])
    for K in args.k:
        panel = select_panel_kmeans(train, K, replication_rng(args.seed, K))
        sizes = np.bincount(panel.assignments, minlength=K)
        for c, g in enumerate(panel.panel_indices):
            writer.writerow([K, c, int(g), train.gene_ids[g], int(sizes[c])])
    out = Path(args.out)
    _write_text(out, buf.getvalue())
    write_manifest(out, "panel", argv, _panel_config(args), args.seed, started)
    return 0


def cmd_impute(args, argv) -> int:
    started = _now()
    _check_panel_args(args)
    if not args.M > 0:
        raise UsageError(f"--M must be positive, got {args.M}")
    train, test = _load_pair(args)
    rules = args.rules or list(RULES)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["rule", "K", "mse", "seconds"])
    for K in args.k:
        panel = select_panel_kmeans(train, K, replication_rng(args.seed, K))
        results = evaluate_imputation(
            train, test, panel, rules=rules, M=args.M,
            intercept=not args.no_intercept, threads=args.threads,
        )
        for r in results:
            if r.error:
                logger.warning("K=%d rule %s failed: %s", K, r.rule, r.error)
            writer.writerow([r.rule, r.K, repr(r.mse), f"{r.seconds:.6f}"])
    out = Path(args.out)
    _write_text(out, buf.getvalue())
    config = _panel_config(args) | {"rules": rules, "M": args.M, "intercept": not args.no_intercept}
    write_manifest(out, "impute", argv, config, args.seed, started)
    return 0


def cmd_make_fixture(args, argv) -> int:
    if args.genes < 2:
        raise UsageError("--genes must be at least 2")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    a, b = synthetic_pair(n_genes=args.genes, n_cells=(args.cells_train, args.cells_test), seed=args.seed)
    suffix = ".csv.gz" if args.gzip else ".csv"
    write_expression_csv(a, out_dir / f"train{suffix}")
    write_expression_csv(b, out_dir / f"test{suffix}")
    return 0


def cmd_rerun(args, argv) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
        recorded = manifest["argv"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read manifest {args.manifest}: {exc}") from exc
    return main(recorded)


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coolish",
        description="Coordinate-wise optimal linear shrinkage for multivariate regression.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def threads(p):
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: $COOLISH_THREADS or all cores)")

    sim = sub.add_parser("simulate", help="run one simulation scenario")
    sim.add_argument("--p", type=int, default=10)
    sim.add_argument("--q", type=int, default=1000)
    sim.add_argument("--rho", type=float, default=0.0)
    sim.add_argument("--structure", choices=[s.value for s in Structure], default="dense")
    sim.add_argument("--reps", type=int, default=100)
    sim.add_argument("--n-train", type=int, default=100)
    sim.add_argument("--n-test", type=int, default=50)
    sim.add_argument("--M", type=float, default=DEFAULT_M)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    threads(sim)
    sim.set_defaults(func=cmd_simulate)

    fp = sub.add_parser("fit-predict", help="fit on training CSVs and predict test rows")
    fp.add_argument("--train-x", required=True)
    fp.add_argument("--train-y", required=True)
    fp.add_argument("--test-x", required=True)
    fp.add_argument("--rule", choices=RULES, default="constrained")
    fp.add_argument("--M", type=float, default=DEFAULT_M)
    fp.add_argument("--seed", type=int, default=0, help="accepted for uniformity; unused")
    fp.add_argument("--out", required=True)
    threads(fp)
    fp.set_defaults(func=cmd_fit_predict)

    for name, func, help_ in (
        ("panel", cmd_panel, "select K-means gene panels"),
        ("impute", cmd_impute, "evaluate panel-based imputation"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--train", required=True, help="cells x genes raw-count CSV")
        sp.add_argument("--test", required=True, help="cells x genes raw-count CSV")
        sp.add_argument("--k", type=int, action="append", required=True,
                        help="panel size; repeat for several")
        sp.add_argument("--min-cells", type=int, default=300)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--swap", action="store_true", help="exchange the roles of --train and --test")
        sp.add_argument("--out", required=True)
        threads(sp)
        if name == "impute":
            sp.add_argument("--rules", choices=RULES, nargs="+")
            sp.add_argument("--M", type=float, default=DEFAULT_M)
            sp.add_argument("--no-intercept", action="store_true")
        sp.set_defaults(func=func)

    fx = sub.add_parser("make-fixture", help="write a synthetic train/test count pair")
    fx.add_argument("--out-dir", required=True)
    fx.add_argument("--genes", type=int, default=400)
    fx.add_argument("--cells-train", type=int, default=500)
    fx.add_argument("--cells-test", type=int, default=550)
    fx.add_argument("--seed", type=int, default=0)
    fx.add_argument("--gzip", action="store_true")
    fx.set_defaults(func=cmd_make_fixture)

    rr = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    rr.add_argument("manifest")
    rr.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if getattr(args, "threads", 1) is None:
            args.threads = default_threads()
        elif getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args, argv)
    except UsageError as exc:
        print(f"coolish {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CoolishError, OSError) as exc:
        print(f"coolish {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
