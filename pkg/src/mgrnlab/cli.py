"""``mgrnlab`` command line: simulate, oracle, params, train, evaluate, compare.

Failures exit nonzero after one stderr line ``error[<category>]: <message>``.
Categories and exit codes: usage 2, config 3, data 4, io 5, numeric 6, plan 7.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench
from .oracle import OracleDomainError, min_mse, predictions_csv, test_rows
from .params import DimPlan, ModelSpec, atomic_write_text, count_params, grouping_from_token, GROUPING_TOKENS
from .simgen import SimPath, SimulationOverflow, UnknownTicker, generate_path
from .training import (Checkpoint, EmptySplit, TrainConfig, TrainingDiverged, evaluate, history_csv,
                       make_windows, split, train)

EXIT = {"usage": 2, "config": 3, "data": 4, "io": 5, "numeric": 6, "plan": 7}
ARCHS = ("gru", "lstm", "mgrn", "cwlstm")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def _pair(text: str) -> tuple[str, str]:
    parts = tuple(p.strip() for p in text.replace(":", ",").split(","))
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two tickers like IBM,KO, got {text!r}")
    return parts


def _grouping(text: str) -> str:
    if text not in GROUPING_TOKENS:
        raise argparse.ArgumentTypeError(f"invalid grouping {text!r}; valid tokens: {', '.join(GROUPING_TOKENS)}")
    return text


def _add_model_args(p):
    p.add_argument("--arch", required=True, choices=ARCHS)
    p.add_argument("--grouping", type=_grouping, help="two-groups | total-split (mgrn, cwlstm)")
    p.add_argument("--lam", type=int, help="joint-to-marginal dimension ratio (mgrn, cwlstm)")
    p.add_argument("--marginal-dim", type=int, help="marginal dimension per group (mgrn, cwlstm)")
    p.add_argument("--hidden", type=int, help="hidden size (gru, lstm)")
    p.add_argument("--inputs", type=int, default=16, help="input width (default 16)")


def _model_spec(args, lookback: int = 5) -> ModelSpec:
    if args.arch in ("gru", "lstm"):
        if args.hidden is None:
            raise CliError("usage", f"--hidden is required for {args.arch}")
        return getattr(ModelSpec, args.arch)(args.inputs, args.hidden, lookback=lookback)
    missing = [f"--{n.replace('_', '-')}" for n in ("grouping", "lam", "marginal_dim") if getattr(args, n) is None]
    if missing:
        raise CliError("usage", f"{args.arch} needs {', '.join(missing)}")
    grouping = grouping_from_token(args.grouping, args.inputs)
    return getattr(ModelSpec, args.arch)(grouping, DimPlan(args.marginal_dim, args.lam), lookback=lookback)


def _load_path(path) -> SimPath:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError("io", f"cannot read {path}: {exc.strerror}") from None
    try:
        return SimPath.from_csv(text)
    except ValueError as exc:
        raise CliError("data", f"{path}: {exc}") from None


def _load_config(path, **overrides) -> TrainConfig:
    if path is None:
        return TrainConfig(**overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError("io", f"cannot read {path}: {exc.strerror}") from None
    try:
        return TrainConfig.from_text(text, **overrides)
    except (ValueError, TypeError) as exc:
        raise CliError("config", f"{path}: {exc}") from None


def _dataset(path: SimPath, lookback: int):
    try:
        return split(make_windows(path, lookback))
    except ValueError as exc:
        raise CliError("data", str(exc)) from None


# --------------------------------------------------------------------------- commands

def cmd_simulate(args):
    path = generate_path(args.pair, args.steps, args.seed, args.burn_in)
    path.save(args.out)
    print(f"wrote {args.out}: {len(path)} rows, {path.data.shape[1] + 1} columns")


def cmd_oracle(args):
    path = _load_path(args.data)
    rows = test_rows(path, args.lookback)
    if rows.size == 0:
        raise CliError("data", f"{args.data}: path too short for a test segment")
    print(f"min_mse {min_mse(path, rows):.10g} over {rows.size} test rows")
    if args.predictions:
        atomic_write_text(args.predictions, predictions_csv(path, None if args.all_rows else rows))


def cmd_params(args):
    print(count_params(_model_spec(args)))


def cmd_train(args):
    cfg = _load_config(args.config)
    spec = _model_spec(args, cfg.lookback)
    ds = _dataset(_load_path(args.data), cfg.lookback)
    ckpt, hist = train(spec, ds, cfg)
    ckpt.save(args.out)
    hist_path = args.history or str(args.out) + ".history.csv"
    atomic_write_text(hist_path, history_csv(hist))
    print(f"selected epoch {ckpt.epoch} of {len(hist)}; val_mse {ckpt.val_mse:.10g}; "
          f"checkpoint {args.out}; history {hist_path}")


def cmd_evaluate(args):
    try:
        ckpt = Checkpoint.load(args.checkpoint)
    except OSError as exc:
        raise CliError("io", f"cannot read {args.checkpoint}: {exc.strerror}") from None
    except ValueError as exc:
        raise CliError("data", f"{args.checkpoint}: {exc}") from None
    ds = _dataset(_load_path(args.data), ckpt.spec.lookback)
    print(f"{args.split}_mse {evaluate(ckpt, ds, args.split):.10g}")


def cmd_compare(args):
    plan = bench.ExperimentPlan()
    if args.plan:
        try:
            plan = bench.ExperimentPlan.from_text(Path(args.plan).read_text())
        except OSError as exc:
            raise CliError("io", f"cannot read {args.plan}: {exc.strerror}") from None
    if args.full:
        plan = plan.full()
    if args.out_dir:
        plan = bench.replace(plan, out_dir=args.out_dir)
    report = bench.compare(plan, log=lambda m: print(m, file=sys.stderr))
    sys.stdout.write(report.to_text())
    print(f"report: {Path(plan.out_dir) / 'report.csv'}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mgrnlab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a benchmark path as CSV")
    p.add_argument("--pair", type=_pair, required=True, help="ticker pair, e.g. IBM,KO")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="theoretical minimum MSE on the test segment")
    p.add_argument("data")
    p.add_argument("--lookback", type=int, default=5)
    p.add_argument("--predictions", help="write per-row oracle predictions to this CSV")
    p.add_argument("--all-rows", action="store_true", help="predict every row, not only the test segment")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("params", help="trainable parameter count (output layer excluded)")
    _add_model_args(p)
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("train", help="train one model on a path CSV")
    _add_model_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="key=value file: " + ", ".join(TrainConfig.KEYS))
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="history CSV (default: <out>.history.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="MSE of a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="run the model grid and write the comparison report",
                       description=f"Worker count: plan key 'workers' or ${bench.WORKERS_ENV}.")
    p.add_argument("--plan", help="key=value plan file (default: desk-scale plan)")
    p.add_argument("--full", action="store_true", help="all 10 pairs at 100,000 steps")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_compare)
    return ap


def _categorize(exc: Exception) -> tuple[str, str]:
    if isinstance(exc, CliError):
        return exc.category, str(exc)
    if isinstance(exc, bench.PlanError):
        return "plan", str(exc)
    if isinstance(exc, (TrainingDiverged, SimulationOverflow, OracleDomainError)):
        return "numeric", str(exc)
    if isinstance(exc, UnknownTicker):
        return "data", str(exc)
    if isinstance(exc, (EmptySplit, ValueError)):
        return "data", str(exc)
    if isinstance(exc, OSError):
        return "io", f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": ")
    raise exc


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with np.errstate(over="ignore"):
            args.func(args)
        return 0
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        category, msg = _categorize(exc)
        print(f"error[{category}]: {msg}", file=sys.stderr)
        return EXIT[category]


if __name__ == "__main__":
    sys.exit(main())
