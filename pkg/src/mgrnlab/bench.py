"""Experiment grid: model rows, plans, cell runs and the comparison report.

A *cell* is one training run ``(pair, master seed, model row, lr)``. For every
pair, seed and model family the cell with the lowest validation MSE (over the
family's lambda values and the learning-rate grid) supplies the test MSE.
Family scores average those test MSEs over pairs and seeds; the relative
difference is ``(family MSE - oracle MSE) / oracle MSE`` on the same averages.

Cell results are cached as JSON under ``<out_dir>/cells`` keyed by a hash of
everything that determines them, so an interrupted comparison resumes.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .oracle import min_mse
from .params import DimPlan, ModelSpec, atomic_write_text, count_params, grouping_from_token
from .simgen import BENCHMARK_PAIRS, DEFAULT_BURN_IN, generate_path
from .training import LR_GRID, TrainConfig, evaluate, history_csv, make_windows, split, train
from .tensor import derive_seed

WORKERS_ENV = "MGRNLAB_WORKERS"
DESK_PAIRS = BENCHMARK_PAIRS[:3]
DESK_STEPS = 20_000
FULL_STEPS = 100_000
ORACLE_LABEL = "Theoretical minimum"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class ModelRow:
    """One line of the model grid with its expected parameter count."""

    family: str
    arch: str
    hidden: int
    grouping: str | None = None
    lam: int | None = None
    marginal_dim: int | None = None
    expected_params: int | None = None

    @property
    def label(self) -> str:
        if self.grouping is None:
            return f"{self.arch}/N={self.hidden}"
        return f"{self.arch}/{self.grouping}/lam={self.lam}/Nm={self.marginal_dim}"

    def spec(self, lookback: int = 5) -> ModelSpec:
        if self.grouping is None:
            return getattr(ModelSpec, self.arch)(16, self.hidden, lookback=lookback)
        plan = DimPlan(self.marginal_dim, self.lam)
        return getattr(ModelSpec, self.arch)(grouping_from_token(self.grouping), plan, lookback=lookback)


def _grouped(arch, token, family, rows):
    return [ModelRow(family, arch, lam * nm, token, lam, nm, n) for lam, nm, n in rows]


# Family order follows the reference comparison table.
FAMILIES = (
    "LSTM",
    "GRU",
    "Channel-wise LSTM (two groups)",
    "Channel-wise LSTM (total split)",
    "mGRN (two groups)",
    "mGRN (total split)",
)

TABLE2_ROWS: tuple[ModelRow, ...] = tuple(
    [ModelRow("LSTM", "lstm", 14, expected_params=1736), ModelRow("GRU", "gru", 17, expected_params=1734)]
    + _grouped("cwlstm", "two-groups", FAMILIES[2], [(1, 5, 1640), (2, 4, 1632), (4, 3, 1776), (8, 2, 1952)])
    + _grouped("cwlstm", "total-split", FAMILIES[3], [(1, 3, 3120), (2, 2, 2128), (4, 2, 3360), (8, 2, 6208)])
    + _grouped("mgrn", "two-groups", FAMILIES[4], [(1, 10, 1620), (2, 8, 1616), (4, 6, 1836), (8, 3, 1368)])
    + _grouped("mgrn", "total-split", FAMILIES[5], [(1, 4, 1496), (2, 4, 1872), (4, 3, 1656), (8, 2, 1440)])
)


def verify_rows(rows) -> None:
    """Abort when any row's parameter count differs from its expected value."""
    bad = [f"{r.label}: {count_params(r.spec())} != {r.expected_params}"
           for r in rows if r.expected_params is not None and count_params(r.spec()) != r.expected_params]
    if bad:
        raise PlanError("parameter counts disagree with the reference table: " + "; ".join(bad))


# --------------------------------------------------------------------------- plans

@dataclass(frozen=True)
class ExperimentPlan:
    """What to run. ``families`` selects rows of :data:`TABLE2_ROWS`."""

    pairs: tuple[tuple[str, str], ...] = DESK_PAIRS
    families: tuple[str, ...] = FAMILIES
    lrs: tuple[float, ...] = LR_GRID
    steps: int = DESK_STEPS
    seeds: tuple[int, ...] = (0,)
    burn_in: int = DEFAULT_BURN_IN
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 10
    lookback: int = 5
    out_dir: str = "bench-out"
    workers: int | None = None

    def __post_init__(self):
        unknown = [f for f in self.families if f not in FAMILIES]
        if unknown:
            raise PlanError(f"unknown model families {unknown}; known: {', '.join(FAMILIES)}")
        if not self.pairs:
            raise PlanError("plan needs at least one ticker pair")

    @property
    def rows(self) -> tuple[ModelRow, ...]:
        return tuple(r for r in TABLE2_ROWS if r.family in self.families)

    def full(self) -> "ExperimentPlan":
        return replace(self, pairs=BENCHMARK_PAIRS, steps=FULL_STEPS)

    def train_config(self, lr: float, seed: int) -> TrainConfig:
        return TrainConfig(lr=lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=seed, lookback=self.lookback)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentPlan":
        """Parse ``key=value`` lines.

        Keys: ``pairs`` (``IBM:KO,BA:CAT`` or ``all``), ``families`` (``|``
        separated labels, ``all`` or ``none``), ``lrs``, ``seeds`` (comma
        lists), ``steps``, ``burn_in``, ``batch_size``, ``max_epochs``,
        ``patience``, ``lookback``, ``workers``, ``out_dir``.
        """
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise PlanError(f"plan line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                if key == "pairs":
                    kw[key] = BENCHMARK_PAIRS if val == "all" else tuple(
                        tuple(p.split(":")) for p in val.split(","))
                    if any(len(p) != 2 for p in kw[key]):
                        raise ValueError(val)
                elif key == "families":
                    presets = {"all": FAMILIES, "none": ()}
                    kw[key] = presets[val] if val in presets else tuple(f.strip() for f in val.split("|"))
                elif key == "lrs":
                    kw[key] = tuple(float(v) for v in val.split(","))
                elif key == "seeds":
                    kw[key] = tuple(int(v) for v in val.split(","))
                elif key in ("steps", "burn_in", "batch_size", "max_epochs", "patience", "lookback", "workers"):
                    kw[key] = int(val)
                elif key == "out_dir":
                    kw[key] = val
                else:
                    raise PlanError(f"plan line {lineno}: unknown key {key!r}")
            except ValueError as exc:
                if isinstance(exc, PlanError):
                    raise
                raise PlanError(f"plan line {lineno}: bad value {val!r} for {key}") from None
        return cls(**kw)


# --------------------------------------------------------------------------- cells

@dataclass(frozen=True)
class Cell:
    pair: tuple[str, str]
    master_seed: int
    row: ModelRow
    lr: float

    @property
    def path_seed(self) -> int:
        return path_seed(self.master_seed, self.pair)

    @property
    def cell_seed(self) -> int:
        """Training seed: hash of (master seed, pair, model, lr)."""
        return derive_seed(self.master_seed, "cell", *self.pair, self.row.label, self.lr)

    def slug(self) -> str:
        label = self.row.label.replace("/", "_").replace("=", "")
        return f"{self.pair[0]}-{self.pair[1]}_s{self.master_seed}_{label}_lr{self.lr:g}"


def path_seed(master_seed: int, pair) -> int:
    return derive_seed(master_seed, "path", *pair)


@dataclass
class CellResult:
    pair: str
    master_seed: int
    family: str
    model: str
    lam: int | None
    lr: float
    cell_seed: int
    config_hash: str
    checkpoint: str
    epoch: int = 0
    val_mse: float = math.nan
    test_mse: float = math.nan
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def config_hash(plan: ExperimentPlan, cell: Cell) -> str:
    cfg = plan.train_config(cell.lr, cell.cell_seed)
    text = "\n".join([
        cell.row.spec(plan.lookback).encode(), cfg.to_text(), ",".join(cell.pair),
        f"steps={plan.steps} burn_in={plan.burn_in} path_seed={cell.path_seed}",
    ])
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _path_and_data(plan: ExperimentPlan, pair, master_seed: int):
    path = generate_path(pair, plan.steps, path_seed(master_seed, pair), plan.burn_in)
    return path, split(make_windows(path, plan.lookback))


def run_cell(plan: ExperimentPlan, cell: Cell, data=None) -> CellResult:
    """Train one cell (or load it from the cache) and score it on the test split."""
    out = Path(plan.out_dir)
    digest = config_hash(plan, cell)
    cache = out / "cells" / f"{cell.slug()}.json"
    ckpt_path = out / "checkpoints" / f"{cell.slug()}.ckpt"
    if cache.exists():
        stored = CellResult(**json.loads(cache.read_text()))
        if stored.config_hash == digest:
            return stored
    res = CellResult(",".join(cell.pair), cell.master_seed, cell.row.family, cell.row.label, cell.row.lam,
                     cell.lr, cell.cell_seed, digest, str(ckpt_path))
    try:
        if data is None:
            data = _path_and_data(plan, cell.pair, cell.master_seed)
        _, ds = data
        ckpt, hist = train(cell.row.spec(plan.lookback), ds, plan.train_config(cell.lr, cell.cell_seed))
        ckpt.save(ckpt_path)
        atomic_write_text(ckpt_path.with_suffix(".history.csv"), history_csv(hist))
        res.epoch, res.val_mse, res.test_mse = ckpt.epoch, ckpt.val_mse, evaluate(ckpt, ds, "test")
    except Exception as exc:  # recorded per cell; the report carries a failure marker
        res.status = f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")
        traceback.print_exc()
    atomic_write_text(cache, json.dumps(asdict(res), indent=1))
    return res


def plan_cells(plan: ExperimentPlan) -> list[Cell]:
    return [Cell(pair, seed, row, lr) for seed in plan.seeds for pair in plan.pairs
            for row in plan.rows for lr in plan.lrs]


def _run_group(args):
    plan, pair, seed, cells = args
    data = None
    out = []
    for cell in cells:
        if data is None and not _cached(plan, cell):
            data = _path_and_data(plan, pair, seed)
        out.append(run_cell(plan, cell, data))
    return out


def _cached(plan, cell) -> bool:
    cache = Path(plan.out_dir) / "cells" / f"{cell.slug()}.json"
    return cache.exists() and json.loads(cache.read_text()).get("config_hash") == config_hash(plan, cell)


def worker_count(plan: ExperimentPlan) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise PlanError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    else:
        n = plan.workers or os.cpu_count() or 1
    return max(1, n)


def run_cells(plan: ExperimentPlan, log=None) -> list[CellResult]:
    """Run every cell, grouped per (pair, seed) so each path is generated once."""
    groups = {}
    for cell in plan_cells(plan):
        groups.setdefault((cell.pair, cell.master_seed), []).append(cell)
    jobs = [(plan, pair, seed, cells) for (pair, seed), cells in groups.items()]
    n = min(worker_count(plan), max(1, len(jobs)))
    results = []
    if n == 1:
        for job in jobs:
            results.extend(_run_group(job))
            if log:
                log(f"done {job[1][0]},{job[1][1]} seed {job[2]}")
    else:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(n) as pool:
            for chunk in pool.imap(_run_group, jobs):
                results.extend(chunk)
    return results


# --------------------------------------------------------------------------- report

@dataclass(frozen=True)
class ReportRow:
    model: str
    mse: float
    rel_diff: float
    pair_std: float
    n: int
    failures: int = 0


REPORT_HEADER = ("model", "mse", "rel_diff", "pair_std", "n", "failures")


@dataclass
class Report:
    rows: list[ReportRow]
    oracle: dict = field(default_factory=dict)
    selected: dict = field(default_factory=dict)
    cells: list = field(default_factory=list)

    def row(self, model: str) -> ReportRow:
        return next(r for r in self.rows if r.model == model)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r.model, repr(r.mse), repr(r.rel_diff), repr(r.pair_std), r.n, r.failures])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"{'model':<34}{'mse':>10}{'rel_diff':>11}{'pair_std*':>11}{'n':>4}"]
        for r in self.rows:
            mark = " (failures: %d)" % r.failures if r.failures else ""
            lines.append(f"{r.model:<34}{r.mse:>10.4f}{100 * r.rel_diff:>10.3f}%{r.pair_std:>11.4f}{r.n:>4}{mark}")
        lines.append("* per-pair standard deviation, a diagnostic with no reference value")
        return "\n".join(lines) + "\n"

    def cells_csv(self) -> str:
        buf = io.StringIO()
        names = list(CellResult.__dataclass_fields__)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names + ["selected"])
        chosen = {id(c) for c in self.selected.values()}
        for c in self.cells:
            w.writerow([getattr(c, k) if not isinstance(getattr(c, k), float) else repr(getattr(c, k))
                        for k in names] + [int(id(c) in chosen)])
        return buf.getvalue()


def read_report_csv(text: str) -> list[ReportRow]:
    rows = list(csv.reader(io.StringIO(text)))
    if tuple(rows[0]) != REPORT_HEADER:
        raise ValueError("not a report CSV")
    return [ReportRow(m, float(a), float(b), float(c), int(n), int(f)) for m, a, b, c, n, f in rows[1:]]


def oracle_mses(plan: ExperimentPlan) -> dict:
    return {(pair, seed): min_mse(generate_path(pair, plan.steps, path_seed(seed, pair), plan.burn_in),
                                  lookback=plan.lookback)
            for seed in plan.seeds for pair in plan.pairs}


def build_report(plan: ExperimentPlan, results, oracle: dict) -> Report:
    """Validation-select per (pair, seed, family), average, compare with the oracle."""
    keys = [(pair, seed) for seed in plan.seeds for pair in plan.pairs]
    ora = np.array([oracle[k] for k in keys])
    o_mean = float(ora.mean())
    rows = [ReportRow(ORACLE_LABEL, o_mean, 0.0, _pair_std(plan, oracle), len(keys))]
    selected = {}
    for fam in plan.families:
        scores, fails = [], 0
        for pair, seed in keys:
            cands = [r for r in results if r.family == fam and r.pair == ",".join(pair) and r.master_seed == seed]
            fails += sum(not r.ok for r in cands)
            good = [r for r in cands if r.ok]
            if good:
                best = min(good, key=lambda r: (r.val_mse, r.model, r.lr))
                selected[(pair, seed, fam)] = best
                scores.append(best.test_mse)
        if not scores:
            rows.append(ReportRow(fam, math.nan, math.nan, math.nan, 0, fails))
            continue
        mse = float(np.mean(scores))
        per_pair = {}
        for (pair, seed, f), r in selected.items():
            if f == fam:
                per_pair.setdefault(pair, []).append(r.test_mse)
        std = float(np.std([np.mean(v) for v in per_pair.values()])) if len(per_pair) > 1 else 0.0
        rows.append(ReportRow(fam, mse, (mse - o_mean) / o_mean, std, len(scores), fails))
    model_rows = sorted(rows[1:], key=lambda r: FAMILIES.index(r.model))
    return Report(model_rows + rows[:1], oracle, selected, list(results))


def _pair_std(plan, oracle) -> float:
    per = [np.mean([oracle[(p, s)] for s in plan.seeds]) for p in plan.pairs]
    return float(np.std(per)) if len(per) > 1 else 0.0


def compare(plan: ExperimentPlan, log=None) -> Report:
    """Verify parameter counts, run the grid, and write ``report.csv``/``cells.csv``."""
    verify_rows(plan.rows)
    results = run_cells(plan, log) if plan.rows else []
    report = build_report(plan, results, oracle_mses(plan))
    out = Path(plan.out_dir)
    atomic_write_text(out / "report.csv", report.to_csv())
    atomic_write_text(out / "cells.csv", report.cells_csv())
    atomic_write_text(out / "report.txt", report.to_text())
    return report
