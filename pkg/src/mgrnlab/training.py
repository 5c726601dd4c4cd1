"""Supervised windows, chronological splits, Adam, and the training loop.

Row indices are 0-based throughout. A sample with target row ``t`` sees the
window of path rows ``t - lookback .. t - 1``; the target is ``100 y1(t) y2(t)``.

Splits are made on path rows: with ``T`` rows and fractions ``(a, b, c)`` the
segments are ``[0, round(aT))``, ``[round(aT), round((a+b)T))`` and the rest.
Inside each segment the first ``lookback`` rows only serve as history, so a
window never reaches into the previous segment. For 100,000 rows that gives
69,995 / 14,995 / 14,995 samples.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cells import forward_batch, loss_and_grad
from .params import ModelSpec, Params, dumps_checkpoint, init_params
from .simgen import SimPath
from .tensor import RngStream, derive_seed, retain_freed_memory, uniform_draws

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)
LR_GRID = (1e-4, 5e-4, 1e-3)


class EmptySplit(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, what: str = "loss"):
        super().__init__(f"{what} became non-finite in epoch {epoch}")
        self.epoch = epoch


# --------------------------------------------------------------------------- data

def segment_bounds(n_rows: int, fractions=DEFAULT_FRACTIONS) -> list[tuple[int, int]]:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or (fr < 0).any() or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    cuts = [0, round(fr[0] * n_rows), round((fr[0] + fr[1]) * n_rows), n_rows]
    return [(cuts[i], cuts[i + 1]) for i in range(3)]


def split_rows(n_rows: int, fractions=DEFAULT_FRACTIONS, lookback: int = 5) -> dict[str, np.ndarray]:
    """Target rows of each split after dropping the first ``lookback`` rows per segment."""
    return {tag: np.arange(lo + lookback, hi) if hi - lo > lookback else np.arange(0)
            for tag, (lo, hi) in zip(SPLITS, segment_bounds(n_rows, fractions))}


@dataclass
class WindowDataset:
    """Windows over one path, materialized lazily from row indices.

    ``rows`` holds the target row of each sample and ``tags`` its split
    (``""`` until :func:`split` assigns one).
    """

    inputs: np.ndarray
    targets: np.ndarray
    rows: np.ndarray
    lookback: int
    tags: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.tags is None:
            self.tags = np.full(self.rows.shape, "", dtype="<U5")

    def __len__(self):
        return self.rows.size

    def window_rows(self, idx=None) -> np.ndarray:
        """Input row indices ``(n, lookback)`` of the selected samples."""
        rows = self.rows if idx is None else self.rows[idx]
        return rows[:, None] + np.arange(-self.lookback, 0)

    def windows(self, idx=None) -> np.ndarray:
        return self.inputs[self.window_rows(idx)]

    def target_values(self, idx=None) -> np.ndarray:
        rows = self.rows if idx is None else self.rows[idx]
        return self.targets[rows]

    def indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.tags == tag)

    def subset(self, tag: str) -> "WindowDataset":
        idx = self.indices(tag)
        return WindowDataset(self.inputs, self.targets, self.rows[idx], self.lookback, self.tags[idx])


def make_windows(path: SimPath, lookback: int = 5) -> WindowDataset:
    """One sample per target row ``t`` in ``[lookback, T)``; inputs are rows ``t-lookback..t-1``."""
    if lookback < 1:
        raise ValueError("lookback must be positive")
    if len(path) <= lookback:
        raise ValueError(f"path has {len(path)} rows; at least {lookback + 1} are needed for lookback {lookback}")
    return WindowDataset(np.ascontiguousarray(path.data), path.target, np.arange(lookback, len(path)), lookback)


def split(ds: WindowDataset, fractions=DEFAULT_FRACTIONS) -> WindowDataset:
    """Tag samples train/val/test chronologically by target row.

    A split with a zero fraction stays empty; a positive fraction that ends
    up without samples raises :class:`EmptySplit`.
    """
    n_rows = ds.inputs.shape[0]
    rows = split_rows(n_rows, fractions, ds.lookback)
    tags = np.full(ds.rows.shape, "", dtype="<U5")
    for (tag, r), frac in zip(rows.items(), fractions):
        hit = np.isin(ds.rows, r)
        if frac > 0 and not hit.any():
            raise EmptySplit(f"{tag} split is empty for {n_rows} rows and lookback {ds.lookback}")
        tags[hit] = tag
    keep = tags != ""
    return WindowDataset(ds.inputs, ds.targets, ds.rows[keep], ds.lookback, tags[keep])


# --------------------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Params, **hyper) -> "OptimizerState":
        return cls(np.zeros(params.size), np.zeros(params.size), **hyper)


def adam_step(params: Params, grads: Params, st: OptimizerState, lr: float) -> tuple[Params, OptimizerState]:
    """One bias-corrected Adam update; inputs are left untouched."""
    if grads.size != params.size or st.m.shape != (params.size,):
        raise ValueError(f"shape mismatch: params {params.size}, grads {grads.size}, state {st.m.shape}")
    g = grads.flat
    m = st.beta1 * st.m + (1.0 - st.beta1) * g
    v = st.beta2 * st.v + (1.0 - st.beta2) * g * g
    t = st.step + 1
    m_hat = m / (1.0 - st.beta1**t)
    v_hat = v / (1.0 - st.beta2**t)
    out = params.copy()
    out.flat -= lr * m_hat / (np.sqrt(v_hat) + st.eps)
    return out, replace(st, m=m, v=v, step=t)


def _adam_inplace(params: Params, g: np.ndarray, st: dict, lr: float):
    # same arithmetic as adam_step, without the per-step copies
    st["t"] += 1
    b1, b2, eps, t = st["beta1"], st["beta2"], st["eps"], st["t"]
    m, v = st["m"], st["v"]
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    params.flat -= lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``clip_norm`` rescales the full gradient when its norm exceeds the value
    (0 disables). ``normalize`` standardizes inputs with train-split moments.
    """

    lr: float = 1e-3
    batch_size: int = 512
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    clip_norm: float = 0.0
    normalize: bool = False
    lookback: int = 5

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        for name in ("batch_size", "patience", "lookback"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be non-negative")

    KEYS = ("lr", "batch_size", "max_epochs", "patience", "seed", "clip_norm", "normalize", "lookback")

    def to_text(self) -> str:
        return "".join(f"{k}={getattr(self, k)!r}\n" for k in self.KEYS)

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        """Parse ``key=value`` lines; ``#`` starts a comment."""
        types = {"lr": float, "clip_norm": float, "normalize": _parse_bool}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value, got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in cls.KEYS:
                raise ValueError(f"config line {lineno}: unknown key {key!r}; known: {', '.join(cls.KEYS)}")
            try:
                values[key] = types.get(key, int)(val)
            except ValueError:
                raise ValueError(f"config line {lineno}: bad value {val!r} for {key}") from None
        values.update(overrides)
        return cls(**values)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


@dataclass
class Checkpoint:
    """Trained parameters plus the input scaling they expect."""

    spec: ModelSpec
    params: Params
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    epoch: int = 0
    val_mse: float = math.nan

    def prepare(self, windows: np.ndarray) -> np.ndarray:
        if self.shift is None:
            return windows
        return (windows - self.shift) / self.scale

    def predict(self, windows: np.ndarray, chunk: int = 4096) -> np.ndarray:
        out = [forward_batch(self.spec, self.params, self.prepare(windows[i:i + chunk]))
               for i in range(0, windows.shape[0], chunk)]
        return np.concatenate(out) if out else np.zeros(0)

    def to_text(self) -> str:
        text = dumps_checkpoint(self.spec, self.params)
        if self.shift is not None:
            text += "shift " + " ".join(f"{v:.17g}" for v in self.shift) + "\n"
            text += "scale " + " ".join(f"{v:.17g}" for v in self.scale) + "\n"
        return text + f"selected epoch={self.epoch} val_mse={self.val_mse:.17g}\n"

    @classmethod
    def from_text(cls, text: str) -> "Checkpoint":
        from .params import loads_checkpoint

        extra = {}
        core = []
        for line in text.splitlines():
            head = line.split(" ", 1)[0]
            if head in ("shift", "scale"):
                extra[head] = np.array([float(v) for v in line.split()[1:]])
            elif head == "selected":
                for item in line.split()[1:]:
                    k, v = item.split("=")
                    extra[k] = int(v) if k == "epoch" else float(v)
            else:
                core.append(line)
        spec, params = loads_checkpoint("\n".join(core) + "\n")
        return cls(spec, params, extra.get("shift"), extra.get("scale"),
                   extra.get("epoch", 0), extra.get("val_mse", math.nan))

    def save(self, path):
        from .params import atomic_write_text

        atomic_write_text(path, self.to_text())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        from pathlib import Path

        return cls.from_text(Path(path).read_text())


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    wall_seconds: float


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mse", "val_mse", "wall_seconds"])
    for r in history:
        w.writerow([r.epoch, f"{r.train_mse:.17g}", f"{r.val_mse:.17g}", f"{r.wall_seconds:.3f}"])
    return buf.getvalue()


def _permutation(stream: RngStream, n: int) -> tuple[np.ndarray, RngStream]:
    # sort keys drawn from the counter stream; ties are impossible in practice
    # and broken by index anyway thanks to the stable sort
    keys, stream = uniform_draws(stream, n)
    return np.argsort(keys, kind="stable"), stream


def train(spec: ModelSpec, ds: WindowDataset, cfg: TrainConfig,
          init: Params | None = None) -> tuple[Checkpoint, list[EpochRecord]]:
    """Mini-batch Adam on the train split with best-validation selection.

    The initial weights and every epoch's batch order come from streams
    derived from ``cfg.seed``, so the result is a pure function of
    ``(spec, ds, cfg)``. The head bias starts at the mean train target,
    which spares Adam the slow walk from zero to the target level.
    """
    retain_freed_memory()
    if ds.lookback != spec.lookback or cfg.lookback != spec.lookback:
        raise ValueError(f"lookback mismatch: data {ds.lookback}, config {cfg.lookback}, model {spec.lookback}")
    tr, va = ds.indices("train"), ds.indices("val")
    if tr.size == 0 or va.size == 0:
        raise EmptySplit("training needs non-empty train and val splits")

    root = RngStream(derive_seed("train", cfg.seed))
    if init is None:
        params, _ = init_params(spec, root.spawn("init"))
        params["head.b"] = [float(np.mean(ds.target_values(tr)))]
    else:
        params = init.copy()

    shift = scale = None
    if cfg.normalize:
        x = ds.windows(tr)[:, -1, :]
        shift, scale = x.mean(axis=0), x.std(axis=0)
        scale[scale == 0] = 1.0
    best = Checkpoint(spec, params.copy(), shift, scale, epoch=0)
    x_tr = best.prepare(ds.windows(tr))
    y_tr = ds.target_values(tr)
    x_va = best.prepare(ds.windows(va))
    y_va = ds.target_values(va)
    best.val_mse = _mse(best.predict(x_va), y_va)

    opt = {"m": np.zeros(params.size), "v": np.zeros(params.size), "t": 0,
           "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
    order_stream = root.spawn("order")
    history: list[EpochRecord] = []
    stale = 0
    t0 = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        perm, order_stream = _permutation(order_stream, tr.size)
        total = 0.0
        for start in range(0, tr.size, cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            loss, grads = loss_and_grad(spec, params, x_tr[b], y_tr[b])
            g = grads.flat
            if not (math.isfinite(loss) and np.isfinite(g).all()):
                raise TrainingDiverged(epoch)
            if cfg.clip_norm > 0:
                norm = float(np.sqrt(g @ g))
                if norm > cfg.clip_norm:
                    g = g * (cfg.clip_norm / norm)
            _adam_inplace(params, g, opt, cfg.lr)
            total += loss * b.size
        ckpt = Checkpoint(spec, params, shift, scale)
        val = _mse(ckpt.predict(x_va), y_va)
        if not math.isfinite(val):
            raise TrainingDiverged(epoch, "validation MSE")
        history.append(EpochRecord(epoch, total / tr.size, val, time.perf_counter() - t0))
        if val < best.val_mse:
            best = Checkpoint(spec, params.copy(), shift, scale, epoch, val)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history


def _mse(pred: np.ndarray, target: np.ndarray) -> float:
    err = pred - target
    return float(np.mean(err * err))


def evaluate(ckpt: Checkpoint, ds: WindowDataset, tag: str = "test") -> float:
    idx = ds.indices(tag)
    if idx.size == 0:
        raise EmptySplit(f"{tag} split is empty")
    return _mse(ckpt.predict(ds.windows(idx)), ds.target_values(idx))


def checkpoint_digest(ckpt: Checkpoint) -> str:
    import hashlib

    return hashlib.sha256(ckpt.to_text().encode()).hexdigest()[:16]
