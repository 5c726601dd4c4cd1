"""Heavy-tailed correlated benchmark series.

Two observables are built from fourteen AR(5) parameter processes::

    y_i = alpha_i + beta_i * g(w_M; uM_i, vM_i) + gamma_i * g(w_i; u_i, v_i)
    g(w; u, v) = w * (u**w / 4 + v**(-w) / 4 + 1)

with a common factor ``w_M`` and idiosyncratic ``w_1, w_2`` all N(0, 1). Every
process except ``alpha`` runs in log space. Each process follows

    p(t) = mu_p + 0.9 p(t-1) - 0.8 p(t-2) + 0.7 p(t-3) - 0.6 p(t-4) + 0.5 p(t-5) + eps

with eps ~ N(0, 0.1**2) and ``mu_p`` taken from a per-ticker constants table.

Column layout of a path (``COLUMNS``)::

    y1, y2,
    alpha1, beta1, uM1, vM1, gamma1, u1, v1,
    alpha2, beta2, uM2, vM2, gamma2, u2, v2,
    target                                   (= 100 * y1 * y2)

Random draws per step, in order: the 14 AR noises in the column order of the
parameter block above, then ``w_M``, ``w_1``, ``w_2``.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .tensor import RngStream, normal_draws

AR_COEFFS = (0.9, -0.8, 0.7, -0.6, 0.5)
NOISE_STD = 0.1
A = 4.0
DEFAULT_BURN_IN = 1000
DRAWS_PER_STEP = 17

PROCESSES = ("alpha", "log_beta", "log_uM", "log_vM", "log_gamma", "log_u", "log_v")
PARAM_NAMES = ("alpha", "beta", "uM", "vM", "gamma", "u", "v")
PARAM_COLUMNS = tuple(f"{p}{i}" for i in (1, 2) for p in PARAM_NAMES)
INPUT_COLUMNS = ("y1", "y2") + PARAM_COLUMNS
COLUMNS = INPUT_COLUMNS + ("target",)

# ticker: (alpha, log_beta, log_uM, log_vM, log_gamma, log_u, log_v)
_TABLE = {
    "AAPL": (0.008, -1.024, 0.000, 0.175, -0.840, 0.215, 0.159),
    "BA": (-0.007, -1.026, 0.183, 0.182, -0.842, 0.164, 0.120),
    "CAT": (0.020, -0.975, 0.000, 0.202, -0.847, 0.199, 0.153),
    "CVX": (0.011, -1.021, 0.000, 0.193, -0.849, 0.172, 0.138),
    "DIS": (0.002, -1.001, 0.156, 0.214, -0.862, 0.196, 0.151),
    "DWDP": (-0.007, -0.994, 0.176, 0.186, -0.866, 0.198, 0.141),
    "IBM": (0.021, -0.942, 0.000, 0.198, -0.886, 0.218, 0.178),
    "INTC": (0.012, -0.948, 0.000, 0.149, -0.873, 0.168, 0.141),
    "JNJ": (-0.003, -1.012, 0.189, 0.210, -0.858, 0.227, 0.160),
    "KO": (0.007, -0.979, 0.117, 0.198, -0.856, 0.208, 0.153),
    "MMM": (0.001, -0.964, 0.186, 0.198, -0.862, 0.199, 0.161),
    "NKE": (-0.002, -0.995, 0.267, 0.200, -0.793, 0.347, 0.297),
    "PG": (0.010, -0.979, 0.096, 0.201, -0.844, 0.210, 0.161),
    "WMT": (-0.007, -0.984, 0.183, 0.142, -0.871, 0.181, 0.146),
}

TICKERS = tuple(sorted(_TABLE))

BENCHMARK_PAIRS = (
    ("IBM", "KO"), ("BA", "CAT"), ("DWDP", "JNJ"), ("CVX", "PG"), ("IBM", "JNJ"),
    ("NKE", "WMT"), ("BA", "PG"), ("INTC", "KO"), ("AAPL", "NKE"), ("MMM", "DIS"),
)


class UnknownTicker(KeyError):
    def __str__(self):
        return f"unknown ticker {self.args[0]!r}; known: {', '.join(TICKERS)}"


class SimulationOverflow(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"exponentiated AR value overflowed at step {step}")
        self.step = step


@dataclass(frozen=True)
class SimConstants:
    """Constant terms of the seven parameter processes of one series."""

    ticker: str
    alpha: float
    log_beta: float
    log_uM: float
    log_vM: float
    log_gamma: float
    log_u: float
    log_v: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, p) for p in PROCESSES])


def lookup_constants(ticker: str) -> SimConstants:
    try:
        row = _TABLE[ticker]
    except KeyError:
        raise UnknownTicker(ticker) from None
    return SimConstants(ticker, *row)


def pair_constants(pair) -> np.ndarray:
    """Constant terms of all 14 processes for ``(ticker1, ticker2)``, column order."""
    return np.concatenate([lookup_constants(t).as_array() for t in pair])


# --------------------------------------------------------------------------- kernels

def g(omega, u, v):
    """Tail-shaping transform ``w (u**w/4 + v**(-w)/4 + 1)``; ``0**0`` is 1."""
    omega = np.asarray(omega, dtype=np.float64)
    out = omega * (np.power(u, omega) / A + np.power(v, -omega) / A + 1.0)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class ArState:
    """Five most recent values ``(p(t-1), ..., p(t-5))`` of one process."""

    history: tuple[float, ...]
    mu: float
    sigma: float = NOISE_STD

    def __post_init__(self):
        if len(self.history) != len(AR_COEFFS):
            raise ValueError(f"history must hold exactly {len(AR_COEFFS)} values")


def ar5_step(state: ArState, eps: float) -> float:
    return state.mu + sum(c * p for c, p in zip(AR_COEFFS, state.history)) + eps


def check_stability(coeffs=AR_COEFFS) -> float:
    """Spectral radius of the AR companion matrix; warns when it is >= 1."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n = coeffs.size
    companion = np.zeros((n, n))
    companion[0] = coeffs
    companion[1:, :-1] = np.eye(n - 1)
    radius = float(np.max(np.abs(np.linalg.eigvals(companion)))) if n else 0.0
    if radius >= 1.0:
        warnings.warn(f"AR recursion is not stable (spectral radius {radius:.6f})", RuntimeWarning)
    return radius


def stationary_mean(mu: float, coeffs=AR_COEFFS) -> float:
    return mu / (1.0 - sum(coeffs))


# --------------------------------------------------------------------------- paths

@dataclass
class SimPath:
    """Generated observations; ``data`` holds the 16 input columns."""

    data: np.ndarray
    target: np.ndarray
    pair: tuple[str, str]
    seed: int | None = None
    burn_in: int | None = None
    columns: tuple[str, ...] = field(default=INPUT_COLUMNS)

    def __len__(self):
        return self.data.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def latent(self) -> np.ndarray:
        """AR process values ``(T, 14)``: alpha as is, the rest as logs."""
        params = self.data[:, 2:16].copy()
        logged = [j for j in range(14) if j % 7 != 0]
        params[:, logged] = np.log(params[:, logged])
        return params

    def metadata_line(self) -> str:
        return (f"# pair={self.pair[0]},{self.pair[1]} seed={self.seed} "
                f"burn_in={self.burn_in} steps={len(self)}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(self.metadata_line() + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        table = np.column_stack([self.data, self.target])
        for row in table:
            writer.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, pair=None) -> "SimPath":
        lines = text.splitlines()
        meta = {}
        if lines and lines[0].startswith("#"):
            meta = dict(item.split("=", 1) for item in lines[0][1:].split())
            lines = lines[1:]
        if not lines:
            raise ValueError("CSV has no header row")
        header = tuple(next(csv.reader([lines[0]])))
        if header != COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        rows = [r for r in csv.reader(lines[1:]) if r]
        try:
            table = np.array(rows, dtype=np.float64).reshape(len(rows), len(COLUMNS))
        except ValueError as exc:
            raise ValueError(f"malformed CSV body: {exc}") from None
        if pair is None:
            if "pair" not in meta:
                raise ValueError("CSV carries no pair metadata; pass the ticker pair explicitly")
            pair = tuple(meta["pair"].split(","))
        seed = int(meta["seed"]) if meta.get("seed", "None") != "None" else None
        burn_in = int(meta["burn_in"]) if meta.get("burn_in", "None") != "None" else None
        return cls(table[:, :16].copy(), table[:, 16].copy(), tuple(pair), seed, burn_in)

    def save(self, path):
        from .params import atomic_write_text

        atomic_write_text(path, self.to_csv())

    @classmethod
    def load(cls, path, pair=None) -> "SimPath":
        return cls.from_csv(Path(path).read_text(), pair=pair)


def simulate_latent(mu: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Run the AR recursions from zero history; ``noise`` is ``(T, n_processes)``."""
    denom = np.r_[1.0, -np.asarray(AR_COEFFS)]
    return lfilter([1.0], denom, mu + noise, axis=0)


def generate_path(pair, steps: int, seed: int, burn_in: int = DEFAULT_BURN_IN) -> SimPath:
    """Simulate ``steps`` rows for a ticker pair after ``burn_in`` discarded rows."""
    if steps < 1:
        raise ValueError("steps must be positive")
    if burn_in < 0:
        raise ValueError("burn_in must be non-negative")
    mu = pair_constants(pair)
    check_stability()
    total = steps + burn_in
    z, _ = normal_draws(RngStream(seed), DRAWS_PER_STEP * total)
    z = z.reshape(total, DRAWS_PER_STEP)
    latent = simulate_latent(mu, NOISE_STD * z[:, :14])[burn_in:]
    shocks = z[burn_in:, 14:]

    params = latent.copy()
    logged = [j for j in range(14) if j % 7 != 0]
    with np.errstate(over="ignore"):
        params[:, logged] = np.exp(latent[:, logged])
    bad = ~np.isfinite(params).all(axis=1)
    if bad.any():
        raise SimulationOverflow(int(np.argmax(bad)))

    ys = []
    for i in range(2):
        alpha, beta, uM, vM, gamma, u, v = params[:, 7 * i:7 * i + 7].T
        ys.append(alpha + beta * g(shocks[:, 0], uM, vM) + gamma * g(shocks[:, 1 + i], u, v))
    data = np.column_stack([ys[0], ys[1], params])
    return SimPath(data, 100.0 * ys[0] * ys[1], tuple(pair), seed, burn_in)
