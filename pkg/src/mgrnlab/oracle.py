"""Closed-form best predictor of ``100 * y1(t) * y2(t)`` given the past.

Conditioned on the history up to ``t-1`` every AR process value ``p(t)`` is
Gaussian with mean ``phi_p(t)`` (the AR recursion without noise) and variance
``0.01``; the processes and the factors ``w_M, w_1, w_2`` are independent.
The expectations of the tail transform ``g`` reduce to two lognormal-weighted
Gaussian moments of ``w ~ N(0, 1)`` and ``log u ~ N(phi, s2)``::

    V1 = E[w u**w]    = phi / (1 - s2)**1.5 * exp(phi**2 / (2 - 2 s2))
    V2 = E[w**2 u**w] = (1 + phi**2 - s2) / (1 - s2)**2.5 * exp(phi**2 / (2 - 2 s2))

Both integrals diverge for ``s2 >= 1``. Products and reciprocals of the
lognormal parameters stay lognormal: ``u1 * u2`` has mean ``phi1 + phi2`` and
variance ``s2_1 + s2_2``; ``1 / v`` flips the sign of the mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .simgen import AR_COEFFS, A, NOISE_STD, ArState, SimPath, ar5_step, pair_constants

NOISE_VAR = NOISE_STD**2

# positions of each process inside a 7-wide series block
_ALPHA, _LBETA, _LUM, _LVM, _LGAMMA, _LU, _LV = range(7)


class OracleDomainError(ValueError):
    """Raised when a conditional variance makes a lognormal moment diverge."""


@dataclass(frozen=True)
class CondGaussian:
    """Conditional mean and variance of one AR process value."""

    phi: float | np.ndarray
    var: float = NOISE_VAR

    def __post_init__(self):
        if self.var < 0:
            raise ValueError("variance must be non-negative")

    def __neg__(self) -> "CondGaussian":
        return CondGaussian(-np.asarray(self.phi), self.var)

    def __add__(self, other: "CondGaussian") -> "CondGaussian":
        return CondGaussian(np.asarray(self.phi) + other.phi, self.var + other.var)


def cond_mean_ar(state: ArState) -> float:
    return ar5_step(state, 0.0)


def cond_mean_exp(c: CondGaussian):
    """``E[exp(p)]`` for Gaussian ``p``."""
    return np.exp(c.phi + 0.5 * c.var)


def _check(c: CondGaussian):
    if c.var >= 1.0:
        raise OracleDomainError(f"conditional variance {c.var} >= 1: the moment diverges")


def v1(c: CondGaussian):
    _check(c)
    phi, s2 = np.asarray(c.phi, dtype=np.float64), c.var
    return phi / (1.0 - s2) ** 1.5 * np.exp(phi * phi / (2.0 - 2.0 * s2))


def v2(c: CondGaussian):
    _check(c)
    phi, s2 = np.asarray(c.phi, dtype=np.float64), c.var
    return (1.0 + phi * phi - s2) / (1.0 - s2) ** 2.5 * np.exp(phi * phi / (2.0 - 2.0 * s2))


def cond_mean_g(logu: CondGaussian, logv: CondGaussian):
    """``E[g(w; u, v)]`` with independent ``w``, ``u`` and ``v``."""
    return (v1(logu) + v1(-logv)) / A


def cond_mean_gg(logu1: CondGaussian, logv1: CondGaussian, logu2: CondGaussian, logv2: CondGaussian):
    """``E[g(w; u1, v1) g(w; u2, v2)]`` for one shared factor ``w``."""
    cross = v2(logu1 + logu2) + v2(logu1 + -logv2) + v2(logu2 + -logv1) + v2(-logv1 + -logv2)
    single = v2(logu1) + v2(logu2) + v2(-logv1) + v2(-logv2)
    return cross / A**2 + single / A + 1.0


@dataclass(frozen=True)
class BestPrediction:
    target: float | np.ndarray
    y1: float | np.ndarray
    y2: float | np.ndarray


@dataclass(frozen=True)
class OracleState:
    """Histories ``(14, 5)`` ordered ``p(t-1) .. p(t-5)`` plus the 14 constant terms.

    Process order follows the parameter columns of a path: alpha, log beta,
    log uM, log vM, log gamma, log u, log v for series 1, then series 2.
    """

    histories: np.ndarray
    mu: np.ndarray
    var: float = NOISE_VAR

    def __post_init__(self):
        h = np.asarray(self.histories, dtype=np.float64)
        if h.shape[0] != 14 or h.shape[-1] < 5:
            raise ValueError(f"histories must be (14, >=5), got {h.shape}")
        object.__setattr__(self, "histories", h)
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=np.float64))

    @classmethod
    def for_pair(cls, pair, histories) -> "OracleState":
        return cls(histories, pair_constants(pair))

    def phis(self) -> np.ndarray:
        """Conditional means of the 14 processes; only the latest 5 values matter."""
        return self.mu + self.histories[:, :5] @ np.asarray(AR_COEFFS)


def _assemble(phi: np.ndarray, var: float) -> BestPrediction:
    """Best predictor from conditional means ``phi`` with shape ``(..., 14)``."""
    def cg(i, k):
        return CondGaussian(phi[..., 7 * i + k], var)

    e_alpha = [phi[..., 7 * i + _ALPHA] for i in range(2)]
    e_beta = [cond_mean_exp(cg(i, _LBETA)) for i in range(2)]
    e_gamma = [cond_mean_exp(cg(i, _LGAMMA)) for i in range(2)]
    e_gm = [cond_mean_g(cg(i, _LUM), cg(i, _LVM)) for i in range(2)]
    e_g = [cond_mean_g(cg(i, _LU), cg(i, _LV)) for i in range(2)]
    e_gmm = cond_mean_gg(cg(0, _LUM), cg(0, _LVM), cg(1, _LUM), cg(1, _LVM))

    e_y = [e_alpha[i] + e_beta[i] * e_gm[i] + e_gamma[i] * e_g[i] for i in range(2)]
    idio2 = e_alpha[1] + e_gamma[1] * e_g[1]
    target = 100.0 * (
        e_alpha[0] * e_y[1]
        + e_gamma[0] * e_g[0] * e_y[1]
        + e_beta[0] * e_gm[0] * idio2
        + e_beta[0] * e_beta[1] * e_gmm
    )
    return BestPrediction(target, e_y[0], e_y[1])


def best_predictor(state: OracleState) -> BestPrediction:
    """``E[100 y1(t) y2(t) | past]`` together with ``E[y1(t)]`` and ``E[y2(t)]``."""
    pred = _assemble(state.phis(), state.var)
    return BestPrediction(float(pred.target), float(pred.y1), float(pred.y2))


def conditional_means(latent: np.ndarray, mu: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``phi`` ``(len(rows), 14)`` for target rows, from latent values ``(T, 14)``."""
    rows = np.asarray(rows)
    if rows.size and rows.min() < len(AR_COEFFS):
        raise ValueError(f"rows need {len(AR_COEFFS)} preceding observations")
    phi = np.broadcast_to(mu, (rows.size, mu.size)).copy()
    for j, c in enumerate(AR_COEFFS, start=1):
        phi += c * latent[rows - j]
    return phi


def predict_path(path: SimPath, rows=None) -> np.ndarray:
    """Best-predictor values for the given target rows (default: every row >= 5)."""
    if rows is None:
        rows = np.arange(len(AR_COEFFS), len(path))
    phi = conditional_means(path.latent(), pair_constants(path.pair), rows)
    return _assemble(phi, NOISE_VAR).target


def test_rows(path: SimPath, lookback: int = 5) -> np.ndarray:
    """Target rows of the chronological test segment used by training."""
    from .training import split_rows

    return split_rows(len(path), lookback=lookback)["test"]


def min_mse(path: SimPath, rows=None, lookback: int = 5, predictions=None) -> float:
    """Mean squared error of the best predictor over ``rows``.

    The default range is the chronological test segment used for training
    evaluation (last 15% of rows, minus the first ``lookback`` rows).
    ``predictions`` substitutes another predictor aligned to ``rows``.
    """
    rows = test_rows(path, lookback) if rows is None else np.asarray(rows)
    if rows.size == 0:
        raise ValueError("empty evaluation range")
    pred = predict_path(path, rows) if predictions is None else np.asarray(predictions, dtype=np.float64)
    err = path.target[rows] - pred
    return float(np.mean(err * err))


def predictions_csv(path: SimPath, rows=None) -> str:
    """Oracle predictions as CSV ``row,target,prediction,e_y1,e_y2``.

    ``row`` is the 0-based data row of the path the prediction targets.
    """
    if rows is None:
        rows = np.arange(len(AR_COEFFS), len(path))
    rows = np.asarray(rows)
    phi = conditional_means(path.latent(), pair_constants(path.pair), rows)
    pred = _assemble(phi, NOISE_VAR)
    lines = ["row,target,prediction,e_y1,e_y2"]
    for r, t, p, a, b in zip(rows, path.target[rows], pred.target, pred.y1, pred.y2):
        lines.append(f"{r},{t:.17g},{p:.17g},{a:.17g},{b:.17g}")
    return "\n".join(lines) + "\n"
