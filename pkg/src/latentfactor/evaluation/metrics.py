"""Forecast quality metrics: NLL aggregation, calibration, covariance whitening."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numerics import DecompositionError, sym_eig

DEFAULT_QUANTILES = 100


@dataclass(frozen=True)
class CalibrationReport:
    """Nominal levels ``p``, empirical frequencies ``p_hat`` and ``cal = sum (p - p_hat)^2``."""

    M: int
    p: np.ndarray
    p_hat: np.ndarray
    cal: float
    n_obs: int = 0

    def to_rows(self) -> list[tuple[float, float]]:
        return list(zip(self.p.tolist(), self.p_hat.tolist()))


@dataclass(frozen=True)
class CovarianceReport:
    """Whitening diagnostics over ``n`` days for a fixed subset of ``s`` stocks.

    ``mse`` is the elementwise mean squared deviation of the whitened sample
    covariance from the identity, ``||S - I||_F^2 / s^2``.
    """

    s: int
    n: int
    mse: float
    box_m: float
    sample_cov: np.ndarray = field(repr=False, default=None)


def quantile_levels(M: int = DEFAULT_QUANTILES) -> np.ndarray:
    """Interior grid ``j / (M + 1)``, ``j = 1..M``."""
    return np.arange(1, M + 1) / (M + 1.0)


def calibration_error(u, M: int = DEFAULT_QUANTILES) -> CalibrationReport:
    """Calibration of predicted CDF values ``u`` evaluated at the realizations."""
    u = np.asarray(u, dtype=np.float64).ravel()
    if u.size == 0:
        raise ValueError("calibration_error needs at least one observation")
    if np.any(~((u >= 0) & (u <= 1))):
        raise ValueError("CDF values must lie in [0, 1]")
    p = quantile_levels(M)
    s = np.sort(u)
    p_hat = np.searchsorted(s, p, side="left") / u.size  # fraction strictly below p
    return CalibrationReport(M, p, p_hat, float(np.sum((p - p_hat) ** 2)), int(u.size))


def expected_calibration_floor(n_obs: int, M: int = DEFAULT_QUANTILES) -> float:
    """``E[cal]`` for a perfectly calibrated model: ``sum p (1 - p) / n_obs``."""
    p = quantile_levels(M)
    return float(np.sum(p * (1 - p)) / n_obs)


def universe_calibration(u, stock, M: int = DEFAULT_QUANTILES) -> tuple[float, dict]:
    """Per-stock calibration averaged with weights equal to member-day counts.

    ``u`` and ``stock`` are aligned: one CDF value and one stock id per member-day.
    Returns the weighted average and a ``{stock: (cal, n_obs)}`` map.
    """
    u = np.asarray(u, dtype=np.float64).ravel()
    stock = np.asarray(stock).ravel()
    if u.shape != stock.shape:
        raise ValueError("u and stock must align")
    if u.size == 0:
        raise ValueError("universe_calibration needs at least one observation")
    per = {}
    order = np.argsort(stock, kind="stable")
    keys, starts = np.unique(stock[order], return_index=True)
    bounds = list(starts[1:]) + [u.size]
    for key, lo, hi in zip(keys, starts, bounds):
        rep = calibration_error(u[order[lo:hi]], M)
        per[key.item() if hasattr(key, "item") else key] = (rep.cal, rep.n_obs)
    cals = np.array([c for c, _ in per.values()])
    counts = np.array([n for _, n in per.values()], dtype=np.float64)
    return float(np.sum(cals * counts) / counts.sum()), per


def portfolio_pit(samples, realized, weights=None) -> float:
    """Empirical CDF of sampled portfolio returns at the realized portfolio return.

    ``samples`` is ``(S, N)`` joint draws; the portfolio is equal-weighted unless
    ``weights`` is given.
    """
    samples = np.asarray(samples, dtype=np.float64)
    w = np.full(samples.shape[1], 1.0 / samples.shape[1]) if weights is None else np.asarray(weights)
    return float(np.mean(samples @ w < float(np.asarray(realized) @ w)))


def covariance_diagnostics(covariances, means, realized) -> CovarianceReport:
    """Whiten realized returns by the forecast inverse square root and compare to identity.

    Parameters
    ----------
    covariances : (n, s, s) array
    means : (n, s) array
    realized : (n, s) array
        Next-day returns of a fixed subset of ``s`` stocks, one row per day.
    """
    covs = np.asarray(covariances, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    r = np.asarray(realized, dtype=np.float64)
    n, s = r.shape
    if covs.shape != (n, s, s) or means.shape != (n, s):
        raise ValueError(f"shapes disagree: covariances {covs.shape}, means {means.shape}, realized {r.shape}")
    if n < 2:
        raise ValueError("need at least two days")
    rot = np.empty_like(r)
    for i in range(n):
        w, v = sym_eig(covs[i])
        if w[0] < 1e-12:
            raise DecompositionError(
                f"near-singular forecast on day {i}: smallest eigenvalue {w[0]:.3e}", pivot=0)
        rot[i] = v @ ((v.T @ (r[i] - means[i])) / np.sqrt(w))
    S = np.cov(rot, rowvar=False).reshape(s, s)
    sign, logdet = np.linalg.slogdet(S)
    if sign <= 0:
        raise DecompositionError("whitened sample covariance is singular; use more days")
    mse = float(np.sum((S - np.eye(s)) ** 2) / s ** 2)
    box_m = float((n - 1) * (np.trace(S) - logdet - s) / s)
    return CovarianceReport(s, n, mse, box_m, S)


def sharpe_ratio(daily_returns) -> float:
    """Annualized Sharpe ratio with the population standard deviation."""
    x = np.asarray(daily_returns, dtype=np.float64)
    sd = x.std()
    return float(x.mean() / sd * math.sqrt(252.0)) if sd > 0 else 0.0


# ---------------------------------------------------------------------------
# writers


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_metrics(path, metrics: dict) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        json.dump(_jsonable(metrics), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_calibration_curve(path, report: CalibrationReport) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "p_hat"])
        w.writerows((repr(a), repr(b)) for a, b in report.to_rows())
    return path
