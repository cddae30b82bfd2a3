"""GARCH(1,1) volatility with Hansen skewed Student's-T innovations, per stock."""

from __future__ import annotations

import json
import math

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..distributions import SkewStudentT
from ..numerics.special import lgamma

MIN_OBS = 250
ETA_BOUNDS = (4.01, 200.0)
LAM_BOUNDS = (-0.99, 0.99)
PERSIST_MAX = 0.9999


class GarchFitError(RuntimeError):
    """No restart converged; ``best`` holds the best point found."""

    def __init__(self, message: str, best: dict | None = None):
        super().__init__(message)
        self.best = best


def conditional_variance(r: np.ndarray, omega: float, a: float, b: float, v0: float) -> np.ndarray:
    """``v_t = omega + a r_{t-1}^2 + b v_{t-1}`` for ``t = 0..T`` with ``v_0 = v0``.

    The returned array has ``T + 1`` entries; the last is the one-step forecast.
    """
    drive = np.empty(r.shape[0] + 1)
    drive[0] = v0
    drive[1:] = omega + a * r * r
    return lfilter([1.0], [1.0, -b], drive)


def skewt_logpdf(z: np.ndarray, eta: float, lam: float) -> np.ndarray:
    """Log-density of the standardized Hansen skewed T."""
    c = math.exp(float(lgamma((eta + 1) / 2) - lgamma(eta / 2))) / math.sqrt(math.pi * (eta - 2))
    a = 4.0 * lam * c * (eta - 2) / (eta - 1)
    b = math.sqrt(1.0 + 3.0 * lam * lam - a * a)
    y = b * z + a
    side = np.where(y < 0, 1.0 - lam, 1.0 + lam)
    return math.log(b * c) - 0.5 * (eta + 1) * np.log1p((y / side) ** 2 / (eta - 2))


def garch_nll(params, r: np.ndarray, v0: float | None = None) -> float:
    """Negative log-likelihood of ``r`` under ``(omega, a, b, lam, eta)``."""
    omega, a, b, lam, eta = params
    r = np.asarray(r, dtype=np.float64)
    v0 = float(np.mean(r * r)) if v0 is None else v0
    v = conditional_variance(r, omega, a, b, v0)[:-1]
    if np.any(~(v > 0)):
        return np.inf
    z = r / np.sqrt(v)
    return float(-(skewt_logpdf(z, eta, lam) - 0.5 * np.log(v)).sum())


def _to_natural(u):
    omega, persist, share, lam, eta = u
    return omega, persist * share, persist * (1.0 - share), lam, eta


class SkewTGARCH(BaseEstimator):
    """Zero-mean GARCH(1,1) with Hansen skewed-T innovations for one series.

    Maximum likelihood by L-BFGS-B (projected quasi-Newton) in the box
    coordinates ``(omega, a + b, a / (a + b), lam, eta)``, which keep
    ``a, b >= 0`` and ``a + b < 1``, from ``n_restarts`` seeded starts.

    Attributes
    ----------
    omega_, a_, b_, lam_, eta_ : float
        Fitted parameters.
    loglik_ : float
        Maximized log-likelihood.
    """

    def __init__(self, n_restarts: int = 20, seed: int = 0, max_iter: int = 500):
        self.n_restarts = n_restarts
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, r, y=None) -> SkewTGARCH:
        r = np.asarray(r, dtype=np.float64).ravel()
        if r.shape[0] < MIN_OBS:
            raise ValueError(f"GARCH needs at least {MIN_OBS} observations, got {r.shape[0]}")
        if not np.all(np.isfinite(r)):
            raise ValueError("returns must be finite")
        var = float(np.mean(r * r))
        if not var > 0:
            raise ValueError("returns have zero variance")
        rng = np.random.default_rng([self.seed, 0x6761])
        bounds = [(1e-8 * var, 10.0 * var), (0.0, PERSIST_MAX), (0.0, 1.0), LAM_BOUNDS, ETA_BOUNDS]
        scale = np.array([var, 1.0, 1.0, 1.0, 10.0])

        def objective(x):
            val = garch_nll(_to_natural(x * scale), r, var)
            return val / r.shape[0] if np.isfinite(val) else 1e10

        xb = [(lo / s, hi / s) for (lo, hi), s in zip(bounds, scale)]
        best, best_val, converged = None, np.inf, False
        for k in range(self.n_restarts):
            if k == 0:
                persist = 0.9
                start = np.array([var * (1 - persist), persist, 0.1, 0.0, 8.0])
            else:
                persist = rng.uniform(0.5, 0.995)
                start = np.array([var * (1 - persist) * rng.uniform(0.5, 2.0), persist,
                                  rng.uniform(0.02, 0.4), rng.uniform(-0.3, 0.3), rng.uniform(5.0, 20.0)])
            x0 = np.clip(start / scale, [lo for lo, _ in xb], [hi for _, hi in xb])
            res = minimize(objective, x0, method="L-BFGS-B", bounds=xb,
                           options={"maxiter": self.max_iter})
            if res.fun < best_val:
                best, best_val = res.x * scale, float(res.fun)
            converged |= bool(res.success)
        if best is None or not converged or not np.isfinite(best_val):
            point = None if best is None else dict(zip(("omega", "a", "b", "lam", "eta"), _to_natural(best)))
            raise GarchFitError("GARCH likelihood maximization did not converge", point)
        self.omega_, self.a_, self.b_, self.lam_, self.eta_ = map(float, _to_natural(best))
        self.loglik_ = -best_val * r.shape[0]
        self.v0_ = var
        self.n_obs_ = r.shape[0]
        return self

    @property
    def params_(self) -> tuple[float, float, float, float, float]:
        self._check()
        return self.omega_, self.a_, self.b_, self.lam_, self.eta_

    def _check(self) -> None:
        if not hasattr(self, "omega_"):
            raise NotFittedError("SkewTGARCH is not fitted")

    def next_variance(self, history) -> float:
        """One-step-ahead conditional variance after observing ``history``."""
        self._check()
        h = np.asarray(history, dtype=np.float64).ravel()
        if h.size < 1:
            raise ValueError("history must contain at least one return")
        return float(conditional_variance(h, self.omega_, self.a_, self.b_, self.v0_)[-1])

    def forecast(self, history) -> SkewStudentT:
        """Next-day return distribution: the skewed T scaled by the forecast volatility."""
        return SkewStudentT(self.eta_, self.lam_, 0.0, math.sqrt(self.next_variance(history)))

    def to_dict(self) -> dict:
        self._check()
        return {"kind": "garch", "omega": self.omega_, "a": self.a_, "b": self.b_,
                "lam": self.lam_, "eta": self.eta_, "loglik": self.loglik_, "v0": self.v0_}

    @classmethod
    def from_dict(cls, d: dict) -> SkewTGARCH:
        m = cls()
        m.omega_, m.a_, m.b_, m.lam_, m.eta_ = d["omega"], d["a"], d["b"], d["lam"], d["eta"]
        m.loglik_, m.v0_ = d.get("loglik", float("nan")), d["v0"]
        return m


def simulate_garch(n: int, omega: float, a: float, b: float, lam: float, eta: float,
                   rng: np.random.Generator, burn: int = 1000) -> np.ndarray:
    """Draw a GARCH(1,1) skewed-T path of length ``n`` after ``burn`` warm-up steps."""
    if a + b >= 1:
        raise ValueError("stationarity requires a + b < 1")
    eps = SkewStudentT(eta, lam).sample(n + burn, rng)
    v = omega / (1.0 - a - b)
    out = np.empty(n + burn)
    for t in range(n + burn):
        out[t] = math.sqrt(v) * eps[t]
        v = omega + a * out[t] ** 2 + b * v
    return out[burn:]


def save_models(models: dict[str, SkewTGARCH], path) -> None:
    with open(path, "w") as fh:
        json.dump({k: m.to_dict() for k, m in models.items()}, fh, sort_keys=True)
