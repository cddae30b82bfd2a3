"""Mean-variance portfolios under long-only and gross-leverage constraints, and backtests."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.linalg import cho_solve

from ..factor_model import MomentForecast
from ..numerics import DecompositionError, cholesky_np, sym_eig
from .metrics import sharpe_ratio

MODES = ("long_only", "long_short")
LEVERAGES = ("1", "unconstrained")


@dataclass(frozen=True)
class PortfolioSpec:
    """Constraint set and risk aversion for ``max w^T mu - (lam / 2) w^T Sigma w``.

    ``leverage="1"`` imposes ``||w||_1 = 1``; ``"unconstrained"`` imposes nothing.
    ``long_only`` adds ``w >= 0``.
    """

    mode: str = "long_short"
    leverage: str = "unconstrained"
    lam: float = 1.0
    max_iter: int = 10_000
    tol: float = 1e-12

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        lev = str(self.leverage)
        if lev in ("inf", "none"):
            lev = "unconstrained"
        if lev not in LEVERAGES:
            raise ValueError(f"leverage must be one of {LEVERAGES}, got {self.leverage!r}")
        object.__setattr__(self, "leverage", lev)
        if not self.lam > 0:
            raise ValueError("risk aversion must be positive")

    @property
    def label(self) -> str:
        return f"{self.mode}_L{'1' if self.leverage == '1' else 'inf'}"


@dataclass(frozen=True)
class PortfolioResult:
    weights: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    objective_trace: np.ndarray = field(repr=False, default=None)


def mv_objective(w, mu, cov, lam) -> np.ndarray:
    w = np.asarray(w)
    return w @ mu - 0.5 * lam * np.sum((w @ cov) * w, axis=-1)


# ---------------------------------------------------------------------------
# projections


def project_simplex(v: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Euclidean projection of each row onto ``{w >= 0, sum w = radius}`` (sort-based)."""
    v = np.atleast_2d(v)
    n = v.shape[1]
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - radius
    idx = np.arange(1, n + 1)
    cond = u - css / idx > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(v.shape[0]), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def project_l1_ball(v: np.ndarray, radius: float = 1.0) -> np.ndarray:
    v = np.atleast_2d(v)
    out = v.copy()
    outside = np.abs(v).sum(axis=1) > radius
    if np.any(outside):
        out[outside] = np.sign(v[outside]) * project_simplex(np.abs(v[outside]), radius)
    return out


def project_l1_sphere(v: np.ndarray, radius: float = 1.0) -> np.ndarray:
    """Nearest point with ``||w||_1 = radius``; interior points move out along their sign pattern."""
    v = np.atleast_2d(v)
    out = project_l1_ball(v, radius)
    norm = np.abs(v).sum(axis=1)
    inside = norm < radius
    if np.any(inside):
        s = np.where(v[inside] >= 0, 1.0, -1.0)
        gap = (radius - norm[inside]) / v.shape[1]
        out[inside] = v[inside] + gap[:, None] * s
    return out


def _projector(spec: PortfolioSpec):
    if spec.mode == "long_only" and spec.leverage == "1":
        return project_simplex
    if spec.mode == "long_only":
        return lambda v: np.maximum(np.atleast_2d(v), 0.0)
    if spec.leverage == "1":
        return project_l1_sphere
    return None


def _drop_duplicates(W: np.ndarray, vals: np.ndarray, active: np.ndarray, tol: float = 1e-6) -> None:
    """Deactivate multi-start iterates that share a sign pattern with, and sit near, a better one.

    Within one orthant the problem is a convex QP on a face of the l1 sphere,
    so such iterates head to the same point.
    """
    idx = np.flatnonzero(active)
    if idx.size < 2:
        return
    idx = idx[np.argsort(-vals[idx], kind="stable")]
    P = W[idx]
    sg = np.sign(P)
    same = np.all(sg[:, None, :] == sg[None, :, :], axis=2)
    near = np.abs(P[:, None, :] - P[None, :, :]).max(axis=2) < tol
    for a in range(idx.size):
        if active[idx[a]]:
            dup = np.flatnonzero(same[a, a + 1:] & near[a, a + 1:]) + a + 1
            active[idx[dup]] = False


def _best_signs(w_free: np.ndarray, L: np.ndarray, exhaustive_max: int = 16) -> np.ndarray:
    """Sign vector minimizing ``(1 - s^T w)^2 / (s^T Sigma^{-1} s)`` for an interior ``w``.

    The ratio is twice the objective loss of the best point in ``s^T x >= 1``,
    divided by ``lam``.
    """
    n = w_free.size
    Pinv = cho_solve((L, True), np.eye(n))
    if n <= exhaustive_max:
        S = ((np.arange(2**n)[:, None] >> np.arange(n)) & 1) * 2.0 - 1.0
        score = (1.0 - S @ w_free) ** 2 / np.sum((S @ Pinv) * S, axis=1)
        return S[int(np.argmin(score))]
    base = np.where(w_free >= 0, 1.0, -1.0)
    best, best_score = base, np.inf
    # single-flip local search from sign(w) and from each of its single-flip neighbours
    for start in np.vstack([base, base * (1.0 - 2.0 * np.eye(n))]):
        s, sc = _flip_search(start.copy(), w_free, Pinv)
        if sc < best_score:
            best, best_score = s, sc
    return best


def _flip_search(s: np.ndarray, w_free: np.ndarray, Pinv: np.ndarray) -> tuple[np.ndarray, float]:
    Ps = Pinv @ s
    a, b = s @ w_free, s @ Ps
    diag = np.diag(Pinv)
    while True:
        a_new = a - 2.0 * s * w_free
        b_new = b - 4.0 * s * Ps + 4.0 * diag
        score = (1.0 - a_new) ** 2 / b_new
        i = int(np.argmin(score))
        cur = (1.0 - a) ** 2 / b
        if not score[i] < cur * (1.0 - 1e-12):
            return s, cur
        Ps = Ps - 2.0 * s[i] * Pinv[:, i]
        a, b = a_new[i], b_new[i]
        s[i] = -s[i]


# ---------------------------------------------------------------------------


def optimize_portfolio(forecast: MomentForecast, spec: PortfolioSpec, trace: bool = False) -> PortfolioResult:
    """Maximize the mean-variance objective under ``spec``'s constraints.

    Unconstrained long-short has the closed form ``w* = Sigma^{-1} mu / lam``.
    The other cases use projected gradient ascent with step
    ``1 / (lam * lambda_max)``.  For unit-gross long-short, when
    ``||w*||_1 >= 1`` the problem equals the convex one over the l1 ball.
    Otherwise the optimum is the best of the half-space problems
    ``s^T w >= 1`` over sign vectors ``s``, whose solutions are closed form.
    The sign vector is enumerated for ``n <= 16`` and found by single-flip
    local search from ``sign(w*)`` and its neighbours above that; gradient ascent on the sphere then polishes the
    point.  ``kkt_residual`` is the norm of the projected-gradient step at the
    solution.
    """
    mu = np.asarray(forecast.mean, dtype=np.float64)
    cov = np.asarray(forecast.covariance, dtype=np.float64)
    n = mu.shape[0]
    lam = spec.lam
    try:
        L = cholesky_np(0.5 * (cov + cov.T))
    except DecompositionError as exc:
        raise DecompositionError(f"portfolio covariance is not positive definite: {exc}", exc.pivot) from exc
    w_free = cho_solve((L, True), mu) / lam
    project = _projector(spec)
    if project is None:
        obj = float(mv_objective(w_free, mu, cov, lam))
        resid = float(np.linalg.norm(mu - lam * cov @ w_free))
        return PortfolioResult(w_free, obj, resid, 0, np.array([obj]) if trace else None)

    eta = 1.0 / (lam * sym_eig(cov)[0][-1])
    if spec.mode == "long_short" and spec.leverage == "1":
        nrm = np.abs(w_free).sum()
        if nrm >= 1.0:
            project = project_l1_ball
            starts = (w_free / nrm)[None, :]
        else:
            signs = _best_signs(w_free, L)
            p = cho_solve((L, True), signs)
            x = w_free + (1.0 - signs @ w_free) / (signs @ p) * p
            starts = np.vstack([x, w_free / nrm if nrm > 0 else np.full(n, 1.0 / n)])
    elif spec.leverage == "1":
        starts = project(w_free)
    else:
        starts = np.maximum(w_free, 0.0)[None, :]
    W = project(starts)
    WC = W @ cov
    vals = W @ mu - 0.5 * lam * np.sum(WC * W, axis=1)
    hist = [vals.copy()] if trace else None
    multi = W.shape[0] > 1
    active = np.ones(W.shape[0], dtype=bool)
    it = 0
    for it in range(1, spec.max_iter + 1):
        idx = np.flatnonzero(active)
        Wa = W[idx]
        Wn = project(Wa + eta * (mu - lam * WC[idx]))
        WnC = Wn @ cov
        cur = Wn @ mu - 0.5 * lam * np.sum(WnC * Wn, axis=1)
        step = np.abs(Wn - Wa).max(axis=1)
        done = (step < spec.tol) & (np.abs(cur - vals[idx]) <= spec.tol * (1 + np.abs(cur)))
        W[idx], WC[idx], vals[idx] = Wn, WnC, cur
        if trace:
            hist.append(vals.copy())
        active[idx[done]] = False
        if multi and it % 16 == 0:
            _drop_duplicates(W, vals, active)
        if not active.any():
            break
    best = int(np.argmax(vals))
    w = W[best]
    resid = float(np.linalg.norm(w - project(w + eta * (mu - lam * cov @ w))[0]) / eta)
    tr = np.array([h[best] for h in hist]) if trace else None
    return PortfolioResult(w, float(vals[best]), resid, it, tr)


# ---------------------------------------------------------------------------
# backtest


@dataclass(frozen=True)
class BacktestReport:
    daily_returns: np.ndarray
    sharpe: float
    turnover: float
    cumulative: np.ndarray
    spec: PortfolioSpec | None = None

    def to_dict(self) -> dict:
        return {"sharpe": self.sharpe, "turnover": self.turnover,
                "mean_daily_return": float(np.mean(self.daily_returns)) if self.daily_returns.size else 0.0,
                "n_days": int(self.daily_returns.size),
                "spec": None if self.spec is None else {"mode": self.spec.mode, "leverage": self.spec.leverage,
                                                        "lambda": self.spec.lam}}


def backtest(forecasts: Iterable[MomentForecast], realized: Iterable[np.ndarray], spec: PortfolioSpec,
             norm_constant: float = 1.0) -> BacktestReport:
    """Daily rebalanced mean-variance backtest.

    ``forecasts`` and ``realized`` are aligned per day; each realized vector
    holds the next-day normalized returns of the forecast's stocks.  Portfolio
    returns are reported in raw units (multiplied by ``norm_constant``).
    Turnover is the mean ``||w_t - w_{t-1}||_1`` with weights matched by ticker
    when tickers are present.
    """
    rets, turns = [], []
    prev: dict | None = None
    for fc, r in zip(forecasts, realized):
        w = optimize_portfolio(fc, spec).weights
        rets.append(float(w @ np.asarray(r, dtype=np.float64)) * norm_constant)
        keys = fc.tickers.tolist() if fc.tickers is not None else list(range(w.shape[0]))
        cur = dict(zip(keys, w))
        if prev is not None:
            names = set(prev) | set(cur)
            turns.append(sum(abs(cur.get(k, 0.0) - prev.get(k, 0.0)) for k in names))
        prev = cur
    daily = np.asarray(rets)
    cum = np.cumprod(1.0 + daily) - 1.0
    return BacktestReport(daily, sharpe_ratio(daily) if daily.size else 0.0,
                          float(np.mean(turns)) if turns else 0.0, cum, spec)


def write_cumulative(path, dates, report: BacktestReport) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "daily_return", "cumulative_return"])
        for d, x, c in zip(dates, report.daily_returns, report.cumulative):
            w.writerow([str(d), repr(float(x)), repr(float(c))])
    return path


def all_specs(lam: float = 1.0) -> list[PortfolioSpec]:
    return [PortfolioSpec(m, lev, lam) for m in MODES for lev in LEVERAGES]

