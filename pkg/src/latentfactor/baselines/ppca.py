"""Probabilistic PCA loadings with per-stock Student's-T idiosyncratic noise."""

from __future__ import annotations

import json
import warnings

import numpy as np
from scipy.special import polygamma
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ..data import ReturnsPanel
from ..distributions import ProductStudentT, t_cdf_np, t_logpdf_np
from ..factor_model import DayParams, MomentForecast, forecast_moments
from ..numerics import sym_eig
from ..numerics.special import digamma

NU_FLOOR = 4.01
NU_CEIL = 1e3
GAUSSIAN_NU = 1e7  # above the Normal cut-over: the PPCA factors are Gaussian


def fit_student_t(resid: np.ndarray, max_iter: int = 100, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Per-column zero-location Student's-T MLE of ``(sigma, nu)`` by damped Newton.

    Newton runs on ``(log sigma, nu)`` for all columns at once with a
    backtracking line search; ``nu`` is kept in ``[4.01, 1000]``.
    """
    e = np.atleast_2d(np.asarray(resid, dtype=np.float64))
    if e.shape[0] < 2:
        raise ValueError("need at least two residuals per column")
    scale = np.sqrt(np.mean(e * e, axis=0))
    degenerate = ~(scale > 0)
    e = np.where(degenerate, 1.0, e / np.where(degenerate, 1.0, scale))
    nu = np.full(e.shape[1], 8.0)
    s = np.full(e.shape[1], 0.5 * np.log((nu[0] - 2.0) / nu[0]))

    def loglik(s, nu):
        return t_logpdf_np(e, 0.0, np.exp(s), nu).mean(axis=0)

    cur = loglik(s, nu)
    for _ in range(max_iter):
        y2 = e * e * np.exp(-2.0 * s)
        den = nu + y2
        w = (nu + 1.0) / den
        q = y2 / nu
        g_s = (-1.0 + w * y2).mean(axis=0)
        g_n = (0.5 * digamma(0.5 * (nu + 1.0)) - 0.5 * digamma(0.5 * nu) - 0.5 / nu
               + (-0.5 * np.log1p(q) + 0.5 * (nu + 1.0) * q / (nu * (1.0 + q))).mean(axis=0))
        h_ss = (-2.0 * nu * (nu + 1.0) * y2 / den ** 2).mean(axis=0)
        h_sn = (y2 * (y2 - 1.0) / den ** 2).mean(axis=0)
        h_nn = (0.25 * polygamma(1, 0.5 * (nu + 1.0)) - 0.25 * polygamma(1, 0.5 * nu) + 0.5 / nu ** 2
                + (y2 / (2.0 * nu * den) - 0.5 * y2 * (nu * nu + 2.0 * nu + y2) / (nu * den) ** 2).mean(axis=0))
        det = h_ss * h_nn - h_sn ** 2
        concave = (h_ss < 0) & (det > 0)
        # Newton direction where the Hessian is negative definite, gradient ascent otherwise
        d_s = np.where(concave, -(h_nn * g_s - h_sn * g_n) / np.where(concave, det, 1.0), g_s)
        d_n = np.where(concave, -(h_ss * g_n - h_sn * g_s) / np.where(concave, det, 1.0), g_n * nu * nu)
        at_floor = (nu <= NU_FLOOR) & (d_n < 0) | (nu >= NU_CEIL) & (d_n > 0)
        d_n = np.where(at_floor, 0.0, d_n)
        # columns already at their optimum take no step
        active = ~((np.abs(g_s) < 1e-9) & ((np.abs(g_n) < 1e-9) | at_floor))
        d_s = np.where(active, d_s, 0.0)
        d_n = np.where(active, d_n, 0.0)
        slack = 1e-13 * (1.0 + np.abs(cur))
        step = np.ones_like(s)
        new_s, new_nu, new = s, nu, cur
        for _ in range(30):
            cand_s = s + step * d_s
            cand_nu = np.clip(nu + step * d_n, NU_FLOOR, NU_CEIL)
            val = loglik(cand_s, cand_nu)
            ok = val >= cur - slack
            new_s = np.where(ok, cand_s, new_s)
            new_nu = np.where(ok, cand_nu, new_nu)
            new = np.where(ok, val, new)
            if np.all(ok):
                break
            step = np.where(ok, step, 0.5 * step)
        gain = new - cur
        s, nu, cur = new_s, new_nu, new
        if not np.any(active) or np.all(np.abs(gain) < tol):
            break
    sigma = np.exp(s) * np.where(degenerate, 0.0, scale)
    return sigma, nu


class PPCA(BaseEstimator):
    """Eigen-decomposition factor model with Student's-T residuals.

    Loadings are the top eigenvectors of the sample covariance scaled by
    ``sqrt(lambda_j - mean discarded eigenvalue)``; each stock's residual
    (the part of its demeaned return outside the retained subspace) then gets
    a Student's-T fit.

    Parameters
    ----------
    n_factors : int
        Number of retained components (0 gives a diagonal model).
    window : int
        Fit window length in days for rolling use.
    refit_every : int
        Days between refits in :func:`rolling_ppca`.
    """

    def __init__(self, n_factors: int = 12, window: int = 504, refit_every: int = 21):
        self.n_factors = n_factors
        self.window = window
        self.refit_every = refit_every

    def fit(self, X, y=None) -> PPCA:
        """Fit on a ``(W, N)`` matrix of returns without gaps."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or not np.all(np.isfinite(X)):
            raise ValueError("PPCA.fit expects a finite (days, stocks) matrix")
        W, N = X.shape
        F = int(self.n_factors)
        if not 0 <= F <= N:
            raise ValueError(f"n_factors must lie in [0, {N}]")
        if W <= F:
            raise ValueError(f"fit window ({W} days) must exceed the factor count ({F})")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        cov = Xc.T @ Xc / W
        lam, U = sym_eig(cov)
        lam, U = lam[::-1], U[:, ::-1]
        lam = np.maximum(lam, 0.0)
        self.noise_variance_ = float(lam[F:].mean()) if F < N else 0.0
        self.explained_variance_ = lam[:F]
        Uf = U[:, :F]
        self.components_ = Uf
        self.loadings_ = Uf * np.sqrt(np.maximum(lam[:F] - self.noise_variance_, 0.0))
        resid = Xc - (Xc @ Uf) @ Uf.T
        rms = np.sqrt(np.mean(resid * resid, axis=0))
        tiny = rms <= 1e-12 * max(1.0, float(np.sqrt(np.trace(cov) / N)))
        sigma, nu = fit_student_t(np.where(tiny, 0.0, resid))
        # a retained subspace covering a stock leaves nothing idiosyncratic
        self.idio_sigma_ = np.where(tiny, 1e-12, sigma)
        self.idio_nu_ = np.where(tiny, 30.0, nu)
        self.n_obs_ = W
        return self

    def _check(self) -> None:
        if not hasattr(self, "loadings_"):
            raise NotFittedError("PPCA is not fitted")

    def day_params(self, tickers=None) -> DayParams:
        self._check()
        return DayParams(self.mean_, self.loadings_, self.idio_sigma_, self.idio_nu_, tickers)

    def prior(self) -> ProductStudentT:
        F = self.loadings_.shape[1]
        return ProductStudentT(np.zeros(F), np.ones(F), np.full(F, GAUSSIAN_NU))

    def forecast(self, tickers=None) -> MomentForecast:
        """Mean and ``loadings loadings^T + diag(matched idiosyncratic variances)``."""
        return forecast_moments(self.day_params(tickers), self.prior())

    def marginal_cdf(self, x) -> np.ndarray:
        """T CDF with the forecast mean, total marginal variance and the idiosyncratic tail."""
        mf = self.forecast()
        nu = self.idio_nu_
        scale = np.sqrt(np.diag(mf.covariance) * (nu - 2.0) / nu)
        return t_cdf_np(x, mf.mean, scale, nu)

    def to_dict(self) -> dict:
        self._check()
        return {"kind": "ppca", "params": self.get_params(), "mean": self.mean_.tolist(),
                "loadings": self.loadings_.tolist(), "idio_sigma": self.idio_sigma_.tolist(),
                "idio_nu": self.idio_nu_.tolist(), "noise_variance": self.noise_variance_}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def ppca_fit(panel: ReturnsPanel, t: int, window: int = 504, n_factors: int = 12) -> tuple[PPCA, np.ndarray]:
    """Fit on the ``window`` days ending at date index ``t`` (inclusive).

    Only stocks that are members on every day of the window are used; the
    column indices of the fitted stocks are returned with the model.
    """
    if window <= n_factors:
        raise ValueError(f"window ({window}) must exceed n_factors ({n_factors})")
    lo = t - window + 1
    if lo < 0:
        raise ValueError(f"date index {t} has fewer than {window} days of history")
    full = panel.membership[lo:t + 1].all(axis=0)
    dropped = int((panel.membership[t] & ~full).sum())
    if dropped:
        warnings.warn(f"{dropped} stock(s) with gaps in the fit window excluded", stacklevel=2)
    cols = np.flatnonzero(full)
    X = panel.returns[lo:t + 1][:, cols]
    F = min(n_factors, cols.size)
    model = PPCA(n_factors=F, window=window).fit(X)
    return model, cols


def rolling_ppca(panel: ReturnsPanel, dates, window: int = 504, refit_every: int = 21,
                 n_factors: int = 12):
    """Yield ``(t, model, cols)`` for each forecast date, refitting every ``refit_every`` dates."""
    model, cols, last = None, None, None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for t in dates:
            t = int(t)
            if model is None or t - last >= refit_every:
                model, cols = ppca_fit(panel, t, window, n_factors)
                last = t
            yield t, model, cols

