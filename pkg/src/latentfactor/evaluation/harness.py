"""Run the metric suite for any day-level forecaster over a set of dates."""

from __future__ import annotations

import numpy as np

from .._random import substream
from ..data import FeaturePanel, ReturnsPanel
from ..distributions import ProductStudentT, t_cdf_np
from ..factor_model import (
    DayParams,
    forecast_moments,
    independent_loglik,
    log_marginal_is,
    marginal_cdf,
    sample_returns,
)
from .metrics import calibration_error, covariance_diagnostics, universe_calibration
from .portfolio import PortfolioSpec, all_specs, backtest


class DayForecaster:
    """Interface: per-date factor-model parameters for stocks present on ``t`` and ``t + 1``."""

    variance_mode = "matched"

    def day(self, t: int) -> tuple[DayParams, ProductStudentT, np.ndarray]:
        """Return day parameters, the factor prior and the panel column of each row."""
        raise NotImplementedError

    def marginal_cdf(self, t: int, day: DayParams, prior: ProductStudentT, x, rng,
                     n_draws: int = 200) -> np.ndarray:
        return marginal_cdf(day, prior, x, n_draws, rng)


class ModelForecaster(DayForecaster):
    """Adapter for a fitted :class:`~latentfactor.model.estimator.LatentFactorModel`."""

    def __init__(self, model, panel: ReturnsPanel, features: FeaturePanel | None):
        self.model = model
        self.panel = panel
        self.features = features
        self.variance_mode = model.checkpoint_.config.variance_mode
        self._prior = model.prior()

    def day(self, t):
        day, win = self.model.embed_day(self.panel, self.features, t, require_next=True)
        return day, self._prior, win.stock_index


class TruthForecaster(DayForecaster):
    """Adapter exposing a synthetic truth (in the panel's normalized units)."""

    def __init__(self, truth, panel: ReturnsPanel, diagonal: bool = False):
        self.truth = truth.without_factors() if diagonal else truth
        self.panel = panel

    def day(self, t):
        cols = np.flatnonzero(self.panel.membership[t] & self.panel.membership[t + 1])
        day = self.truth.day_params(t + 1, cols)
        day = DayParams(day.alpha, day.B, day.sigma, day.nu, self.panel.tickers[cols])
        return day, self.truth.prior(t + 1), cols


class PPCAForecaster(DayForecaster):
    """Rolling PPCA refitted every ``refit_every`` dates on the trailing ``window`` days."""

    def __init__(self, panel: ReturnsPanel, n_factors: int = 12, window: int = 504, refit_every: int = 21):
        from ..baselines.ppca import ppca_fit

        self._fit = ppca_fit
        self.panel = panel
        self.n_factors = n_factors
        self.window = window
        self.refit_every = refit_every
        self._cache = None

    def _model(self, t):
        import warnings

        if self._cache is None or t - self._cache[0] >= self.refit_every or t < self._cache[0]:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                model, cols = self._fit(self.panel, t, self.window, self.n_factors)
            self._cache = (t, model, cols)
        return self._cache[1], self._cache[2]

    def day(self, t):
        model, cols = self._model(t)
        keep = self.panel.membership[t, cols] & self.panel.membership[t + 1, cols]
        full = model.day_params(self.panel.tickers[cols])
        return full.subset(np.flatnonzero(keep)), model.prior(), cols[keep]

    def marginal_cdf(self, t, day, prior, x, rng, n_draws=200):
        mf = forecast_moments(day, prior)
        scale = np.sqrt(np.diag(mf.covariance) * (day.nu - 2.0) / day.nu)
        return t_cdf_np(x, mf.mean, scale, day.nu)


def fixed_subset(panel: ReturnsPanel, dates) -> np.ndarray:
    """Columns that are members on every date ``t`` and ``t + 1`` in ``dates``."""
    dates = np.asarray(dates, dtype=int)
    if dates.size == 0:
        return np.zeros(0, dtype=int)
    need = panel.membership[dates].all(axis=0) & panel.membership[dates + 1].all(axis=0)
    return np.flatnonzero(need)


def evaluate(
    forecaster: DayForecaster,
    panel: ReturnsPanel,
    dates,
    seed: int = 0,
    n_posterior: int = 100,
    n_prior: int = 10_000,
    n_cdf_draws: int = 200,
    n_port_samples: int = 10_000,
    lam: float = 1.0,
    specs: list[PortfolioSpec] | None = None,
    parts: tuple[str, ...] = ("nll", "calibration", "covariance", "portfolio"),
) -> dict:
    """Metric block ``{nll_joint, nll_ind, cal_universe, cal_portfolio, cov_mse, box_m, sharpe, turnover}``.

    Each date ``t`` forecasts day ``t + 1``.  Per-date NLLs are averaged
    arithmetically; covariance diagnostics use the stocks present throughout.
    """
    dates = np.asarray(dates, dtype=int)
    specs = all_specs(lam) if specs is None else specs
    out: dict = {"n_dates": int(dates.size)}
    joint, ind, u_all, s_all, u_port = [], [], [], [], []
    subset = fixed_subset(panel, dates)
    covs, means, real = [], [], []
    fc_by_spec: list = []
    realized: list = []
    for t in dates:
        day, prior, cols = forecaster.day(int(t))
        r = panel.returns[t + 1, cols]
        n = r.shape[0]
        if "nll" in parts:
            rng = substream(seed, "eval", int(t), 1)
            joint.append(-log_marginal_is(day, prior, r, n_posterior, rng, mode=forecaster.variance_mode) / n)
            ind.append(-independent_loglik(day, prior, r, n_prior, rng).sum() / n)
        if "calibration" in parts:
            rng = substream(seed, "eval", int(t), 2)
            u_all.append(forecaster.marginal_cdf(int(t), day, prior, r, rng, n_cdf_draws))
            s_all.append(cols)
            draws = sample_returns(day, prior, n_port_samples, rng)
            u_port.append(float(np.mean(draws.mean(axis=1) < r.mean())))
        mf = None
        if "covariance" in parts or "portfolio" in parts:
            mf = forecast_moments(day, prior, forecaster.variance_mode)
        if "covariance" in parts and subset.size:
            rows = np.searchsorted(cols, subset)
            sub = mf.subset(rows)
            covs.append(sub.covariance)
            means.append(sub.mean)
            real.append(panel.returns[t + 1, subset])
        if "portfolio" in parts:
            fc_by_spec.append(mf)
            realized.append(r)
    if "nll" in parts:
        out["nll_joint"] = float(np.mean(joint)) if joint else None
        out["nll_ind"] = float(np.mean(ind)) if ind else None
        out["nll_joint_per_date"] = joint
    if "calibration" in parts and u_all:
        cal, _ = universe_calibration(np.concatenate(u_all), np.concatenate(s_all))
        out["cal_universe"] = cal
        port = calibration_error(u_port)
        out["cal_portfolio"] = port.cal
        out["calibration_portfolio_report"] = port
    if "covariance" in parts:
        if len(covs) >= 2:
            rep = covariance_diagnostics(np.array(covs), np.array(means), np.array(real))
            out.update(cov_mse=rep.mse, box_m=rep.box_m, cov_subset_size=rep.s)
        else:
            out.update(cov_mse=None, box_m=None, cov_subset_size=int(subset.size))
    if "portfolio" in parts:
        out["sharpe"], out["turnover"] = {}, {}
        for spec in specs:
            rep = backtest(fc_by_spec, realized, spec, panel.norm_constant)
            out["sharpe"][spec.label] = rep.sharpe
            out["turnover"][spec.label] = rep.turnover
    return out



def evaluate_marginals(models: dict, panel: ReturnsPanel, dates) -> dict:
    """Metric block for per-stock univariate forecasters (``{column: SkewTGARCH}``).

    The forecast for day ``t + 1`` conditions on the stock's member returns up
    to ``t``.  Joint, covariance and portfolio metrics do not apply and are null.
    """
    from ..baselines.garch import conditional_variance
    from ..distributions import SkewStudentT

    dates = np.asarray(dates, dtype=int)
    targets = np.zeros(panel.n_dates, dtype=bool)
    targets[dates + 1] = True
    nll, day_of, u_all, s_all = [], [], [], []
    for j, m in sorted(models.items()):
        rows = np.flatnonzero(panel.membership[:, j])
        r = panel.returns[rows, j]
        v = conditional_variance(r, m.omega_, m.a_, m.b_, m.v0_)[:-1]
        # target must be a member on t + 1 with the stock also present on t
        prev_member = np.zeros(rows.shape, dtype=bool)
        prev_member[rows > 0] = panel.membership[rows[rows > 0] - 1, j]
        pick = targets[rows] & prev_member
        if not np.any(pick):
            continue
        dist = SkewStudentT(m.eta_, m.lam_, 0.0, np.sqrt(v[pick]))
        nll.append(-dist.logpdf(r[pick]))
        day_of.append(rows[pick])
        u_all.append(dist.cdf(r[pick]))
        s_all.append(np.full(int(pick.sum()), j))
    out: dict = {"n_dates": int(dates.size), "nll_joint": None, "cal_portfolio": None,
                 "cov_mse": None, "box_m": None, "sharpe": None, "turnover": None}
    if nll:
        # per-date mean over stocks, then the mean over dates
        days = np.concatenate(day_of)
        tot = np.bincount(days, weights=np.concatenate(nll), minlength=panel.n_dates)
        cnt = np.bincount(days, minlength=panel.n_dates)
        out["nll_ind"] = float(np.mean(tot[cnt > 0] / cnt[cnt > 0]))
        out["cal_universe"] = universe_calibration(np.concatenate(u_all), np.concatenate(s_all))[0]
    else:
        out["nll_ind"] = out["cal_universe"] = None
    return out
