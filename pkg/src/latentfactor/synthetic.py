"""Ground-truth linear factor markets with known parameters.

Returns follow ``r_{t+1} = alpha + B_t z_{t+1} + sigma * eps`` with a product
Student's-T factor law (zero location) and Student's-T idiosyncratic noise.
Exposures are a smooth function of a stock's sector and a persistent per-stock
latent that is revealed, with noise, through a feature channel, so a network
can learn exposures from features rather than from return history alone.

All truth parameters are stored in raw return units; :meth:`SyntheticTruth.rescaled`
maps them to the normalized units a fitted model works in.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import FeaturePanel, ReturnsPanel
from .distributions import ProductStudentT, standard_t_rvs
from .factor_model import (
    DayParams,
    MomentForecast,
    forecast_moments,
    log_marginal_is,
    marginal_cdf,
)

TS_CHANNELS = ("latent_signal", "log_vol_signal", "alpha_signal", "momentum_20d")
TRUTH_FORMAT = 1


@dataclass(frozen=True)
class SyntheticTruth:
    """Known parameters of a synthetic market (raw return units).

    Parameters
    ----------
    alpha, sigma, nu : (N,) arrays
        Per-stock mean, idiosyncratic T scale and T degrees of freedom.
    sector : (N,) int array
        Sector index per stock, also exported as a one-hot static feature.
    latent : (N,) array
        Persistent per-stock latent driving the nonlinear part of the exposures.
    sector_loadings : (n_sectors, F) array
        Affine part of the exposures per sector.
    sine_freq, sine_phase, sine_amp : (F,) arrays
        Nonlinear part ``amp * clip(sin(freq * latent + phase), -0.8, 0.8)``.
    prior_sigma, prior_nu : (F,) arrays
        Factor T scales and degrees of freedom (location fixed at 0).
    drift : float
        Amplitude of a slow sinusoidal drift of the latent over time (0 = static exposures).
    regime_day : int or None
        Date index from which idiosyncratic and factor scales are multiplied by ``regime_scale``.
    """

    alpha: np.ndarray
    sigma: np.ndarray
    nu: np.ndarray
    sector: np.ndarray
    latent: np.ndarray
    sector_loadings: np.ndarray
    sine_freq: np.ndarray
    sine_phase: np.ndarray
    sine_amp: np.ndarray
    prior_sigma: np.ndarray
    prior_nu: np.ndarray
    drift: float = 0.0
    drift_period: float = 750.0
    drift_phase: np.ndarray | None = None
    regime_day: int | None = None
    regime_scale: float = 1.0
    feature_noise: float = 0.1
    seed: int = 0
    raw_scale: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "sigma", "nu", "latent", "sine_freq", "sine_phase", "sine_amp",
                     "prior_sigma", "prior_nu", "sector_loadings"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "sector", np.asarray(self.sector, dtype=int))
        if self.drift_phase is None:
            object.__setattr__(self, "drift_phase", np.zeros_like(self.latent))
        else:
            object.__setattr__(self, "drift_phase", np.asarray(self.drift_phase, dtype=np.float64))
        if np.any(~(self.sigma > 0)) or np.any(~(self.prior_sigma > 0)):
            raise ValueError("truth scales must be positive")
        if np.any(~(self.nu > 4)) or np.any(~(self.prior_nu > 4)):
            raise ValueError("truth degrees of freedom must exceed 4")
        n = self.alpha.shape[0]
        if not (self.sigma.shape == self.nu.shape == self.latent.shape == self.sector.shape == (n,)):
            raise ValueError("per-stock truth vectors must share one length")
        if self.n_factors and np.linalg.matrix_rank(self.exposures(0)) < min(n, self.n_factors):
            raise ValueError("exposure matrix is rank deficient")

    @property
    def n_stocks(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_factors(self) -> int:
        return self.prior_sigma.shape[0]

    @property
    def n_sectors(self) -> int:
        return self.sector_loadings.shape[0]

    def latent_at(self, t: int) -> np.ndarray:
        if self.drift == 0.0:
            return self.latent
        return self.latent + self.drift * np.sin(2.0 * np.pi * t / self.drift_period + self.drift_phase)

    def exposures(self, t: int) -> np.ndarray:
        """Exposure matrix ``B_t`` (rows are stocks) applying to returns on date ``t``."""
        if self.n_factors == 0:
            return np.zeros((self.n_stocks, 0))
        lat = self.latent_at(t)
        wave = np.clip(np.sin(lat[:, None] * self.sine_freq + self.sine_phase), -0.8, 0.8)
        return self.sector_loadings[self.sector] + self.sine_amp * wave

    def _scale(self, t: int) -> float:
        return self.regime_scale if self.regime_day is not None and t >= self.regime_day else 1.0

    def prior(self, t: int = 0) -> ProductStudentT:
        s = self._scale(t)
        return ProductStudentT(np.zeros(self.n_factors), self.prior_sigma * s, self.prior_nu)

    def day_params(self, t: int, stocks=None) -> DayParams:
        """Decoder parameters for returns dated ``t`` (the day-``t`` realization)."""
        rows = np.arange(self.n_stocks) if stocks is None else np.asarray(stocks)
        s = self._scale(t)
        return DayParams(self.alpha[rows], self.exposures(t)[rows], self.sigma[rows] * s, self.nu[rows])

    def rescaled(self, c: float) -> SyntheticTruth:
        """The same market expressed in returns divided by ``c``."""
        return replace(self, alpha=self.alpha / c, sigma=self.sigma / c,
                       prior_sigma=self.prior_sigma / c, raw_scale=self.raw_scale / c)

    def without_factors(self) -> SyntheticTruth:
        """Diagonal-only variant with each stock's total variance kept on its idiosyncratic term."""
        var_tot = np.diag(forecast_moments(self.day_params(0), self.prior(0)).covariance)
        sigma = np.sqrt(var_tot * (self.nu - 2.0) / self.nu)
        return replace(self, sigma=sigma, sector_loadings=np.zeros((self.n_sectors, 0)),
                       sine_freq=np.zeros(0), sine_phase=np.zeros(0), sine_amp=np.zeros(0),
                       prior_sigma=np.zeros(0), prior_nu=np.zeros(0))

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        out = {"format": TRUTH_FORMAT}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticTruth:
        d = dict(d)
        if d.pop("format", None) != TRUTH_FORMAT:
            raise ValueError("unrecognized truth file format")
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> SyntheticTruth:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class MarketSpec:
    """Recipe for drawing a random :class:`SyntheticTruth`."""

    n_stocks: int = 48
    n_factors: int = 4
    n_sectors: int = 6
    raw_scale: float = 0.02
    factor_scale: float = 0.8
    idio_scale: tuple[float, float] = (0.6, 1.2)
    idio_nu: tuple[float, float] = (5.0, 12.0)
    factor_nu: tuple[float, float] = (5.0, 10.0)
    alpha_scale: float = 0.03
    drift: float = 0.0
    regime_day: int | None = None
    regime_scale: float = 1.0
    feature_noise: float = 0.1


def make_truth(spec: MarketSpec = MarketSpec(), seed: int = 0) -> SyntheticTruth:
    """Draw a random market from ``spec`` deterministically from ``seed``."""
    rng = np.random.default_rng([seed, 0x7275])
    sector = np.arange(spec.n_stocks) % spec.n_sectors
    rng.shuffle(sector)
    for _ in range(100):
        try:
            return _draw_truth(spec, seed, rng, sector)
        except ValueError:
            continue
    raise RuntimeError("could not draw a full-rank exposure matrix")


def _draw_truth(spec: MarketSpec, seed: int, rng: np.random.Generator, sector: np.ndarray) -> SyntheticTruth:
    n, f, ns = spec.n_stocks, spec.n_factors, spec.n_sectors
    c = spec.raw_scale
    return SyntheticTruth(
        alpha=c * spec.alpha_scale * rng.standard_normal(n),
        sigma=c * rng.uniform(*spec.idio_scale, n),
        nu=rng.uniform(*spec.idio_nu, n),
        sector=sector,
        latent=rng.uniform(-np.pi, np.pi, n),
        # first factor acts as a broad market factor
        sector_loadings=rng.normal(0.0, 0.5, (ns, f)) + (np.arange(f) == 0) * 1.0,
        sine_freq=rng.uniform(0.5, 2.0, f),
        sine_phase=rng.uniform(0.0, 2.0 * np.pi, f),
        sine_amp=rng.uniform(0.5, 1.0, f),
        prior_sigma=c * spec.factor_scale * rng.uniform(0.7, 1.3, f),
        prior_nu=rng.uniform(*spec.factor_nu, f),
        drift=spec.drift,
        drift_phase=rng.uniform(0.0, 2.0 * np.pi, n),
        regime_day=spec.regime_day,
        regime_scale=spec.regime_scale,
        feature_noise=spec.feature_noise,
        seed=seed,
        raw_scale=c,
    )


# ---------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class SyntheticMarket:
    """A generated dataset: raw-unit panel, features and the realized factors."""

    truth: SyntheticTruth
    panel: ReturnsPanel
    features: FeaturePanel
    factors: np.ndarray = field(repr=False)


def _membership(n_dates: int, n_stocks: int, churn: float, rng: np.random.Generator) -> np.ndarray:
    member = np.ones((n_dates, n_stocks), dtype=bool)
    if churn <= 0 or n_stocks == 0:
        return member
    n_churn = int(round(churn * n_stocks))
    for j in rng.choice(n_stocks, size=n_churn, replace=False):
        kind = rng.integers(3)
        if kind == 0:  # late entry
            member[: rng.integers(1, n_dates // 2 + 1), j] = False
        elif kind == 1:  # early exit
            member[rng.integers(n_dates // 2, n_dates):, j] = False
        else:  # temporary gap
            start = rng.integers(0, max(1, n_dates - 20))
            member[start:start + rng.integers(1, 20), j] = False
    return member


def generate(
    truth: SyntheticTruth,
    n_dates: int,
    seed: int | None = None,
    churn: float = 0.0,
    start_date: str = "2000-01-03",
) -> SyntheticMarket:
    """Simulate ``n_dates`` business days from ``truth``.

    The returned panel is in raw units (``norm_constant`` 1).  Time-series
    features on date ``t`` use information up to and including ``t``:

    * ``latent_signal``: the exposure latent plus Gaussian noise
    * ``log_vol_signal``: log of the idiosyncratic scale over ``raw_scale`` plus noise
    * ``alpha_signal``: the mean return over ``raw_scale`` times 30 plus noise
    * ``momentum_20d``: trailing 20-day mean return over ``raw_scale``

    Static features are the sector one-hot.
    """
    seed = truth.seed if seed is None else seed
    rng = np.random.default_rng([seed, 0x6D6B74])
    n, f = truth.n_stocks, truth.n_factors
    dates = np.busday_offset(np.datetime64(start_date, "D"), np.arange(n_dates), roll="forward")
    tickers = np.array([f"S{j:03d}" for j in range(n)])
    scale = np.array([truth._scale(t) for t in range(n_dates)])
    z = truth.prior(0).sample(n_dates, rng) * scale[:, None]
    eps = standard_t_rvs(np.broadcast_to(truth.nu, (n_dates, n)), rng)
    if truth.drift == 0.0:
        common = z @ truth.exposures(0).T
    else:
        common = np.stack([truth.exposures(t) @ z[t] for t in range(n_dates)])
    raw = truth.alpha + common + truth.sigma * scale[:, None] * eps
    member = _membership(n_dates, n, churn, rng)
    noise = truth.feature_noise
    c = truth.raw_scale
    lat = np.stack([truth.latent_at(t) for t in range(n_dates)])
    log_vol = np.log(truth.sigma / c)[None, :] + np.log(scale)[:, None]
    csum = np.cumsum(np.vstack([np.zeros((1, n)), raw]), axis=0)
    lo = np.maximum(np.arange(n_dates) - 19, 0)
    momentum = (csum[np.arange(n_dates) + 1] - csum[lo]) / (np.arange(n_dates) + 1 - lo)[:, None] / c
    ts = np.stack([
        lat + noise * rng.standard_normal((n_dates, n)),
        log_vol + noise * rng.standard_normal((n_dates, n)),
        np.broadcast_to(30.0 * truth.alpha / c, (n_dates, n)) + noise * rng.standard_normal((n_dates, n)),
        momentum,
    ], axis=2)
    static = np.eye(truth.n_sectors)[truth.sector]
    panel = ReturnsPanel(dates, tickers, member, np.where(member, raw, np.nan), 1.0)
    features = FeaturePanel(ts, static, TS_CHANNELS,
                            tuple(f"sector_{k}" for k in range(truth.n_sectors)))
    return SyntheticMarket(truth, panel, features, z)


# ---------------------------------------------------------------------------
# oracles


def true_moments(truth: SyntheticTruth, t: int, stocks=None) -> MomentForecast:
    """Exact mean and covariance of the returns dated ``t`` (truth units)."""
    return forecast_moments(truth.day_params(t, stocks), truth.prior(t))


def true_nll_joint(
    truth: SyntheticTruth,
    r,
    t: int,
    stocks=None,
    n_samples: int = 10_000,
    seed: int = 0,
    proposal_df: float = 5.0,
) -> float:
    """Per-stock negative log-likelihood ``-log p(r) / N`` of one day's returns.

    ``r`` must be in the units of ``truth``.  Without factors the density
    factorizes and is evaluated exactly; otherwise the factor integral is
    importance sampled with multivariate-T proposals centred on the
    moment-matched Gaussian posterior.
    """
    day = truth.day_params(t, stocks)
    r = np.asarray(r, dtype=np.float64)
    if day.n_factors == 0 or not np.any(day.B):
        from .distributions import t_logpdf_np

        return float(-t_logpdf_np(r, day.alpha, day.sigma, day.nu).sum() / day.n_stocks)
    rng = np.random.default_rng([seed, 0x6E6C6C, t])
    ll = log_marginal_is(day, truth.prior(t), r, n_samples, rng, proposal_df=proposal_df)
    return -ll / day.n_stocks


def true_marginal_cdf(
    truth: SyntheticTruth, x, t: int, stocks=None, n_draws: int = 200, rng=None
) -> np.ndarray:
    """Per-stock marginal CDF values of ``x`` (returns dated ``t``), mixture over factor draws."""
    rng = np.random.default_rng() if rng is None else rng
    return marginal_cdf(truth.day_params(t, stocks), truth.prior(t), x, n_draws, rng)


def write_truth(truth: SyntheticTruth, out_dir) -> Path:
    path = Path(out_dir) / "truth.json"
    truth.save(path)
    return path
