"""Scikit-learn style front end for the factor network."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .._random import substream
from ..data import DayWindows, FeaturePanel, ReturnsPanel, SplitSpec, windows
from ..distributions import ProductStudentT
from ..factor_model import (
    DayParams,
    MomentForecast,
    forecast_moments,
    independent_loglik,
    log_marginal_is,
    marginal_cdf,
    sample_returns,
)
from .checkpoint import Checkpoint
from .config import ModelConfig
from .inference import to_day_params, to_prior
from .network import embed, input_dims, prior_tensors
from .training import train

_CONFIG_FIELDS = tuple(f.name for f in dataclasses.fields(ModelConfig))


class LatentFactorModel(BaseEstimator):
    """Neural latent factor model of next-day stock returns.

    Each stock's lookback window (returns, time-series features and a presence
    flag) and static features are mapped by a shared network to a mean
    ``alpha``, factor exposures ``beta``, an idiosyncratic scale ``sigma`` and
    tail parameter ``nu``.  Returns are ``alpha + beta^T z + sigma * eps`` with
    product Student's-T factors ``z`` and Student's-T noise ``eps``.  Training
    maximizes an importance-weighted bound that uses the closed-form
    moment-matched Gaussian posterior of ``z`` as the proposal.

    Parameters mirror :class:`ModelConfig`.

    Attributes
    ----------
    checkpoint_ : Checkpoint
        Trained (or loaded) weights, config and normalization constant.
    """

    def __init__(self, factors=64, lookback=256, hidden=256, dropout=0.25, arch="attention",
                 seq_layers=2, heads=4, k_iwae=20, lr=1e-4, weight_decay=1e-6, steps=100_000,
                 polyak_start=None, val_every=1000, val_k=20, val_dates=None,
                 variance_mode="matched", diagonal_only=False, seed=0):
        self.factors = factors
        self.lookback = lookback
        self.hidden = hidden
        self.dropout = dropout
        self.arch = arch
        self.seq_layers = seq_layers
        self.heads = heads
        self.k_iwae = k_iwae
        self.lr = lr
        self.weight_decay = weight_decay
        self.steps = steps
        self.polyak_start = polyak_start
        self.val_every = val_every
        self.val_k = val_k
        self.val_dates = val_dates
        self.variance_mode = variance_mode
        self.diagonal_only = diagonal_only
        self.seed = seed

    # -- construction -------------------------------------------------------

    def config(self) -> ModelConfig:
        return ModelConfig(**{k: getattr(self, k) for k in _CONFIG_FIELDS})

    @classmethod
    def from_config(cls, config: ModelConfig) -> LatentFactorModel:
        return cls(**config.to_dict())

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> LatentFactorModel:
        model = cls.from_config(ckpt.config)
        model.checkpoint_ = ckpt
        return model

    @classmethod
    def load(cls, path) -> LatentFactorModel:
        return cls.from_checkpoint(Checkpoint.load(path))

    def save(self, path) -> Path:
        return self._ckpt().save(path)

    def fit(self, panel: ReturnsPanel, features: FeaturePanel | None = None,
            split: SplitSpec | None = None, log=None) -> LatentFactorModel:
        """Train on ``panel`` (normalized returns) with a chronological ``split``.

        Without a split the first 80% of dates train and the next 10% validate.
        """
        if split is None:
            split = SplitSpec.from_fractions(panel.dates, 0.8, 0.1)
        self.checkpoint_ = train(self.config(), panel, features, split, log=log)
        return self

    def _ckpt(self) -> Checkpoint:
        ckpt = getattr(self, "checkpoint_", None)
        if ckpt is None:
            raise NotFittedError("LatentFactorModel is not fitted; call fit() or load a checkpoint")
        return ckpt

    @property
    def weights_(self) -> dict[str, np.ndarray]:
        return self._ckpt().weights

    # -- inference ----------------------------------------------------------

    def _windows(self, panel, features, t, require_next=False) -> DayWindows:
        ckpt = self._ckpt()
        n_ts, n_static = input_dims(ckpt.weights)
        if features is None:
            features = FeaturePanel.empty(panel.n_dates, panel.n_tickers)
        if features.n_ts != n_ts or features.n_static != n_static:
            raise ValueError(f"features have ({features.n_ts}, {features.n_static}) channels; "
                             f"the model expects ({n_ts}, {n_static})")
        return windows(panel, features, t, ckpt.config.lookback, require_next=require_next)

    def prior(self) -> ProductStudentT:
        ps, pn = prior_tensors(self._ckpt().weights)
        return to_prior(ps, pn)

    def embed_windows(self, win: DayWindows) -> DayParams:
        ckpt = self._ckpt()
        emb = embed(ckpt.weights, ckpt.config, win.sequences, win.static)
        return to_day_params(emb, win.tickers, ckpt.config.diagonal_only)

    def embed_day(self, panel: ReturnsPanel, features: FeaturePanel | None, t: int,
                  require_next: bool = False) -> tuple[DayParams, DayWindows]:
        """Decoder parameters for the stocks that are members on date index ``t``."""
        win = self._windows(panel, features, t, require_next)
        return self.embed_windows(win), win

    def forecast_moments(self, panel, features, t: int) -> MomentForecast:
        """Closed-form mean and covariance of day ``t + 1`` returns (normalized units)."""
        day, _ = self.embed_day(panel, features, t)
        return forecast_moments(day, self.prior(), self._ckpt().config.variance_mode)

    def sample_day(self, panel, features, t: int, n: int, seed: int | None = None) -> np.ndarray:
        """``n`` joint draws of day ``t + 1`` returns; the network runs once."""
        day, _ = self.embed_day(panel, features, t)
        seed = self._ckpt().config.seed if seed is None else seed
        return sample_returns(day, self.prior(), n, substream(seed, "sample", t))

    def nll_metrics(self, panel, features, dates, n_posterior: int = 100, n_prior: int = 10_000,
                    seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-date joint and independent negative log-likelihoods per stock.

        Each date ``t`` scores day ``t + 1`` returns of the stocks that are
        members on both days.
        """
        seed = self._ckpt().config.seed if seed is None else seed
        prior = self.prior()
        joint, ind = [], []
        for t in dates:
            day, win = self.embed_day(panel, features, int(t), require_next=True)
            r = win.targets
            n = r.shape[0]
            rng = substream(seed, "eval", int(t), 1)
            joint.append(-log_marginal_is(day, prior, r, n_posterior, rng,
                                          mode=self._ckpt().config.variance_mode) / n)
            ind.append(-independent_loglik(day, prior, r, n_prior, rng).sum() / n)
        return np.asarray(joint), np.asarray(ind)

    def marginal_cdf(self, panel, features, t: int, x, n_draws: int = 200,
                     seed: int | None = None) -> np.ndarray:
        """Per-stock CDF of day ``t + 1`` returns evaluated at ``x`` (members on ``t``)."""
        day, _ = self.embed_day(panel, features, t)
        seed = self._ckpt().config.seed if seed is None else seed
        return marginal_cdf(day, self.prior(), x, n_draws, substream(seed, "eval", int(t), 2))

    def score(self, panel, features, dates) -> float:
        """Negative mean joint NLL per stock over ``dates`` (higher is better)."""
        joint, _ = self.nll_metrics(panel, features, dates)
        return -float(np.mean(joint))

