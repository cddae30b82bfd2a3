"""Closed-form algebra of the linear Student's-T factor model for one day.

Given per-stock parameters (alpha, B, sigma, nu) and a product-T prior over
the factors, this module provides forecast moments, the moment-matched
Gaussian posterior, sampling, importance-sampled likelihoods and per-stock
marginal CDFs.  Everything here is plain numpy; the differentiable training
path lives in :mod:`latentfactor.model.inference`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .distributions import (
    MIN_NU,
    ProductStudentT,
    standard_t_rvs,
    chisquare_rvs,
    t_cdf_np,
    t_logpdf_np,
    t_variance,
)
from .numerics import cholesky_np
from .numerics.special import lgamma

VARIANCE_MODES = ("matched", "raw")
_LOG_2PI = math.log(2.0 * math.pi)


def component_variance(sigma, nu, mode: str = "matched") -> np.ndarray:
    """Gaussian stand-in variance of a T component: ``sigma^2 nu/(nu-2)`` or ``sigma^2``."""
    if mode == "matched":
        return np.asarray(t_variance(sigma, nu), dtype=np.float64)
    if mode == "raw":
        return np.asarray(sigma, dtype=np.float64) ** 2
    raise ValueError(f"unknown variance mode {mode!r}; expected one of {VARIANCE_MODES}")


@dataclass(frozen=True)
class DayParams:
    """Per-stock decoder parameters for one date, rows aligned with ``tickers``."""

    alpha: np.ndarray
    B: np.ndarray
    sigma: np.ndarray
    nu: np.ndarray
    tickers: np.ndarray | None = None

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        B = np.asarray(self.B, dtype=np.float64)
        if B.ndim == 1:
            B = B[:, None]
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        nu = np.atleast_1d(np.asarray(self.nu, dtype=np.float64))
        n = alpha.shape[0]
        if B.shape[0] != n or sigma.shape != (n,) or nu.shape != (n,):
            raise ValueError(f"DayParams shapes disagree: alpha {alpha.shape}, B {B.shape}, "
                             f"sigma {sigma.shape}, nu {nu.shape}")
        if np.any(~(sigma > 0)):
            raise ValueError("DayParams requires sigma > 0")
        if np.any(~(nu > MIN_NU)):
            raise ValueError("DayParams requires nu > 4")
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(B))):
            raise ValueError("DayParams alpha and B must be finite")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "nu", nu)
        if self.tickers is not None:
            object.__setattr__(self, "tickers", np.asarray(self.tickers, dtype=str))

    @property
    def n_stocks(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_factors(self) -> int:
        return self.B.shape[1]

    def subset(self, rows) -> DayParams:
        rows = np.asarray(rows)
        tick = None if self.tickers is None else self.tickers[rows]
        return DayParams(self.alpha[rows], self.B[rows], self.sigma[rows], self.nu[rows], tick)


@dataclass(frozen=True)
class MomentForecast:
    """Mean vector and covariance matrix of next-day returns."""

    mean: np.ndarray
    covariance: np.ndarray
    tickers: np.ndarray | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.shape[0],) * 2:
            raise ValueError(f"covariance {cov.shape} does not match mean {mean.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    def subset(self, rows) -> MomentForecast:
        rows = np.asarray(rows)
        tick = None if self.tickers is None else self.tickers[rows]
        return MomentForecast(self.mean[rows], self.covariance[np.ix_(rows, rows)], tick)

    def to_dict(self) -> dict:
        out = {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}
        if self.tickers is not None:
            out["tickers"] = self.tickers.tolist()
        return out


@dataclass(frozen=True)
class PosteriorGaussian:
    """Gaussian posterior over factors; ``prec_chol`` is the Cholesky factor of the precision."""

    mean: np.ndarray
    covariance: np.ndarray
    prec_chol: np.ndarray


# ---------------------------------------------------------------------------


def forecast_moments(day: DayParams, prior: ProductStudentT, mode: str = "matched") -> MomentForecast:
    """Mean ``alpha + B mu_z`` and covariance ``Sigma_x + B Sigma_z B^T``."""
    vx = component_variance(day.sigma, day.nu, mode)
    vz = component_variance(prior.sigmas, prior.nus, mode)
    cov = (day.B * vz) @ day.B.T
    cov = 0.5 * (cov + cov.T)
    cov[np.diag_indices_from(cov)] += vx
    return MomentForecast(day.alpha + day.B @ prior.mus, cov, day.tickers)


def posterior(day: DayParams, prior: ProductStudentT, r, mode: str = "matched") -> PosteriorGaussian:
    """Moment-matched conjugate posterior of the factors given one day's returns."""
    r = np.asarray(r, dtype=np.float64)
    vx = component_variance(day.sigma, day.nu, mode)
    vz = component_variance(prior.sigmas, prior.nus, mode)
    Bw = day.B / vx[:, None]
    prec = day.B.T @ Bw
    prec = 0.5 * (prec + prec.T)
    prec[np.diag_indices_from(prec)] += 1.0 / vz
    L = cholesky_np(prec)
    rhs = prior.mus / vz + Bw.T @ (r - day.alpha)
    y = solve_triangular(L, rhs, lower=True)
    mean = solve_triangular(L, y, lower=True, trans="T")
    Linv = solve_triangular(L, np.eye(L.shape[0]), lower=True)
    return PosteriorGaussian(mean, Linv.T @ Linv, L)


def decoder_loglik(day: DayParams, z: np.ndarray, r) -> np.ndarray:
    """``sum_i log t(r_i | alpha_i + beta_i^T z, sigma_i, nu_i)`` for each row of ``z``."""
    loc = day.alpha + np.atleast_2d(z) @ day.B.T
    return t_logpdf_np(np.asarray(r, dtype=np.float64), loc, day.sigma, day.nu).sum(axis=-1)


def log_marginal_is(
    day: DayParams,
    prior: ProductStudentT,
    r,
    n_samples: int,
    rng: np.random.Generator,
    proposal_df: float | None = None,
    mode: str = "matched",
    batch: int = 4096,
) -> float:
    """Importance-sampled ``log p(r)`` with proposals centred on the Gaussian posterior.

    ``proposal_df=None`` uses the Gaussian posterior itself (the IWAE estimate);
    a finite value uses a multivariate T with that many degrees of freedom and
    the same location and scale, which has heavier tails than the target.
    """
    if day.n_factors == 0 or not np.any(day.B):
        # factorized: the factor integral is trivial
        return float(t_logpdf_np(r, day.alpha, day.sigma, day.nu).sum())
    post = posterior(day, prior, r, mode)
    L = post.prec_chol
    F = L.shape[0]
    logdet = float(np.log(np.diag(L)).sum())
    if proposal_df is not None:
        nu = float(proposal_df)
        mvt_const = float(lgamma(0.5 * (nu + F)) - lgamma(0.5 * nu)) - 0.5 * F * math.log(nu * math.pi)
    terms = []
    left = int(n_samples)
    while left > 0:
        k = min(batch, left)
        left -= k
        eps = rng.standard_normal((k, F))
        if proposal_df is None:
            u = eps
            log_q = -0.5 * F * _LOG_2PI + logdet - 0.5 * (eps * eps).sum(axis=1)
        else:
            w = chisquare_rvs(np.full(k, nu), rng) / nu
            u = eps / np.sqrt(w)[:, None]
            log_q = mvt_const + logdet - 0.5 * (nu + F) * np.log1p((u * u).sum(axis=1) / nu)
        z = post.mean + solve_triangular(L, u.T, lower=True, trans="T").T
        terms.append(decoder_loglik(day, z, r) + prior.logpdf(z) - log_q)
    logw = np.concatenate(terms)
    return float(logsumexp(logw) - math.log(logw.shape[0]))


def independent_loglik(
    day: DayParams, prior: ProductStudentT, r, n_draws: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-stock marginal log-densities by averaging over shared prior draws of the factors."""
    r = np.asarray(r, dtype=np.float64)
    if day.n_factors == 0 or not np.any(day.B):
        return t_logpdf_np(r, day.alpha, day.sigma, day.nu)
    z = prior.sample(n_draws, rng)
    loc = day.alpha + z @ day.B.T
    lp = t_logpdf_np(r, loc, day.sigma, day.nu)
    return logsumexp(lp, axis=0) - math.log(n_draws)


def marginal_cdf(
    day: DayParams, prior: ProductStudentT, x, n_draws: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-stock marginal CDF at ``x`` as a mixture over fresh prior factor draws."""
    x = np.asarray(x, dtype=np.float64)
    if day.n_factors == 0 or not np.any(day.B):
        return t_cdf_np(x, day.alpha, day.sigma, day.nu)
    z = prior.sample(n_draws, rng)
    loc = day.alpha + z @ day.B.T
    return t_cdf_np(x, loc, day.sigma, day.nu).mean(axis=0)


def sample_returns(
    day: DayParams, prior: ProductStudentT, n: int, rng: np.random.Generator
) -> np.ndarray:
    """``n`` joint one-day draws ``alpha + B z + sigma * eps``; shape ``(n, N)``."""
    n = int(n)
    if n == 0:
        return np.zeros((0, day.n_stocks))
    z = prior.sample(n, rng)
    eps = standard_t_rvs(np.broadcast_to(day.nu, (n, day.n_stocks)), rng)
    return day.alpha + z @ day.B.T + day.sigma * eps


def gaussian_joint_nll(day: DayParams, prior: ProductStudentT, r, mode: str = "matched") -> float:
    """Exact negative log-density of ``r`` under the moment-matched joint Normal."""
    mf = forecast_moments(day, prior, mode)
    L = cholesky_np(mf.covariance)
    sol = solve_triangular(L, np.asarray(r, dtype=np.float64) - mf.mean, lower=True)
    n = mf.mean.shape[0]
    return float(0.5 * n * _LOG_2PI + np.log(np.diag(L)).sum() + 0.5 * sol @ sol)
