"""Differentiable posterior and importance-weighted bound for one day."""

from __future__ import annotations

import math

import numpy as np

from ..distributions import ProductStudentT, t_logpdf_op
from ..factor_model import DayParams
from ..numerics import Tensor, cholesky, ops, solve_triangular
from .network import EmbedOutput

_LOG_2PI = math.log(2.0 * math.pi)


def _variance(sigma: Tensor, nu: Tensor, mode: str) -> Tensor:
    s2 = sigma * sigma
    if mode == "raw":
        return s2
    return s2 * nu / (nu - 2.0)


def posterior_tensors(beta: Tensor, alpha: Tensor, sigma: Tensor, nu: Tensor,
                      prior_sigma: Tensor, prior_nu: Tensor, r: np.ndarray,
                      mode: str = "matched") -> tuple[Tensor, Tensor]:
    """Posterior mean and Cholesky factor of the posterior precision (zero prior location)."""
    vx = _variance(sigma, nu, mode)
    vz = _variance(prior_sigma, prior_nu, mode)
    bt_w = ops.transpose(beta) / vx  # (F, N)
    gram = ops.matmul(bt_w, beta)
    prec = (gram + ops.transpose(gram)) * 0.5 + ops.diag(1.0 / vz)
    L = cholesky(prec)
    rhs = ops.matmul(bt_w, Tensor(r) - alpha)
    mean = solve_triangular(L, solve_triangular(L, rhs), trans=True)
    return mean, L


def ciwae_loss(emb: EmbedOutput, prior_sigma: Tensor, prior_nu: Tensor, r, eps: np.ndarray,
               mode: str = "matched", diagonal_only: bool = False) -> Tensor:
    """Negative importance-weighted bound on ``log p(r)``, divided by the number of stocks.

    ``eps`` holds the ``(k, F)`` standard-normal draws that are pushed through
    the reparameterization ``z = mean + L^{-T} eps``.  With
    ``diagonal_only`` the exposures are ignored and the exact factorized
    log-likelihood is returned instead.
    """
    r = np.asarray(r, dtype=np.float64)
    n = r.shape[0]
    if diagonal_only:
        ll = ops.sum(t_logpdf_op(Tensor(r), emb.alpha, emb.sigma, emb.nu))
        return ll * (-1.0 / n)
    k, F = eps.shape
    mean, L = posterior_tensors(emb.beta, emb.alpha, emb.sigma, emb.nu, prior_sigma, prior_nu, r, mode)
    z = ops.transpose(solve_triangular(L, Tensor(eps.T), trans=True)) + mean  # (k, F)
    log_q = ops.sum(ops.log(ops.diagonal(L))) + Tensor(-0.5 * F * _LOG_2PI - 0.5 * (eps * eps).sum(axis=1))
    loc = ops.matmul(z, ops.transpose(emb.beta)) + emb.alpha  # (k, N)
    ll = ops.sum(t_logpdf_op(Tensor(np.broadcast_to(r, (k, n))), loc, emb.sigma, emb.nu), axis=1)
    lp = ops.sum(t_logpdf_op(z, Tensor(0.0), prior_sigma, prior_nu), axis=1)
    log_w = ll + lp - log_q
    bound = ops.logsumexp(log_w) - math.log(k)
    return bound * (-1.0 / n)


def to_day_params(emb: EmbedOutput, tickers=None, diagonal_only: bool = False) -> DayParams:
    beta = emb.beta.numpy()
    if diagonal_only:
        beta = np.zeros_like(beta)
    return DayParams(emb.alpha.numpy().copy(), beta.copy(), emb.sigma.numpy().copy(),
                     emb.nu.numpy().copy(), tickers)


def to_prior(prior_sigma: Tensor, prior_nu: Tensor) -> ProductStudentT:
    F = prior_sigma.shape[0]
    return ProductStudentT(np.zeros(F), prior_sigma.numpy().copy(), prior_nu.numpy().copy())
