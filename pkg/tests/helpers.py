"""Shared builders for the model and acceptance tests."""

from __future__ import annotations

import itertools

import numpy as np
from scipy import stats

from latentfactor.data import SplitSpec
from latentfactor.model import ModelConfig
from latentfactor.model.inference import ciwae_loss
from latentfactor.model.network import EmbedOutput, embed, init_weights, prior_tensors
from latentfactor.numerics import Tape, Tensor
from latentfactor.synthetic import MarketSpec, generate, make_truth


def tiny_config(arch: str = "attention", **kw) -> ModelConfig:
    base = dict(factors=2, lookback=2, hidden=8, heads=2, dropout=0.0, arch=arch, steps=0, k_iwae=5)
    base.update(kw)
    return ModelConfig(**base)


def tiny_market(n_stocks: int = 4, n_dates: int = 40, seed: int = 0):
    truth = make_truth(MarketSpec(n_stocks=n_stocks, n_factors=2, n_sectors=2), seed=seed)
    m = generate(truth, n_dates, seed=seed)
    c = 0.02
    return m.panel.renormalized(c), m.features, truth.rescaled(c)


def loss_and_grads(config: ModelConfig, weights: dict, panel, features, t: int, eps: np.ndarray):
    """CIWAE loss and tape gradients for every weight (no dropout)."""
    from latentfactor.data import windows

    win = windows(panel, features, t, config.lookback, require_next=True)
    names = sorted(weights)

    def f(*arrays):
        w = dict(zip(names, arrays))
        emb = embed(w, config, win.sequences, win.static)
        ps, pn = prior_tensors(w)
        return ciwae_loss(emb, ps, pn, win.targets, eps, config.variance_mode, config.diagonal_only)

    leaves = [Tensor(weights[k].copy(), requires_grad=True) for k in names]
    with Tape() as tape:
        out = f(*leaves)
    grads = tape.backward(out, leaves)

    def value(ws: dict) -> float:
        return f(*[Tensor(ws[k]) for k in names]).item()

    return out.item(), dict(zip(names, grads)), value


def gradient_check(arch: str, seed: int = 0, h: float = 1e-6) -> tuple[float, int]:
    """Worst per-tensor relative error of tape gradients against central differences.

    Returns ``(max_rel_err, n_checked)``.  Each tensor's error is
    ``max|g - fd| / max(max|fd|, 1e-8)``.
    """
    config = tiny_config(arch)
    panel, features, _ = tiny_market(seed=seed)
    weights = init_weights(config, features.n_ts, features.n_static, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for k in weights:
        # move off the initial biases so every head is exercised away from symmetric points
        weights[k] = np.array(weights[k] + 0.05 * rng.standard_normal(weights[k].shape))
    eps = rng.standard_normal((config.k_iwae, config.factors))
    _, grads, value = loss_and_grads(config, weights, panel, features, 10, eps)
    worst, count = 0.0, 0
    for name, w in weights.items():
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            hi = {k: v.copy() for k, v in weights.items()}
            lo = {k: v.copy() for k, v in weights.items()}
            hi[name][idx] += h
            lo[name][idx] -= h
            fd[idx] = (value(hi) - value(lo)) / (2 * h)
            count += 1
        err = np.max(np.abs(grads[name] - fd)) / max(np.max(np.abs(fd)), 1e-8)
        worst = max(worst, float(err))
    return worst, count


def gaussian_limit_day(n: int = 6, f: int = 2, seed: int = 0, big: float = 1e6):
    """Random day whose Student's-T components are effectively Normal, plus returns."""
    rng = np.random.default_rng(seed)
    alpha = 0.1 * rng.standard_normal(n)
    beta = rng.standard_normal((n, f))
    sigma = rng.uniform(0.5, 1.5, n)
    prior_sigma = rng.uniform(0.5, 1.5, f)
    nu = np.full(n, big)
    prior_nu = np.full(f, big)
    cov = beta @ np.diag(prior_sigma**2 * big / (big - 2)) @ beta.T + np.diag(sigma**2 * big / (big - 2))
    r = rng.multivariate_normal(alpha, cov)
    return alpha, beta, sigma, nu, prior_sigma, prior_nu, r, cov


def emb_from_arrays(alpha, beta, sigma, nu) -> EmbedOutput:
    return EmbedOutput(Tensor(alpha), Tensor(beta), Tensor(sigma), Tensor(nu))


def bound_draws(alpha, beta, sigma, nu, prior_sigma, prior_nu, r, k: int, n_seeds: int,
                seed: int = 0) -> np.ndarray:
    """Per-stock CIWAE loss values for ``n_seeds`` independent draw sets."""
    emb = emb_from_arrays(alpha, beta, sigma, nu)
    ps, pn = Tensor(prior_sigma), Tensor(prior_nu)
    rng = np.random.default_rng(seed)
    f = beta.shape[1]
    return np.array([ciwae_loss(emb, ps, pn, r, rng.standard_normal((k, f))).item()
                     for _ in range(n_seeds)])


def gaussian_joint_nll_oracle(alpha, r, cov) -> float:
    """Per-stock exact Gaussian joint NLL from scipy."""
    return float(-stats.multivariate_normal(alpha, cov).logpdf(r) / len(r))


def desk_split(panel) -> SplitSpec:
    return SplitSpec.from_fractions(panel.dates, 0.6, 0.2)


def l1_sphere_oracle(mu, cov, lam):
    """Global optimum on ``||w||_1 = 1`` by enumerating every support and sign pattern."""
    n, best = mu.size, -np.inf
    for k in range(1, n + 1):
        for S in itertools.combinations(range(n), k):
            S = list(S)
            C = cov[np.ix_(S, S)]
            Ci = np.linalg.inv(C)
            signs = np.array(list(itertools.product((-1.0, 1.0), repeat=k)))
            a = signs @ (Ci @ mu[S])
            b = np.einsum("pi,ij,pj->p", signs, Ci, signs)
            W = (Ci @ (mu[S][:, None] - signs.T * ((a - lam) / b))).T / lam
            ok = np.all(W * signs >= -1e-12, axis=1)
            if ok.any():
                W = W[ok]
                best = max(best, float(np.max(W @ mu[S] - 0.5 * lam * np.einsum("pi,ij,pj->p", W, C, W))))
    return best
