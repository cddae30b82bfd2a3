"""Student's T, Normal and Hansen skewed-T distribution machinery.

Scalar and vectorised numpy routines live alongside :func:`t_logpdf_op`, the
fused differentiable log-density used on the training tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtr

from .numerics import Tensor, as_tensor, custom_op
from .numerics.linalg import cholesky_np
from .numerics.special import digamma, lgamma, lgamma_diff
from .numerics.tensor import _broadcast_shape

NU_CAP = 1e6
"""Above this many degrees of freedom the Normal limit is used."""

MIN_NU = 4.0
_LOG_2PI = math.log(2.0 * math.pi)
_LOG_PI = math.log(math.pi)

BETACF_MAXIT = 200
BETACF_EPS = 1e-12
_TINY = 1e-300


@dataclass(frozen=True)
class StudentT:
    mu: float
    sigma: float
    nu: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"StudentT scale must be positive, got {self.sigma}")
        if not self.nu > MIN_NU:
            raise ValueError(f"StudentT degrees of freedom must exceed {MIN_NU}, got {self.nu}")

    @property
    def variance(self) -> float:
        return t_variance(self.sigma, self.nu)


@dataclass(frozen=True)
class ProductStudentT:
    """Independent Student's T components; the joint density is the product."""

    mus: np.ndarray
    sigmas: np.ndarray
    nus: np.ndarray

    def __post_init__(self):
        mus, sigmas, nus = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in
                            (self.mus, self.sigmas, self.nus))
        if not (mus.shape == sigmas.shape == nus.shape) or mus.ndim != 1:
            raise ValueError("ProductStudentT parameters must be equal-length vectors")
        if np.any(~(sigmas > 0)) or np.any(~(nus > MIN_NU)):
            raise ValueError("ProductStudentT requires sigma > 0 and nu > 4 componentwise")
        object.__setattr__(self, "mus", mus)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "nus", nus)

    def __len__(self) -> int:
        return self.mus.shape[0]

    def component(self, i: int) -> StudentT:
        return StudentT(float(self.mus[i]), float(self.sigmas[i]), float(self.nus[i]))

    def logpdf(self, x) -> np.ndarray:
        """Joint log-density; ``x`` has trailing dimension ``len(self)``."""
        return t_logpdf_np(x, self.mus, self.sigmas, self.nus).sum(axis=-1)

    def variances(self) -> np.ndarray:
        return t_variance(self.sigmas, self.nus)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        eps = standard_t_rvs(np.broadcast_to(self.nus, (n, len(self))), rng)
        return self.mus + self.sigmas * eps


@dataclass(frozen=True)
class GaussianFull:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"covariance shape {cov.shape} does not match mean {mean.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def chol(self) -> np.ndarray:
        return cholesky_np(self.covariance)


# ---------------------------------------------------------------------------
# Student's T


def t_variance(sigma, nu):
    """Variance ``sigma^2 nu / (nu - 2)``; the Normal limit above :data:`NU_CAP`."""
    sigma = np.asarray(sigma, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    ratio = np.where(nu > NU_CAP, 1.0, nu / (nu - 2.0))
    out = sigma * sigma * ratio
    return out if out.ndim else float(out)


def _t_log_norm(nu: np.ndarray) -> np.ndarray:
    # log Gamma((nu+1)/2) - log Gamma(nu/2) - 0.5 log(pi nu), Normal limit above the cap
    nu = np.asarray(nu, dtype=np.float64)
    capped = nu > NU_CAP
    safe = np.where(capped, 10.0, nu)
    val = lgamma_diff(0.5 * safe, 0.5) - 0.5 * (_LOG_PI + np.log(safe))
    return np.where(capped, -0.5 * _LOG_2PI, val)


def t_logpdf_np(x, mu, sigma, nu) -> np.ndarray:
    """Elementwise Student's T log-density (numpy broadcasting)."""
    x, mu, sigma, nu = (np.asarray(v, dtype=np.float64) for v in (x, mu, sigma, nu))
    y = (x - mu) / sigma
    capped = nu > NU_CAP
    safe = np.where(capped, 10.0, nu)
    tail = -0.5 * (safe + 1.0) * np.log1p(y * y / safe)
    body = np.where(capped, -0.5 * y * y, tail)
    return _t_log_norm(nu) - np.log(sigma) + body


def t_logpdf(dist: StudentT, x):
    out = t_logpdf_np(x, dist.mu, dist.sigma, dist.nu)
    return out if np.ndim(out) else float(out)


def t_logpdf_op(x, mu, sigma, nu) -> Tensor:
    """Differentiable Student's T log-density with analytic gradients in all arguments.

    Arguments broadcast under the package's suffix rule.
    """
    x, mu, sigma, nu = (as_tensor(v) for v in (x, mu, sigma, nu))
    shape = x.shape
    for other in (mu, sigma, nu):
        shape = _broadcast_shape(shape, other.shape, "t_logpdf")
    xd, md, sd, nd = x.data, mu.data, sigma.data, nu.data
    capped = nd > NU_CAP
    safe = np.where(capped, 10.0, nd)
    y = (xd - md) / sd
    y2 = y * y
    q = y2 / safe
    body = np.where(capped, -0.5 * y2, -0.5 * (safe + 1.0) * np.log1p(q))
    out = np.broadcast_to(_t_log_norm(nd) - np.log(sd) + body, shape)

    def bw(g):
        # d/dx of the quadratic form: -(nu+1) y / (sigma (nu + y^2)); Normal: -y / sigma
        w = np.where(capped, 1.0, (safe + 1.0) / (safe + y2))
        dx = -w * y / sd
        dsig = (-1.0 + w * y2) / sd
        dnu = np.where(
            capped,
            0.0,
            0.5 * digamma(0.5 * (safe + 1.0)) - 0.5 * digamma(0.5 * safe) - 0.5 / safe
            - 0.5 * np.log1p(q) + 0.5 * (safe + 1.0) * q / (safe * (1.0 + q)),
        )
        return g * dx, -g * dx, g * dsig, g * dnu

    return custom_op(np.array(out), (x, mu, sigma, nu), bw)


def betainc(a, b, x):
    """Regularized incomplete beta ``I_x(a, b)`` by Lentz's continued fraction."""
    a, b, x = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (a, b, x)))
    return _betainc(a, b, x, 1.0 - x)


def _betainc(a, b, x, xc):
    # xc = 1 - x supplied separately to avoid cancellation near x = 1
    a, b, x, xc = np.broadcast_arrays(a, b, x, xc)
    out = np.zeros(a.shape)
    out[xc <= 0.0] = 1.0
    inner = (x > 0.0) & (xc > 0.0)
    if not np.any(inner):
        return out
    a_, b_, x_, xc_ = a[inner], b[inner], x[inner], xc[inner]
    big_first = a_ >= b_
    hi = np.where(big_first, a_, b_)
    lo = np.where(big_first, b_, a_)
    log_front = (lgamma_diff(hi, lo) - lgamma(lo)
                 + a_ * np.log(x_) + b_ * np.log(xc_))
    front = np.exp(log_front)
    direct = x_ < (a_ + 1.0) / (a_ + b_ + 2.0)
    res = np.empty_like(x_)
    if np.any(direct):
        d = direct
        res[d] = front[d] * _betacf(a_[d], b_[d], x_[d]) / a_[d]
    if np.any(~direct):
        s = ~direct
        res[s] = 1.0 - front[s] * _betacf(b_[s], a_[s], xc_[s]) / b_[s]
    out[inner] = res
    return out


def _betacf(a, b, x):
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _TINY, _TINY, d)
    d = 1.0 / d
    h = d.copy()
    active = np.ones(x.shape, dtype=bool)
    idx = np.arange(x.shape[0])
    for m in range(1, BETACF_MAXIT + 1):
        if not active.any():
            break
        i = idx[active]
        ai, bi, xi = a[i], b[i], x[i]
        ci, di, hi = c[i], d[i], h[i]
        m2 = 2 * m
        aa = m * (bi - m) * xi / ((qam[i] + m2) * (ai + m2))
        di = 1.0 + aa * di
        di = np.where(np.abs(di) < _TINY, _TINY, di)
        ci = 1.0 + aa / ci
        ci = np.where(np.abs(ci) < _TINY, _TINY, ci)
        di = 1.0 / di
        hi = hi * di * ci
        aa = -(ai + m) * (qab[i] + m) * xi / ((ai + m2) * (qap[i] + m2))
        di = 1.0 + aa * di
        di = np.where(np.abs(di) < _TINY, _TINY, di)
        ci = 1.0 + aa / ci
        ci = np.where(np.abs(ci) < _TINY, _TINY, ci)
        di = 1.0 / di
        delta = di * ci
        hi = hi * delta
        c[i], d[i], h[i] = ci, di, hi
        active[i] = np.abs(delta - 1.0) >= BETACF_EPS
    return h


def standard_t_cdf(t, nu) -> np.ndarray:
    """CDF of the standard (location 0, scale 1) Student's T."""
    t, nu = np.broadcast_arrays(np.asarray(t, dtype=np.float64), np.asarray(nu, dtype=np.float64))
    shape = t.shape
    t, nu = t.ravel(), nu.ravel()
    out = np.empty(t.shape)
    capped = nu > NU_CAP
    if np.any(capped):
        out[capped] = ndtr(t[capped])
    body = ~capped
    if np.any(body):
        tb, nb = t[body], nu[body]
        t2 = tb * tb
        finite = np.isfinite(t2)
        denom = np.where(finite, nb + t2, 1.0)
        xval = np.where(finite, nb / denom, 0.0)
        xc = np.where(finite, t2 / denom, 1.0)
        tail = 0.5 * _betainc(0.5 * nb, np.full_like(nb, 0.5), xval, xc)
        out[body] = np.where(tb > 0, 1.0 - tail, tail)
    return out.reshape(shape)


def t_cdf_np(x, mu, sigma, nu) -> np.ndarray:
    x, mu, sigma = (np.asarray(v, dtype=np.float64) for v in (x, mu, sigma))
    return standard_t_cdf((x - mu) / sigma, nu)


def t_cdf(dist: StudentT, x):
    out = t_cdf_np(x, dist.mu, dist.sigma, dist.nu)
    return out if np.ndim(out) else float(out)


# ---------------------------------------------------------------------------
# sampling


def gamma_rvs(shape_param, rng: np.random.Generator) -> np.ndarray:
    """Gamma(shape, 1) draws by Marsaglia and Tsang's squeeze-rejection method."""
    alpha = np.asarray(shape_param, dtype=np.float64)
    if np.any(~(alpha > 0)):
        raise ValueError("gamma shape must be positive")
    flat = alpha.ravel()
    boost = flat < 1.0
    a = np.where(boost, flat + 1.0, flat)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(a)
    pending = np.arange(a.shape[0])
    while pending.size:
        dp, cp = d[pending], c[pending]
        z = rng.standard_normal(pending.size)
        u = rng.random(pending.size)
        v = (1.0 + cp * z) ** 3
        ok = v > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            logv = np.log(np.where(ok, v, 1.0))
        accept = ok & (np.log(u) < 0.5 * z * z + dp - dp * v + dp * logv)
        out[pending[accept]] = dp[accept] * v[accept]
        pending = pending[~accept]
    if np.any(boost):
        u = rng.random(int(boost.sum()))
        out[boost] *= u ** (1.0 / flat[boost])
    return out.reshape(alpha.shape)


def chisquare_rvs(df, rng: np.random.Generator) -> np.ndarray:
    return 2.0 * gamma_rvs(0.5 * np.asarray(df, dtype=np.float64), rng)


def standard_t_rvs(nu, rng: np.random.Generator) -> np.ndarray:
    """Standard Student's T draws, one per element of ``nu``: ``Z / sqrt(chi2_nu / nu)``."""
    nu = np.asarray(nu, dtype=np.float64)
    z = rng.standard_normal(nu.shape)
    capped = nu > NU_CAP
    safe = np.where(capped, 10.0, nu)
    scale = np.sqrt(chisquare_rvs(safe, rng) / safe)
    return np.where(capped, z, z / scale)


def t_sample(dist: StudentT, n: int, rng: np.random.Generator) -> np.ndarray:
    return dist.mu + dist.sigma * standard_t_rvs(np.full(int(n), dist.nu), rng)


def moment_match_normal(dist: StudentT) -> tuple[float, float]:
    """Mean and variance of the Normal that matches ``dist``'s first two moments."""
    if not dist.nu > MIN_NU:
        raise ValueError("moment matching needs nu > 4")
    return float(dist.mu), float(t_variance(dist.sigma, dist.nu))


# ---------------------------------------------------------------------------
# Gaussian


def gaussian_full_logpdf(dist: GaussianFull, x) -> np.ndarray | float:
    """Multivariate Normal log-density evaluated through the Cholesky factor."""
    L = cholesky_np(dist.covariance)
    x = np.asarray(x, dtype=np.float64)
    diff = np.atleast_2d(x - dist.mean)
    sol = solve_triangular(L, diff.T, lower=True)
    d = dist.mean.shape[0]
    out = -0.5 * d * _LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * (sol * sol).sum(axis=0)
    return float(out[0]) if x.ndim == 1 else out


def normal_logpdf_np(x, mean, var) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return -0.5 * (_LOG_2PI + np.log(var) + (x - mean) ** 2 / var)


# ---------------------------------------------------------------------------
# Hansen (1994) skewed Student's T, standardized to zero mean and unit variance


@dataclass(frozen=True)
class SkewStudentT:
    """Standardized skewed T with tail parameter ``eta`` and skew ``lam`` in (-1, 1).

    ``loc`` and ``scale`` shift and scale the standardized variable, so the
    variance of the distribution is ``scale**2``.
    """

    eta: float
    lam: float
    loc: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not self.eta > 2.0:
            raise ValueError("skewed T needs eta > 2 for a finite variance")
        if not -1.0 < self.lam < 1.0:
            raise ValueError("skew parameter must lie in (-1, 1)")
        if not np.all(np.asarray(self.scale) > 0):
            raise ValueError("scale must be positive")

    def _consts(self) -> tuple[float, float, float]:
        eta, lam = self.eta, self.lam
        c = math.exp(math.lgamma((eta + 1) / 2) - math.lgamma(eta / 2)) / math.sqrt(math.pi * (eta - 2))
        a = 4.0 * lam * c * (eta - 2) / (eta - 1)
        b = math.sqrt(1.0 + 3.0 * lam * lam - a * a)
        return a, b, c

    def logpdf(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        a, b, c = self._consts()
        y = b * z + a
        side = np.where(y < 0, 1.0 - self.lam, 1.0 + self.lam)
        return (math.log(b * c) - np.log(self.scale)
                - 0.5 * (self.eta + 1) * np.log1p((y / side) ** 2 / (self.eta - 2)))

    def cdf(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64) - self.loc) / self.scale
        a, b, _ = self._consts()
        lam, eta = self.lam, self.eta
        y = b * z + a
        k = math.sqrt(eta / (eta - 2))
        left = (1 - lam) * standard_t_cdf(y / (1 - lam) * k, eta)
        right = (1 - lam) / 2 + (1 + lam) * (standard_t_cdf(y / (1 + lam) * k, eta) - 0.5)
        return np.where(y < 0, left, right)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        a, b, _ = self._consts()
        lam, eta = self.lam, self.eta
        w = np.abs(standard_t_rvs(np.full(int(n), eta), rng))
        go_left = rng.random(int(n)) < (1 - lam) / 2
        y = np.where(go_left, -(1 - lam) * w, (1 + lam) * w) * math.sqrt((eta - 2) / eta)
        return self.loc + self.scale * (y - a) / b
