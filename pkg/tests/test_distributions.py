from __future__ import annotations

import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from latentfactor.distributions import (
    NU_CAP,
    GaussianFull,
    ProductStudentT,
    SkewStudentT,
    StudentT,
    betainc,
    gamma_rvs,
    gaussian_full_logpdf,
    moment_match_normal,
    standard_t_cdf,
    t_cdf,
    t_cdf_np,
    t_logpdf,
    t_logpdf_np,
    t_logpdf_op,
    t_sample,
)
from latentfactor.numerics import DecompositionError, ops

from .conftest import central_diff, rel_err, tape_grads

mp.mp.dps = 50

nus = st.floats(4.05, 500.0)
locs = st.floats(-5.0, 5.0)
scales = st.floats(0.05, 20.0)
points = st.floats(-50.0, 50.0)


def mp_t_logpdf(x, mu, sigma, nu):
    x, mu, sigma, nu = (mp.mpf(v) for v in (x, mu, sigma, nu))
    y = (x - mu) / sigma
    return float(mp.loggamma((nu + 1) / 2) - mp.loggamma(nu / 2) - mp.log(mp.sqrt(nu * mp.pi) * sigma)
                 - (nu + 1) / 2 * mp.log(1 + y * y / nu))


# ---------------------------------------------------------------------------
# log-density


def test_logpdf_at_mode_matches_high_precision_closed_form():
    expected = float(mp.log(mp.gamma(3) / (mp.sqrt(5 * mp.pi) * mp.gamma(mp.mpf(2.5)))))
    assert t_logpdf(StudentT(0.0, 1.0, 5.0), 0.0) == pytest.approx(expected, abs=1e-14)
    assert expected == pytest.approx(-0.9686195890547247, abs=1e-15)


def test_logpdf_matches_oracle_grid():
    xs = np.linspace(-30, 30, 61)
    for nu in (4.01, 5.0, 8.0, 30.0, 1000.0, 5e5):
        ref = np.array([mp_t_logpdf(x, 0.3, 1.7, nu) for x in xs])
        np.testing.assert_allclose(t_logpdf_np(xs, 0.3, 1.7, nu), ref, rtol=1e-13, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(locs, scales, nus, points)
def test_logpdf_location_scale_equivariance(mu, sigma, nu, x):
    lhs = t_logpdf_np(x, mu, sigma, nu)
    rhs = t_logpdf_np((x - mu) / sigma, 0.0, 1.0, nu) - math.log(sigma)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_normal_limit():
    normal = -0.5 * math.log(2 * math.pi) - 0.5
    assert t_logpdf(StudentT(0.0, 1.0, 1e6), 1.0) == pytest.approx(normal, abs=1e-4)
    # above the cap the Normal expression is used exactly
    assert t_logpdf(StudentT(0.0, 1.0, 10 * NU_CAP), 1.0) == pytest.approx(normal, abs=1e-15)


@pytest.mark.parametrize("nu", [4.01, 5.0, 8.0, 30.0, 1000.0])
def test_density_integrates_to_one(nu):
    f = lambda x: math.exp(t_logpdf(StudentT(0.0, 1.0, nu), x))  # noqa: E731
    total = sum(integrate.quad(f, a, b, limit=200, epsabs=1e-13, epsrel=1e-12)[0]
                for a, b in [(-80, -5), (-5, 0), (0, 5), (5, 80)])
    assert abs(total - 1.0) < 1e-6


def test_product_logpdf_is_sum_of_parts(rng):
    d = ProductStudentT(rng.normal(size=6), rng.uniform(0.5, 2, 6), rng.uniform(4.5, 30, 6))
    x = rng.normal(size=(3, 6))
    parts = sum(t_logpdf_np(x[:, i], d.mus[i], d.sigmas[i], d.nus[i]) for i in range(6))
    assert np.array_equal(d.logpdf(x), t_logpdf_np(x, d.mus, d.sigmas, d.nus).sum(axis=-1))
    np.testing.assert_allclose(d.logpdf(x), parts, rtol=1e-14)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        StudentT(0.0, 0.0, 5.0)
    with pytest.raises(ValueError):
        StudentT(0.0, 1.0, 4.0)
    with pytest.raises(ValueError):
        ProductStudentT([0.0], [1.0], [3.0])


def test_logpdf_op_gradients(rng):
    x = rng.normal(size=5) * 2
    mu = rng.normal(size=5)
    sig = rng.uniform(0.5, 2, 5)
    nu = rng.uniform(4.5, 20, 5)
    loss = lambda a, b, c, d: ops.sum(t_logpdf_op(a, b, c, d))  # noqa: E731
    val, g = tape_grads(loss, x, mu, sig, nu)
    assert val == pytest.approx(t_logpdf_np(x, mu, sig, nu).sum(), rel=1e-14)
    fd = central_diff(loss, x, mu, sig, nu)
    for u, v in zip(g, fd):
        assert rel_err(u, v) < 1e-4


# ---------------------------------------------------------------------------
# CDF


def test_cdf_at_location_is_half():
    assert t_cdf(StudentT(1.3, 2.0, 7.0), 1.3) == 0.5


def test_cdf_limits():
    d = StudentT(0.0, 1.0, 5.0)
    assert t_cdf(d, -np.inf) == 0.0 and t_cdf(d, np.inf) == 1.0
    assert t_cdf(d, -1e8) < 1e-30 and t_cdf(d, 1e8) == 1.0


def test_cdf_quantile_example():
    # the 95% quantile of t_5, bracketed by bisection against our own CDF
    lo, hi = 0.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if t_cdf(StudentT(0, 1, 5), mid) < 0.95 else (lo, mid)
    assert lo == pytest.approx(2.015048, abs=1e-6)
    assert t_cdf(StudentT(0, 1, 5), 2.015048) == pytest.approx(0.95, abs=1e-7)


def test_cdf_matches_high_precision_oracle():
    ts = np.array([-40.0, -7.5, -2.0, -0.3, 0.0, 0.1, 1.0, 2.5, 9.0, 60.0])
    for nu in (4.01, 5.0, 12.0, 100.0, 1e4):
        ref = []
        for t in ts:
            x = mp.mpf(nu) / (mp.mpf(nu) + mp.mpf(t) ** 2)
            tail = mp.betainc(mp.mpf(nu) / 2, mp.mpf(0.5), 0, x, regularized=True) / 2
            ref.append(float(1 - tail if t > 0 else tail))
        np.testing.assert_allclose(standard_t_cdf(ts, nu), ref, rtol=0, atol=1e-10)


def test_cdf_agrees_with_scipy(rng):
    x = rng.normal(size=200) * 4
    nu = rng.uniform(4.01, 200, 200)
    np.testing.assert_allclose(t_cdf_np(x, 0.2, 1.5, nu), stats.t.cdf(x, nu, loc=0.2, scale=1.5), atol=1e-12)


def test_betainc_against_mpmath():
    for a, b, x in [(0.5, 0.5, 0.3), (2.5, 0.5, 0.9), (50.0, 0.5, 0.99), (3.0, 7.0, 0.01), (1.0, 1.0, 0.5)]:
        ref = float(mp.betainc(a, b, 0, x, regularized=True))
        assert float(betainc(a, b, x)) == pytest.approx(ref, abs=1e-13)


def test_cdf_is_antiderivative_of_density(rng):
    # lower half-line: differencing F near 1 would cancel in the test itself
    xs = -rng.uniform(0, 8, 100)
    for nu in (4.5, 9.0, 50.0):
        np.testing.assert_allclose(standard_t_cdf(xs, nu) + standard_t_cdf(-xs, nu), 1.0, rtol=0, atol=2e-16)
        h = 1e-5
        deriv = (standard_t_cdf(xs + h, nu) - standard_t_cdf(xs - h, nu)) / (2 * h)
        dens = np.exp(t_logpdf_np(xs, 0.0, 1.0, nu))
        assert np.max(np.abs(deriv - dens) / dens) < 1e-6


@settings(max_examples=50, deadline=None)
@given(locs, scales, nus, points, points)
def test_cdf_monotone(mu, sigma, nu, a, b):
    lo, hi = min(a, b), max(a, b)
    assert t_cdf_np(lo, mu, sigma, nu) <= t_cdf_np(hi, mu, sigma, nu)


# ---------------------------------------------------------------------------
# sampling


def test_sampling_is_reproducible():
    d = StudentT(0.0, 1.0, 6.0)
    a = t_sample(d, 1000, np.random.default_rng(7))
    b = t_sample(d, 1000, np.random.default_rng(7))
    assert np.array_equal(a, b)


def test_sample_variance():
    x = t_sample(StudentT(0.0, 1.0, 8.0), 10**6, np.random.default_rng(1))
    # Var(X^2) = E X^4 - (E X^2)^2 with E X^4 = 3 nu^2 / ((nu - 2)(nu - 4))
    se = math.sqrt((8.0 - (8 / 6) ** 2) / x.size)
    assert abs(x.var() - 8 / 6) < 3 * se


@pytest.mark.parametrize("nu", [4.2, 8.0, 40.0])
def test_sampling_ks(nu):
    n = 50_000
    x = t_sample(StudentT(0.5, 2.0, nu), n, np.random.default_rng(int(nu * 10)))
    ks = stats.kstest(x, lambda v: t_cdf_np(v, 0.5, 2.0, nu)).statistic
    assert ks < 1.63 / math.sqrt(n)


def test_gamma_sampler_moments():
    rng = np.random.default_rng(3)
    for a in (0.3, 1.0, 4.5):
        x = gamma_rvs(np.full(200_000, a), rng)
        assert abs(x.mean() - a) < 4 * math.sqrt(a / x.size)
        assert stats.kstest(x, stats.gamma(a).cdf).statistic < 1.63 / math.sqrt(x.size)


# ---------------------------------------------------------------------------
# moment matching and Gaussians


def test_moment_match_examples():
    assert moment_match_normal(StudentT(0.0, 1.0, 6.0)) == (0.0, 1.5)
    assert moment_match_normal(StudentT(2.0, 3.0, 8.0)) == (2.0, 12.0)
    assert moment_match_normal(StudentT(0.0, 2.0, 1e9))[1] == pytest.approx(4.0, rel=1e-8)


def test_gaussian_logpdf_examples(rng):
    assert gaussian_full_logpdf(GaussianFull([0.0], [[1.0]]), [0.0]) == pytest.approx(-0.918938533204673, abs=1e-14)
    x = rng.normal(size=4)
    ref = stats.norm.logpdf(x).sum()
    assert gaussian_full_logpdf(GaussianFull(np.zeros(4), np.eye(4)), x) == pytest.approx(ref, rel=1e-14)


def test_gaussian_logpdf_explicit_inverse_oracle(rng):
    m = rng.normal(size=(5, 5))
    cov = m @ m.T + 0.5 * np.eye(5)
    mean = rng.normal(size=5)
    x = rng.normal(size=5)
    diff = x - mean
    ref = -0.5 * (5 * math.log(2 * math.pi) + math.log(np.linalg.det(cov)) + diff @ np.linalg.inv(cov) @ diff)
    assert gaussian_full_logpdf(GaussianFull(mean, cov), x) == pytest.approx(ref, rel=1e-12)


def test_gaussian_logpdf_non_pd():
    with pytest.raises(DecompositionError):
        gaussian_full_logpdf(GaussianFull([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]]), [0.0, 0.0])


# ---------------------------------------------------------------------------
# skewed T


@pytest.mark.parametrize("eta,lam", [(5.0, 0.0), (6.0, -0.4), (12.0, 0.3)])
def test_skewt_is_standardized(eta, lam):
    d = SkewStudentT(eta, lam)
    f = lambda x: math.exp(float(d.logpdf(x)))  # noqa: E731
    m0 = integrate.quad(f, -np.inf, np.inf, limit=400)[0]
    m1 = integrate.quad(lambda x: x * f(x), -np.inf, np.inf, limit=400)[0]
    m2 = integrate.quad(lambda x: x * x * f(x), -np.inf, np.inf, limit=400)[0]
    assert m0 == pytest.approx(1.0, abs=1e-8)
    assert m1 == pytest.approx(0.0, abs=1e-7)
    assert m2 == pytest.approx(1.0, abs=1e-6)


def test_skewt_symmetric_case_is_scaled_t():
    d = SkewStudentT(7.0, 0.0)
    xs = np.linspace(-4, 4, 17)
    scale = math.sqrt(5.0 / 7.0)
    np.testing.assert_allclose(d.logpdf(xs), t_logpdf_np(xs, 0.0, scale, 7.0), rtol=1e-13)
    np.testing.assert_allclose(d.cdf(xs), t_cdf_np(xs, 0.0, scale, 7.0), atol=1e-13)


def test_skewt_cdf_and_sampler_consistent():
    d = SkewStudentT(6.0, -0.35, 0.1, 1.7)
    xs = np.linspace(-6, 6, 101)
    h = 1e-5
    np.testing.assert_allclose((d.cdf(xs + h) - d.cdf(xs - h)) / (2 * h), np.exp(d.logpdf(xs)), rtol=1e-6)
    x = d.sample(50_000, np.random.default_rng(2))
    assert stats.kstest(x, d.cdf).statistic < 1.63 / math.sqrt(x.size)
