import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from vaeguard.defence import HmcConfig
from vaeguard.theory import (Binning, FullGaussian, LinearGaussianVae, default_fixtures, exact_encoder,
                             exact_posterior, histogram_tv, kl_full_gaussians, lemma1_scaling_check,
                             pinsker_check, random_gaussian_pair, theorem1_decomposition, tv_gaussians)

TV_UNIT_SHIFT = 2 * norm.cdf(0.5) - 1  # 0.38292...


def g(mean, cov):
    return FullGaussian(np.asarray(mean, float), np.asarray(cov, float))


# --- posteriors -------------------------------------------------------------------

def test_posterior_examples():
    lgv = LinearGaussianVae(np.zeros((3, 2)), np.ones(3), 1.0)
    post = exact_posterior(lgv, np.array([5.0, -1.0, 2.0]))
    assert np.allclose(post.mean, 0) and np.allclose(post.cov, np.eye(2))
    post = exact_posterior(LinearGaussianVae(np.ones((1, 1)), np.zeros(1), 1.0), np.array([2.0]))
    assert post.mean[0] == pytest.approx(1.0) and post.cov[0, 0] == pytest.approx(0.5)
    wide = exact_posterior(LinearGaussianVae(np.eye(2), np.zeros(2), 1e12), np.array([3.0, 1.0]))
    assert np.allclose(wide.cov, np.eye(2), atol=1e-9) and np.allclose(wide.mean, 0, atol=1e-9)


def test_posterior_against_grid_integration():
    rng = np.random.default_rng(0)
    lgv = LinearGaussianVae(rng.normal(size=(3, 1)), rng.normal(size=3), 0.7)
    x = rng.normal(size=3)
    z = np.linspace(-10, 10, 200_001)
    log_joint = norm.logpdf(z) + np.sum(norm.logpdf(x[:, None], lgv.W @ z[None] + lgv.b[:, None],
                                                    math.sqrt(0.7)), axis=0)
    w = np.exp(log_joint - log_joint.max())
    w /= w.sum()
    mean = np.sum(w * z)
    var = np.sum(w * (z - mean) ** 2)
    post = exact_posterior(lgv, x)
    assert post.mean[0] == pytest.approx(mean, rel=1e-8)
    assert post.cov[0, 0] == pytest.approx(var, rel=1e-8)


def test_invalid_gaussians_rejected():
    with pytest.raises(ValueError):
        g([0, 0], [[1, 0.5], [0.4, 1]])
    with pytest.raises(ValueError):
        g([0, 0], [[1, 2], [2, 1]])
    with pytest.raises(ValueError):
        g([0], [[1, 0], [0, 1]])
    with pytest.raises(ValueError):
        LinearGaussianVae(np.ones((2, 1)), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        LinearGaussianVae(np.array([[1.0, 2.0], [2.0, 4.0]]), np.zeros(2)).check_rank()


# --- KL ---------------------------------------------------------------------------

def test_kl_examples():
    a = g([0.3, 1.0], [[1.0, 0.2], [0.2, 0.5]])
    assert kl_full_gaussians(a, a) == pytest.approx(0.0, abs=1e-12)
    assert kl_full_gaussians(g([0.0], [[1.0]]), g([1.0], [[1.0]])) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        kl_full_gaussians(g([0.0], [[1.0]]), a)


def test_kl_against_monte_carlo():
    a, b = random_gaussian_pair(2, np.random.default_rng(3))
    z = a.sample(1_000_000, np.random.default_rng(4))
    d = a.logpdf(z) - b.logpdf(z)
    se = d.std(ddof=1) / math.sqrt(d.size)
    assert abs(kl_full_gaussians(a, b) - d.mean()) < 3 * se


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_kl_nonnegative(seed, dim):
    a, b = random_gaussian_pair(dim, np.random.default_rng(seed))
    assert kl_full_gaussians(a, b) >= 0.0
    assert kl_full_gaussians(a, a) <= 1e-10


# --- TV ---------------------------------------------------------------------------

def test_tv_examples():
    a = g([0.0], [[1.0]])
    assert tv_gaussians(a, a).value == pytest.approx(0.0, abs=1e-12)
    assert tv_gaussians(a, g([1.0], [[1.0]])).value == pytest.approx(TV_UNIT_SHIFT, abs=1e-12)
    assert TV_UNIT_SHIFT == pytest.approx(0.38292, abs=1e-5)
    b = g([0.2, -0.1], [[0.8, 0.1], [0.1, 1.3]])
    assert tv_gaussians(b, b).value == pytest.approx(0.0, abs=1e-9)


def test_tv_unequal_variance_against_grid():
    a, b = g([0.0], [[1.0]]), g([0.5], [[2.5]])
    t = np.linspace(-40, 40, 800_001)
    grid = 0.5 * np.sum(np.abs(norm.pdf(t, 0, 1) - norm.pdf(t, 0.5, math.sqrt(2.5)))) * (t[1] - t[0])
    assert tv_gaussians(a, b).value == pytest.approx(grid, abs=1e-9)


def test_tv_2d_against_grid():
    a, b = random_gaussian_pair(2, np.random.default_rng(8))
    ax = np.linspace(-14, 14, 1401)
    zz = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    h = ax[1] - ax[0]
    grid = 0.5 * np.sum(np.abs(np.exp(a.logpdf(zz)) - np.exp(b.logpdf(zz)))) * h * h
    assert tv_gaussians(a, b).value == pytest.approx(grid, abs=1e-5)


def test_tv_2d_product_reduces_to_1d():
    # independent coordinates with the second one shared: TV equals the 1-D TV
    a, b = g([0.0, 0.3], [[1.0, 0.0], [0.0, 2.0]]), g([1.0, 0.3], [[1.0, 0.0], [0.0, 2.0]])
    assert tv_gaussians(a, b).value == pytest.approx(TV_UNIT_SHIFT, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_tv_quad_and_monte_carlo_agree_1d(seed):
    a, b = random_gaussian_pair(1, np.random.default_rng(seed))
    quad = tv_gaussians(a, b).value
    mc = tv_gaussians(a, b, "mc", n_samples=200_000, rng=np.random.default_rng(100 + seed))
    assert abs(quad - mc.value) < 3 * mc.stderr


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 2))
def test_tv_bounded(seed, dim):
    a, b = random_gaussian_pair(dim, np.random.default_rng(seed))
    v = tv_gaussians(a, b).value
    assert 0.0 <= v <= 1.0


def test_tv_method_validation():
    a = g(np.zeros(3), np.eye(3))
    with pytest.raises(ValueError):
        tv_gaussians(a, a)
    assert tv_gaussians(a, a, "mc", n_samples=2000).value == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        tv_gaussians(g([0.0], [[1.0]]), g([0.0], [[1.0]]), "bogus")


def test_histogram_bins_are_exact_probabilities():
    a = g([0.2, -0.4], [[1.0, 0.3], [0.3, 0.6]])
    bins = Binning.covering([a], 2)
    p = bins.exact(a)
    assert p.size == 64 * 64 + 1 and p.sum() == pytest.approx(1.0, abs=1e-12)
    emp = bins.empirical(a.sample(200_000, np.random.default_rng(0)))
    est = histogram_tv(emp, p, 200_000)
    # the plug-in estimator is biased upward but bounded by its standard error scale
    assert est.value < 3 * est.stderr


# --- Lemma 1 ----------------------------------------------------------------------

def test_lemma1_slope_is_quadratic():
    rng = np.random.default_rng(0)
    lgv = LinearGaussianVae(rng.normal(size=(5, 2)), rng.normal(size=5), 0.5)
    res = lemma1_scaling_check(lgv, rng.normal(size=5), rng.normal(size=5), np.geomspace(1e-1, 1e-3, 9))
    assert 1.8 <= res.slope <= 2.2 and res.consistent
    assert res.slope == pytest.approx(2.0, abs=1e-6)


def test_lemma1_degenerate_direction():
    lgv = LinearGaussianVae(np.eye(2), np.zeros(2))
    res = lemma1_scaling_check(lgv, np.ones(2), np.zeros(2), [0.1, 0.01])
    assert res.degenerate and not res.consistent and np.all(res.kls == 0)


def test_lemma1_excludes_underflowing_radii():
    lgv = LinearGaussianVae(np.eye(1), np.zeros(1))
    res = lemma1_scaling_check(lgv, np.ones(1), np.ones(1), [1e-1, 1e-2, 1e-200])
    assert res.notes and res.slope == pytest.approx(2.0, abs=1e-6)
    with pytest.raises(ValueError):
        lemma1_scaling_check(lgv, np.ones(1), np.ones(1), [0.1, -0.1])


# --- Pinsker ----------------------------------------------------------------------

def test_pinsker_examples():
    a = g([0.0], [[1.0]])
    same = pinsker_check([(a, a)])
    assert same.tv[0] == pytest.approx(0.0, abs=1e-12) and same.bound[0] == 0.0 and same.passed()
    rep = pinsker_check([(a, g([1.0], [[1.0]]))])
    assert rep.tv[0] == pytest.approx(TV_UNIT_SHIFT) and rep.bound[0] == pytest.approx(0.5)


def test_pinsker_sweep():
    rng = np.random.default_rng(1)
    pairs = [random_gaussian_pair(1 + k % 2, rng) for k in range(200)]
    rep = pinsker_check(pairs)
    assert rep.passed() and rep.min_slack >= -1e-9


# --- Theorem 1 --------------------------------------------------------------------

def _one_dim():
    lgv = LinearGaussianVae(np.array([[1.5], [-0.5], [1.0]]), np.array([0.1, 0.0, -0.2]), 1.0)
    return lgv, np.array([0.5, -0.3, 0.8])


def test_budget_minimum():
    lgv, x = _one_dim()
    with pytest.raises(ValueError):
        theorem1_decomposition(lgv, exact_encoder(lgv), x, x, HmcConfig(steps=1), n_samples=999)


def test_exact_encoder_matches_posterior():
    lgv, x = _one_dim()
    enc = exact_encoder(lgv)(x)
    post = exact_posterior(lgv, x)
    assert np.allclose(enc.mean, post.mean) and np.allclose(enc.cov, post.cov)


def test_degenerate_case_all_terms_vanish():
    lgv, x = _one_dim()
    rows = theorem1_decomposition(lgv, exact_encoder(lgv), x, x, HmcConfig(steps=50, step_size=0.3,
                                  leapfrog_steps=5), n_samples=100_000, rng=np.random.default_rng(0))
    r = rows[0]
    assert r.attack_term == 0.0 and r.approx_gap == pytest.approx(0.0, abs=1e-7)
    assert r.lhs < 3 * r.stderr and r.mcmc_gap < 3 * r.stderr
    assert r.holds()


def test_no_chain_reproduces_encoder_tv():
    lgv, x_r = _one_dim()
    x_a = x_r + 0.3
    enc = exact_encoder(lgv)
    r = theorem1_decomposition(lgv, enc, x_r, x_a, HmcConfig(steps=0), n_samples=200_000,
                               rng=np.random.default_rng(1))[0]
    exact_lhs = tv_gaussians(enc(x_a), enc(x_r)).value
    assert abs(r.lhs - exact_lhs) < 3 * r.stderr
    assert r.approx_gap == pytest.approx(0.0, abs=1e-7) and r.mcmc_gap < 3 * r.stderr
    # with an exact encoder the attack term carries the bound
    assert r.attack_term > r.mcmc_gap + r.approx_gap
    assert r.holds()


def test_fixture_bound_and_decay():
    hmc = HmcConfig(steps=100, step_size=0.2, leapfrog_steps=10)
    for fx in default_fixtures():
        rows = theorem1_decomposition(fx.lgv, fx.encoder, fx.x_r, fx.x_a, hmc, n_samples=50_000,
                                      t_values=[0, 10, 100], rng=np.random.default_rng(2))
        assert [r.t for r in rows] == [0, 10, 100]
        assert all(r.holds() for r in rows), fx.name
        assert rows[-1].mcmc_gap < rows[0].mcmc_gap, fx.name


def test_snapshots_share_one_chain():
    lgv, x = _one_dim()
    hmc = HmcConfig(steps=5, step_size=0.2, leapfrog_steps=3)
    many = theorem1_decomposition(lgv, exact_encoder(lgv), x, x + 0.1, hmc, n_samples=2000,
                                  t_values=[0, 5], rng=np.random.default_rng(3))
    one = theorem1_decomposition(lgv, exact_encoder(lgv), x, x + 0.1, hmc, n_samples=2000,
                                 t_values=[5], rng=np.random.default_rng(3))
    assert many[1].lhs == one[0].lhs and many[1].mcmc_gap == one[0].mcmc_gap
