import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vaeguard import kernels
from vaeguard.defence import (FunctionPotential, GaussianPotential, HmcConfig, HmcTrace, VaePotential,
                              adapt_step_size, defend, encoder_sample, hmc_step, leapfrog,
                              potential_energy, potential_gradient, run_chain)
from vaeguard.numerics import NonFiniteError, numerical_gradient, relative_error
from vaeguard.vae import GAUSSIAN, init_model, log_likelihood

LOG_2PI = math.log(2 * math.pi)


def _flat_decoder_model(d=16, latent=3):
    m = init_model(d, latent, (8,), seed=0)
    return m.with_params({k: (np.zeros_like(v) if k.startswith("dec") else v)
                          for k, v in m.named_params().items()})


def test_prior_term_at_origin():
    m = _flat_decoder_model()
    x = np.full(16, 0.3)
    z = np.zeros(3)
    u = potential_energy(m, x, z)
    assert u + log_likelihood(m, x, z) == pytest.approx(1.5 * LOG_2PI)


def test_potential_grows_with_norm_when_decoder_saturated():
    m = _flat_decoder_model()
    x = np.full(16, 0.3)
    direction = np.array([1.0, -2.0, 0.5]) / math.sqrt(5.25)
    us = [potential_energy(m, x, r * direction) for r in (0.0, 1.0, 2.0, 4.0)]
    assert all(b > a for a, b in zip(us, us[1:]))


def test_potential_gradient_matches_finite_differences(small_model, synthetic):
    x = synthetic[1].images[0]
    z0 = np.random.default_rng(3).normal(size=small_model.latent_dim)
    num = numerical_gradient(lambda z: float(potential_energy(small_model, x, z)), z0)
    assert relative_error(potential_gradient(small_model, x, z0), num) < 1e-6


@pytest.mark.parametrize("backend", ["python", kernels.BACKEND])
@pytest.mark.parametrize("family", ["bernoulli", GAUSSIAN])
def test_kernel_potential_matches_reference(backend, family, synthetic):
    m = init_model(synthetic[0].dim, 4, (16, 8), decoder_family=family, seed=2)
    x = synthetic[0].images[:5]
    z = np.random.default_rng(0).normal(size=(5, 4))
    energy, grad = VaePotential(m, x, backend).energy_grad(z)
    assert np.allclose(energy, potential_energy(m, x, z), rtol=1e-12, atol=1e-10)
    assert np.allclose(grad, potential_gradient(m, x, z), rtol=1e-10, atol=1e-12)


def test_backends_agree_on_leapfrog(small_model, synthetic):
    if kernels.BACKEND != "compiled":
        pytest.skip("compiled extension not built")
    x = synthetic[1].images[:4]
    rng = np.random.default_rng(1)
    z, p = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    eta = np.array([0.05, 0.1, 0.2, 0.01])
    a = leapfrog(VaePotential(small_model, x, "python"), z, p, eta, 7)
    b = leapfrog(VaePotential(small_model, x, "compiled"), z, p, eta, 7)
    assert np.allclose(a[0], b[0], atol=1e-12) and np.allclose(a[1], b[1], atol=1e-12)


def test_backend_selection_respects_environment(monkeypatch):
    assert kernels.get_backend("python").__name__.endswith("_fallback")
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_leapfrog_zero_step_is_identity(small_model, synthetic):
    pot = VaePotential(small_model, synthetic[1].images[0])
    z, p = np.ones(4), np.arange(4.0)
    z1, p1 = leapfrog(pot, z, p, 0.0, 5)
    assert np.array_equal(z1, z) and np.array_equal(p1, p)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-3, 0.5), st.integers(1, 30), st.integers(0, 10_000))
def test_leapfrog_reversible_on_prior(eta, n_steps, seed):
    rng = np.random.default_rng(seed)
    pot = GaussianPotential(8)
    z, p = rng.normal(size=8), rng.normal(size=8)
    z1, p1 = leapfrog(pot, z, p, eta, n_steps)
    z2, p2 = leapfrog(pot, z1, -p1, eta, n_steps)
    assert np.max(np.abs(z2 - z)) < 1e-8 and np.max(np.abs(-p2 - p)) < 1e-8


def test_leapfrog_reversible_on_decoder(small_model, synthetic):
    pot = VaePotential(small_model, synthetic[1].images[0])
    rng = np.random.default_rng(0)
    z, p = rng.normal(size=4), rng.normal(size=4)
    z1, p1 = leapfrog(pot, z, p, 0.05, 20)
    z2, p2 = leapfrog(pot, z1, -p1, 0.05, 20)
    assert np.max(np.abs(z2 - z)) < 1e-8 and np.max(np.abs(p2 + p)) < 1e-8


def test_energy_error_is_second_order():
    pot = GaussianPotential(8)
    rng = np.random.default_rng(0)
    z, p = rng.normal(size=8), rng.normal(size=8)

    def dh(eta):
        n = int(round(1.0 / eta))
        z1, p1 = leapfrog(pot, z, p, eta, n)
        h = lambda zz, pp: pot.energy_grad(zz[None])[0][0] + 0.5 * pp @ pp
        return abs(h(z1, p1) - h(z, p))

    ratio = dh(0.1) / dh(0.05)
    assert 3.5 < ratio < 4.5


def test_leapfrog_non_finite_raises():
    blow = FunctionPotential(lambda z: (np.sum(z, axis=1), np.full_like(z, np.inf)))
    with pytest.raises(NonFiniteError), np.errstate(all="ignore"):
        leapfrog(blow, np.zeros(2), np.ones(2), 0.1, 3)


def test_small_step_accepts_almost_surely():
    pot = GaussianPotential(8)
    rng = np.random.default_rng(0)
    z = rng.normal(size=(200, 8))
    _, _, alpha = hmc_step(pot, z, 1e-4, 20, rng)
    assert alpha.min() > 0.999


def test_hmc_step_deterministic(small_model, synthetic):
    pot = VaePotential(small_model, synthetic[1].images[0])
    a = hmc_step(pot, np.zeros(4), 0.1, 5, np.random.default_rng(7))
    b = hmc_step(pot, np.zeros(4), 0.1, 5, np.random.default_rng(7))
    assert np.array_equal(a[0], b[0]) and a[1:] == b[1:]


def test_rejection_keeps_state_bitwise():
    # a huge step on a stiff target is always rejected
    pot = GaussianPotential(4, var=1e-6)
    z = np.array([[1e-3, -2e-3, 0.5e-3, 0.0]]) + np.pi * 1e-4
    z1, acc, alpha = hmc_step(pot, z, 10.0, 3, np.random.default_rng(0))
    assert not acc[0] and alpha[0] < 1e-12
    assert z1.tobytes() == z.tobytes()


def test_non_finite_trajectory_rejected_with_zero_alpha():
    def fn(z):
        e = 0.5 * np.sum(z * z, axis=1)
        g = z.copy()
        g[np.abs(z) > 0.5] = np.nan
        return e, g
    z = np.zeros((3, 2))
    with np.errstate(all="ignore"):
        z1, acc, alpha = hmc_step(FunctionPotential(fn), z, 2.0, 5, np.random.default_rng(0))
    bad = ~acc
    assert np.all(alpha[bad] == 0.0)
    assert np.array_equal(z1[bad], z[bad])


def test_gaussian_target_moments():
    # fixed eta = 0.1, L = 20: adaptation on this target drifts eta * L onto a
    # multiple of pi, where HMC trajectories on a Gaussian return near their start
    rng = np.random.default_rng(0)
    pot = GaussianPotential(8)
    z = np.full(8, 5.0)
    samples = []
    for t in range(5000):
        z, _, _ = hmc_step(pot, z, 0.1, 20, rng)
        if t >= 100:
            samples.append(z)
    s = np.array(samples)
    assert np.all(np.abs(s.mean(axis=0)) < 0.05)
    assert np.all((s.var(axis=0) > 0.9) & (s.var(axis=0) < 1.1))


@pytest.mark.parametrize("eta, alpha, expected", [
    (0.1, 0.9, 0.1), (0.1, 1.0, 0.1 * (1 + 0.01 * (0.1 / 0.9))), (0.1, 0.0, 0.099)])
def test_adapt_step_size_examples(eta, alpha, expected):
    assert adapt_step_size(eta, alpha) == pytest.approx(expected, rel=1e-15)


@given(st.floats(1e-6, 10.0))
def test_adaptation_fixed_point(eta):
    assert adapt_step_size(eta, 0.9) == eta


def test_adaptive_chain_reaches_target_acceptance():
    for eta0 in (0.1, 0.5, 1.0):
        trace = run_chain(GaussianPotential(8), np.zeros(8),
                          HmcConfig(3000, eta0, 10, True), np.random.default_rng(1))
        assert 0.85 <= trace.alpha[-200:].mean() <= 0.95
        assert trace.step_sizes.shape == trace.alpha.shape == (3000,)


def test_defend_zero_steps_is_encoder_sample(small_model, synthetic):
    x = synthetic[1].images[:3]
    z, trace = defend(small_model, x, HmcConfig(steps=0), np.random.default_rng(5))
    assert np.array_equal(z, encoder_sample(small_model, x, np.random.default_rng(5)))
    assert trace.steps == 0


def test_defend_records_snapshots_and_matches_shorter_run(small_model, synthetic):
    x = synthetic[1].images[:3]
    cfg = HmcConfig(steps=12, step_size=0.05, leapfrog_steps=4)
    _, trace = defend(small_model, x, cfg, np.random.default_rng(9), record_at=[0, 5, 12])
    z5, _ = defend(small_model, x, HmcConfig(5, 0.05, 4), np.random.default_rng(9))
    assert np.array_equal(trace.snapshots[5], z5)
    assert np.array_equal(trace.snapshots[12], trace.z_final)
    assert trace.alpha.shape == (12, 3)
    assert np.all((trace.alpha >= 0) & (trace.alpha <= 1))


def test_defend_moves_towards_posterior_mode(small_model, synthetic):
    x = synthetic[1].images[:10]
    z0 = np.random.default_rng(0).normal(size=(10, 4)) * 3
    pot = VaePotential(small_model, x)
    trace = run_chain(pot, z0, HmcConfig(200, 0.1, 10), np.random.default_rng(0))
    assert pot.energy_grad(trace.z_final)[0].mean() < pot.energy_grad(z0)[0].mean()


def test_config_and_trace_validation():
    with pytest.raises(ValueError):
        HmcConfig(steps=-1)
    with pytest.raises(ValueError):
        HmcConfig(leapfrog_steps=0)
    with pytest.raises(ValueError):
        HmcConfig(step_size=0.0)
    with pytest.raises(ValueError):
        HmcConfig(target_acceptance=1.0)
    with pytest.raises(ValueError):
        HmcTrace(np.array([1.2]), np.array([0.1]), np.zeros(2), np.zeros(2), 0)
