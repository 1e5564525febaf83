import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vaeguard.defence import HmcConfig
from vaeguard.metrics import (MSSSIM_WEIGHTS, ClassifierConfig, LinearClassifier, RobustnessReport,
                              adversarial_accuracy, fit_linear_classifier, msssim, msssim_levels, mse,
                              read_report_csv, robustness_report, ssim, write_report_csv)
from vaeguard.vae import encode


# --- similarity --------------------------------------------------------------------

def test_identity_and_symmetry(synthetic):
    x, y = synthetic[1].images[:6], synthetic[1].images[6:12]
    assert np.allclose(ssim(x, x), 1.0) and np.allclose(msssim(x, x), 1.0, atol=1e-6)
    assert np.allclose(ssim(x, y), ssim(y, x), atol=1e-14)
    assert np.allclose(msssim(x, y), msssim(y, x), atol=1e-14)


def test_single_image_returns_scalar(synthetic):
    x = synthetic[1].images[0]
    assert isinstance(ssim(x, x), float) and isinstance(msssim(x, x), float)
    assert isinstance(ssim(x.reshape(14, 14), x.reshape(14, 14)), float)


def test_inverted_binary_images():
    rng = np.random.default_rng(0)
    x = (rng.random((20, 14 * 14)) > 0.5).astype(float)
    assert np.all(ssim(x, 1 - x) < 0.1)


def test_inverted_synthetic_images(synthetic):
    x = (synthetic[1].images[:20] > 0.5).astype(float)
    assert np.mean(ssim(x, 1 - x)) < 0.1


def test_msssim_decreases_with_noise(synthetic):
    x = synthetic[0].images[:50]
    rng = np.random.default_rng(1)
    means = [np.mean(msssim(x, np.clip(x + rng.normal(0, s, x.shape), 0, 1))) for s in (0.05, 0.1, 0.2)]
    assert means[0] > means[1] > means[2]


def test_levels_reduced_for_small_images():
    assert msssim_levels(14) == 2 and msssim_levels(28) == 3 and msssim_levels(176) == 5
    assert msssim_levels(7) == 1
    assert len(MSSSIM_WEIGHTS) == 5 and sum(MSSSIM_WEIGHTS) == pytest.approx(0.9999, abs=2e-4)


def test_tiny_image_rejected():
    with pytest.raises(ValueError):
        ssim(np.zeros((3, 0, 0)), np.zeros((3, 0, 0)))


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        msssim(np.zeros(196), np.zeros(144))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 196, elements=st.floats(0, 1)), arrays(np.float64, 196, elements=st.floats(0, 1)))
def test_msssim_in_unit_interval(x, y):
    v = msssim(x, y)
    assert 0.0 <= v <= 1.0
    assert msssim(x, x) == pytest.approx(1.0, abs=1e-6)


def test_mse_examples():
    x = np.zeros((3, 4))
    assert mse(x, x) == 0.0
    y = np.zeros(4)
    y[2] = 0.5
    assert mse(np.zeros(4), y) == 0.25


@given(arrays(np.float64, (3, 5), elements=st.floats(-5, 5)), arrays(np.float64, (3, 5), elements=st.floats(-5, 5)))
def test_mse_symmetric_nonnegative(x, y):
    assert mse(x, y) == mse(y, x) >= 0.0


# --- classifier --------------------------------------------------------------------

def _separable(seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(200, 3))
    y = (z @ np.array([1.0, -2.0, 0.5]) > 0).astype(int)
    keep = np.abs(z @ np.array([1.0, -2.0, 0.5])) > 0.2
    return z[keep], y[keep]


def test_separable_toy_fits():
    z, y = _separable()
    clf = fit_linear_classifier(z, y)
    assert np.mean(clf.predict(z) == y) >= 0.99


def test_classifier_deterministic_and_order_invariant():
    z, y = _separable()
    a = fit_linear_classifier(z, y)
    perm = np.random.default_rng(1).permutation(len(y))
    b = fit_linear_classifier(z[perm], y[perm])
    assert np.array_equal(a.weight, fit_linear_classifier(z, y).weight)
    assert abs(np.mean(a.predict(z) == y) - np.mean(b.predict(z) == y)) <= 1e-6


def test_zero_iterations_give_uniform_predictions():
    z, y = _separable()
    clf = fit_linear_classifier(z, y, ClassifierConfig(iterations=0))
    assert np.all(clf.logits(z) == 0.0)
    assert np.all(clf.predict(z) == 0)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        fit_linear_classifier(np.zeros((5, 2)), np.ones(5, int))


def test_classifier_shape_invariant():
    with pytest.raises(ValueError):
        LinearClassifier(np.zeros((3, 2)), np.zeros(2))


# --- accuracy and reports ----------------------------------------------------------

@pytest.fixture(scope="module")
def fitted(small_model, synthetic):
    train = synthetic[0]
    return fit_linear_classifier(encode(small_model, train.images).mean, train.labels, class_count=4)


def test_identity_pairs_are_fully_consistent(small_model, fitted, synthetic):
    x = synthetic[1].images[:12]
    assert adversarial_accuracy(small_model, fitted, x, x) == 1.0
    rep = robustness_report(small_model, fitted, x, x)
    assert rep.accuracy == 1.0 and np.allclose(rep.msssim, 1.0) and rep.mse == 0.0


def test_empty_pairs_rejected(small_model, fitted):
    with pytest.raises(ValueError):
        adversarial_accuracy(small_model, fitted, np.zeros((0, 196)), np.zeros((0, 196)))
    with pytest.raises(ValueError):
        robustness_report(small_model, fitted, np.zeros((0, 196)), np.zeros((0, 196)))


def test_accuracy_is_a_proportion(small_model, fitted, synthetic):
    x = synthetic[1].images[:10]
    noisy = np.clip(x + np.random.default_rng(0).normal(0, 0.5, x.shape), 0, 1)
    acc = adversarial_accuracy(small_model, fitted, x, noisy)
    assert 0.0 <= acc <= 1.0 and acc * 10 == round(acc * 10)


def test_disabled_defence_matches_sampled_no_defence(small_model, fitted, synthetic):
    x = synthetic[1].images[:8]
    adv = np.clip(x + 0.05, 0, 1)
    a = robustness_report(small_model, fitted, x, adv, defence=HmcConfig(steps=0),
                          rng=np.random.default_rng(4))
    b = robustness_report(small_model, fitted, x, adv, sample_latents=True, rng=np.random.default_rng(4))
    assert a.setting == "hmc-0" and b.setting == "none"
    assert np.array_equal(a.msssim, b.msssim) and np.array_equal(a.same_class, b.same_class)
    assert np.array_equal(a.sq_error, b.sq_error)


def test_report_deterministic(small_model, fitted, synthetic):
    x = synthetic[1].images[:6]
    adv = np.clip(x - 0.05, 0, 1)
    cfg = HmcConfig(steps=5, step_size=0.05, leapfrog_steps=3)
    a = robustness_report(small_model, fitted, x, adv, defence=cfg, rng=np.random.default_rng(1))
    b = robustness_report(small_model, fitted, x, adv, defence=cfg, rng=np.random.default_rng(1))
    assert np.array_equal(a.msssim, b.msssim)
    assert 0.0 <= a.accuracy <= 1.0 and np.all((a.msssim >= 0) & (a.msssim <= 1))


def test_report_rejects_out_of_range():
    with pytest.raises(ValueError):
        RobustnessReport("x", np.arange(1), np.array([1.5]), np.ones(1), np.zeros(1), np.ones(1, bool))


def test_report_csv_roundtrip(tmp_path, small_model, fitted, synthetic):
    x = synthetic[1].images[:4]
    rep = robustness_report(small_model, fitted, x, np.clip(x + 0.1, 0, 1), reference_indices=[3, 5, 7, 9])
    path = tmp_path / "r.csv"
    write_report_csv(path, [rep])
    rows = read_report_csv(path)
    assert len(rows) == 5 and rows[-1]["row"] == "summary"
    assert [int(r["reference_index"]) for r in rows[:4]] == [3, 5, 7, 9]
    assert np.array_equal([float(r["msssim"]) for r in rows[:4]], rep.msssim)
    assert float(rows[-1]["msssim"]) == rep.msssim_mean
    assert float(rows[-1]["same_class"]) == rep.accuracy
    assert rows[-1]["formatted"] == f"{rep.msssim_mean:.2f} ({rep.msssim_std:.2f})"
