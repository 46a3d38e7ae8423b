import dataclasses
import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import box_scene
from embodied_da import segmodel as sm
from embodied_da.worldsim import IGNORE, Camera, SensorFrame, ViewPose, render_frame


def toy_model(k=3, f=4, seed=0):
    return sm.init_model(f, k, seed=seed)


def fitted_1d(means, variances, priors):
    """Model whose estimator is set by hand in a P = L = 1 space."""
    m = sm.init_model(1, 2)
    return dataclasses.replace(
        m, pca_mean=np.zeros(1), pca_basis=np.ones((1, 1)),
        gmm_means=np.array(means, float).reshape(-1, 1), gmm_vars=np.array(variances, float).reshape(-1, 1),
        gmm_priors=np.array(priors, float), gmm_classes=np.arange(len(means)))


def frame_from_features(x, valid=None):
    h, w, _ = x.shape
    valid = np.ones((h, w), bool) if valid is None else valid
    return SensorFrame(ViewPose(0, 0, 0.3, 0), w, h, np.where(valid[..., None], x, 0).astype(np.float32),
                       np.where(valid, 1.0, 0.0), np.where(valid, 0, IGNORE).astype(np.int16))


# --------------------------------------------------------------------- predict

def test_bias_only_model_labels_class_zero():
    m = dataclasses.replace(toy_model(), class_weights=np.zeros((3, 4)), biases=np.array([1.0, 0.0, 0.0]))
    valid = np.ones((3, 5), bool)
    valid[0, 0] = False
    labels, logits, latents = sm.predict(m, frame_from_features(np.random.default_rng(0).normal(size=(3, 5, 4)), valid))
    assert (labels[valid] == 0).all()
    assert labels[0, 0] == IGNORE
    assert logits.shape == (3, 5, 3) and latents.shape == (3, 5, 4)


def test_aligned_weights_classify_noiseless_source_frames():
    scene = box_scene(boxes=[(3, 6, 3, 6, 1, 5, 2), (12, 16, 12, 15, 1, 4, 3)])
    means = scene.means_source  # rows 4 * e_c: well separated
    m = sm.SegModel(latent_proj=np.eye(4), class_weights=means, biases=-0.5 * (means ** 2).sum(1))
    acc = []
    for yaw in np.linspace(-math.pi, math.pi, 6, endpoint=False):
        f = render_frame(scene, ViewPose(1.0, 1.0, 0.3, float(yaw)), Camera(noise_std=0.0))
        labels, _, _ = sm.predict(m, f)
        acc.append(np.mean(labels[f.valid] == f.gt_labels[f.valid]))
    assert min(acc) >= 0.99


def test_permuting_classes_permutes_labels():
    m = toy_model(k=4, f=5, seed=2)
    m = dataclasses.replace(m, class_weights=np.random.default_rng(1).normal(size=(4, 5)))
    perm = np.array([2, 0, 3, 1])
    mp = dataclasses.replace(m, class_weights=m.class_weights[perm], biases=m.biases[perm])
    x = np.random.default_rng(3).normal(size=(200, 5))
    assert np.array_equal(perm[sm.predict_pixels(mp, x)], sm.predict_pixels(m, x))


def test_dimension_mismatch_raises():
    with pytest.raises(ValueError):
        sm.predict(toy_model(f=4), frame_from_features(np.zeros((2, 2, 5))))
    with pytest.raises(ValueError):
        sm.forward(toy_model(f=4), np.zeros((3, 2)))


# --------------------------------------------------------------------- uncertainty

def test_standard_normal_density_at_zero():
    m = fitted_1d([0.0], [1.0], [1.0])
    u = sm.estimate_uncertainty(m, np.zeros((1, 1)))
    assert u[0] == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)
    assert u[0] == pytest.approx(0.9189, abs=1e-4)


@given(st.floats(-20, 20))
def test_symmetric_mixture(z):
    m = fitted_1d([-1.5, 1.5], [0.7, 0.7], [0.5, 0.5])
    a, b = sm.estimate_uncertainty(m, np.array([[z], [-z]]))
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_uncertainty_grows_beyond_farthest_mean():
    m = fitted_1d([-1.0, 2.0], [0.5, 1.3], [0.3, 0.7])
    z = np.linspace(2.0, 60.0, 400)[:, None]
    u = sm.estimate_uncertainty(m, z)
    assert np.all(np.diff(u) >= 0)
    assert np.isfinite(u).all()


def test_component_order_does_not_matter():
    rng = np.random.default_rng(0)
    lat = rng.normal(size=(300, 6))
    cls = rng.integers(0, 3, size=300)
    m = sm.fit_estimator(sm.init_model(6, 3), lat, cls, n_components=3)
    perm = np.array([2, 0, 1])
    mp = dataclasses.replace(m, gmm_means=m.gmm_means[perm], gmm_vars=m.gmm_vars[perm],
                             gmm_priors=m.gmm_priors[perm], gmm_classes=m.gmm_classes[perm])
    np.testing.assert_allclose(sm.estimate_uncertainty(m, lat), sm.estimate_uncertainty(mp, lat), rtol=1e-12)


def test_unfitted_estimator_raises():
    with pytest.raises(sm.NotFittedError, match="estimator not fitted"):
        sm.estimate_uncertainty(toy_model(), np.zeros((2, 4)))
    with pytest.raises(sm.NotFittedError):
        sm.normalize_uncertainty(toy_model(), np.zeros(2))


def test_single_class_fit():
    lat = np.random.default_rng(0).normal(size=(50, 4))
    m = sm.fit_estimator(toy_model(), lat, np.full(50, 2), n_components=2)
    assert m.gmm_classes.tolist() == [2]
    assert m.gmm_priors.tolist() == [1.0]


def test_priors_follow_frequencies():
    lat = np.random.default_rng(0).normal(size=(100, 4))
    cls = np.array([0] * 75 + [1] * 25)
    m = sm.fit_estimator(toy_model(), lat, cls, n_components=2)
    np.testing.assert_allclose(m.gmm_priors, [0.75, 0.25])
    assert m.gmm_priors.sum() == pytest.approx(1.0)


def test_full_rank_pca_is_lossless():
    rng = np.random.default_rng(4)
    lat = rng.normal(size=(40, 5)) @ rng.normal(size=(5, 5))
    mean, basis = sm.fit_pca(lat, 5)
    np.testing.assert_allclose(basis @ basis.T, np.eye(5), atol=1e-9)
    recon = (lat - mean) @ basis.T @ basis + mean
    np.testing.assert_allclose(recon, lat, atol=1e-9)


def test_small_classes_dropped_with_warning(caplog):
    lat = np.random.default_rng(0).normal(size=(30, 4))
    cls = np.zeros(30, int)
    cls[0] = 1
    m = sm.fit_estimator(toy_model(), lat, cls, n_components=2)
    assert m.gmm_classes.tolist() == [0]
    assert "fewer than 2 samples" in caplog.text


def test_too_few_samples_raises():
    with pytest.raises(ValueError):
        sm.fit_estimator(toy_model(), np.zeros((3, 4)), np.zeros(3, int), n_components=6)


def test_variance_floor():
    lat = np.zeros((10, 4))
    lat[:, 0] = np.arange(10)
    m = sm.fit_estimator(toy_model(), lat, np.zeros(10, int), n_components=2)
    assert (m.gmm_vars >= sm.COV_FLOOR).all()


# --------------------------------------------------------------------- normaliser

def test_normalizer_quantile():
    raw = np.random.default_rng(0).normal(10.0, 2.0, size=10_000)
    m = sm.fit_normalizer(toy_model(), raw)
    mu, sigma = raw.mean(), raw.std()
    assert m.delta_a == pytest.approx(mu + sigma * NormalDist().inv_cdf(0.8), rel=1e-12)
    assert m.u_max == raw.max() >= m.delta_a


def test_normalizer_worked_value():
    # mu = 10, sigma = 2 exactly
    raw = np.array([8.0, 12.0])
    m = sm.fit_normalizer(toy_model(), raw)
    assert m.delta_a == pytest.approx(11.6832, abs=1e-4)


def test_constant_samples():
    m = sm.fit_normalizer(toy_model(), np.full(5, 3.0))
    assert m.delta_a == m.u_max == 3.0
    np.testing.assert_array_equal(sm.normalize_uncertainty(m, [2.0, 3.0, 3.5]), [0.0, 0.0, 1.0])


@pytest.mark.parametrize("u, expected", [(1.0, 0.0), (3.0, 0.5), (10.0, 1.0), (2.0, 0.0), (4.0, 1.0)])
def test_normalize_branches(u, expected):
    m = dataclasses.replace(toy_model(), delta_a=2.0, u_max=4.0)
    assert sm.normalize_uncertainty(m, u) == expected


@given(arrays(np.float64, 30, elements=st.floats(-1e6, 1e6)), st.floats(-100, 100), st.floats(0, 100))
def test_normalize_monotone_and_bounded(u, lo, span):
    m = dataclasses.replace(toy_model(), delta_a=lo, u_max=lo + span)
    u = np.sort(u)
    out = sm.normalize_uncertainty(m, u)
    assert ((out >= 0) & (out <= 1)).all()
    assert (np.diff(out) >= 0).all()


@given(st.integers(0, 1000), st.floats(-50, 50), st.floats(0.1, 20))
def test_gaussian_calibration(seed, mu, sigma):
    raw = np.random.default_rng(seed).normal(mu, sigma, size=10_000)
    m = sm.fit_normalizer(toy_model(), raw)
    frac = np.mean(sm.normalize_uncertainty(m, raw) > 0)
    assert 0.15 <= frac <= 0.25


def test_uncertainty_image_marks_invalid():
    rng = np.random.default_rng(0)
    m = sm.fit_estimator(toy_model(), rng.normal(size=(200, 4)), rng.integers(0, 3, 200), n_components=2)
    m = sm.fit_normalizer(m, rng.normal(size=100))
    valid = np.ones((3, 4), bool)
    valid[1, 2] = False
    raw, norm = sm.uncertainty_image(m, frame_from_features(rng.normal(size=(3, 4, 4)), valid))
    assert np.isnan(raw[1, 2]) and norm[1, 2] == 0.0
    assert np.isfinite(raw[valid]).all()


# --------------------------------------------------------------------- training

def test_zero_learning_rates_identity():
    m = toy_model()
    x = np.random.default_rng(0).normal(size=(20, 4))
    y = np.random.default_rng(1).integers(0, 3, 20)
    assert sm.models_equal(sm.train_step(m, x, y, 0.0, 0.0), m)


def _finite_difference(model, x, y, name, h=1e-6):
    base = getattr(model, name)
    g = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        lp = sm.cross_entropy(dataclasses.replace(model, **{name: plus}), x, y)
        lm = sm.cross_entropy(dataclasses.replace(model, **{name: minus}), x, y)
        g[idx] = (lp - lm) / (2 * h)
    return g


@given(st.integers(0, 10_000))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    m = sm.SegModel(latent_proj=rng.normal(size=(4, 5)), class_weights=rng.normal(size=(3, 4)),
                    biases=rng.normal(size=3))
    x = rng.normal(size=(16, 5))
    y = rng.integers(0, 3, 16)
    _, g_a, g_w, g_b = sm.loss_and_grads(m, x, y)
    for name, g in (("latent_proj", g_a), ("class_weights", g_w), ("biases", g_b)):
        fd = _finite_difference(m, x, y, name)
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-8)


def test_separable_batch_reaches_full_accuracy():
    rng = np.random.default_rng(0)
    means = np.eye(3, 4) * 3
    y = rng.integers(0, 3, 300)
    x = means[y] + 0.3 * rng.normal(size=(300, 4))
    m = toy_model()
    for _ in range(300):
        m = sm.train_step(m, x, y, 0.05, 0.5)
    assert np.mean(sm.predict_pixels(m, x) == y) == 1.0


@given(st.integers(0, 10_000))
def test_small_step_never_increases_loss(seed):
    rng = np.random.default_rng(seed)
    m = sm.SegModel(latent_proj=rng.normal(size=(3, 3)), class_weights=rng.normal(size=(3, 3)),
                    biases=rng.normal(size=3))
    x = rng.normal(size=(32, 3))
    y = rng.integers(0, 3, 32)
    before = sm.cross_entropy(m, x, y)
    lr = 0.1
    while lr > 1e-8:
        after = sm.cross_entropy(sm.train_step(m, x, y, lr, lr), x, y)
        if after <= before:
            break
        lr /= 2
    assert after <= before


def test_latent_and_head_rates_are_separate():
    rng = np.random.default_rng(0)
    m = toy_model()
    x, y = rng.normal(size=(10, 4)), rng.integers(0, 3, 10)
    only_head = sm.train_step(m, x, y, 0.0, 0.1)
    assert np.array_equal(only_head.latent_proj, m.latent_proj)
    assert not np.array_equal(only_head.class_weights, m.class_weights)
    only_latent = sm.train_step(m, x, y, 0.1, 0.0)
    assert np.array_equal(only_latent.class_weights, m.class_weights)
    assert not np.array_equal(only_latent.latent_proj, m.latent_proj)


# --------------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = sm.fit_estimator(toy_model(), rng.normal(size=(100, 4)), rng.integers(0, 3, 100), n_components=3)
    m = sm.fit_normalizer(m, rng.normal(size=50))
    sm.save_model(m, tmp_path / "m.npz")
    assert sm.models_equal(sm.load_model(tmp_path / "m.npz"), m)
    bare = toy_model()
    sm.save_model(bare, tmp_path / "b.npz")
    loaded = sm.load_model(tmp_path / "b.npz")
    assert sm.models_equal(loaded, bare) and not loaded.estimator_fitted


def test_checkpoint_version_checked(tmp_path):
    np.savez(tmp_path / "x.npz", version=np.array(99), latent_proj=np.eye(2), class_weights=np.eye(2),
             biases=np.zeros(2))
    with pytest.raises(ValueError, match="version"):
        sm.load_model(tmp_path / "x.npz")
