import numpy as np
import pytest

from vip.autodiff import DimensionError
from vip.fixtures import identity_attention_model, uniform_attention_model
from vip.metrics import (UndefinedSimilarityError, attention_rollout, averaged_attention_map,
                         compute_metrics, cosine_similarity, diagonal_dominance, roi_attention_mass,
                         ssim)
from vip.roi import RoiTokenSet
from vip.vit import MhaActivations


def random_stochastic(rng, *shape):
    a = rng.random(shape)
    return a / a.sum(axis=-1, keepdims=True)


# -- ssim ----------------------------------------------------------------------

def test_ssim_identity(image):
    assert ssim(image, image) == pytest.approx(1.0)


def test_ssim_symmetric(image, rng):
    other = np.clip(image + rng.normal(0, 10, image.shape), 0, 255)
    assert ssim(image, other) == pytest.approx(ssim(other, image), rel=1e-12)
    assert ssim(image, other) < 1.0


def test_ssim_constant_shift_is_luminance_term():
    a, b = np.full((16, 16), 100.0), np.full((16, 16), 150.0)
    c1 = (0.01 * 255) ** 2
    expected = (2 * 100 * 150 + c1) / (100 ** 2 + 150 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-12)
    assert ssim(a, b) == pytest.approx(0.92309, abs=1e-5)


def test_ssim_shape_mismatch():
    with pytest.raises(DimensionError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))


def test_gaussian_ssim_matches_skimage(image, rng):
    metrics = pytest.importorskip("skimage.metrics")
    other = np.clip(image + rng.normal(0, 12, image.shape), 0, 255)
    ref = np.mean([
        metrics.structural_similarity(image[c].astype(np.float64), other[c], data_range=255,
                                      gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        for c in range(3)
    ])
    assert ssim(image, other, gaussian=True) == pytest.approx(ref, abs=1e-6)


# -- cosine --------------------------------------------------------------------

def test_cosine_cases():
    u = np.array([1.0, 2.0, -3.0])
    assert cosine_similarity(u, u) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 5]) == 0.0
    assert cosine_similarity(u, -u) == pytest.approx(-1.0)


def test_cosine_zero_vector():
    with pytest.raises(UndefinedSimilarityError):
        cosine_similarity([0, 0], [1, 1])


# -- attention analysis --------------------------------------------------------

def test_roi_mass_uniform():
    trace = MhaActivations.from_arrays(np.full((1, 1, 197, 197), 1 / 197))
    mass = roi_attention_mass(trace, RoiTokenSet((1, 2, 15, 16), 197), 1)
    assert mass == pytest.approx(4 / 197)


def test_roi_mass_all_patches_without_cls_attention(rng):
    attn = random_stochastic(rng, 1, 2, 6, 5)
    attn = np.concatenate([np.zeros((1, 2, 6, 1)), attn], axis=-1)
    trace = MhaActivations.from_arrays(attn)
    assert roi_attention_mass(trace, RoiTokenSet(tuple(range(1, 6)), 6), 1) == pytest.approx(1.0)


def test_rollout_identity():
    trace = MhaActivations.from_arrays(np.broadcast_to(np.eye(5), (3, 2, 5, 5)))
    np.testing.assert_allclose(attention_rollout(trace).matrix, np.eye(5))


def test_rollout_two_tokens_uniform():
    trace = MhaActivations.from_arrays(np.full((1, 1, 2, 2), 0.5))
    np.testing.assert_allclose(attention_rollout(trace).matrix, [[0.75, 0.25], [0.25, 0.75]])


def test_rollout_brute_force(rng):
    attn = random_stochastic(rng, 3, 4, 6, 6)
    trace = MhaActivations.from_arrays(attn)
    expected = np.eye(6)
    for layer in range(2):
        fused = 0.5 * attn[layer].mean(axis=0) + 0.5 * np.eye(6)
        expected = fused @ expected
    rollout = attention_rollout(trace, 2)
    np.testing.assert_allclose(rollout.matrix, expected, rtol=1e-12)
    np.testing.assert_allclose(rollout.matrix.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(rollout.heat, rollout.matrix[0, 1:])


def test_rollout_is_head_permutation_invariant(rng):
    attn = random_stochastic(rng, 2, 4, 5, 5)
    a = attention_rollout(MhaActivations.from_arrays(attn)).matrix
    b = attention_rollout(MhaActivations.from_arrays(attn[:, ::-1])).matrix
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_dominance_brute_force(rng):
    attn = random_stochastic(rng, 1, 3, 7, 7)
    expected = np.mean([attn[0, h, i, i] for h in range(3) for i in range(7)])
    assert diagonal_dominance(MhaActivations.from_arrays(attn), 1) == pytest.approx(expected)


def test_dominance_of_synthetic_models(image):
    ident = identity_attention_model().forward(image).activations
    unif = uniform_attention_model().forward(image).activations
    for layer in range(1, 5):
        assert diagonal_dominance(ident, layer) == pytest.approx(1.0, abs=1e-6)
        assert diagonal_dominance(unif, layer) == pytest.approx(1 / 17, abs=1e-6)


def test_averaged_map(rng):
    attn = random_stochastic(rng, 1, 1, 4, 4)
    single = MhaActivations.from_arrays(attn)
    np.testing.assert_allclose(averaged_attention_map([single], 1), attn[0, 0])
    np.testing.assert_allclose(averaged_attention_map([single, single, single], 1), attn[0, 0])
    with pytest.raises(ValueError):
        averaged_attention_map([], 1)


def test_compute_metrics_on_identical_images(model, image, roi):
    bundle = compute_metrics(model, image, image, roi, rollout_depth=2)
    assert bundle.ssim == pytest.approx(1.0)
    assert bundle.feature_cosine_roi == pytest.approx(1.0)
    assert bundle.rollout_ratio == pytest.approx(1.0)
    assert bundle.roi_attention_mass_clean == bundle.roi_attention_mass_adv
    assert len(bundle.diagonal_dominance) == 4
    assert set(bundle.to_dict()) >= {"ssim", "rollout_ratio", "feature_cosine_background"}
