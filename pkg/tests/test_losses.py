import math

import numpy as np
import pytest

from pamdenoise.losses import (
    LossWeights,
    PerceptualExtractor,
    combined_loss,
    discriminator_loss,
    generator_adv_loss,
    perceptual_loss,
    schedule_weights,
    smooth_l1_loss,
)
from pamdenoise.tensor import DimensionError, Tensor, grad_check, ops, save_tns

T = Tensor


def _img(seed, shape=(2, 1, 8, 8)):
    return T(np.random.default_rng(seed).uniform(0, 1, shape))


def test_smooth_l1_branch_values():
    n = 64
    a = np.zeros((1, 1, 8, 8))
    b = a.copy()
    b[0, 0, 3, 3] = 0.5
    assert abs(smooth_l1_loss(T(b), T(a)).item() - 0.125 / n) < 1e-12
    b[0, 0, 3, 3] = 2.0
    assert abs(smooth_l1_loss(T(b), T(a)).item() - 1.5 / n) < 1e-12
    assert smooth_l1_loss(T(a), T(a)).item() == 0.0


def test_smooth_l1_symmetric_and_continuous():
    a, b = _img(0), _img(1)
    assert smooth_l1_loss(a, b).item() == smooth_l1_loss(b, a).item()
    one = np.ones((1, 1, 1, 1))
    below = smooth_l1_loss(T(one * (1 - 1e-12)), T(0 * one)).item()
    above = smooth_l1_loss(T(one * (1 + 1e-12)), T(0 * one)).item()
    assert abs(below - 0.5) < 1e-11 and abs(above - 0.5) < 1e-11


def test_smooth_l1_shape_mismatch():
    with pytest.raises(DimensionError):
        smooth_l1_loss(_img(0), _img(1, (2, 1, 8, 4)))


def test_generator_adv_loss_examples():
    assert generator_adv_loss(T([[1 - 1e-7]])).item() == pytest.approx(1e-7, abs=1e-12)
    assert generator_adv_loss(T([[0.5]])).item() == pytest.approx(math.log(2), abs=1e-15)
    assert generator_adv_loss(T([[0.5], [0.5]])).item() == pytest.approx(2 * math.log(2), abs=1e-15)
    assert math.isfinite(generator_adv_loss(T([[0.0], [1.0]])).item())


def test_discriminator_loss_examples():
    assert discriminator_loss(T([[1 - 1e-7]]), T([[1e-7]])).item() < 1e-6
    assert discriminator_loss(T([[0.5]]), T([[0.5]])).item() == pytest.approx(2 * math.log(2), abs=1e-15)
    r, f = np.array([[0.3], [0.9]]), np.array([[0.2], [0.6]])
    a = discriminator_loss(T(r), T(f)).item()
    b = discriminator_loss(T(1 - f), T(1 - r)).item()
    assert a == pytest.approx(b, abs=1e-12)


def test_perceptual_identity_symmetry_and_nonneg():
    ext = PerceptualExtractor(seed=3)
    a, b = _img(0, (2, 1, 16, 16)), _img(1, (2, 1, 16, 16))
    assert perceptual_loss(a, a, ext).item() == 0.0
    assert perceptual_loss(a, b, ext).item() == perceptual_loss(b, a, ext).item() > 0
    with pytest.raises(DimensionError):
        perceptual_loss(a, _img(1, (2, 1, 8, 8)), ext)


def test_perceptual_identity_kernel_is_pixel_mse():
    ext = PerceptualExtractor(stages=((1, 1, False),), weights=[(np.ones((1, 1, 1, 1)), np.zeros(1))])
    a, b = _img(4), _img(5)
    mse = float(np.mean((a.data - b.data) ** 2))
    assert abs(perceptual_loss(a, b, ext).item() - mse) < 1e-15


def test_perceptual_from_tns_matches_seeded(tmp_path):
    ext = PerceptualExtractor(seed=9)
    paths = []
    for i, (w, b) in enumerate(ext.weights):
        for kind, arr in (("w", w.data), ("b", b.data)):
            p = tmp_path / f"{kind}{i}.tns"
            save_tns(p, arr)
            paths.append(p)
    loaded = PerceptualExtractor.from_tns(paths, [s[2] for s in ext.stages])
    assert loaded.fingerprint() == ext.fingerprint()
    assert loaded.provenance()["source"].startswith("external:")
    x = _img(2, (1, 1, 16, 16))
    assert np.array_equal(ext(x).data, loaded(x).data)


def test_extractor_is_frozen_and_deterministic():
    ext = PerceptualExtractor(seed=1)
    h0 = ext.fingerprint()
    x = _img(3, (2, 1, 16, 16))
    assert np.array_equal(ext(x).data, ext(x).data)
    assert all(not w.requires_grad and not b.requires_grad for w, b in ext.weights)
    assert PerceptualExtractor(seed=1).fingerprint() == h0


def test_combined_weight_masking_and_composition():
    ext = PerceptualExtractor(seed=2)
    den, clean = _img(0, (2, 1, 16, 16)), _img(1, (2, 1, 16, 16))
    scores = T([[0.3], [0.7]])
    total, vals = combined_loss(den, clean, scores, LossWeights(0, 1, 0), ext)
    assert total.item() == smooth_l1_loss(den, clean).item()
    total, _ = combined_loss(den, clean, scores, LossWeights(0, 0, 0), ext)
    assert total.item() == 0.0
    total, vals = combined_loss(den, clean, scores, LossWeights(1, 0, 1e-3), ext)
    expect = perceptual_loss(den, clean, ext).item() + 1e-3 * generator_adv_loss(scores).item()
    assert abs(total.item() - expect) < 1e-12
    assert set(vals) == {"L_perc", "L_sl1", "L_adv_g"}


def test_loss_gradients():
    ext = PerceptualExtractor(seed=4, stages=((4, 3, True),))
    clean = _img(1, (1, 1, 8, 8))
    scores = T([[0.2], [0.6], [0.9]])
    assert grad_check(lambda t: perceptual_loss(t, clean, ext), _img(0, (1, 1, 8, 8)), 1e-6) < 1e-4
    assert grad_check(lambda t: smooth_l1_loss(t, clean), T(np.random.default_rng(5).uniform(-2, 2, (1, 1, 8, 8))), 1e-6) < 1e-4
    assert grad_check(generator_adv_loss, scores, 1e-6) < 1e-4
    assert grad_check(lambda t: discriminator_loss(t, ops.mul(t, 0.5)), scores, 1e-6) < 1e-4


def test_schedule_endpoints_and_midpoint():
    assert schedule_weights(0, 100).as_tuple() == (0.0, 1.0, 0.0)
    assert schedule_weights(100, 100).as_tuple() == (1.0, 0.0, 1e-3)
    assert schedule_weights(50, 100).as_tuple() == (0.5, 0.5, 5e-4)
    with pytest.raises(ValueError):
        schedule_weights(101, 100)
    with pytest.raises(ValueError):
        schedule_weights(0, 0)


def test_schedule_monotone():
    ws = [schedule_weights(s, 37) for s in range(38)]
    for a, b in zip(ws, ws[1:]):
        assert b.k1 >= a.k1 and b.k3 >= a.k3 and b.k2 <= a.k2
