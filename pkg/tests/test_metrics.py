"""Metrics against slow reference implementations."""

import numpy as np
import pytest
from scipy.ndimage import sobel

from moesplat.errors import InvalidInputError
from moesplat.metrics import (frame_difference, gaussian_window,
                              motion_magnitudes, psnr, sobel_map,
                              specialization_scores, ssim, ssim_and_grad)

from oracles import central_diff, max_rel_err, ssim_reference


def test_psnr_known_values():
    a = np.zeros((8, 8))
    assert psnr(a, a) == 99.0
    b = np.full((8, 8), 0.1)
    assert abs(psnr(a, b) - 20.0) < 1e-12
    c = np.full((8, 8), 0.5)
    assert abs(psnr(a, c) - 10.0 * np.log10(4.0)) < 1e-12


def test_psnr_shape_mismatch():
    with pytest.raises(InvalidInputError):
        psnr(np.zeros((4, 4)), np.zeros((5, 4)))


def test_gaussian_window_shape_and_sum():
    w = gaussian_window()
    assert w.shape == (11,)
    assert abs(w.sum() - 1.0) < 1e-14
    assert np.array_equal(w, w[::-1])
    assert w[5] == w.max()


def test_ssim_matches_reference_loop():
    rng = np.random.default_rng(0)
    for _ in range(4):
        a = rng.uniform(0, 1, (17, 15))
        b = np.clip(a + rng.normal(0, 0.08, a.shape), 0, 1)
        assert abs(ssim(a, b) - ssim_reference(a, b)) < 1e-12


def test_ssim_identity_and_bounds():
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, (16, 16, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-12
    noisy = np.clip(a + rng.normal(0, 0.3, a.shape), 0, 1)
    v = ssim(a, noisy)
    assert v < 1.0
    assert v > -1.0


def test_ssim_multichannel_is_channel_mean():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, (14, 14, 3))
    b = rng.uniform(0, 1, (14, 14, 3))
    per = [ssim(a[:, :, c], b[:, :, c]) for c in range(3)]
    assert abs(ssim(a, b) - np.mean(per)) < 1e-12


def test_ssim_grad_matches_fd():
    rng = np.random.default_rng(3)
    a = rng.uniform(0.2, 0.8, (9, 9))
    b = rng.uniform(0.2, 0.8, (9, 9))
    _, grad = ssim_and_grad(a, b)
    fd = central_diff(lambda v: ssim(v, b), a.copy())
    assert max_rel_err(grad, fd, floor=1e-7) < 1e-6
    # and for a 3-channel image
    a3 = rng.uniform(0.2, 0.8, (7, 7, 3))
    b3 = rng.uniform(0.2, 0.8, (7, 7, 3))
    _, grad3 = ssim_and_grad(a3, b3)
    fd3 = central_diff(lambda v: ssim(v, b3), a3.copy())
    assert max_rel_err(grad3, fd3, floor=1e-7) < 1e-6


def test_sobel_map_matches_scipy_interior():
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, (12, 12))
    ours = sobel_map(img)
    gx = sobel(img, axis=1, mode="constant", cval=0.0)
    gy = sobel(img, axis=0, mode="constant", cval=0.0)
    ref = np.sqrt(gx ** 2 + gy ** 2)
    assert np.allclose(ours[1:-1, 1:-1], ref[1:-1, 1:-1], atol=1e-12)


def test_frame_difference():
    frames = [np.zeros((4, 4)), np.ones((4, 4)), np.ones((4, 4))]
    assert abs(frame_difference(frames) - 0.5) < 1e-12
    with pytest.raises(InvalidInputError):
        frame_difference([np.zeros((4, 4))])


def test_motion_magnitudes_orders_fast_above_slow():
    from moesplat.experts import init_expert
    rng = np.random.default_rng(5)
    pts = rng.normal(0, 0.5, (6, 3))
    e = init_expert("polynomial", pts, 6, rng)
    e.motion["coeffs"][:3, :, 1] = 0.8    # fast movers
    e.motion["coeffs"][3:, :, 1] = 0.01   # near static
    mags = motion_magnitudes(e)
    assert mags[:3].min() > mags[3:].max()


def test_specialization_scores_count_denominator():
    w = [np.array([1.0, 1.0, 0.0]), np.array([0.5, 0.5, 0.5])]
    v = [np.array([2.0, 4.0, 100.0]), np.array([1.0, 2.0, 3.0])]
    out = specialization_scores(w, v)
    # zero-weight entries do not count toward the denominator
    assert abs(out[0] - 3.0) < 1e-12
    assert abs(out[1] - 1.0) < 1e-12
    out2 = specialization_scores(w, v, denominator="weight_sum")
    assert abs(out2[0] - 3.0) < 1e-12
    assert abs(out2[1] - 2.0) < 1e-12


def test_specialization_scores_normalize_and_validation():
    w = [np.ones(2), np.ones(2)]
    v = [np.array([1.0, 1.0]), np.array([3.0, 5.0])]
    out = specialization_scores(w, v, normalize=True)
    assert abs(out.max() - 1.0) < 1e-12
    with pytest.raises(InvalidInputError):
        specialization_scores(w, v, denominator="median")
    with pytest.raises(InvalidInputError):
        specialization_scores([np.ones(2)], v)
    with pytest.raises(InvalidInputError):
        specialization_scores([np.ones(3)], [np.ones(2)])
