"""Tests for the loss terms, SSIM machinery and blur adjoint."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splathdr.gradengine import finite_diff_check
from splathdr.losses import (LossWeights, consistency_loss,
                             consistency_loss_backward, dssim_backward,
                             dssim_forward, gaussian_blur,
                             gaussian_blur_adjoint, gaussian_kernel,
                             loss_window, mse_loss, mse_loss_backward,
                             reconstruction_loss, reconstruction_loss_backward,
                             ssim_backward, ssim_forward, total_loss)
from splathdr.tonemap import LdrOutputs


def test_weights_validate():
    LossWeights().validate()
    with pytest.raises(ValueError):
        LossWeights(lambda2=-0.1).validate()
    with pytest.raises(ValueError):
        LossWeights(blur_radius=0).validate()


def test_total_loss_weighted_sum():
    w = LossWeights(lambda1=1.0, lambda2=0.5, lambda3=0.25)
    b = total_loss(0.4, 0.2, 0.8, w)
    np.testing.assert_allclose(b.total, 0.4 + 0.1 + 0.2)


def test_gaussian_kernel_normalized_and_symmetric():
    k = gaussian_kernel(2.0, 5)
    assert k.size == 11
    np.testing.assert_allclose(k.sum(), 1.0, rtol=1e-14)
    np.testing.assert_allclose(k, k[::-1])


def test_blur_preserves_constants():
    img = np.full((9, 7, 3), 0.37)
    out = gaussian_blur(img, 2.0, 5)
    np.testing.assert_allclose(out, img, rtol=1e-13)


def test_blur_adjoint_is_exact_transpose():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 5, 3))
    y = rng.standard_normal((6, 5, 3))
    lhs = np.sum(gaussian_blur(x, 2.0, 5) * y)
    rhs = np.sum(x * gaussian_blur_adjoint(y, 2.0, 5))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12)


def test_ssim_self_is_one():
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (16, 16, 3))
    value, _ = ssim_forward(img, img)
    np.testing.assert_allclose(value, 1.0, atol=1e-12)


def test_ssim_symmetric():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, (16, 16, 3))
    b = rng.uniform(0, 1, (16, 16, 3))
    va, _ = ssim_forward(a, b)
    vb, _ = ssim_forward(b, a)
    np.testing.assert_allclose(va, vb, rtol=1e-12)


def test_ssim_constant_images_closed_form():
    p, q = 0.3, 0.7
    a = np.full((16, 16, 3), p)
    b = np.full((16, 16, 3), q)
    value, _ = ssim_forward(a, b)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = ((2 * p * q + c1) * c2) / ((p * p + q * q + c1) * c2)
    np.testing.assert_allclose(value, expected, rtol=1e-10)


def test_ssim_rejects_small_images():
    with pytest.raises(ValueError):
        ssim_forward(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_loss_window_shrinks_to_odd_fit():
    assert loss_window(64, 64) == 11
    assert loss_window(8, 8) == 7
    assert loss_window(11, 10) == 9
    assert loss_window(3, 64) == 3


def test_ssim_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    a0 = rng.uniform(0.2, 0.8, (12, 12, 3))
    b = rng.uniform(0.2, 0.8, (12, 12, 3))
    params = {"a": a0}

    def loss():
        v, _ = ssim_forward(params["a"], b)
        return v

    _, cache = ssim_forward(a0, b)
    grad = ssim_backward(cache)
    err, worst = finite_diff_check(loss, params, {"a": grad}, step=1e-5,
                                   max_coords=40, rng=rng)
    assert err < 1e-4, worst


def test_dssim_is_half_one_minus_ssim():
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 1, (12, 12, 3))
    b = rng.uniform(0, 1, (12, 12, 3))
    s, _ = ssim_forward(a, b)
    d, _ = dssim_forward(a, b, window=11)
    np.testing.assert_allclose(d, 0.5 * (1.0 - s), rtol=1e-12)


def test_reconstruction_loss_backward_matches_finite_differences():
    rng = np.random.default_rng(5)
    shape = (8, 8, 3)
    gt = rng.uniform(0, 1, shape)
    imgs = {k: rng.uniform(0, 1, shape) for k in ("ldr", "ig", "gi")}

    def outputs():
        return LdrOutputs(i_glo=None, i_loc=None, i_glo_hat=None,
                          i_loc_hat=None, i_ig=imgs["ig"], i_gi=imgs["gi"],
                          i_ldr=imgs["ldr"])

    def loss():
        v, _ = reconstruction_loss(outputs(), gt, gamma=0.2)
        return v

    _, cache = reconstruction_loss(outputs(), gt, gamma=0.2)
    d_ldr, d_ig, d_gi = reconstruction_loss_backward(cache)
    err, worst = finite_diff_check(
        loss, imgs, {"ldr": d_ldr, "ig": d_ig, "gi": d_gi}, step=1e-6,
        max_coords=30, rng=rng)
    assert err < 1e-5, worst


def test_consistency_loss_zero_when_branches_agree():
    rng = np.random.default_rng(6)
    img = rng.uniform(0, 5, (10, 10, 3))
    value, _ = consistency_loss(img, img.copy(), LossWeights())
    assert value == 0.0


def test_consistency_loss_invariant_to_shared_constant():
    rng = np.random.default_rng(7)
    a = rng.uniform(0, 5, (10, 10, 3))
    b = rng.uniform(0, 5, (10, 10, 3))
    w = LossWeights()
    v1, _ = consistency_loss(a, b, w)
    v2, _ = consistency_loss(a + 3.7, b + 3.7, w)
    np.testing.assert_allclose(v1, v2, rtol=1e-12)


def test_consistency_loss_backward_matches_finite_differences():
    rng = np.random.default_rng(8)
    w = LossWeights()
    imgs = {"a": rng.uniform(0, 2, (6, 6, 3)),
            "b": rng.uniform(0, 2, (6, 6, 3))}

    def loss():
        v, _ = consistency_loss(imgs["a"], imgs["b"], w)
        return v

    _, cache = consistency_loss(imgs["a"], imgs["b"], w)
    d_a, d_b = consistency_loss_backward(cache)
    err, worst = finite_diff_check(loss, imgs, {"a": d_a, "b": d_b},
                                   step=1e-6, max_coords=30, rng=rng)
    assert err < 1e-5, worst


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
@settings(max_examples=30, deadline=None)
def test_mse_of_constant_images(p, q):
    a = np.full((4, 4, 3), p)
    b = np.full((4, 4, 3), q)
    value, _ = mse_loss(a, b)
    np.testing.assert_allclose(value, (p - q) ** 2, atol=1e-12)


def test_mse_backward_matches_finite_differences():
    rng = np.random.default_rng(9)
    gt = rng.uniform(0, 1, (5, 5, 3))
    params = {"pred": rng.uniform(0, 1, (5, 5, 3))}

    def loss():
        v, _ = mse_loss(params["pred"], gt)
        return v

    _, cache = mse_loss(params["pred"], gt)
    err, worst = finite_diff_check(loss, params,
                                   {"pred": mse_loss_backward(cache)},
                                   step=1e-6, max_coords=20, rng=rng)
    assert err < 1e-7, worst
