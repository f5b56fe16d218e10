"""Training losses: reconstruction (MSE + D-SSIM), blurred cross-branch HDR
consistency, unit-exposure regularization plumbing and the weighted total.

Every loss exposes a forward returning (value, cache) and an analytic
backward, so the pipeline's reverse pass never falls back to numerical
differentiation.  SSIM uses the standard Gaussian-window formulation; on
images smaller than the 11x11 window the loss path shrinks the window to the
largest odd size that fits (the evaluation metric in dataio keeps the strict
11x11 requirement).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.5
    lambda3: float = 0.0
    gamma: float = 0.2
    blur_sigma: float = 2.0
    blur_radius: int = 5

    def validate(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.blur_sigma <= 0 or self.blur_radius < 1:
            raise ValueError("invalid blur kernel parameters")


@dataclass
class LossBreakdown:
    rec: float
    cons: float
    unit: float
    total: float


def total_loss(rec, cons, unit, weights):
    """Exact weighted sum of the three loss components."""
    total = weights.lambda1 * rec + weights.lambda2 * cons + weights.lambda3 * unit
    return LossBreakdown(rec=rec, cons=cons, unit=unit, total=total)


# ---------------------------------------------------------------------------
# separable Gaussian blur with reflect padding


def gaussian_kernel(sigma, radius):
    """Normalized 1D Gaussian taps at integer offsets -radius..radius."""
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _reflect_indices(n, radius):
    # index matrix (2*radius+1, n) under mirror-without-edge-repeat padding
    i = np.arange(n)[None, :] + np.arange(-radius, radius + 1)[:, None]
    i = np.where(i < 0, -i, i)
    i = np.where(i >= n, 2 * n - 2 - i, i)
    return i


def _blur_axis(img, kernel, radius, axis):
    x = np.moveaxis(img, axis, 0)
    idx = _reflect_indices(x.shape[0], radius)
    out = np.zeros_like(x)
    for k in range(kernel.size):
        out += kernel[k] * x[idx[k]]
    return np.moveaxis(out, 0, axis)


def _blur_axis_adjoint(d_out, kernel, radius, axis):
    d = np.moveaxis(d_out, axis, 0)
    idx = _reflect_indices(d.shape[0], radius)
    dx = np.zeros_like(d)
    for k in range(kernel.size):
        np.add.at(dx, idx[k], kernel[k] * d)
    return np.moveaxis(dx, 0, axis)


def gaussian_blur(img, sigma, radius):
    """Channelwise separable Gaussian blur with reflect padding."""
    k = gaussian_kernel(sigma, radius)
    out = _blur_axis(np.asarray(img, dtype=float), k, radius, axis=0)
    return _blur_axis(out, k, radius, axis=1)


def gaussian_blur_adjoint(d_out, sigma, radius):
    """Exact adjoint of gaussian_blur (transpose of the linear blur map)."""
    k = gaussian_kernel(sigma, radius)
    d = _blur_axis_adjoint(np.asarray(d_out, dtype=float), k, radius, axis=1)
    return _blur_axis_adjoint(d, k, radius, axis=0)


# ---------------------------------------------------------------------------
# SSIM and D-SSIM


def _conv_valid(x, kernel, axis):
    win = sliding_window_view(x, kernel.size, axis=axis)
    return win @ kernel


def _conv_valid_adjoint(d, kernel, axis):
    pad = [(0, 0)] * d.ndim
    pad[axis] = (kernel.size - 1, kernel.size - 1)
    # the window is symmetric, so correlation and convolution coincide
    return _conv_valid(np.pad(d, pad), kernel, axis)


def _window_filter(img, kernel):
    return _conv_valid(_conv_valid(img, kernel, 0), kernel, 1)


def _window_filter_adjoint(d, kernel):
    return _conv_valid_adjoint(_conv_valid_adjoint(d, kernel, 1), kernel, 0)


def loss_window(height, width, window=SSIM_WINDOW):
    """Largest odd window that fits the image, capped at the default size."""
    w = min(window, height, width)
    return w if w % 2 == 1 else w - 1


def ssim_forward(a, b, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Mean SSIM over pixels and channels, plus a cache for the backward pass.

    Args:
        a: prediction image (H, W, 3) — gradients are taken with respect to a.
        b: reference image, same shape.

    Returns:
        (ssim value, cache).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < window:
        raise ValueError(f"image smaller than the {window}x{window} SSIM window")
    kernel = gaussian_kernel(sigma, window // 2)

    mx = _window_filter(a, kernel)
    my = _window_filter(b, kernel)
    sxx = _window_filter(a * a, kernel) - mx * mx
    syy = _window_filter(b * b, kernel) - my * my
    sxy = _window_filter(a * b, kernel) - mx * my

    num1 = 2 * mx * my + SSIM_C1
    num2 = 2 * sxy + SSIM_C2
    den1 = mx * mx + my * my + SSIM_C1
    den2 = sxx + syy + SSIM_C2
    ssim_map = (num1 * num2) / (den1 * den2)
    value = float(ssim_map.mean())
    cache = (a, b, kernel, mx, my, sxx, sxy, num1, num2, den1, den2)
    return value, cache


def ssim_backward(cache, d_value=1.0):
    """Gradient of ssim_forward's value with respect to the prediction."""
    a, b, kernel, mx, my, sxx, sxy, num1, num2, den1, den2 = cache
    d_map = np.full(mx.shape, d_value / mx.size)

    inv = 1.0 / (den1 * den2)
    d_num1 = d_map * num2 * inv
    d_num2 = d_map * num1 * inv
    d_den1 = -d_map * num1 * num2 * inv / den1
    d_den2 = -d_map * num1 * num2 * inv / den2

    d_mx = 2 * my * d_num1 + 2 * mx * d_den1
    d_sxy = 2 * d_num2
    d_sxx = d_den2
    # variance/covariance terms subtract products of the means
    d_mx += -d_sxy * my - 2 * mx * d_sxx

    d_a = _window_filter_adjoint(d_mx, kernel)
    d_a += 2 * a * _window_filter_adjoint(d_sxx, kernel)
    d_a += b * _window_filter_adjoint(d_sxy, kernel)
    return d_a


def dssim_forward(pred, gt, window=None):
    """Structural dissimilarity (1 - SSIM) / 2 with an image-fitting window."""
    if window is None:
        window = loss_window(pred.shape[0], pred.shape[1])
    value, cache = ssim_forward(pred, gt, window=window)
    return 0.5 * (1.0 - value), cache


def dssim_backward(cache, d_value=1.0):
    return ssim_backward(cache, -0.5 * d_value)


# ---------------------------------------------------------------------------
# loss terms


def reconstruction_loss(outputs, gt, gamma):
    """Sum over the final and both fused predictions of gamma*MSE + D-SSIM.

    Args:
        outputs: LdrOutputs for the view.
        gt: ground-truth LDR image in [0, 1].
        gamma: MSE weight inside each per-image term.

    Returns:
        (value, cache).
    """
    gt = np.asarray(gt, dtype=float)
    preds = (outputs.i_ldr, outputs.i_ig, outputs.i_gi)
    value = 0.0
    caches = []
    for pred in preds:
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
        mse = float(np.mean((pred - gt) ** 2))
        dssim, ssim_cache = dssim_forward(pred, gt)
        value += gamma * mse + dssim
        caches.append((pred, ssim_cache))
    return value, (caches, gt, gamma)


def reconstruction_loss_backward(cache, d_value=1.0):
    """Returns (d_i_ldr, d_i_ig, d_i_gi)."""
    caches, gt, gamma = cache
    grads = []
    for pred, ssim_cache in caches:
        d = d_value * gamma * 2.0 * (pred - gt) / pred.size
        d = d + dssim_backward(ssim_cache, d_value)
        grads.append(d)
    return tuple(grads)


def consistency_loss(i_hdr_scaled, i_hdr_relit, weights):
    """Mean absolute difference of the Gaussian-blurred branch HDR images."""
    a = gaussian_blur(i_hdr_scaled, weights.blur_sigma, weights.blur_radius)
    b = gaussian_blur(i_hdr_relit, weights.blur_sigma, weights.blur_radius)
    diff = a - b
    value = float(np.mean(np.abs(diff)))
    return value, (np.sign(diff), diff.size, weights)


def consistency_loss_backward(cache, d_value=1.0):
    """Returns (d_i_hdr_scaled, d_i_hdr_relit)."""
    sign, size, weights = cache
    d_blur = d_value * sign / size
    d_a = gaussian_blur_adjoint(d_blur, weights.blur_sigma, weights.blur_radius)
    return d_a, -d_a


def mse_loss(pred, gt):
    """Plain MSE with its gradient cache; used by the unit-exposure term."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2)), (pred, gt)


def mse_loss_backward(cache, d_value=1.0):
    pred, gt = cache
    return d_value * 2.0 * (pred - gt) / pred.size
