"""Tests for projection, compositing and their hand-derived VJPs."""

import numpy as np
import pytest

from splathdr.gradengine import check_op, finite_diff_check
from splathdr.rasterizer import (RasterConfig, composite, composite_backward,
                                 project, project_backward,
                                 reference_composite)
from splathdr.scene import GaussianCloud, init_cloud, look_at_camera


def random_cloud(rng, n):
    cloud = init_cloud(rng.uniform(-0.6, 0.6, size=(n, 3)), rng=rng)
    cloud.log_scale = rng.uniform(np.log(0.05), np.log(0.3), size=(n, 3))
    cloud.rotation = rng.standard_normal((n, 4))
    cloud.normalize_rotations()
    cloud.opacity_logit = rng.uniform(-2.0, 2.0, size=n)
    return cloud


def make_camera(width=16, height=16):
    return look_at_camera([2.5, 0.5, 1.0], [0, 0, 0], [0, 0, 1],
                          width, height)


def oracle_cfg(**kw):
    return RasterConfig(oracle=True, **kw)


def test_projection_center_matches_pinhole():
    cloud = init_cloud(np.array([[0.0, 0.0, 0.0]]))
    cam = make_camera()
    proj = project(cloud, cam)
    assert proj.n_splats == 1
    # look-at target lands on the principal point
    np.testing.assert_allclose(proj.mean2d[0], [cam.cx, cam.cy], atol=1e-9)
    np.testing.assert_allclose(proj.ndc[0], [0.0, 0.0], atol=1e-9)


def test_projection_culls_behind_camera():
    cloud = init_cloud(np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]))
    cam = make_camera()  # sits at x=2.5 looking at the origin
    proj = project(cloud, cam)
    assert proj.visible.tolist() == [True, False]
    assert proj.idx.tolist() == [0]


def test_projection_lowpass_floors_screen_covariance():
    cloud = init_cloud(np.array([[0.0, 0.0, 0.0]]))
    cloud.log_scale[...] = np.log(1e-6)  # degenerate splat
    proj = project(cloud, make_camera())
    assert proj.cov2d[0, 0, 0] >= 0.3
    assert proj.cov2d[0, 1, 1] >= 0.3


def test_oracle_matches_reference_on_random_scenes():
    rng = np.random.default_rng(0)
    cfg = oracle_cfg(background=np.array([0.2, 0.1, 0.3]))
    for _ in range(100):
        n = int(rng.integers(1, 17))
        width = int(rng.integers(4, 33))
        height = int(rng.integers(4, 33))
        cloud = random_cloud(rng, n)
        cam = look_at_camera(rng.uniform(1.5, 3.0, 3), [0, 0, 0], [0, 0, 1],
                             width, height)
        proj = project(cloud, cam, cfg)
        alphas = cloud.opacity()[proj.idx]
        colors = rng.uniform(0, 2, size=(proj.n_splats, 3))
        image, _ = composite(proj, alphas, colors, cfg)
        ref = reference_composite(proj.mean2d, proj.cov2d, proj.depth,
                                  alphas, colors, width, height,
                                  cfg.background)
        np.testing.assert_allclose(image, ref, atol=1e-12)


def test_fast_mode_close_to_oracle():
    rng = np.random.default_rng(1)
    cloud = random_cloud(rng, 12)
    cam = make_camera(24, 24)
    proj = project(cloud, cam)
    alphas = cloud.opacity()[proj.idx]
    colors = rng.uniform(0, 1, size=(proj.n_splats, 3))
    fast, _ = composite(proj, alphas, colors, RasterConfig())
    exact, _ = composite(project(cloud, cam, oracle_cfg()), alphas, colors,
                         oracle_cfg())
    # thresholds and the 3-sigma bbox only drop sub-1/255 contributions
    assert np.abs(fast - exact).max() < 5e-2


def test_composite_order_is_depth_stable():
    # two identical splats at the same depth: storage order breaks the tie
    mean2d = [np.array([8.0, 8.0])] * 2
    cov2d = [np.eye(2) * 4.0] * 2
    depth = [1.0, 1.0]
    colors = [np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])]
    img = reference_composite(mean2d, cov2d, depth, [0.9, 0.9], colors, 16, 16)
    assert img[8, 8, 0] > img[8, 8, 1]  # first-stored splat composites first


def test_opaque_front_splat_hides_back_splat():
    mean2d = [np.array([4.0, 4.0])] * 2
    cov2d = [np.eye(2) * 100.0] * 2
    colors = [np.array([1.0, 1.0, 1.0]), np.array([0.0, 0.0, 0.0])]
    near_first = reference_composite(mean2d, cov2d, [1.0, 2.0], [1.0, 1.0],
                                     colors, 8, 8)
    assert near_first[4, 4, 0] > 0.99


def test_composite_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    cloud = random_cloud(rng, 4)
    cam = make_camera(8, 8)
    cfg = oracle_cfg(background=np.array([0.1, 0.2, 0.3]))
    proj = project(cloud, cam, cfg)
    alphas0 = cloud.opacity()[proj.idx]
    colors0 = rng.uniform(0.1, 1.0, size=(proj.n_splats, 3))
    target = rng.uniform(0, 1, size=(8, 8, 3))

    params = {"alphas": alphas0, "colors": colors0,
              "mean2d": proj.mean2d, "cov2d": proj.cov2d}

    def loss():
        # conic must be recomputed whenever cov2d is perturbed; symmetrize
        # first so the probe matches the shared off-diagonal convention
        cov = 0.5 * (params["cov2d"] + np.swapaxes(params["cov2d"], 1, 2))
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
        conic = np.empty_like(cov)
        conic[:, 0, 0] = cov[:, 1, 1] / det
        conic[:, 1, 1] = cov[:, 0, 0] / det
        conic[:, 0, 1] = conic[:, 1, 0] = -cov[:, 0, 1] / det
        proj.conic = conic
        image, _ = composite(proj, params["alphas"], params["colors"], cfg)
        return float(np.sum((image - target) ** 2))

    loss()  # sync conic with the current cov2d
    image, cache = composite(proj, params["alphas"], params["colors"], cfg)
    d_image = 2.0 * (image - target)
    d_colors, d_alphas, d_mean2d, d_cov2d, contributed = \
        composite_backward(cache, d_image)
    assert contributed.all()
    # the symmetric cov2d carries half the off-diagonal gradient per entry
    analytic = {"alphas": d_alphas, "colors": d_colors, "mean2d": d_mean2d,
                "cov2d": d_cov2d}
    err, worst = finite_diff_check(loss, params, analytic, step=1e-6)
    assert err < 1e-5, worst


def test_project_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    cloud = random_cloud(rng, 3)
    cam = make_camera(8, 8)
    cfg = oracle_cfg()
    probe_mean = rng.standard_normal((3, 2))
    probe_cov = rng.standard_normal((3, 2, 2))
    probe_cov = 0.5 * (probe_cov + np.swapaxes(probe_cov, 1, 2))

    params = {"mu": cloud.mu, "log_scale": cloud.log_scale,
              "rotation": cloud.rotation}

    def loss():
        proj = project(cloud, cam, cfg)
        assert proj.n_splats == 3
        return float(np.sum(probe_mean * proj.mean2d)
                     + np.sum(probe_cov * proj.cov2d))

    proj = project(cloud, cam, cfg)
    grads, _ = project_backward(proj, cloud, probe_mean, probe_cov)
    err, worst = finite_diff_check(loss, params, grads, step=1e-6)
    assert err < 1e-5, worst


def test_ndc_gradient_is_pixel_gradient_rescaled():
    rng = np.random.default_rng(4)
    cloud = random_cloud(rng, 2)
    cam = make_camera(16, 8)
    proj = project(cloud, cam)
    d_mean2d = rng.standard_normal((proj.n_splats, 2))
    _, ndc = project_backward(proj, cloud, d_mean2d,
                              np.zeros((proj.n_splats, 2, 2)))
    np.testing.assert_allclose(ndc[:, 0], d_mean2d[:, 0] * 8.0)
    np.testing.assert_allclose(ndc[:, 1], d_mean2d[:, 1] * 4.0)


def test_background_shows_through_empty_scene():
    cloud = init_cloud(np.array([[0.0, 0.0, 0.0]]))
    cloud.opacity_logit[...] = -100.0  # fully transparent
    cfg = RasterConfig(background=np.array([0.5, 0.25, 0.75]))
    proj = project(cloud, make_camera(), cfg)
    image, _ = composite(proj, cloud.opacity()[proj.idx],
                         np.ones((proj.n_splats, 3)), cfg)
    expected = np.broadcast_to(cfg.background, image.shape)
    np.testing.assert_allclose(image, expected, atol=1e-12)
