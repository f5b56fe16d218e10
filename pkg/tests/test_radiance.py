"""Tests for radiance composition, modulation and the dual-branch render."""

import numpy as np
import pytest

from splathdr.gradengine import finite_diff_check
from splathdr.mlp import param_items, softplus
from splathdr.radiance import (G_SIZES, PHI_SIZES, compose, compose_backward,
                               init_composer, init_modulator, modulate,
                               modulate_backward, render_branches,
                               render_branches_backward)
from splathdr.rasterizer import RasterConfig
from splathdr.scene import init_cloud, look_at_camera


def make_setup(seed=0, n=4):
    rng = np.random.default_rng(seed)
    cloud = init_cloud(rng.uniform(-0.5, 0.5, size=(n, 3)), rng=rng)
    cloud.h_r = rng.normal(scale=0.3, size=(n, 8))
    cloud.l_a_raw = rng.normal(scale=0.5, size=(n, 3))
    g = init_composer(rng)
    phi = init_modulator(rng)
    cam = look_at_camera([2.5, 0.4, 0.9], [0, 0, 0], [0, 0, 1], 8, 8)
    return cloud, g, phi, cam, rng


def test_composer_output_positive():
    cloud, g, _, _, rng = make_setup()
    colors, _ = compose(cloud.l_a(), cloud.h_r, g)
    assert colors.shape == (4, 3)
    assert np.all(colors > 0)


def test_zero_weight_composer_emits_half():
    cloud, g, _, _, _ = make_setup()
    for w in g.weights:
        w[...] = 0.0
    colors, _ = compose(cloud.l_a(), cloud.h_r, g)
    np.testing.assert_allclose(colors, 0.5, rtol=1e-12)


def test_modulator_broadcasts_lighting_scalar():
    cloud, _, phi, _, _ = make_setup()
    l_hat, _ = modulate(cloud.l_a(), 2.0, phi)
    assert l_hat.shape == (4, 3)
    assert np.all(l_hat > 0)


def test_compose_backward_splits_inputs():
    cloud, g, _, _, rng = make_setup()
    l_a = cloud.l_a()
    colors, cache = compose(l_a, cloud.h_r, g)
    d_colors = rng.standard_normal(colors.shape)
    d_l_a, d_h_r, dw, db = compose_backward(g, cache, d_colors)
    assert d_l_a.shape == (4, 3)
    assert d_h_r.shape == (4, 8)
    assert len(dw) == len(g.weights)

    params = {"l_a": l_a, "h_r": cloud.h_r}

    def loss():
        c, _ = compose(params["l_a"], params["h_r"], g)
        return float(np.sum(d_colors * c))

    err, worst = finite_diff_check(loss, params,
                                   {"l_a": d_l_a, "h_r": d_h_r}, step=1e-6)
    assert err < 1e-6, worst


def test_modulate_backward_matches_finite_differences():
    cloud, _, phi, _, rng = make_setup(1)
    l_a = cloud.l_a()
    l_hat, cache = modulate(l_a, 0.5, phi)
    d_l_hat = rng.standard_normal(l_hat.shape)
    d_l_a, dw, db = modulate_backward(phi, cache, d_l_hat)

    params = {"l_a": l_a}

    def loss():
        y, _ = modulate(params["l_a"], 0.5, phi)
        return float(np.sum(d_l_hat * y))

    err, worst = finite_diff_check(loss, params, {"l_a": d_l_a}, step=1e-6)
    assert err < 1e-6, worst


def test_exposure_scaling_is_exact():
    cloud, g, phi, cam, _ = make_setup()
    cfg = RasterConfig(oracle=True)
    out1, _ = render_branches(cloud, cam, 1.0, 1.0, g, phi, cfg)
    out2, _ = render_branches(cloud, cam, 2.0, 2.0, g, phi, cfg)
    np.testing.assert_array_equal(out1.i_hdr, out2.i_hdr)
    np.testing.assert_array_equal(out2.i_hdr_scaled, 2.0 * out2.i_hdr)
    np.testing.assert_array_equal(out1.i_hdr_scaled, out1.i_hdr)


def test_branches_share_geometry():
    cloud, g, phi, cam, _ = make_setup()
    cfg = RasterConfig(oracle=True)
    _, cache = render_branches(cloud, cam, 4.0, 4.0, g, phi, cfg)
    assert cache.comp_cache_gi.proj is cache.comp_cache_ie.proj
    np.testing.assert_array_equal(cache.comp_cache_gi.order,
                                  cache.comp_cache_ie.order)
    np.testing.assert_array_equal(cache.comp_cache_gi.alphas,
                                  cache.comp_cache_ie.alphas)


def test_single_branch_mode_aliases_scaled_image():
    cloud, g, phi, cam, _ = make_setup()
    out, cache = render_branches(cloud, cam, 4.0, 4.0, g, phi,
                                 RasterConfig(oracle=True), gi_enabled=False)
    assert out.i_hdr_relit is out.i_hdr_scaled
    assert cache.phi_cache is None


def test_rejects_nonpositive_exposure():
    cloud, g, phi, cam, _ = make_setup()
    with pytest.raises(ValueError):
        render_branches(cloud, cam, 0.0, 1.0, g, phi)


@pytest.mark.parametrize("gi_enabled", [True, False])
def test_render_backward_matches_finite_differences(gi_enabled):
    cloud, g, phi, cam, rng = make_setup(2)
    cfg = RasterConfig(oracle=True)
    t, l = 4.0, 4.0
    probes = [rng.standard_normal((8, 8, 3)) for _ in range(3)]

    params = dict(cloud.param_items())
    params.update(param_items(g, "g"))
    params.update(param_items(phi, "phi"))

    def loss():
        out, _ = render_branches(cloud, cam, t, l, g, phi, cfg,
                                 gi_enabled=gi_enabled)
        return float(np.sum(probes[0] * out.i_hdr)
                     + np.sum(probes[1] * out.i_hdr_scaled)
                     + np.sum(probes[2] * out.i_hdr_relit))

    _, cache = render_branches(cloud, cam, t, l, g, phi, cfg,
                               gi_enabled=gi_enabled)
    grads, _, contributed = render_branches_backward(
        cloud, g, phi, cache, probes[0], probes[1], probes[2])
    assert contributed.all()
    err, worst = finite_diff_check(loss, params, grads, step=1e-5,
                                   max_coords=40, rng=rng)
    assert err < 1e-5, worst


def test_ndc_grads_cover_retained_splats():
    cloud, g, phi, cam, rng = make_setup(3)
    cfg = RasterConfig(oracle=True)
    _, cache = render_branches(cloud, cam, 1.0, 1.0, g, phi, cfg)
    d = rng.standard_normal((8, 8, 3))
    _, ndc_grads, _ = render_branches_backward(cloud, g, phi, cache, d, d, d)
    assert ndc_grads.shape == (cache.proj.n_splats, 2)
    assert np.all(np.isfinite(ndc_grads))
