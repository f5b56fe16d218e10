"""Physical radiance composition and the two HDR branch renders.

Per-Gaussian HDR color is produced by a small composer network g from the
positive ambient illumination L_a and the intrinsic reflectance feature H_r.
The image-exposure branch composites those colors and scales the image by the
shutter time t; the illumination branch first replaces L_a with a virtual
illumination from the modulator network phi(L_a, l) and composites with
identical geometry, opacities and splat ordering, so the two branch images
differ only in color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mlp import init_mlp, mlp_backward, mlp_forward, sigmoid, softplus
from .rasterizer import (RasterConfig, composite, composite_backward, project,
                         project_backward)

G_SIZES = (11, 32, 32, 3)     # [L_a, H_r] -> color
PHI_SIZES = (4, 16, 3)        # [L_a, l] -> virtual L_a

# softplus(bias) = 0.5 at init keeps early renders in a trainable range
_INIT_BIAS = float(np.log(np.expm1(0.5)))


def init_composer(rng):
    return init_mlp(G_SIZES, "softplus", rng, final_bias=_INIT_BIAS)


def init_modulator(rng):
    return init_mlp(PHI_SIZES, "softplus", rng, final_bias=_INIT_BIAS)


def compose(l_a, h_r, g):
    """Per-Gaussian HDR color c = g(L_a, H_r).

    Args:
        l_a: (N, 3) positive ambient illumination.
        h_r: (N, 8) reflectance features.
        g: composer MlpParams with softplus output.

    Returns:
        (colors (N, 3), cache) — the cache feeds compose_backward.
    """
    x = np.concatenate([np.atleast_2d(l_a), np.atleast_2d(h_r)], axis=1)
    colors, cache = mlp_forward(g, x)
    return colors, cache


def compose_backward(g, cache, d_colors):
    """Returns (d_l_a, d_h_r, dweights, dbiases)."""
    dx, dw, db = mlp_backward(g, cache, d_colors)
    return dx[:, :3], dx[:, 3:], dw, db


def modulate(l_a, lighting_l, phi):
    """Virtual illumination l_hat = phi(L_a, l) with l broadcast per Gaussian.

    Returns (l_hat (N, 3), cache).
    """
    l_a = np.atleast_2d(l_a)
    l_col = np.full((l_a.shape[0], 1), float(lighting_l))
    x = np.concatenate([l_a, l_col], axis=1)
    l_hat, cache = mlp_forward(phi, x)
    return l_hat, cache


def modulate_backward(phi, cache, d_l_hat):
    """Returns (d_l_a, dweights, dbiases); the lighting scalar is not learnable."""
    dx, dw, db = mlp_backward(phi, cache, d_l_hat)
    return dx[:, :3], dw, db


@dataclass
class BranchOutputs:
    """HDR images of the two branches.

    i_hdr is the pre-exposure composite; i_hdr_scaled = t * i_hdr exactly;
    i_hdr_relit is the virtual-illumination composite from the same geometry.
    """

    i_hdr: np.ndarray
    i_hdr_scaled: np.ndarray
    i_hdr_relit: np.ndarray


@dataclass
class BranchCache:
    proj: object
    exposure_t: float
    alphas: np.ndarray
    l_a: np.ndarray
    l_hat: np.ndarray | None
    g_cache_ie: object
    g_cache_gi: object
    phi_cache: object
    comp_cache_ie: object
    comp_cache_gi: object
    gi_enabled: bool


def render_branches(cloud, camera, exposure_t, lighting_l, g, phi,
                    cfg=None, gi_enabled=True):
    """Render both branch images for one view.

    With gi_enabled False (single-branch ablation) the relit image is the
    exposure-scaled one and the modulator is never evaluated.

    Returns (BranchOutputs, BranchCache).
    """
    if exposure_t <= 0:
        raise ValueError("exposure must be positive")
    if cfg is None:
        cfg = RasterConfig()
    proj = project(cloud, camera, cfg)
    alphas_all = sigmoid(cloud.opacity_logit)
    l_a = softplus(cloud.l_a_raw)

    colors_ie, g_cache_ie = compose(l_a, cloud.h_r, g)
    i_hdr, comp_ie = composite(proj, alphas_all[proj.idx], colors_ie[proj.idx], cfg)
    i_hdr_scaled = exposure_t * i_hdr

    if gi_enabled:
        l_hat, phi_cache = modulate(l_a, lighting_l, phi)
        colors_gi, g_cache_gi = compose(l_hat, cloud.h_r, g)
        i_hdr_relit, comp_gi = composite(proj, alphas_all[proj.idx],
                                         colors_gi[proj.idx], cfg)
    else:
        l_hat, phi_cache, g_cache_gi, comp_gi = None, None, None, None
        i_hdr_relit = i_hdr_scaled

    outputs = BranchOutputs(i_hdr=i_hdr, i_hdr_scaled=i_hdr_scaled,
                            i_hdr_relit=i_hdr_relit)
    cache = BranchCache(proj=proj, exposure_t=exposure_t, alphas=alphas_all,
                        l_a=l_a, l_hat=l_hat, g_cache_ie=g_cache_ie,
                        g_cache_gi=g_cache_gi, phi_cache=phi_cache,
                        comp_cache_ie=comp_ie, comp_cache_gi=comp_gi,
                        gi_enabled=gi_enabled)
    return outputs, cache


def render_branches_backward(cloud, g, phi, cache, d_i_hdr, d_i_hdr_scaled,
                             d_i_hdr_relit):
    """VJP of render_branches.

    Args:
        cache: BranchCache from the forward pass.
        d_i_hdr, d_i_hdr_scaled, d_i_hdr_relit: image cotangents (any may be 0).

    Returns:
        (param_grads, ndc_grads, contributed) where param_grads maps
        "cloud.*" / "g.w{i}" / "g.b{i}" / "phi.*" names to gradient arrays,
        ndc_grads is (M, 2) over the retained splats and contributed flags
        cloud Gaussians with nonzero compositing weight somewhere.
    """
    proj = cache.proj
    t = cache.exposure_t
    n = cloud.n
    idx = proj.idx

    d_ie_image = np.asarray(d_i_hdr) + t * np.asarray(d_i_hdr_scaled)
    if not cache.gi_enabled:
        # the relit image aliases the scaled one in single-branch mode
        d_ie_image = d_ie_image + t * np.asarray(d_i_hdr_relit)

    d_c_ie, d_a_ie, d_m2d, d_c2d, contrib = composite_backward(
        cache.comp_cache_ie, d_ie_image)
    d_alpha_ret = d_a_ie
    contributed = np.zeros(n, dtype=bool)
    contributed[idx[contrib]] = True

    d_colors_ie = np.zeros((n, 3))
    d_colors_ie[idx] = d_c_ie
    d_l_a, d_h_r, dw_g, db_g = compose_backward(g, cache.g_cache_ie, d_colors_ie)

    if cache.gi_enabled:
        d_c_gi, d_a_gi, d_m2d_gi, d_c2d_gi, contrib_gi = composite_backward(
            cache.comp_cache_gi, np.asarray(d_i_hdr_relit))
        d_alpha_ret = d_alpha_ret + d_a_gi
        d_m2d = d_m2d + d_m2d_gi
        d_c2d = d_c2d + d_c2d_gi
        contributed[idx[contrib_gi]] = True

        d_colors_gi = np.zeros((n, 3))
        d_colors_gi[idx] = d_c_gi
        d_l_hat, d_h_r_gi, dw_g2, db_g2 = compose_backward(
            g, cache.g_cache_gi, d_colors_gi)
        d_h_r = d_h_r + d_h_r_gi
        dw_g = [a + b for a, b in zip(dw_g, dw_g2)]
        db_g = [a + b for a, b in zip(db_g, db_g2)]

        d_l_a_phi, dw_phi, db_phi = modulate_backward(
            phi, cache.phi_cache, d_l_hat)
        d_l_a = d_l_a + d_l_a_phi
    else:
        dw_phi = [np.zeros_like(w) for w in phi.weights]
        db_phi = [np.zeros_like(b) for b in phi.biases]

    geo_grads, ndc_grads = project_backward(proj, cloud, d_m2d, d_c2d)

    d_opacity_logit = np.zeros(n)
    a = cache.alphas[idx]
    d_opacity_logit[idx] = d_alpha_ret * a * (1.0 - a)
    d_l_a_raw = d_l_a * sigmoid(cloud.l_a_raw)

    param_grads = {
        "cloud.mu": geo_grads["mu"],
        "cloud.log_scale": geo_grads["log_scale"],
        "cloud.rotation": geo_grads["rotation"],
        "cloud.opacity_logit": d_opacity_logit,
        "cloud.h_r": d_h_r,
        "cloud.l_a_raw": d_l_a_raw,
    }
    for i, (w, b) in enumerate(zip(dw_g, db_g)):
        param_grads[f"g.w{i}"] = w
        param_grads[f"g.b{i}"] = b
    for i, (w, b) in enumerate(zip(dw_phi, db_phi)):
        param_grads[f"phi.w{i}"] = w
        param_grads[f"phi.b{i}"] = b
    return param_grads, ndc_grads, contributed
