"""Learned per-pixel tone mapping with cross-branch fusion.

A shared trunk f_tm maps log-domain HDR radiance to a global and a local LDR
triple per pixel.  The fusion network f_mix combines the exposure branch's
global image with the local image of each branch: one fused image takes the
relit branch's local detail, the other stays within the exposure branch.  The
final LDR prediction is the mean of the two fused images, which keeps it in
(0, 1) while supervising both fusions against the same ground truth.  A fixed
mu-law compressor is included for HDR evaluation only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mlp import MlpParams, init_mlp, mlp_backward, mlp_forward

F_TM_SIZES = (3, 32, 32, 6)   # ln(hdr + eps) -> [global rgb, local rgb]
F_MIX_SIZES = (6, 32, 3)      # [global rgb, local rgb] -> fused rgb
LOG_EPS = 1e-6


def init_tonemapper(rng):
    return ToneMapperParams(
        f_tm=init_mlp(F_TM_SIZES, "sigmoid", rng),
        f_mix=init_mlp(F_MIX_SIZES, "sigmoid", rng),
        frozen_mix=True,
    )


@dataclass
class ToneMapperParams:
    f_tm: MlpParams
    f_mix: MlpParams
    frozen_mix: bool = True

    def copy(self):
        return ToneMapperParams(f_tm=self.f_tm.copy(), f_mix=self.f_mix.copy(),
                                frozen_mix=self.frozen_mix)


@dataclass
class LdrOutputs:
    """All tone-mapped images for one view.

    i_glo/i_loc come from the exposure-scaled HDR image, i_glo_hat/i_loc_hat
    from the relit one.  i_ig fuses the exposure-global with the relit-local
    image, i_gi fuses the exposure-global with the exposure-local image, and
    i_ldr is their mean.
    """

    i_glo: np.ndarray
    i_loc: np.ndarray
    i_glo_hat: np.ndarray
    i_loc_hat: np.ndarray
    i_ig: np.ndarray
    i_gi: np.ndarray
    i_ldr: np.ndarray


def tone_map_pair(hdr, f_tm):
    """Per-pixel global/local LDR pair from a non-negative HDR image.

    The network runs on ln(hdr + 1e-6) channelwise.  Returns
    ((global LDR, local LDR), cache).
    """
    hdr = np.asarray(hdr)
    shape = hdr.shape
    x = np.log(hdr.reshape(-1, 3) + LOG_EPS)
    y, mlp_cache = mlp_forward(f_tm, x)
    i_glo = y[:, :3].reshape(shape)
    i_loc = y[:, 3:].reshape(shape)
    return (i_glo, i_loc), (mlp_cache, hdr, shape)


def tone_map_pair_backward(f_tm, cache, d_glo, d_loc):
    """Returns (d_hdr, dweights, dbiases)."""
    mlp_cache, hdr, shape = cache
    dy = np.concatenate([np.asarray(d_glo).reshape(-1, 3),
                         np.asarray(d_loc).reshape(-1, 3)], axis=1)
    dx, dw, db = mlp_backward(f_tm, mlp_cache, dy)
    d_hdr = (dx / (hdr.reshape(-1, 3) + LOG_EPS)).reshape(shape)
    return d_hdr, dw, db


def cross_fuse(i_glo, i_loc, i_loc_hat, f_mix):
    """Cross-branch fusion of the tone-mapped pairs.

    i_ig = f_mix(i_glo, i_loc_hat) mixes in the relit branch's local image;
    i_gi = f_mix(i_glo, i_loc) stays within the exposure branch.  The final
    prediction is their per-pixel mean.

    Returns ((i_ig, i_gi, i_ldr), cache).
    """
    shape = np.asarray(i_glo).shape
    if np.asarray(i_loc).shape != shape or np.asarray(i_loc_hat).shape != shape:
        raise ValueError("fusion inputs must share one shape")
    x_ig = np.concatenate([np.asarray(i_glo).reshape(-1, 3),
                           np.asarray(i_loc_hat).reshape(-1, 3)], axis=1)
    x_gi = np.concatenate([np.asarray(i_glo).reshape(-1, 3),
                           np.asarray(i_loc).reshape(-1, 3)], axis=1)
    y_ig, cache_ig = mlp_forward(f_mix, x_ig)
    y_gi, cache_gi = mlp_forward(f_mix, x_gi)
    i_ig = y_ig.reshape(shape)
    i_gi = y_gi.reshape(shape)
    i_ldr = 0.5 * (i_ig + i_gi)
    return (i_ig, i_gi, i_ldr), (cache_ig, cache_gi, shape)


def cross_fuse_backward(f_mix, cache, d_ig, d_gi, d_ldr):
    """VJP of cross_fuse.

    Returns (d_glo, d_loc, d_loc_hat, dweights, dbiases).
    """
    cache_ig, cache_gi, shape = cache
    d_ig_total = (np.asarray(d_ig) + 0.5 * np.asarray(d_ldr)).reshape(-1, 3)
    d_gi_total = (np.asarray(d_gi) + 0.5 * np.asarray(d_ldr)).reshape(-1, 3)
    dx_ig, dw1, db1 = mlp_backward(f_mix, cache_ig, d_ig_total)
    dx_gi, dw2, db2 = mlp_backward(f_mix, cache_gi, d_gi_total)
    d_glo = (dx_ig[:, :3] + dx_gi[:, :3]).reshape(shape)
    d_loc = dx_gi[:, 3:].reshape(shape)
    d_loc_hat = dx_ig[:, 3:].reshape(shape)
    dw = [a + b for a, b in zip(dw1, dw2)]
    db = [a + b for a, b in zip(db1, db2)]
    return d_glo, d_loc, d_loc_hat, dw, db


def tone_map_view(i_hdr_scaled, i_hdr_relit, params):
    """Full tone-mapping stage for one view: both pairs plus the fusion.

    Returns (LdrOutputs, cache) for tone_map_view_backward.
    """
    (i_glo, i_loc), cache_ie = tone_map_pair(i_hdr_scaled, params.f_tm)
    (i_glo_hat, i_loc_hat), cache_gi = tone_map_pair(i_hdr_relit, params.f_tm)
    (i_ig, i_gi, i_ldr), cache_mix = cross_fuse(i_glo, i_loc, i_loc_hat,
                                                params.f_mix)
    outputs = LdrOutputs(i_glo=i_glo, i_loc=i_loc, i_glo_hat=i_glo_hat,
                         i_loc_hat=i_loc_hat, i_ig=i_ig, i_gi=i_gi,
                         i_ldr=i_ldr)
    return outputs, (cache_ie, cache_gi, cache_mix)


def tone_map_view_backward(params, cache, d_ig, d_gi, d_ldr):
    """VJP of tone_map_view.

    Returns (d_i_hdr_scaled, d_i_hdr_relit, param_grads) where param_grads
    maps "f_tm.*" / "f_mix.*" names to gradients.  With frozen_mix set, the
    fusion network's gradients are exactly zero.
    """
    cache_ie, cache_gi, cache_mix = cache
    d_glo, d_loc, d_loc_hat, dw_mix, db_mix = cross_fuse_backward(
        params.f_mix, cache_mix, d_ig, d_gi, d_ldr)
    d_hdr_scaled, dw1, db1 = tone_map_pair_backward(
        params.f_tm, cache_ie, d_glo, d_loc)
    d_hdr_relit, dw2, db2 = tone_map_pair_backward(
        params.f_tm, cache_gi, np.zeros_like(d_loc_hat), d_loc_hat)
    param_grads = {}
    for i in range(params.f_tm.n_layers):
        param_grads[f"f_tm.w{i}"] = dw1[i] + dw2[i]
        param_grads[f"f_tm.b{i}"] = db1[i] + db2[i]
    for i in range(params.f_mix.n_layers):
        if params.frozen_mix:
            param_grads[f"f_mix.w{i}"] = np.zeros_like(dw_mix[i])
            param_grads[f"f_mix.b{i}"] = np.zeros_like(db_mix[i])
        else:
            param_grads[f"f_mix.w{i}"] = dw_mix[i]
            param_grads[f"f_mix.b{i}"] = db_mix[i]
    return d_hdr_scaled, d_hdr_relit, param_grads


def mu_law(hdr, mu=5000.0):
    """Fixed logarithmic range compression for HDR evaluation.

    The image is normalized to [0, 1] by its maximum, then mapped through
    ln(1 + mu*x)/ln(1 + mu).  An all-zero image maps to all zeros.
    """
    hdr = np.asarray(hdr, dtype=float)
    if np.any(hdr < 0):
        raise ValueError("mu_law expects non-negative radiance")
    peak = hdr.max()
    if peak == 0:
        return np.zeros_like(hdr)
    x = hdr / peak
    return np.log1p(mu * x) / np.log1p(mu)
