"""End-to-end differentiable pipeline for one training view.

forward() renders both HDR branches, tone-maps them, and evaluates the
weighted loss; backward() replays the chain rule through every stage and
returns a GradTape holding gradients for all Gaussian parameters and all four
networks, plus the per-Gaussian NDC-center gradient norms the densifier
accumulates.
"""

from __future__ import annotations

import numpy as np

from .gradengine import GradTape, MissingActivationError, NonFiniteLossError
from .losses import (LossWeights, consistency_loss, consistency_loss_backward,
                     mse_loss, mse_loss_backward, reconstruction_loss,
                     reconstruction_loss_backward, total_loss)
from .mlp import param_items
from .radiance import render_branches, render_branches_backward
from .rasterizer import RasterConfig
from .tonemap import (cross_fuse, cross_fuse_backward, tone_map_pair,
                      tone_map_pair_backward, tone_map_view,
                      tone_map_view_backward)


def all_param_items(cloud, composer, modulator, tonemapper):
    """Yield every learnable (name, array) pair in canonical order."""
    yield from cloud.param_items()
    yield from param_items(composer, "g")
    yield from param_items(modulator, "phi")
    yield from param_items(tonemapper.f_tm, "f_tm")
    yield from param_items(tonemapper.f_mix, "f_mix")


class TrainPipeline:
    """Couples the scene and networks into one differentiable loss.

    The pipeline holds references (not copies), so optimizer updates to the
    cloud or network arrays are picked up by the next forward call.
    """

    def __init__(self, cloud, composer, modulator, tonemapper, weights=None,
                 raster_cfg=None, gi_enabled=True):
        self.cloud = cloud
        self.composer = composer
        self.modulator = modulator
        self.tonemapper = tonemapper
        self.weights = weights if weights is not None else LossWeights()
        self.raster_cfg = raster_cfg if raster_cfg is not None else RasterConfig()
        self.gi_enabled = gi_enabled
        self._cache = None

    def forward(self, view, unit_gt=None):
        """Evaluate the total loss for one view.

        Args:
            view: ViewRecord with camera, exposure, lighting and LDR GT.
            unit_gt: unit-exposure LDR GT for the same camera, read only when
                the unit-loss weight is positive.

        Returns:
            LossBreakdown.
        """
        w = self.weights
        branches, branch_cache = render_branches(
            self.cloud, view.camera, view.exposure_t, view.lighting_l,
            self.composer, self.modulator, cfg=self.raster_cfg,
            gi_enabled=self.gi_enabled)
        ldr, tm_cache = tone_map_view(branches.i_hdr_scaled,
                                      branches.i_hdr_relit, self.tonemapper)

        rec, rec_cache = reconstruction_loss(ldr, view.gt_ldr, w.gamma)

        cons, cons_cache = 0.0, None
        if w.lambda2 > 0 and self.gi_enabled:
            cons, cons_cache = consistency_loss(branches.i_hdr_scaled,
                                                branches.i_hdr_relit, w)

        unit, unit_cache = 0.0, None
        if w.lambda3 > 0 and unit_gt is not None:
            (glo_u, loc_u), pair_cache = tone_map_pair(branches.i_hdr,
                                                       self.tonemapper.f_tm)
            (_, _, pred_u), fuse_cache = cross_fuse(glo_u, loc_u, loc_u,
                                                    self.tonemapper.f_mix)
            unit, u_mse_cache = mse_loss(pred_u, unit_gt)
            unit_cache = (pair_cache, fuse_cache, u_mse_cache)

        breakdown = total_loss(rec, cons, unit, w)
        if not np.isfinite(breakdown.total):
            raise NonFiniteLossError(
                f"non-finite loss on view {view.view_id} (t={view.exposure_t}): "
                f"rec={rec}, cons={cons}, unit={unit}")
        self._cache = (view, branches, branch_cache, tm_cache, rec_cache,
                       cons_cache, unit_cache)
        return breakdown

    def backward(self, loss_cotangent=1.0):
        """Reverse pass through the stored forward activations.

        Returns a GradTape; raises MissingActivationError if forward was not
        called since the last backward consumed the cache.
        """
        if self._cache is None:
            raise MissingActivationError(
                "backward called without a stored forward pass")
        (view, branches, branch_cache, tm_cache, rec_cache, cons_cache,
         unit_cache) = self._cache
        self._cache = None
        w = self.weights
        tape = GradTape()

        d_ldr, d_ig, d_gi = reconstruction_loss_backward(
            rec_cache, loss_cotangent * w.lambda1)
        d_hdr_scaled, d_hdr_relit, tm_grads = tone_map_view_backward(
            self.tonemapper, tm_cache, d_ig, d_gi, d_ldr)
        for name, grad in tm_grads.items():
            tape.add(name, grad)

        if cons_cache is not None:
            d_a, d_b = consistency_loss_backward(
                cons_cache, loss_cotangent * w.lambda2)
            d_hdr_scaled = d_hdr_scaled + d_a
            d_hdr_relit = d_hdr_relit + d_b

        d_hdr = np.zeros_like(branches.i_hdr)
        if unit_cache is not None:
            pair_cache, fuse_cache, u_mse_cache = unit_cache
            d_pred_u = mse_loss_backward(u_mse_cache,
                                         loss_cotangent * w.lambda3)
            d_glo_u, d_loc_u, d_loc_hat_u, dw_mix, db_mix = cross_fuse_backward(
                self.tonemapper.f_mix, fuse_cache,
                np.zeros_like(d_pred_u), np.zeros_like(d_pred_u), d_pred_u)
            if not self.tonemapper.frozen_mix:
                for i, (dw, db) in enumerate(zip(dw_mix, db_mix)):
                    tape.add(f"f_mix.w{i}", dw)
                    tape.add(f"f_mix.b{i}", db)
            d_hdr_u, dw_tm, db_tm = tone_map_pair_backward(
                self.tonemapper.f_tm, pair_cache, d_glo_u,
                d_loc_u + d_loc_hat_u)
            for i, (dw, db) in enumerate(zip(dw_tm, db_tm)):
                tape.add(f"f_tm.w{i}", dw)
                tape.add(f"f_tm.b{i}", db)
            d_hdr = d_hdr + d_hdr_u

        param_grads, ndc_grads, contributed = render_branches_backward(
            self.cloud, self.composer, self.modulator, branch_cache,
            d_hdr, d_hdr_scaled, d_hdr_relit)
        for name, grad in param_grads.items():
            tape.add(name, grad)

        norm = np.zeros(self.cloud.n)
        norm[branch_cache.proj.idx] = np.linalg.norm(ndc_grads, axis=1)
        tape.ndc_grad_norm = norm
        tape.visible = contributed
        # the densifier reads the most recent virtual illumination
        tape.l_hat = branch_cache.l_hat
        return tape
