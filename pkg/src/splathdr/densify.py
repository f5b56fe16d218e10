"""Adaptive density control with illumination-guided gradient scaling.

Per-Gaussian NDC-center gradient norms are accumulated over training views;
at fixed intervals, Gaussians whose scaled average gradient exceeds a
threshold are cloned (small ones) or split in two (large ones), and nearly
transparent Gaussians are pruned.  The scaling factor
s_a = s * sigmoid(|L_a - L_hat_a|) + 1 boosts Gaussians whose virtual
illumination deviates strongly from the learned ambient illumination —
exactly the over/under-exposed regions where flat tone-curve extremes starve
the raw gradient signal.  Setting s = 0 recovers the unscaled baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .mlp import sigmoid

logger = logging.getLogger(__name__)


@dataclass
class DensifyConfig:
    tau_p: float = 2e-4            # average NDC gradient threshold
    s: float = 1.0                 # illumination scaling strength
    interval: int = 50
    start_iter: int = 200
    stop_iter: int = 1500
    clone_scale_threshold: float = 0.01   # fraction of the scene extent
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    max_gaussians: int = 700
    scene_extent: float = 1.0


@dataclass
class DensifyState:
    """Running accumulators, always sized like the cloud."""

    grad_accum: np.ndarray
    visible_count: np.ndarray
    last_l_hat: np.ndarray | None
    config: DensifyConfig = field(default_factory=DensifyConfig)

    @classmethod
    def zeros(cls, n, config=None):
        return cls(grad_accum=np.zeros(n), visible_count=np.zeros(n, dtype=int),
                   last_l_hat=None, config=config or DensifyConfig())

    def accumulate(self, tape):
        """Fold one backward pass into the running statistics."""
        vis = tape.visible
        self.grad_accum[vis] += tape.ndc_grad_norm[vis]
        self.visible_count[vis] += 1
        if tape.l_hat is not None:
            self.last_l_hat = tape.l_hat

    def reset(self, n):
        self.grad_accum = np.zeros(n)
        self.visible_count = np.zeros(n, dtype=int)
        self.last_l_hat = None

    def average_gradient(self):
        count = np.maximum(self.visible_count, 1)
        return self.grad_accum / count


def scale_factor(l_a, l_hat, s):
    """Illumination-guided scaling s_a = s * sigmoid(deviation) + 1.

    The deviation is the mean componentwise absolute difference between the
    ambient and virtual illumination; s_a lies in [1 + s/2, 1 + s).
    """
    deviation = np.mean(np.abs(np.asarray(l_a) - np.asarray(l_hat)), axis=-1)
    return s * sigmoid(deviation) + 1.0


def deviations(cloud, state):
    """Per-Gaussian illumination deviation (zero before the first GI pass)."""
    if state.last_l_hat is None:
        return np.zeros(cloud.n)
    return np.mean(np.abs(cloud.l_a() - state.last_l_hat), axis=1)


def densify_mask(cloud, state):
    """Gaussians whose scaled average gradient strictly exceeds the threshold."""
    cfg = state.config
    s_a = cfg.s * sigmoid(deviations(cloud, state)) + 1.0
    avg = state.average_gradient()
    return (state.visible_count > 0) & (s_a * avg > cfg.tau_p)


def should_densify(i, cloud, state):
    return bool(densify_mask(cloud, state)[i])


def densify_and_prune(cloud, state, rng):
    """Clone/split flagged Gaussians and prune transparent ones.

    Small flagged Gaussians (max world scale below the clone threshold times
    the scene extent) are duplicated with the copy offset by a sample from
    the Gaussian itself; large ones are replaced by two children with scales
    divided by the split factor, both resampled from the parent.  Children
    inherit every non-geometric field.  Accumulators are reset.

    Returns (new_cloud, new_state, src_index, is_new): src_index maps each
    row of the new cloud to its source row (for optimizer-state carry-over),
    is_new flags rows whose optimizer moments should restart at zero.
    """
    cfg = state.config
    flagged = densify_mask(cloud, state)
    scales = cloud.scales()
    small = scales.max(axis=1) < cfg.clone_scale_threshold * cfg.scene_extent
    clone_idx = np.nonzero(flagged & small)[0]
    split_idx = np.nonzero(flagged & ~small)[0]

    growth = clone_idx.size + split_idx.size
    if growth > 0 and cloud.n + growth > cfg.max_gaussians:
        logger.warning("densification skipped: %d + %d would exceed cap %d",
                       cloud.n, growth, cfg.max_gaussians)
        clone_idx = split_idx = np.zeros(0, dtype=int)

    from .scene import CLOUD_FIELDS, GaussianCloud, quat_to_rot

    keep = np.ones(cloud.n, dtype=bool)
    keep[split_idx] = False
    src = [np.nonzero(keep)[0]]
    new_flag = [np.zeros(keep.sum(), dtype=bool)]
    rows = {f: [getattr(cloud, f)[keep]] for f in CLOUD_FIELDS}

    def offspring(parents, n_each, shrink):
        if parents.size == 0:
            return
        rep = np.repeat(parents, n_each)
        rot = quat_to_rot(cloud.rotation[rep])
        sc = scales[rep] / shrink
        z = rng.standard_normal((rep.size, 3))
        offset = np.einsum("nij,nj->ni", rot * sc[:, None, :], z)
        rows["mu"].append(cloud.mu[rep] + offset)
        rows["log_scale"].append(np.log(sc))
        for f in ("rotation", "opacity_logit", "h_r", "l_a_raw"):
            rows[f].append(getattr(cloud, f)[rep])
        src.append(rep)
        new_flag.append(np.ones(rep.size, dtype=bool))

    offspring(clone_idx, 1, 1.0)
    offspring(split_idx, 2, cfg.split_factor)

    merged = GaussianCloud(**{f: np.concatenate(rows[f]) for f in CLOUD_FIELDS})
    src_index = np.concatenate(src)
    is_new = np.concatenate(new_flag)

    alive = merged.opacity() >= cfg.prune_opacity
    merged = GaussianCloud(**{f: getattr(merged, f)[alive] for f in CLOUD_FIELDS})
    src_index = src_index[alive]
    is_new = is_new[alive]

    new_state = DensifyState.zeros(merged.n, cfg)
    return merged, new_state, src_index, is_new


def write_densify_stats(path, cloud, state):
    """Dump per-Gaussian densification statistics as CSV.

    Columns: index, average NDC gradient, illumination deviation, scaling
    factor and whether the densification criterion fires.
    """
    cfg = state.config
    dev = deviations(cloud, state)
    s_a = cfg.s * sigmoid(dev) + 1.0
    avg = state.average_gradient()
    mask = densify_mask(cloud, state)
    with open(path, "w") as f:
        f.write("index,avg_grad,deviation,s_a,densified\n")
        for i in range(cloud.n):
            f.write(f"{i},{avg[i]:.17g},{dev[i]:.17g},{s_a[i]:.17g},"
                    f"{int(mask[i])}\n")
