"""Training loop: view/exposure sampling, Adam with per-parameter schedules,
staged fusion-network freezing and periodic densification.

The loop is fully deterministic for a fixed config and seed: all randomness
flows from seeded generators, reductions are sequential, and two identical
runs produce bit-identical checkpoints.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields

import numpy as np

from .dataio import OE_EXPOSURES, psnr, ssim
from .densify import DensifyConfig, DensifyState, densify_and_prune
from .losses import LossWeights
from .pipeline import TrainPipeline, all_param_items
from .radiance import init_composer, init_modulator, render_branches
from .rasterizer import RasterConfig
from .scene import init_cloud, save_checkpoint
from .tonemap import init_tonemapper, mu_law, tone_map_view

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


@dataclass
class TrainConfig:
    max_iterations: int = 2000
    n_init: int = 150
    lr_g: float = 3e-3
    lr_phi: float = 3e-3
    lr_tonemapper: float = 1e-2
    lr_position: float = 1.6e-3
    lr_position_final: float = 1.6e-5
    lr_scaling: float = 1e-2
    lr_rotation: float = 1e-3
    lr_opacity: float = 0.05
    lr_feature: float = 2e-2
    mix_unfreeze_iter: int = -1     # -1 means max_iterations // 3
    tonemap_freeze_iter: int = -1   # -1 means 2 * max_iterations // 5
    exposure_mode: str = "exp3"
    rng_seed: int = 0
    eval_interval: int = 250
    gi_enabled: bool = True
    weights: LossWeights = field(default_factory=lambda: LossWeights(lambda3=1.0))
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def resolved_unfreeze(self):
        if self.mix_unfreeze_iter < 0:
            return self.max_iterations // 3
        return self.mix_unfreeze_iter

    def resolved_tonemap_freeze(self):
        if self.tonemap_freeze_iter < 0:
            return 2 * self.max_iterations // 5
        return self.tonemap_freeze_iter

    def validate(self):
        lrs = (self.lr_g, self.lr_phi, self.lr_tonemapper, self.lr_position,
               self.lr_scaling, self.lr_rotation, self.lr_opacity,
               self.lr_feature)
        if min(lrs) <= 0:
            raise ValueError("learning rates must be positive")
        if self.resolved_unfreeze() > self.max_iterations:
            raise ValueError("mix_unfreeze_iter exceeds max_iterations")
        if self.exposure_mode not in ("exp3", "exp1"):
            raise ValueError(f"unknown exposure mode {self.exposure_mode!r}")
        self.weights.validate()


@dataclass
class TrainReport:
    loss_log: list = field(default_factory=list)
    eval_log: list = field(default_factory=list)
    final_n: int = 0
    wall_time: float = 0.0


def cosine_lr(lr0, iteration, max_iterations):
    """Cosine annealing from lr0 to a 1% floor over the run."""
    if max_iterations <= 0:
        return lr0
    frac = 0.5 * (1.0 + np.cos(np.pi * iteration / max_iterations))
    return lr0 * (0.01 + 0.99 * frac)


def position_lr(lr0, lr_final, iteration, max_iterations):
    """Exponential decay from lr0 to lr_final over the run."""
    if max_iterations <= 0:
        return lr0
    frac = min(iteration / max_iterations, 1.0)
    return lr0 * (lr_final / lr0) ** frac


class ViewSampler:
    """Uniform view sampling with the two exposure assignment regimes.

    exp3 draws one of the three training exposures fresh every iteration;
    exp1 draws each view's exposure once up front and pins it.  The lighting
    level always equals the exposure.
    """

    def __init__(self, train_views, mode, rng):
        self.mode = mode
        self.rng = rng
        self.by_view = {}
        for record in train_views:
            self.by_view.setdefault(record.view_id, {})[record.exposure_t] = record
        self.view_ids = sorted(self.by_view)
        for vid in self.view_ids:
            missing = set(OE_EXPOSURES) - set(self.by_view[vid])
            if missing:
                raise ValueError(f"view {vid} lacks training exposures {missing}")
        if mode == "exp1":
            self.pinned = {vid: OE_EXPOSURES[int(rng.integers(len(OE_EXPOSURES)))]
                           for vid in self.view_ids}

    def sample(self):
        vid = self.view_ids[int(self.rng.integers(len(self.view_ids)))]
        if self.mode == "exp1":
            t = self.pinned[vid]
        else:
            t = OE_EXPOSURES[int(self.rng.integers(len(OE_EXPOSURES)))]
        return self.by_view[vid][t]

    def unit_gt(self, view_id):
        record = self.by_view[view_id].get(1.0)
        return record.gt_ldr if record is not None else None


class Adam:
    """Adam over a dict of live parameter arrays, with per-name learning
    rates and moment remapping across densification events."""

    def __init__(self, params):
        self.params = dict(params)
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.t = {k: 0 for k in self.params}

    def step(self, grads, lr_by_name, skip=()):
        for name in self.params:
            if name not in grads or name in skip:
                continue
            g = grads[name]
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = ADAM_BETA1 * self.m[name] + (1 - ADAM_BETA1) * g
            self.v[name] = ADAM_BETA2 * self.v[name] + (1 - ADAM_BETA2) * g * g
            m_hat = self.m[name] / (1 - ADAM_BETA1 ** t)
            v_hat = self.v[name] / (1 - ADAM_BETA2 ** t)
            self.params[name] -= lr_by_name[name] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

    def remap_cloud(self, cloud, src_index, is_new):
        """Carry optimizer moments across a densify/prune restructuring."""
        for name, arr in cloud.param_items():
            self.params[name] = arr
            for store in (self.m, self.v):
                moved = store[name][src_index]
                moved[is_new] = 0.0
                store[name] = moved


def lr_for(name, config, iteration):
    if name == "cloud.mu":
        return position_lr(config.lr_position, config.lr_position_final,
                           iteration, config.max_iterations)
    if name == "cloud.log_scale":
        return config.lr_scaling
    if name == "cloud.rotation":
        return config.lr_rotation
    if name == "cloud.opacity_logit":
        return config.lr_opacity
    if name.startswith("cloud."):
        return config.lr_feature
    if name.startswith("g."):
        base = config.lr_g
    elif name.startswith("phi."):
        base = config.lr_phi
    else:
        base = config.lr_tonemapper
    return cosine_lr(base, iteration, config.max_iterations)


class Trainer:
    """Owns the model state and runs the optimization."""

    def __init__(self, scene_data, config=None):
        self.config = config if config is not None else TrainConfig()
        self.config.validate()
        self.scene_data = scene_data
        seed = self.config.rng_seed
        init_rng = np.random.default_rng(seed)
        self.sample_rng = np.random.default_rng(seed + 1)
        self.densify_rng = np.random.default_rng(seed + 2)

        extent = scene_data.scene.extent
        seeds = init_rng.uniform(-0.8, 0.8, size=(self.config.n_init, 3))
        self.cloud = init_cloud(seeds, rng=init_rng)
        self.composer = init_composer(init_rng)
        self.modulator = init_modulator(init_rng)
        self.tonemapper = init_tonemapper(init_rng)
        self.config.densify.scene_extent = extent
        self.densify_state = DensifyState.zeros(self.cloud.n, self.config.densify)

        self.pipeline = TrainPipeline(
            self.cloud, self.composer, self.modulator, self.tonemapper,
            weights=self.config.weights, gi_enabled=self.config.gi_enabled)
        self.sampler = ViewSampler(scene_data.train_views,
                                   self.config.exposure_mode, self.sample_rng)
        self.adam = Adam(dict(all_param_items(
            self.cloud, self.composer, self.modulator, self.tonemapper)))
        self.iteration = 0

    def train_step(self):
        """One optimization step; returns the LossBreakdown."""
        cfg = self.config
        i = self.iteration
        self.tonemapper.frozen_mix = i < cfg.resolved_unfreeze()

        view = self.sampler.sample()
        unit_gt = None
        if cfg.weights.lambda3 > 0:
            unit_gt = self.sampler.unit_gt(view.view_id)
        breakdown = self.pipeline.forward(view, unit_gt)
        tape = self.pipeline.backward()
        self.densify_state.accumulate(tape)

        lr_by_name = {name: lr_for(name, cfg, i) for name in self.adam.params}
        frozen = ("f_mix.",) if self.tonemapper.frozen_mix else ()
        if i >= cfg.resolved_tonemap_freeze():
            # the tone mapper rests for the final phase: further LDR progress
            # must come from the scene radiance, which keeps it anchored
            frozen = ("f_tm.", "f_mix.")
        skip = tuple(n for n in self.adam.params if n.startswith(frozen))
        self.adam.step(tape.param_grads, lr_by_name, skip=skip)
        self.cloud.normalize_rotations()

        d = cfg.densify
        next_i = i + 1
        if (d.start_iter <= next_i <= d.stop_iter
                and next_i % d.interval == 0):
            self.cloud, self.densify_state, src, is_new = densify_and_prune(
                self.cloud, self.densify_state, self.densify_rng)
            self.adam.remap_cloud(self.cloud, src, is_new)
            self.pipeline.cloud = self.cloud

        self.iteration = next_i
        return breakdown

    def run(self, log_path=None, checkpoint_path=None):
        """Full training run; optionally writes the CSV log and checkpoint."""
        cfg = self.config
        report = TrainReport()
        start = time.time()
        log_lines = ["iter,rec,cons,unit,total,psnr_ldr,psnr_hdr"]
        for i in range(cfg.max_iterations):
            breakdown = self.train_step()
            report.loss_log.append(breakdown)
            psnr_ldr = psnr_hdr = ""
            if cfg.eval_interval > 0 and (self.iteration % cfg.eval_interval == 0
                                          or self.iteration == cfg.max_iterations):
                metrics = self.evaluate(self.scene_data.test_views)
                report.eval_log.append((self.iteration, metrics))
                psnr_ldr = f"{metrics['psnr_ldr']:.6f}"
                psnr_hdr = f"{metrics['psnr_hdr']:.6f}"
            log_lines.append(
                f"{self.iteration},{breakdown.rec:.10g},{breakdown.cons:.10g},"
                f"{breakdown.unit:.10g},{breakdown.total:.10g},"
                f"{psnr_ldr},{psnr_hdr}")
        report.final_n = self.cloud.n
        report.wall_time = time.time() - start
        if log_path is not None:
            with open(log_path, "w") as f:
                f.write("\n".join(log_lines) + "\n")
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return report

    def save(self, path):
        meta = {"iterations": self.iteration, "seed": self.config.rng_seed,
                "n_gaussians": self.cloud.n,
                "exposure_mode": self.config.exposure_mode}
        save_checkpoint(path, self.cloud, self.composer, self.modulator,
                        self.tonemapper, meta)

    def evaluate(self, views):
        return evaluate_views(self.cloud, self.composer, self.modulator,
                              self.tonemapper, views,
                              gi_enabled=self.config.gi_enabled)


def evaluate_views(cloud, composer, modulator, tonemapper, views,
                   gi_enabled=True, raster_cfg=None):
    """Mean LDR PSNR/SSIM and mu-law HDR PSNR over a list of views."""
    if raster_cfg is None:
        raster_cfg = RasterConfig()
    rows = []
    for view in views:
        branches, _ = render_branches(
            cloud, view.camera, view.exposure_t, view.lighting_l,
            composer, modulator, cfg=raster_cfg, gi_enabled=gi_enabled)
        ldr, _ = tone_map_view(branches.i_hdr_scaled, branches.i_hdr_relit,
                               tonemapper)
        row = {"view_id": view.view_id, "exposure": view.exposure_t,
               "psnr_ldr": psnr(ldr.i_ldr, view.gt_ldr),
               "ssim_ldr": ssim(ldr.i_ldr, view.gt_ldr)}
        if view.gt_hdr is not None:
            row["psnr_hdr"] = psnr(mu_law(branches.i_hdr),
                                   mu_law(view.gt_hdr))
        rows.append(row)
    result = {"rows": rows}
    for key in ("psnr_ldr", "ssim_ldr", "psnr_hdr"):
        vals = [r[key] for r in rows if key in r]
        result[key] = float(np.mean(vals)) if vals else float("nan")
    return result


# ---------------------------------------------------------------------------
# config files


def parse_config(path):
    """Plain-text key = value config; [section] headers are allowed and
    ignored.  Unknown keys raise ValueError."""
    cfg = TrainConfig()
    train_fields = {f.name: f.type for f in fields(TrainConfig)
                    if f.name not in ("weights", "densify")}
    loss_fields = {f.name for f in fields(LossWeights)}
    densify_fields = {f.name for f in fields(DensifyConfig)}
    with open(path) as f:
        for raw in f:
            line = raw.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line: {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in train_fields:
                current = getattr(cfg, key)
                setattr(cfg, key, _coerce(value, current))
            elif key in loss_fields:
                setattr(cfg.weights, key, _coerce(value, getattr(cfg.weights, key)))
            elif key in densify_fields:
                setattr(cfg.densify, key, _coerce(value, getattr(cfg.densify, key)))
            else:
                raise ValueError(f"unknown config key {key!r}")
    cfg.validate()
    return cfg


def _coerce(value, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value
