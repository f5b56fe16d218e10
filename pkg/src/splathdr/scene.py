"""Learnable Gaussian scene representation, cameras and view records."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .mlp import MlpParams, logit, sigmoid, softplus, softplus_inverse

CHECKPOINT_MAGIC = b"PHGS"
CHECKPOINT_VERSION = 1

# per-Gaussian learnable arrays, in serialization order
CLOUD_FIELDS = ("mu", "log_scale", "rotation", "opacity_logit", "h_r", "l_a_raw")
H_R_DIM = 8


@dataclass
class GaussianCloud:
    """The learnable scene.

    mu:            (N, 3) world-space centers
    log_scale:     (N, 3) log axis scales; exp gives the scaling matrix diagonal
    rotation:      (N, 4) unit quaternions (w, x, y, z)
    opacity_logit: (N,)   sigmoid gives opacity in (0, 1)
    h_r:           (N, 8) reflectance feature, unconstrained
    l_a_raw:       (N, 3) softplus gives the positive ambient illumination
    """

    mu: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: np.ndarray
    h_r: np.ndarray
    l_a_raw: np.ndarray

    @property
    def n(self):
        return self.mu.shape[0]

    def opacity(self):
        return sigmoid(self.opacity_logit)

    def scales(self):
        return np.exp(self.log_scale)

    def l_a(self):
        return softplus(self.l_a_raw)

    def normalize_rotations(self):
        norms = np.linalg.norm(self.rotation, axis=1, keepdims=True)
        self.rotation /= norms

    def copy(self):
        return GaussianCloud(**{f: getattr(self, f).copy() for f in CLOUD_FIELDS})

    def param_items(self):
        for f in CLOUD_FIELDS:
            yield f"cloud.{f}", getattr(self, f)


@dataclass
class InitConfig:
    opacity: float = 0.1
    h_r_std: float = 0.1
    l_a_init: float = 1.0
    fallback_scale: float = 0.1  # single-seed clouds have no neighbor distance


def init_cloud(seed_points, config=None, rng=None):
    """Build a cloud from seed positions.

    Scales are isotropic at the mean nearest-neighbor distance, opacity starts
    at the configured value, reflectance features are small Gaussian noise and
    the ambient illumination starts at l_a_init.
    """
    if config is None:
        config = InitConfig()
    if rng is None:
        rng = np.random.default_rng(0)
    pts = np.asarray(seed_points, dtype=float).reshape(-1, 3)
    m = pts.shape[0]
    if m == 0:
        raise ValueError("seed point set is empty")
    if m == 1:
        scale = config.fallback_scale
    else:
        d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=-1)
        np.fill_diagonal(d2, np.inf)
        scale = float(np.mean(np.sqrt(d2.min(axis=1))))
        if scale <= 0:
            scale = config.fallback_scale
    return GaussianCloud(
        mu=pts.copy(),
        log_scale=np.full((m, 3), np.log(scale)),
        rotation=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (m, 1)),
        opacity_logit=np.full(m, float(logit(config.opacity))),
        h_r=rng.normal(0.0, config.h_r_std, size=(m, H_R_DIM)),
        l_a_raw=np.full((m, 3), float(softplus_inverse(config.l_a_init))),
    )


def quat_to_rot(q):
    """Rotation matrices for quaternions q of shape (..., 4), normalized first."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return np.stack(rows, axis=-1).reshape(q.shape[:-1] + (3, 3))


def covariance(log_scale, rotation):
    """World-space covariance R S S^T R^T for one Gaussian."""
    r = quat_to_rot(np.asarray(rotation, dtype=float))
    s = np.exp(np.asarray(log_scale, dtype=float))
    m = r * s[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass
class Camera:
    """Pinhole camera; world_to_cam maps world points into a +z-forward frame."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_cam: np.ndarray
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("require 0 < near < far")
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=float).reshape(4, 4)


def look_at_camera(position, target, up, width, height, fov_deg=45.0,
                   near=0.05, far=100.0):
    """Camera at `position` looking toward `target`."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=float))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # rows: camera axes in world frame
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ position
    fx = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
    return Camera(width=width, height=height, fx=fx, fy=fx,
                  cx=width / 2.0, cy=height / 2.0, world_to_cam=w2c,
                  near=near, far=far)


@dataclass
class ViewRecord:
    """One training observation: camera, exposure/lighting scalars and LDR GT.

    gt_hdr is evaluation-only; nothing on the training path may read it.
    """

    camera: Camera
    exposure_t: float
    lighting_l: float
    gt_ldr: np.ndarray
    gt_hdr: np.ndarray | None = None
    view_id: int = -1

    def __post_init__(self):
        if self.exposure_t <= 0:
            raise ValueError("exposure must be positive")
        lo, hi = float(self.gt_ldr.min()), float(self.gt_ldr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError("gt_ldr values must lie in [0, 1]")


# ---------------------------------------------------------------------------
# checkpoint serialization


def _write_array(f, arr):
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_array(f, shape):
    n = int(np.prod(shape))
    buf = f.read(n * 8)
    if len(buf) != n * 8:
        raise IOError("truncated checkpoint payload")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()


def _write_mlp(f, params):
    f.write(struct.pack("<I", params.n_layers))
    for w, b in zip(params.weights, params.biases):
        f.write(struct.pack("<QQ", w.shape[0], w.shape[1]))
        _write_array(f, w)
        _write_array(f, b)


def _read_mlp(f, output_map):
    (n_layers,) = struct.unpack("<I", f.read(4))
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = struct.unpack("<QQ", f.read(16))
        weights.append(_read_array(f, (rows, cols)))
        biases.append(_read_array(f, (rows,)))
    return MlpParams(weights=weights, biases=biases, output_map=output_map)


def save_checkpoint(path, cloud, composer, modulator, tonemapper, meta=None):
    """Binary checkpoint plus a plain-text sidecar of key = value metadata."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", cloud.n))
        for name in CLOUD_FIELDS:
            _write_array(f, getattr(cloud, name))
        _write_mlp(f, composer)
        _write_mlp(f, modulator)
        _write_mlp(f, tonemapper.f_tm)
        _write_mlp(f, tonemapper.f_mix)
        f.write(struct.pack("<B", 1 if tonemapper.frozen_mix else 0))
    with open(str(path) + ".meta", "w") as f:
        for key, value in (meta or {}).items():
            f.write(f"{key} = {value}\n")


def load_checkpoint(path):
    from .tonemap import ToneMapperParams

    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise IOError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise IOError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<Q", f.read(8))
        shapes = {"mu": (n, 3), "log_scale": (n, 3), "rotation": (n, 4),
                  "opacity_logit": (n,), "h_r": (n, H_R_DIM), "l_a_raw": (n, 3)}
        arrays = {name: _read_array(f, shapes[name]) for name in CLOUD_FIELDS}
        cloud = GaussianCloud(**arrays)
        composer = _read_mlp(f, "softplus")
        modulator = _read_mlp(f, "softplus")
        f_tm = _read_mlp(f, "sigmoid")
        f_mix = _read_mlp(f, "sigmoid")
        (frozen,) = struct.unpack("<B", f.read(1))
    tonemapper = ToneMapperParams(f_tm=f_tm, f_mix=f_mix, frozen_mix=bool(frozen))
    meta = {}
    try:
        with open(str(path) + ".meta") as f:
            for line in f:
                if "=" in line:
                    key, value = line.split("=", 1)
                    meta[key.strip()] = value.strip()
    except FileNotFoundError:
        pass
    return cloud, composer, modulator, tonemapper, meta
