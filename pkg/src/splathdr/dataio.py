"""Synthetic multi-exposure scenes, image file formats and quality metrics.

Scenes are procedurally generated micro-scenes with analytic HDR ground
truth: a random Gaussian layout whose radiance spans over two orders of
magnitude, rendered by the naive reference compositor from a camera ring,
and exposed through a fixed gamma-2.2 camera response at a geometric shutter
ladder.  Training views carry only the over/under-exposed ladder extremes
plus unit exposure; test views carry all five exposures, so the two
intermediate exposures are never seen in training.

Generation is bit-deterministic per seed; the scene manifest records the
generation parameters, and loading a scene replays the generator rather than
parsing the (f32-rounded) image files back in.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .losses import ssim_forward
from .mlp import logit
from .rasterizer import RasterConfig, project, reference_composite
from .scene import GaussianCloud, ViewRecord, look_at_camera

EXPOSURE_LADDER = (0.25, 0.5, 1.0, 2.0, 4.0)
OE_EXPOSURES = (0.25, 1.0, 4.0)    # training exposures (ladder extremes + unit)
NE_EXPOSURES = (0.5, 2.0)          # never trained
GAMMA = 2.2


def crf(x, t=1.0):
    """Reference camera response: exposure scaling, clamp, gamma 2.2."""
    return np.clip(t * np.asarray(x), 0.0, 1.0) ** (1.0 / GAMMA)


@dataclass
class ImageBuffer:
    """Tagged image container; linear-hdr data is non-negative radiance,
    ldr-unit data is display-referred in [0, 1]."""

    data: np.ndarray
    color_space: str = "linear-hdr"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("expected an (H, W, 3) image")
        if self.color_space == "ldr-unit":
            if self.data.min() < 0 or self.data.max() > 1:
                raise ValueError("ldr-unit data must lie in [0, 1]")
        elif self.color_space == "linear-hdr":
            if self.data.min() < 0:
                raise ValueError("linear-hdr data must be non-negative")
        else:
            raise ValueError(f"unknown color space {self.color_space!r}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass
class SyntheticScene:
    """Analytic ground truth: Gaussian layout, radiance, opacity, cameras."""

    cloud: GaussianCloud
    colors: np.ndarray
    opacities: np.ndarray
    cameras: list
    ladder: tuple = EXPOSURE_LADDER
    extent: float = 1.0


@dataclass
class SceneData:
    scene: SyntheticScene
    train_views: list = field(default_factory=list)
    test_views: list = field(default_factory=list)
    params: dict = field(default_factory=dict)


def _ring_cameras(n_views, image_size, rng):
    cams = []
    radius = 3.0
    for k in range(n_views):
        angle = 2 * np.pi * k / n_views
        height = 0.8 + 0.4 * np.sin(3 * angle)
        pos = np.array([radius * np.cos(angle), radius * np.sin(angle), height])
        cams.append(look_at_camera(pos, np.zeros(3), np.array([0.0, 0.0, 1.0]),
                                   image_size, image_size, fov_deg=45.0))
    return cams


def render_ground_truth(scene, camera):
    """Reference HDR render of the analytic scene for one camera."""
    proj = project(scene.cloud, camera, RasterConfig(oracle=True))
    return reference_composite(proj.mean2d, proj.cov2d, proj.depth,
                               scene.opacities[proj.idx],
                               scene.colors[proj.idx],
                               camera.width, camera.height)


def generate_scene(seed, n_gaussians=40, image_size=64, n_views=12):
    """Build a synthetic multi-exposure scene with analytic HDR ground truth.

    Training views pair each camera with the three over/under-exposure ladder
    values; test views carry all five.  Every view keeps its analytic HDR
    image for evaluation only.

    Returns SceneData.
    """
    if n_views < 3:
        raise ValueError("need at least 3 views")
    rng = np.random.default_rng(seed)

    mu = rng.uniform(-0.8, 0.8, size=(n_gaussians, 3))
    log_scale = np.log(rng.uniform(0.06, 0.18, size=(n_gaussians, 3)))
    quat = rng.standard_normal((n_gaussians, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    opacity = rng.uniform(0.55, 0.95, size=n_gaussians)

    # radiance magnitudes cover 2.1 orders of magnitude by construction; the
    # top sits at 1 so the brightest content saturates the CRF at the long
    # exposures while the two shortest still observe it unclipped, and the
    # darkest content crushes toward black at the shortest exposure
    exponents = np.linspace(-2.1, 0.0, n_gaussians)
    brightness = 10.0 ** rng.permutation(exponents)
    # mildly saturated chromas: brightness levels share overlapping colors,
    # so image appearance cannot stand in for absolute radiance
    chroma = rng.uniform(0.6, 1.0, size=(n_gaussians, 3))
    chroma /= chroma.max(axis=1, keepdims=True)
    colors = brightness[:, None] * chroma

    cloud = GaussianCloud(
        mu=mu, log_scale=log_scale, rotation=quat,
        opacity_logit=np.asarray(logit(opacity)),
        h_r=np.zeros((n_gaussians, 8)), l_a_raw=np.zeros((n_gaussians, 3)))
    extent = float(np.linalg.norm(mu.max(axis=0) - mu.min(axis=0)))
    cameras = _ring_cameras(n_views, image_size, rng)
    scene = SyntheticScene(cloud=cloud, colors=colors, opacities=opacity,
                           cameras=cameras, extent=extent)

    train_views, test_views = [], []
    for vid, cam in enumerate(cameras):
        hdr = render_ground_truth(scene, cam)
        for t in EXPOSURE_LADDER:
            record = ViewRecord(camera=cam, exposure_t=t, lighting_l=t,
                                gt_ldr=crf(hdr, t), gt_hdr=hdr, view_id=vid)
            test_views.append(record)
            if t in OE_EXPOSURES:
                train_views.append(record)
    params = {"seed": seed, "n_gaussians": n_gaussians,
              "image_size": image_size, "n_views": n_views}
    return SceneData(scene=scene, train_views=train_views,
                     test_views=test_views, params=params)


# ---------------------------------------------------------------------------
# metrics


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit-range images.

    Identical images return the +inf sentinel.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return np.inf
    return -10.0 * np.log10(mse)


def ssim(a, b):
    """Mean SSIM with the standard 11x11 Gaussian window (strict size check)."""
    value, _ = ssim_forward(a, b, window=11)
    return value


# ---------------------------------------------------------------------------
# image files


def write_pfm(path, image):
    """Color PFM: little-endian f32 rows stored bottom-to-top."""
    image = np.asarray(image)
    if not np.isfinite(image).all():
        raise ValueError("refusing to write non-finite values")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(image[::-1], dtype="<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"PF":
            raise IOError(f"{path}: not a color PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise IOError(f"{path}: malformed PFM dimensions")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        payload = f.read(w * h * 3 * 4)
        if len(payload) != w * h * 3 * 4:
            raise IOError(f"{path}: truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype).reshape(h, w, 3)
    return data[::-1].astype(float)


def write_ppm(path, image):
    """Binary 8-bit PPM; values are gamma-encoded before quantization."""
    image = np.asarray(image)
    if not np.isfinite(image).all():
        raise ValueError("refusing to write non-finite values")
    h, w = image.shape[:2]
    data = np.round(255.0 * np.clip(image, 0.0, 1.0) ** (1.0 / GAMMA))
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.astype(np.uint8).tobytes())


def read_ppm(path):
    """Reads a binary PPM back to linear [0, 1] values (gamma decoded)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise IOError(f"{path}: not a binary PPM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        if maxval != 255:
            raise IOError(f"{path}: unsupported max value {maxval}")
        payload = f.read(w * h * 3)
        if len(payload) != w * h * 3:
            raise IOError(f"{path}: truncated PPM payload")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (data / 255.0) ** GAMMA


# ---------------------------------------------------------------------------
# scene manifest


def write_scene(out_dir, data):
    """Write the manifest plus per-view LDR (PPM) and HDR (PFM) images.

    The manifest records the generation parameters; load_scene replays the
    generator from them, so the images are artifacts for inspection and
    external tooling rather than the training input.
    """
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in data.params.items()]
    seen_hdr = set()
    for record in data.test_views:
        tag = f"view{record.view_id:03d}_t{record.exposure_t:g}"
        ldr_name = f"{tag}.ppm"
        write_ppm(os.path.join(out_dir, ldr_name), record.gt_ldr ** GAMMA)
        split = "train" if record.exposure_t in OE_EXPOSURES else "test"
        lines.append(f"{tag}_ldr = {ldr_name}")
        lines.append(f"{tag}_exposure = {record.exposure_t:g}")
        lines.append(f"{tag}_split = {split}")
        if record.view_id not in seen_hdr:
            hdr_name = f"view{record.view_id:03d}_hdr.pfm"
            write_pfm(os.path.join(out_dir, hdr_name), record.gt_hdr)
            lines.append(f"view{record.view_id:03d}_hdr = {hdr_name}")
            seen_hdr.add(record.view_id)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_scene(scene_dir):
    """Rebuild a scene from its manifest's generation parameters."""
    manifest = os.path.join(scene_dir, "manifest.txt")
    params = {}
    with open(manifest) as f:
        for line in f:
            if "=" in line:
                key, value = line.split("=", 1)
                params[key.strip()] = value.strip()
    try:
        return generate_scene(seed=int(params["seed"]),
                              n_gaussians=int(params["n_gaussians"]),
                              image_size=int(params["image_size"]),
                              n_views=int(params["n_views"]))
    except KeyError as e:
        raise IOError(f"{manifest}: missing generation parameter {e}")
