"""Synthetic two-view scenes with exact ground truth.

A scene is a reference depth surface, a relative pose, and shared pinhole
intrinsics. The source-view depth map is produced by forward-warping the
reference surface and z-buffering at one-pixel resolution, so disocclusions
come out invalid instead of interpolated. Rendered flow fields start from
the exact pose-induced flow and are then corrupted with Gaussian noise and
uniform outlier replacements, together with a per-pixel confidence map from
one of three models (oracle, calibrated, constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CameraIntrinsics,
    DepthMap,
    FlowField,
    PoseSE3,
    induced_flow,
    inverse,
    so3_exp,
)

DEPTH_MODELS = ("constant", "slanted-plane", "multi-plane", "fractal-perlin")
CONFIDENCE_MODELS = ("oracle", "calibrated", "constant")


@dataclass
class SceneConfig:
    """Recipe for one synthetic two-view scene."""

    width: int = 64
    height: int = 48
    depth_model: str = "fractal-perlin"
    base_depth: float = 5.0
    depth_amplitude: float = 1.5
    plane_tilt: float = 0.25
    num_planes: int = 3
    octaves: int = 3
    rotation_deg: float = 4.0
    rotation_axis: tuple[float, float, float] | None = None
    translation_mag: float = 0.4
    translation_dir: tuple[float, float, float] | None = None
    fx: float | None = None
    fy: float | None = None
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ValueError("scene must be at least 8x8 pixels")
        if self.depth_model not in DEPTH_MODELS:
            raise ValueError(f"unknown depth model {self.depth_model!r}")
        if self.base_depth <= 0.0:
            raise ValueError("base depth must be positive")
        if not 0.0 <= self.depth_amplitude < self.base_depth:
            raise ValueError("depth amplitude must lie in [0, base_depth)")
        if not 0.0 <= self.rotation_deg <= 60.0:
            raise ValueError("rotation magnitude must lie in [0, 60] degrees")
        if self.translation_mag < 0.0:
            raise ValueError("translation magnitude must be non-negative")


@dataclass
class CorruptionConfig:
    """Noise, outlier, and confidence model applied by render_flow.

    oracle_conf_flip_rate is the fraction of outliers the oracle model
    misreports at inlier-level confidence. Real confidence estimators have
    false positives; a nonzero rate reproduces that failure mode so masking
    and refinement have something genuine to disagree about.
    """

    noise_sigma: float = 0.0
    outlier_rate: float = 0.0
    confidence_model: str = "oracle"
    oracle_conf_inlier: float = 0.9
    oracle_conf_outlier: float = 0.05
    oracle_conf_flip_rate: float = 0.0
    constant_conf: float = 0.5
    conf_radius: float = 1.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_sigma < 0.0:
            raise ValueError("noise sigma must be non-negative")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ValueError("outlier rate must lie in [0, 1]")
        if self.confidence_model not in CONFIDENCE_MODELS:
            raise ValueError(f"unknown confidence model {self.confidence_model!r}")
        if not 0.0 <= self.oracle_conf_flip_rate <= 1.0:
            raise ValueError("oracle confidence flip rate must lie in [0, 1]")
        if self.conf_radius <= 0.0:
            raise ValueError("confidence radius must be positive")


@dataclass
class SyntheticScene:
    intrinsics: CameraIntrinsics
    gt_pose: PoseSE3
    gt_depth_r: DepthMap
    gt_depth_s: DepthMap


@dataclass
class RenderedFlow:
    flow_fwd: FlowField
    flow_bwd: FlowField
    conf_fwd: np.ndarray
    conf_bwd: np.ndarray
    outliers_fwd: np.ndarray
    outliers_bwd: np.ndarray


def _value_noise(rng: np.random.Generator, height: int, width: int, octaves: int) -> np.ndarray:
    """Fractal value noise in [-1, 1]: bilinearly upsampled random lattices."""
    out = np.zeros((height, width))
    amplitude = 1.0
    total = 0.0
    cells = 4
    for _ in range(max(octaves, 1)):
        lat_h = min(cells, height) + 1
        lat_w = min(cells, width) + 1
        lattice = rng.uniform(-1.0, 1.0, size=(lat_h, lat_w))
        ys = np.linspace(0.0, lat_h - 1.0, height)
        xs = np.linspace(0.0, lat_w - 1.0, width)
        y0 = np.minimum(ys.astype(int), lat_h - 2)
        x0 = np.minimum(xs.astype(int), lat_w - 2)
        fy = (ys - y0)[:, None]
        fx = (xs - x0)[None, :]
        a = lattice[np.ix_(y0, x0)]
        b = lattice[np.ix_(y0, x0 + 1)]
        c = lattice[np.ix_(y0 + 1, x0)]
        d = lattice[np.ix_(y0 + 1, x0 + 1)]
        layer = a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx
        out += amplitude * layer
        total += amplitude
        amplitude *= 0.5
        cells *= 2
    return out / total


def _reference_depth(cfg: SceneConfig, intr: CameraIntrinsics, rng: np.random.Generator) -> np.ndarray:
    h, w = cfg.height, cfg.width
    if cfg.depth_model == "constant":
        return np.full((h, w), cfg.base_depth)
    if cfg.depth_model == "slanted-plane":
        # plane n . X = d rendered through the rays; tilt kept small enough
        # that the whole field of view stays in front of the plane
        tilt = cfg.plane_tilt
        normal = np.array([np.sin(tilt), 0.5 * np.sin(tilt), np.cos(tilt)])
        normal /= np.linalg.norm(normal)
        rays = intr.ray_grid()
        denom = rays @ normal
        depth = cfg.base_depth * normal[2] / np.maximum(denom, 1e-3)
        return np.clip(depth, 0.2 * cfg.base_depth, 5.0 * cfg.base_depth)
    if cfg.depth_model == "multi-plane":
        depth = np.full((h, w), cfg.base_depth + cfg.depth_amplitude)
        for _ in range(max(cfg.num_planes - 1, 0)):
            top = rng.integers(0, max(h - 4, 1))
            left = rng.integers(0, max(w - 4, 1))
            bh = rng.integers(h // 4, max(h // 2, h // 4 + 1))
            bw = rng.integers(w // 4, max(w // 2, w // 4 + 1))
            plane_depth = cfg.base_depth - cfg.depth_amplitude * rng.uniform(0.2, 1.0)
            depth[top : top + bh, left : left + bw] = plane_depth
        return depth
    # fractal-perlin
    noise = _value_noise(rng, h, w, cfg.octaves)
    return cfg.base_depth + cfg.depth_amplitude * noise


def _unit_or_random(vec: tuple[float, float, float] | None, rng: np.random.Generator) -> np.ndarray:
    if vec is None:
        out = rng.normal(size=3)
    else:
        out = np.asarray(vec, dtype=np.float64)
    norm = np.linalg.norm(out)
    if norm == 0.0:
        raise ValueError("direction vector must be non-zero")
    return out / norm


def _warp_depth_zbuffer(
    depth_r: np.ndarray, pose: PoseSE3, intr: CameraIntrinsics
) -> DepthMap:
    """Forward-warp the reference surface into the source view.

    Nearest-pixel splatting; among pixels landing on the same target the
    smallest depth wins (stable order, so output is deterministic).
    """
    h, w = depth_r.shape
    rays = intr.ray_grid()
    points = depth_r[..., None] * rays
    warped = points @ pose.rotation.T + pose.translation
    z = warped[..., 2].ravel()
    front = z > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        us = intr.fx * warped[..., 0].ravel() / z + intr.cx
        vs = intr.fy * warped[..., 1].ravel() / z + intr.cy
    iu = np.rint(us).astype(int)
    iv = np.rint(vs).astype(int)
    ok = front & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)

    values = np.full((h, w), np.nan)
    valid = np.zeros((h, w), bool)
    order = np.argsort(-z[ok], kind="stable")
    tu, tv, tz = iu[ok][order], iv[ok][order], z[ok][order]
    values[tv, tu] = tz
    valid[tv, tu] = True
    return DepthMap(values, valid)


def generate_scene(cfg: SceneConfig) -> SyntheticScene:
    """Deterministic scene for a config; equal configs give equal scenes."""
    fx = cfg.fx if cfg.fx is not None else float(cfg.width)
    fy = cfg.fy if cfg.fy is not None else fx
    intr = CameraIntrinsics(
        fx=fx,
        fy=fy,
        cx=(cfg.width - 1) / 2.0,
        cy=(cfg.height - 1) / 2.0,
        width=cfg.width,
        height=cfg.height,
    )
    rng = np.random.default_rng(np.random.SeedSequence(cfg.rng_seed))
    depth_values = _reference_depth(cfg, intr, rng)
    axis = _unit_or_random(cfg.rotation_axis, rng)
    direction = _unit_or_random(cfg.translation_dir, rng)
    pose = PoseSE3(
        so3_exp(axis * np.deg2rad(cfg.rotation_deg)),
        direction * cfg.translation_mag,
    )
    depth_r = DepthMap(depth_values, np.ones(depth_values.shape, bool))
    depth_s = _warp_depth_zbuffer(depth_values, pose, intr)
    return SyntheticScene(intr, pose, depth_r, depth_s)


def forward_visibility(scene: SyntheticScene, rel_tol: float = 1e-6) -> np.ndarray:
    """Reference pixels whose surface point wins the source z-buffer."""
    intr = scene.intrinsics
    h, w = scene.gt_depth_r.shape
    rays = intr.ray_grid()
    points = scene.gt_depth_r.values[..., None] * rays
    warped = points @ scene.gt_pose.rotation.T + scene.gt_pose.translation
    z = warped[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        us = intr.fx * warped[..., 0] / z + intr.cx
        vs = intr.fy * warped[..., 1] / z + intr.cy
    iu = np.rint(us).astype(int)
    iv = np.rint(vs).astype(int)
    ok = (z > 1e-9) & (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
    visible = np.zeros((h, w), bool)
    buf = scene.gt_depth_s
    idx = np.where(ok)
    zb = buf.values[iv[idx], iu[idx]]
    zb_ok = buf.valid[iv[idx], iu[idx]]
    visible[idx] = zb_ok & (z[idx] <= zb * (1.0 + rel_tol))
    return visible


def sample_flow_bilinear(
    field: FlowField, coords: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear flow samples at continuous (u, v) coords of shape (N, 2).

    A sample is valid only when all four surrounding pixels are valid.
    """
    h, w = field.shape
    u = coords[:, 0]
    v = coords[:, 1]
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    inside = (u0 >= 0) & (u0 + 1 <= w - 1) & (v0 >= 0) & (v0 + 1 <= h - 1)
    u0c = np.clip(u0, 0, w - 2)
    v0c = np.clip(v0, 0, h - 2)
    fu = (u - u0c)[:, None]
    fv = (v - v0c)[:, None]
    a = field.vectors[v0c, u0c]
    b = field.vectors[v0c, u0c + 1]
    c = field.vectors[v0c + 1, u0c]
    d = field.vectors[v0c + 1, u0c + 1]
    samples = a * (1 - fv) * (1 - fu) + b * (1 - fv) * fu + c * fv * (1 - fu) + d * fv * fu
    corners_valid = (
        field.valid[v0c, u0c]
        & field.valid[v0c, u0c + 1]
        & field.valid[v0c + 1, u0c]
        & field.valid[v0c + 1, u0c + 1]
    )
    return samples, inside & corners_valid


def _corrupt_direction(
    clean: FlowField,
    cfg: CorruptionConfig,
    noise_rng: np.random.Generator,
    outlier_rng: np.random.Generator,
) -> tuple[FlowField, np.ndarray, np.ndarray]:
    h, w = clean.shape
    vectors = clean.vectors.copy()
    valid = clean.valid.copy()
    flat_valid = np.flatnonzero(valid.ravel())

    if cfg.noise_sigma > 0.0 and flat_valid.size:
        noise = noise_rng.normal(0.0, cfg.noise_sigma, size=(flat_valid.size, 2))
        flat = vectors.reshape(-1, 2)
        flat[flat_valid] += noise

    outliers = np.zeros((h, w), bool)
    missed = np.zeros((h, w), bool)
    n_out = int(np.floor(cfg.outlier_rate * flat_valid.size))
    if n_out > 0:
        chosen = outlier_rng.choice(flat_valid, size=n_out, replace=False)
        tu = outlier_rng.uniform(0.0, w - 1.0, size=n_out)
        tv = outlier_rng.uniform(0.0, h - 1.0, size=n_out)
        pu = chosen % w
        pv = chosen // w
        flat = vectors.reshape(-1, 2)
        flat[chosen, 0] = tu - pu
        flat[chosen, 1] = tv - pv
        outliers.ravel()[chosen] = True
        # drawn after the target draws so a zero flip rate leaves the
        # rendered flow stream untouched
        n_flip = int(np.floor(cfg.oracle_conf_flip_rate * n_out))
        if n_flip > 0:
            missed.ravel()[outlier_rng.choice(chosen, size=n_flip, replace=False)] = True

    conf = np.zeros((h, w))
    if cfg.confidence_model == "oracle":
        conf[valid] = cfg.oracle_conf_inlier
        conf[outliers] = cfg.oracle_conf_outlier
        conf[missed] = cfg.oracle_conf_inlier
    elif cfg.confidence_model == "constant":
        conf[valid] = cfg.constant_conf
    else:  # calibrated: disc mass of the generating mixture
        r_sq = cfg.conf_radius * cfg.conf_radius
        sigma_sq = cfg.noise_sigma * cfg.noise_sigma + 1e-12
        wide_sq = (w * w + h * h) / 16.0
        inlier_mass = 1.0 - np.exp(-r_sq / (2.0 * sigma_sq))
        outlier_mass = 1.0 - np.exp(-r_sq / (2.0 * wide_sq))
        value = (1.0 - cfg.outlier_rate) * inlier_mass + cfg.outlier_rate * outlier_mass
        conf[valid] = value

    return FlowField(vectors, valid), conf, outliers


def render_flow(scene: SyntheticScene, corruption: CorruptionConfig) -> RenderedFlow:
    """Corrupted forward/backward flow with confidences and outlier masks."""
    clean_fwd = induced_flow(scene.gt_pose, scene.gt_depth_r, scene.intrinsics)
    clean_bwd = induced_flow(inverse(scene.gt_pose), scene.gt_depth_s, scene.intrinsics)

    seeds = np.random.SeedSequence(corruption.rng_seed).spawn(4)
    noise_f, noise_b, out_f, out_b = (np.random.default_rng(s) for s in seeds)

    flow_fwd, conf_fwd, outliers_fwd = _corrupt_direction(clean_fwd, corruption, noise_f, out_f)
    flow_bwd, conf_bwd, outliers_bwd = _corrupt_direction(clean_bwd, corruption, noise_b, out_b)
    return RenderedFlow(flow_fwd, flow_bwd, conf_fwd, conf_bwd, outliers_fwd, outliers_bwd)
