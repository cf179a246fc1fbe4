"""Shared helpers: scene construction and plain-form pose error measures.

The error helpers here are written independently of the metrics module so
they can serve as its oracle as well.
"""

from __future__ import annotations

import numpy as np

from dtvsfm.synth import CorruptionConfig, SceneConfig, generate_scene, render_flow


def rotation_error_deg(rot_gt: np.ndarray, rot_est: np.ndarray) -> float:
    cos = (np.trace(rot_gt.T @ rot_est) - 1.0) / 2.0
    return float(np.rad2deg(np.arccos(np.clip(cos, -1.0, 1.0))))


def translation_error_deg(t_gt: np.ndarray, t_est: np.ndarray) -> float:
    a = t_gt / np.linalg.norm(t_gt)
    b = t_est / np.linalg.norm(t_est)
    return float(np.rad2deg(np.arccos(np.clip(a @ b, -1.0, 1.0))))


def standard_scene(seed: int, **overrides):
    kwargs = dict(
        width=64,
        height=48,
        depth_model="fractal-perlin",
        base_depth=5.0,
        depth_amplitude=1.5,
        rotation_deg=4.0,
        translation_mag=0.5,
        rng_seed=seed,
    )
    kwargs.update(overrides)
    return generate_scene(SceneConfig(**kwargs))


def rendered_scene(seed: int, corruption: CorruptionConfig | None = None, **overrides):
    scene = standard_scene(seed, **overrides)
    rendered = render_flow(scene, corruption or CorruptionConfig())
    return scene, rendered
