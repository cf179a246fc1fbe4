"""Pose and depth accuracy metrics for two-view reconstruction.

Rotation error is the geodesic angle between the estimated and reference
rotations. Translation error is the angle between the translation
directions, because a monocular reconstruction carries no absolute scale.
Error ensembles are summarized two ways: exact area under the cumulative
recall curve (AUC) and the fraction of poses below a threshold (mAP-style),
both reported as percentages.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput, NoValidPixels, ZeroTranslation
from .geometry import DepthMap, PoseSE3

__all__ = [
    "DepthErrorReport",
    "PoseError",
    "depth_metrics",
    "pose_auc",
    "pose_error",
    "pose_map",
]


@dataclass(frozen=True)
class PoseError:
    """Angular pose errors in degrees; max_deg is the scalar used to rank."""

    rot_deg: float
    trans_deg: float

    @property
    def max_deg(self) -> float:
        return max(self.rot_deg, self.trans_deg)


@dataclass(frozen=True)
class DepthErrorReport:
    """Depth errors over the jointly valid pixels of a map pair."""

    l1_inv: float
    l1_rel: float
    sc_inv: float
    num_pixels: int


def pose_error(gt: PoseSE3, est: PoseSE3) -> PoseError:
    """Geodesic rotation angle and translation-direction angle in degrees.

    Both angles come from atan2 of a sine and cosine part rather than a bare
    arccos, which loses half the significant digits near zero error.
    """
    norm_gt = float(np.linalg.norm(gt.translation))
    norm_est = float(np.linalg.norm(est.translation))
    if norm_gt == 0.0 or norm_est == 0.0:
        raise ZeroTranslation("translation direction undefined for zero translation")

    rel = gt.rotation.T @ est.rotation
    cos_rot = 0.5 * (float(np.trace(rel)) - 1.0)
    sin_rot = 0.5 * float(
        np.linalg.norm(
            [rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]]
        )
    )
    rot = float(np.degrees(np.arctan2(sin_rot, cos_rot)))

    a = gt.translation / norm_gt
    b = est.translation / norm_est
    trans = float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), a @ b)))
    return PoseError(rot_deg=rot, trans_deg=trans)


def _error_array(errors: Iterable[float]) -> np.ndarray:
    arr = np.asarray(list(errors), dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyInput("need at least one error value")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
        raise ValueError("errors must be finite and non-negative")
    return arr


def _threshold_list(thresholds: Sequence[float]) -> list[float]:
    taus = [float(t) for t in thresholds]
    if any(t <= 0.0 for t in taus):
        raise ValueError("thresholds must be positive")
    return taus


def pose_auc(errors: Iterable[float], thresholds: Sequence[float]) -> list[float]:
    """Exact area under the cumulative recall curve, one percentage per tau.

    recall(e) is the fraction of errors <= e; its integral over [0, tau]
    splits into per-error contributions max(0, tau - e), so no binning or
    quadrature is involved.
    """
    arr = _error_array(errors)
    return [
        float(np.maximum(0.0, tau - arr).sum() / (arr.size * tau) * 100.0)
        for tau in _threshold_list(thresholds)
    ]


def pose_map(errors: Iterable[float], thresholds: Sequence[float]) -> list[float]:
    """Percentage of errors strictly below each threshold."""
    arr = _error_array(errors)
    return [float((arr < tau).mean() * 100.0) for tau in _threshold_list(thresholds)]


def depth_metrics(gt: DepthMap, est: DepthMap, scale_align: bool = False) -> DepthErrorReport:
    """L1-inverse, L1-relative, and scale-invariant log error.

    Computed over pixels valid in both maps. With scale_align the estimate
    is first multiplied by median(gt / est), removing the global scale a
    monocular solver cannot observe; sc_inv is scale-free either way.
    """
    if gt.shape != est.shape:
        raise DimensionMismatch(f"depth grids disagree: {gt.shape} vs {est.shape}")
    joint = gt.valid & est.valid
    if not joint.any():
        raise NoValidPixels("no jointly valid depth pixels")
    d_gt = gt.values[joint]
    d_est = est.values[joint]
    if scale_align:
        d_est = d_est * float(np.median(d_gt / d_est))

    z = np.log(d_est) - np.log(d_gt)
    centered = z - z.mean()
    # the centered form survives a large constant log-offset (uniform scale)
    # that the textbook E[z^2] - E[z]^2 would cancel catastrophically
    variance = float(np.mean(centered * centered))
    return DepthErrorReport(
        l1_inv=float(np.mean(np.abs(1.0 / d_est - 1.0 / d_gt))),
        l1_rel=float(np.mean(np.abs(d_est - d_gt) / d_gt)),
        sc_inv=float(np.sqrt(max(variance, 0.0))),
        num_pixels=int(joint.sum()),
    )
