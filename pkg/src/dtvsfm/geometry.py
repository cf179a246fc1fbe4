"""Pinhole camera geometry, SE(3) operations, and pose-induced optical flow.

Conventions used everywhere in this package:

* A pixel coordinate (u, v) is (column, row). Integer coordinates are pixel
  centers; there is no half-pixel offset anywhere.
* A pose T = (R, t) maps reference-camera coordinates to source-camera
  coordinates: X_s = R @ X_r + t.
* A twist is a 6-vector [omega, nu] with the rotation part first.
* Back-projection of pixel p at depth Z is X = Z * Kinv @ [u, v, 1].

The induced target of a reference pixel is computed in displacement form,

    du = fx * (Y1 / Y3 - x1),   Y = R @ x + (1 / Z) * t,

with x the unit-depth ray of the pixel. This is algebraically the classic
project(transform(back-project)) map, but the identity pose gives exactly
zero displacement instead of accumulating round-off from the K sandwich.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AngleNearPi,
    DimensionMismatch,
    NonPositiveInputDepth,
)

# Scaled third coordinates below this count as behind the camera.
MIN_FRONT_DEPTH = 1e-12

_SMALL_ANGLE = 1e-4


# ---------------------------------------------------------------------------
# Basic containers


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics for one image grid."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError("focal lengths must be positive")
        if not (0.0 <= self.cx < self.width and 0.0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, 0.0, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def ray_grid(self) -> np.ndarray:
        """Unit-depth rays for every pixel center, shape (H, W, 3)."""
        us, vs = pixel_grid(self.height, self.width)
        rays = np.empty((self.height, self.width, 3))
        rays[..., 0] = (us - self.cx) / self.fx
        rays[..., 1] = (vs - self.cy) / self.fy
        rays[..., 2] = 1.0
        return rays


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) coordinate grids of pixel centers, each shape (H, W)."""
    vs, us = np.mgrid[0:height, 0:width].astype(np.float64)
    return us, vs


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform taking reference-camera points to source-camera points."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise DimensionMismatch("rotation must be 3x3")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) >= 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) >= 1e-9:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


@dataclass
class DepthMap:
    """Per-pixel scene depth with a validity mask. Valid depths are positive."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.ndim != 2:
            raise DimensionMismatch("depth values must be a 2-d grid")
        if self.valid.shape != self.values.shape:
            raise DimensionMismatch("depth validity mask shape mismatch")
        if self.valid.any() and not np.all(self.values[self.valid] > 0.0):
            raise ValueError("valid depths must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @classmethod
    def constant(cls, height: int, width: int, depth: float) -> "DepthMap":
        return cls(np.full((height, width), float(depth)), np.ones((height, width), bool))


@dataclass
class FlowField:
    """Dense displacement field (du, dv) with a validity mask."""

    vectors: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise DimensionMismatch("flow vectors must have shape (H, W, 2)")
        if self.valid.shape != self.vectors.shape[:2]:
            raise DimensionMismatch("flow validity mask shape mismatch")
        if self.valid.any() and not np.all(np.isfinite(self.vectors[self.valid])):
            raise ValueError("valid flow vectors must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.valid.shape

    def target_coordinates(self) -> np.ndarray:
        """Pixel + displacement for every pixel, shape (H, W, 2)."""
        h, w = self.shape
        us, vs = pixel_grid(h, w)
        out = np.empty_like(self.vectors)
        out[..., 0] = us + self.vectors[..., 0]
        out[..., 1] = vs + self.vectors[..., 1]
        return out


# ---------------------------------------------------------------------------
# SO(3) / SE(3)


def _hat(omega: np.ndarray) -> np.ndarray:
    wx, wy, wz = omega
    return np.array(
        [
            [0.0, -wz, wy],
            [wz, 0.0, -wx],
            [-wy, wx, 0.0],
        ]
    )


def _rotation_coefficients(theta_sq: float) -> tuple[float, float, float]:
    """(sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3) with small-angle series."""
    if theta_sq < _SMALL_ANGLE * _SMALL_ANGLE:
        a = 1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0
        b = 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0
        c = 1.0 / 6.0 - theta_sq / 120.0 + theta_sq * theta_sq / 5040.0
        return a, b, c
    theta = np.sqrt(theta_sq)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta_sq
    c = (theta - np.sin(theta)) / (theta_sq * theta)
    return a, b, c


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula, rotation matrix of an axis-angle 3-vector."""
    omega = np.asarray(omega, dtype=np.float64).reshape(3)
    theta_sq = float(omega @ omega)
    a, b, _ = _rotation_coefficients(theta_sq)
    hat = _hat(omega)
    return np.eye(3) + a * hat + b * (hat @ hat)


def se3_exp(twist: np.ndarray) -> PoseSE3:
    """Exponential map. twist = [omega, nu], rotation part first."""
    twist = np.asarray(twist, dtype=np.float64).reshape(6)
    omega, nu = twist[:3], twist[3:]
    theta_sq = float(omega @ omega)
    a, b, c = _rotation_coefficients(theta_sq)
    hat = _hat(omega)
    hat_sq = hat @ hat
    rotation = np.eye(3) + a * hat + b * hat_sq
    v_matrix = np.eye(3) + b * hat + c * hat_sq
    return PoseSE3(_nearest_rotation(rotation), v_matrix @ nu)


def se3_log(pose: PoseSE3) -> np.ndarray:
    """Logarithm map, inverse of se3_exp for rotation angles below pi.

    Raises AngleNearPi within 1e-6 of the cut locus where the axis is not
    recoverable from R - R^T.
    """
    rot = pose.rotation
    cos_theta = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta >= np.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} is within 1e-6 of pi")

    vee = 0.5 * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    theta_sq = theta * theta
    if theta < _SMALL_ANGLE:
        # theta / sin(theta) expanded around zero.
        omega = vee * (1.0 + theta_sq / 6.0 + 7.0 * theta_sq * theta_sq / 360.0)
    else:
        omega = vee * (theta / np.sin(theta))

    if theta < _SMALL_ANGLE:
        d = 1.0 / 12.0 + theta_sq / 720.0 + theta_sq * theta_sq / 30240.0
    else:
        a, b, _ = _rotation_coefficients(theta_sq)
        d = (1.0 - a / (2.0 * b)) / theta_sq
    hat = _hat(omega)
    v_inv = np.eye(3) - 0.5 * hat + d * (hat @ hat)
    nu = v_inv @ pose.translation
    return np.concatenate([omega, nu])


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """a then applied after b: (a o b) X = a(b(X))."""
    return PoseSE3(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(pose: PoseSE3) -> PoseSE3:
    rot_t = pose.rotation.T
    return PoseSE3(rot_t, -rot_t @ pose.translation)


def _nearest_rotation(mat: np.ndarray) -> np.ndarray:
    """Polar projection onto SO(3)."""
    u, _, vt = np.linalg.svd(mat)
    rot = u @ vt
    if np.linalg.det(rot) < 0.0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    return rot


def orthonormalized(pose: PoseSE3) -> PoseSE3:
    """Re-project the rotation onto SO(3); used after retraction chains."""
    return PoseSE3(_nearest_rotation(pose.rotation), pose.translation)


# ---------------------------------------------------------------------------
# Induced pixels / induced flow


def induced_pixel(
    pixel: np.ndarray,
    pose: PoseSE3,
    depth: float,
    intrinsics: CameraIntrinsics,
) -> tuple[np.ndarray, bool]:
    """Target pixel of one reference pixel under (pose, depth).

    Returns (target, in_front). The target is meaningful only when in_front
    is True; a transformed point with non-positive depth is flagged, not an
    error. A non-positive input depth is an error.
    """
    if depth <= 0.0:
        raise NonPositiveInputDepth(f"input depth {depth} must be positive")
    pixel = np.asarray(pixel, dtype=np.float64).reshape(2)
    x = np.array(
        [
            (pixel[0] - intrinsics.cx) / intrinsics.fx,
            (pixel[1] - intrinsics.cy) / intrinsics.fy,
            1.0,
        ]
    )
    y = pose.rotation @ x + (1.0 / depth) * pose.translation
    if y[2] <= MIN_FRONT_DEPTH:
        return pixel.copy(), False
    du = intrinsics.fx * (y[0] / y[2] - x[0])
    dv = intrinsics.fy * (y[1] / y[2] - x[1])
    return np.array([pixel[0] + du, pixel[1] + dv]), True


def induced_flow(
    pose: PoseSE3,
    depth: DepthMap,
    intrinsics: CameraIntrinsics,
) -> FlowField:
    """Dense displacement field induced by (pose, depth) on the pixel grid.

    Pixels with invalid depth, or whose transformed point falls behind the
    camera, are invalid in the result.
    """
    if depth.shape != intrinsics.shape:
        raise DimensionMismatch(
            f"depth grid {depth.shape} does not match intrinsics {intrinsics.shape}"
        )
    rays = intrinsics.ray_grid()
    inv_depth = np.zeros(depth.shape)
    np.divide(1.0, depth.values, out=inv_depth, where=depth.valid)

    y = rays @ pose.rotation.T + inv_depth[..., None] * pose.translation
    valid = depth.valid & (y[..., 2] > MIN_FRONT_DEPTH)

    vectors = np.zeros(depth.shape + (2,))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio_u = y[..., 0] / y[..., 2]
        ratio_v = y[..., 1] / y[..., 2]
    vectors[..., 0] = np.where(valid, intrinsics.fx * (ratio_u - rays[..., 0]), 0.0)
    vectors[..., 1] = np.where(valid, intrinsics.fy * (ratio_v - rays[..., 1]), 0.0)
    return FlowField(vectors, valid)
