"""Confidence maps, binary masks, and scalar weights for flow pixels.

A flow estimate at pixel (i, j) is modelled as an isotropic Gaussian mixture
over the 2-d displacement. The confidence of the pixel is the probability
mass of the mixture inside a disc of given radius around the predicted mean,

    c = sum_k alpha_k * (1 - exp(-R^2 / (2 * sigma_k^2))),

which is the closed form of the disc integral of an isotropic Gaussian.
Masks combine a confidence threshold with a robust-estimation inlier set,
and the per-pixel weight is mask * confidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidMixture


@dataclass
class ConfidenceConfig:
    """Confidence preprocessing knobs.

    radius is the disc radius of the probability-mass integral. The grid
    filter suppresses locally weak confidences before any mask is built;
    it can be switched off for externally curated confidence maps.
    """

    radius: float = 1.0
    grid_filter: bool = True
    cell: int = 4
    quantile: float = 0.5

    def __post_init__(self) -> None:
        if self.radius <= 0.0:
            raise ValueError("radius must be positive")
        if self.cell < 1:
            raise ValueError("cell must be at least 1")
        if not 0.0 <= self.quantile <= 1.0:
            raise ValueError("quantile must lie in [0, 1]")


@dataclass
class MixtureParams:
    """Per-pixel isotropic Gaussian mixture over flow displacements.

    means:     (H, W, 2) component-shared predicted displacement
    weights:   (H, W, K) mixture weights, each row sums to 1
    variances: (H, W, K) per-component isotropic variances, all positive
    """

    means: np.ndarray
    weights: np.ndarray
    variances: np.ndarray

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        if self.means.ndim != 3 or self.means.shape[2] != 2:
            raise DimensionMismatch("means must have shape (H, W, 2)")
        if self.weights.ndim != 3 or self.variances.shape != self.weights.shape:
            raise DimensionMismatch("weights and variances must both be (H, W, K)")
        if self.weights.shape[:2] != self.means.shape[:2]:
            raise DimensionMismatch("mixture grids disagree on (H, W)")
        if self.weights.shape[2] < 1:
            raise InvalidMixture("at least one mixture component required")
        if np.any(self.weights < 0.0):
            raise InvalidMixture("mixture weights must be non-negative")
        if np.max(np.abs(self.weights.sum(axis=2) - 1.0)) >= 1e-9:
            raise InvalidMixture("mixture weights must sum to 1 per pixel")
        if not np.all(self.variances > 0.0):
            raise InvalidMixture("mixture variances must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.means.shape[:2]


def confidence_from_mixture(params: MixtureParams, radius: float = 1.0) -> np.ndarray:
    """Probability that the flow falls within `radius` of its predicted mean.

    Returns a (H, W) float64 grid with values in [0, 1].
    """
    if radius <= 0.0:
        raise ValueError("radius must be positive")
    mass = 1.0 - np.exp(-(radius * radius) / (2.0 * params.variances))
    conf = np.einsum("hwk,hwk->hw", params.weights, mass)
    return np.clip(conf, 0.0, 1.0)


def build_mask(
    confidence: np.ndarray,
    inliers,
    gamma: float,
    flow_valid: np.ndarray | None = None,
) -> np.ndarray:
    """Binary mask: confidence >= gamma AND pixel in the inlier set.

    `inliers` is either a boolean (H, W) grid or an object exposing
    to_grid() that produces one (an InlierSet). Pixels invalid in
    `flow_valid`, when given, are masked out regardless.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    if isinstance(inliers, np.ndarray):
        inlier_grid = inliers.astype(bool)
    else:
        inlier_grid = inliers.to_grid()
    if inlier_grid.shape != confidence.shape:
        raise DimensionMismatch("inlier grid does not match confidence grid")
    mask = (confidence >= gamma) & inlier_grid
    if flow_valid is not None:
        if flow_valid.shape != confidence.shape:
            raise DimensionMismatch("flow validity mask shape mismatch")
        mask &= flow_valid.astype(bool)
    return mask.astype(np.uint8)


def make_weights(confidence: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel scalar weights w = mask * confidence."""
    confidence = np.asarray(confidence, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape != confidence.shape:
        raise DimensionMismatch("mask does not match confidence grid")
    return confidence * (mask != 0)


def local_grid_filter(
    confidence: np.ndarray,
    cell: int = 4,
    quantile: float = 0.5,
) -> np.ndarray:
    """Zero out confidences strictly below their tile's empirical quantile.

    The grid is split into cell x cell tiles (ragged at the right/bottom
    borders); each tile keeps entries >= its own quantile and zeroes the
    rest. Surviving values are returned unchanged.
    """
    if cell < 1:
        raise ValueError("cell must be at least 1")
    if not 0.0 <= quantile <= 1.0:
        raise ValueError("quantile must lie in [0, 1]")
    confidence = np.asarray(confidence, dtype=np.float64)
    if confidence.ndim != 2:
        raise DimensionMismatch("confidence must be a 2-d grid")
    out = confidence.copy()
    height, width = confidence.shape
    for top in range(0, height, cell):
        for left in range(0, width, cell):
            tile = confidence[top : top + cell, left : left + cell]
            threshold = np.quantile(tile, quantile)
            view = out[top : top + cell, left : left + cell]
            view[tile < threshold] = 0.0
    return out
