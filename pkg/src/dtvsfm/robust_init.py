"""Robust relative-pose initialization from flow correspondences.

Dense flow is turned into pixel correspondences, and a seeded RANSAC loop
over the normalized 8-point algorithm estimates an essential matrix. The
pose is recovered by testing the four (R, t) decompositions with a
cheirality vote over the inliers. Everything is deterministic for a fixed
rng_seed: hypothesis sampling uses one PCG stream, ties between hypotheses
break on lower total Sampson error and then on the earlier iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, DimensionMismatch, InsufficientMatches
from .geometry import CameraIntrinsics, FlowField, PoseSE3, pixel_grid

_MIN_SAMPLE = 8


@dataclass
class RansacConfig:
    threshold: float = 1.0
    confidence: float = 0.99
    max_iterations: int = 1000
    rng_seed: int = 0
    subsample_stride: int = 4
    # consensus is found on forward correspondences; this marks each
    # inlier's nearest backward pixel as inlying too
    transfer_backward_inliers: bool = True

    def __post_init__(self) -> None:
        if self.threshold <= 0.0:
            raise ValueError("threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.subsample_stride < 1:
            raise ValueError("subsample_stride must be at least 1")


@dataclass
class CorrespondenceSet:
    """Pixel matches (reference -> source) plus their reference grid indices."""

    pix_r: np.ndarray  # (N, 2) float64
    pix_s: np.ndarray  # (N, 2) float64
    indices: np.ndarray  # (N,) flat row-major indices into the reference grid
    grid_shape: tuple[int, int]

    def __post_init__(self) -> None:
        self.pix_r = np.asarray(self.pix_r, dtype=np.float64).reshape(-1, 2)
        self.pix_s = np.asarray(self.pix_s, dtype=np.float64).reshape(-1, 2)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if not (len(self.pix_r) == len(self.pix_s) == len(self.indices)):
            raise DimensionMismatch("correspondence arrays disagree in length")

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class InlierSet:
    """Subset of a correspondence set, stored as reference grid indices."""

    indices: np.ndarray  # (M,) sorted flat indices
    grid_shape: tuple[int, int]

    def __post_init__(self) -> None:
        self.indices = np.sort(np.asarray(self.indices, dtype=np.int64).reshape(-1))

    def __len__(self) -> int:
        return len(self.indices)

    def to_grid(self) -> np.ndarray:
        grid = np.zeros(self.grid_shape[0] * self.grid_shape[1], bool)
        grid[self.indices] = True
        return grid.reshape(self.grid_shape)


def flow_to_correspondences(
    flow: FlowField,
    confidence: np.ndarray,
    intrinsics: CameraIntrinsics,
    min_conf: float = 0.0,
    stride: int = 1,
) -> CorrespondenceSet:
    """One correspondence per valid, confident pixel whose target stays in-bounds."""
    if flow.shape != intrinsics.shape:
        raise DimensionMismatch("flow grid does not match intrinsics")
    confidence = np.asarray(confidence, dtype=np.float64)
    if confidence.shape != flow.shape:
        raise DimensionMismatch("confidence grid does not match flow")
    if stride < 1:
        raise ValueError("stride must be at least 1")

    h, w = flow.shape
    us, vs = pixel_grid(h, w)
    targets = flow.target_coordinates()
    keep = (
        flow.valid
        & (confidence >= min_conf)
        & (targets[..., 0] >= 0.0)
        & (targets[..., 0] <= w - 1.0)
        & (targets[..., 1] >= 0.0)
        & (targets[..., 1] <= h - 1.0)
    )
    if stride > 1:
        on_grid = np.zeros((h, w), bool)
        on_grid[::stride, ::stride] = True
        keep &= on_grid

    pix_r = np.stack([us[keep], vs[keep]], axis=1)
    pix_s = targets[keep]
    indices = np.flatnonzero(keep.ravel())
    return CorrespondenceSet(pix_r, pix_s, indices, (h, w))


def backward_inlier_grid(corr: CorrespondenceSet, inliers: InlierSet) -> np.ndarray:
    """Inlier membership seen from the source image.

    The consensus set is estimated on forward correspondences; each inlier's
    target, rounded to the nearest pixel, marks the source-grid cell that the
    backward direction may trust. Returns a boolean (H, W) grid.
    """
    if corr.grid_shape != inliers.grid_shape:
        raise DimensionMismatch("correspondences and inliers disagree on grid shape")
    h, w = corr.grid_shape
    member = np.isin(corr.indices, inliers.indices)
    targets = corr.pix_s[member]
    cols = np.clip(np.rint(targets[:, 0]).astype(np.int64), 0, w - 1)
    rows = np.clip(np.rint(targets[:, 1]).astype(np.int64), 0, h - 1)
    grid = np.zeros((h, w), bool)
    grid[rows, cols] = True
    return grid


def _hartley_normalize(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate to the centroid and scale mean distance to sqrt(2)."""
    centroid = points.mean(axis=0)
    shifted = points - centroid
    mean_dist = np.mean(np.linalg.norm(shifted, axis=1))
    scale = np.sqrt(2.0) / max(mean_dist, 1e-12)
    transform = np.array(
        [
            [scale, 0.0, -scale * centroid[0]],
            [0.0, scale, -scale * centroid[1]],
            [0.0, 0.0, 1.0],
        ]
    )
    return shifted * scale, transform


def _eight_point(
    x_r: np.ndarray,
    x_s: np.ndarray,
    weights: np.ndarray | None = None,
) -> np.ndarray | None:
    """Essential matrix from >= 8 camera-normalized correspondences.

    Inputs are 2-d points x = ((u - cx) / fx, (v - cy) / fy). Hartley
    conditioning is applied on top before building the design matrix; row
    weights, when given, scale the design rows by sqrt(w). Returns None
    when the design matrix is rank deficient (degenerate sample). The
    result has equal non-zero singular values.
    """
    n_r, t_r = _hartley_normalize(x_r)
    n_s, t_s = _hartley_normalize(x_s)
    design = np.empty((len(x_r), 9))
    design[:, 0] = n_s[:, 0] * n_r[:, 0]
    design[:, 1] = n_s[:, 0] * n_r[:, 1]
    design[:, 2] = n_s[:, 0]
    design[:, 3] = n_s[:, 1] * n_r[:, 0]
    design[:, 4] = n_s[:, 1] * n_r[:, 1]
    design[:, 5] = n_s[:, 1]
    design[:, 6] = n_r[:, 0]
    design[:, 7] = n_r[:, 1]
    design[:, 8] = 1.0
    if weights is not None:
        design *= np.sqrt(np.maximum(weights, 0.0))[:, None]
    _, svals, vt = np.linalg.svd(design, full_matrices=True)
    if svals[6] < 1e-8 * max(svals[0], 1e-300):
        return None
    e_norm = vt[-1].reshape(3, 3)
    e_pix = t_s.T @ e_norm @ t_r
    u, s, vt2 = np.linalg.svd(e_pix)
    sigma = 0.5 * (s[0] + s[1])
    if sigma < 1e-12 * max(s[0], 1e-300) or s[1] < 1e-8 * s[0]:
        return None
    return u @ np.diag([sigma, sigma, 0.0]) @ vt2


def _robust_refit(
    cam_r: np.ndarray,
    cam_s: np.ndarray,
    pix_r: np.ndarray,
    pix_s: np.ndarray,
    k_inv: np.ndarray,
    model0: np.ndarray,
    scale: float,
    rounds: int = 3,
) -> np.ndarray | None:
    """Robust Sampson-weighted eight-point iterations from a seed model.

    A plain least-squares refit minimizes raw algebraic error, which a
    handful of gross matches dominate: algebraic error grows with both the
    epipolar offset and the gradient magnitude, so one bad match can
    outweigh hundreds of clean ones. Each round therefore scales the
    design rows by 1/||grad|| (turning the objective into Sampson error)
    and by a Cauchy factor 1 / (1 + (d / scale)^2) that caps the influence
    of matches outside the working band. Residuals for the first round
    come from the caller's seed model.
    """
    model: np.ndarray | None = model0
    for _ in range(rounds):
        dist, denom = _sampson_parts(model, pix_r, pix_s, k_inv)
        robust = 1.0 / (1.0 + (dist / scale) ** 2)
        with np.errstate(divide="ignore"):
            weights = np.where(denom > 0.0, robust / denom, 0.0)
        model = _eight_point(cam_r, cam_s, weights)
        if model is None:
            return None
    return model


def _sampson_parts(
    essential: np.ndarray,
    x_r: np.ndarray,
    x_s: np.ndarray,
    k_inv: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Sampson distance (pixels) and its squared-gradient denominator."""
    fund = k_inv.T @ essential @ k_inv
    ones = np.ones((len(x_r), 1))
    p_r = np.concatenate([x_r, ones], axis=1)
    p_s = np.concatenate([x_s, ones], axis=1)
    f_r = p_r @ fund.T  # rows: F @ p_r
    f_s = p_s @ fund  # rows: F^T @ p_s
    numer = np.einsum("ni,ni->n", p_s, f_r)
    denom = f_r[:, 0] ** 2 + f_r[:, 1] ** 2 + f_s[:, 0] ** 2 + f_s[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d_sq = numer * numer / denom
    dist = np.sqrt(np.where(denom > 0.0, d_sq, np.inf))
    return dist, denom


def _sampson_distance(
    essential: np.ndarray,
    x_r: np.ndarray,
    x_s: np.ndarray,
    k_inv: np.ndarray,
) -> np.ndarray:
    """First-order epipolar distance in pixels for pixel-coordinate matches."""
    return _sampson_parts(essential, x_r, x_s, k_inv)[0]


def _triangulate_depths(
    rays_r: np.ndarray, rays_s: np.ndarray, rotation: np.ndarray, translation: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares depths (z_r, z_s) from z_r R x_r + t ~= z_s x_s."""
    a = rays_r @ rotation.T
    b = -rays_s
    aa = np.einsum("ni,ni->n", a, a)
    ab = np.einsum("ni,ni->n", a, b)
    bb = np.einsum("ni,ni->n", b, b)
    at = a @ translation
    bt = b @ translation
    # Cramer's rule on the 2x2 normal equations [aa ab; ab bb] z = [-at; -bt]
    det = aa * bb - ab * ab
    det = np.where(np.abs(det) < 1e-300, np.inf, det)
    z_r = (ab * bt - at * bb) / det
    z_s = (ab * at - aa * bt) / det
    return z_r, z_s


def _pose_candidates(essential: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    u, _, vt = np.linalg.svd(essential)
    if np.linalg.det(u) < 0.0:
        u = -u
    if np.linalg.det(vt) < 0.0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    return [(r1, t), (r1, -t), (r2, t), (r2, -t)]


def _recover_pose(
    essential: np.ndarray,
    cam_r: np.ndarray,
    cam_s: np.ndarray,
) -> PoseSE3:
    """Cheirality vote over the four decompositions; first best candidate wins."""
    ones = np.ones((len(cam_r), 1))
    rays_r = np.concatenate([cam_r, ones], axis=1)
    rays_s = np.concatenate([cam_s, ones], axis=1)
    best_count = -1
    best_pose: PoseSE3 | None = None
    for rotation, translation in _pose_candidates(essential):
        z_r, z_s = _triangulate_depths(rays_r, rays_s, rotation, translation)
        count = int(np.sum((z_r > 0.0) & (z_s > 0.0)))
        if count > best_count:
            best_count = count
            best_pose = PoseSE3(rotation, translation)
    assert best_pose is not None
    return best_pose


def ransac_essential(
    corr: CorrespondenceSet,
    intrinsics: CameraIntrinsics,
    cfg: RansacConfig,
) -> tuple[PoseSE3, InlierSet]:
    """Seeded RANSAC pose with a dense inlier classification.

    Hypotheses are drawn (and scored) on a stride-thinned pool to bound
    cost. The winning hypothesis is locally optimized by re-fitting on
    subsets of its consensus set. The returned inlier set is classified
    over the full input set under the final model, so Sampson distance <
    threshold holds for every returned inlier.
    """
    n = len(corr)
    if n < _MIN_SAMPLE:
        raise InsufficientMatches(f"need at least {_MIN_SAMPLE} correspondences, got {n}")

    k_inv = intrinsics.inverse_matrix()
    cam_r = np.empty_like(corr.pix_r)
    cam_s = np.empty_like(corr.pix_s)
    cam_r[:, 0] = (corr.pix_r[:, 0] - intrinsics.cx) / intrinsics.fx
    cam_r[:, 1] = (corr.pix_r[:, 1] - intrinsics.cy) / intrinsics.fy
    cam_s[:, 0] = (corr.pix_s[:, 0] - intrinsics.cx) / intrinsics.fx
    cam_s[:, 1] = (corr.pix_s[:, 1] - intrinsics.cy) / intrinsics.fy

    stride = cfg.subsample_stride
    if stride > 1:
        rows = corr.indices // corr.grid_shape[1]
        cols = corr.indices % corr.grid_shape[1]
        pool = np.flatnonzero((rows % stride == 0) & (cols % stride == 0))
        if pool.size < _MIN_SAMPLE:
            pool = np.arange(n)
    else:
        pool = np.arange(n)

    pool_cam_r = cam_r[pool]
    pool_cam_s = cam_s[pool]
    pool_pix_r = corr.pix_r[pool]
    pool_pix_s = corr.pix_s[pool]
    rng = np.random.default_rng(np.random.SeedSequence(cfg.rng_seed))

    best_model: np.ndarray | None = None
    best_count = -1
    best_score = np.inf  # total Sampson error over the model's pool inliers
    needed = cfg.max_iterations
    iteration = 0
    while iteration < min(needed, cfg.max_iterations):
        sample = rng.choice(pool.size, size=_MIN_SAMPLE, replace=False)
        iteration += 1
        model = _eight_point(pool_cam_r[sample], pool_cam_s[sample])
        if model is None:
            continue
        dist = _sampson_distance(model, pool_pix_r, pool_pix_s, k_inv)
        inlier = dist < cfg.threshold
        count = int(inlier.sum())
        score = float(dist[inlier].sum())
        if count > best_count or (count == best_count and score < best_score):
            best_model = model
            best_count = count
            best_score = score
            ratio = count / pool.size
            if ratio >= 1.0:
                needed = iteration
            elif ratio > 0.0:
                denom = np.log1p(-min(ratio**_MIN_SAMPLE, 1.0 - 1e-12))
                needed = int(np.ceil(np.log(1.0 - cfg.confidence) / denom))

    if best_model is None:
        raise DegenerateGeometry(
            "every sampled minimal set was rank deficient; no epipolar model exists"
        )

    dist_all = _sampson_distance(best_model, corr.pix_r, corr.pix_s, k_inv)
    inlier_all = dist_all < cfg.threshold
    if int(inlier_all.sum()) < _MIN_SAMPLE:
        raise DegenerateGeometry("best model keeps fewer inliers than a minimal sample")

    # Local optimization: a minimal-sample winner is only as accurate as
    # its eight points, and under pixel noise that is not very accurate at
    # all. The cure is re-fitting on the consensus set, where thousands of
    # matches average the noise away, with the gate annealed loose to
    # tight so a skewed incumbent cannot lock in its own biased consensus.
    # The full-consensus fit is robust (Sampson-weighted Cauchy rounds
    # seeded from the incumbent) because a handful of gross matches inside
    # a wide gate would otherwise steer the quadratic algebraic error.
    # Random consensus subsets at several sizes add basin diversity: small
    # draws can escape the incumbent's pull, large draws average harder.
    # Candidates are judged on the full set by inlier count with a capped
    # total Sampson distance as tie-break: the count margin between a good
    # and a subtly wrong model is far wider than the margin in total
    # residual, most of which both models share as the noise floor.
    eval_cap = 16.0 * cfg.threshold
    best_count_all = int(inlier_all.sum())
    best_trunc = float(np.minimum(dist_all, eval_cap).sum())
    for gate_mult in (4.0, 2.0, 1.0):
        gate = gate_mult * cfg.threshold
        # each gate re-fits to a fixed point before the gate tightens
        for _ in range(4):
            adopted = False
            consensus = np.flatnonzero(dist_all < gate)
            if consensus.size < _MIN_SAMPLE:
                break
            candidates = [
                _robust_refit(
                    cam_r[consensus],
                    cam_s[consensus],
                    corr.pix_r[consensus],
                    corr.pix_s[consensus],
                    k_inv,
                    model0=best_model,
                    scale=gate,
                )
            ]
            for size, repeats in ((14, 12), (40, 8), (120, 4)):
                draw = min(size, consensus.size)
                for _ in range(repeats):
                    pick = consensus[
                        rng.choice(consensus.size, size=draw, replace=False)
                    ]
                    candidates.append(_eight_point(cam_r[pick], cam_s[pick]))
            for model in candidates:
                if model is None:
                    continue
                dist = _sampson_distance(model, corr.pix_r, corr.pix_s, k_inv)
                inlier = dist < cfg.threshold
                count = int(inlier.sum())
                trunc = float(np.minimum(dist, eval_cap).sum())
                better = count > best_count_all or (
                    count == best_count_all and trunc < best_trunc
                )
                if better and count >= _MIN_SAMPLE:
                    best_model = model
                    best_count_all = count
                    best_trunc = trunc
                    inlier_all = inlier
                    dist_all = dist
                    adopted = True
            if not adopted:
                break

    pose = _recover_pose(best_model, cam_r[inlier_all], cam_s[inlier_all])
    inliers = InlierSet(corr.indices[inlier_all], corr.grid_shape)
    return pose, inliers
