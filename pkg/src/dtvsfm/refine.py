"""Induced-flow refinement loop around the bundle adjustment core.

A converged pose/depth estimate induces a flow field of its own. Measured
flow that disagrees with the induced flow is either noise or an outlier the
initial masks missed, so its weight is shrunk through an RBF kernel of the
per-pixel gap, and the flow itself is pulled toward the induced field by
convex averaging. Re-solving with the updated weights and flow tightens the
pose; a handful of outer rounds is enough, and clean input sits at a fixed
point of the whole loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DenseSfmError, DimensionMismatch, ZeroTranslation
from .geometry import (
    CameraIntrinsics,
    DepthMap,
    FlowField,
    PoseSE3,
    induced_flow,
    inverse,
)
from .metrics import pose_error
from .robust_init import (
    RansacConfig,
    backward_inlier_grid,
    flow_to_correspondences,
    ransac_essential,
)
from .uncertainty import ConfidenceConfig, build_mask, local_grid_filter, make_weights
from .wba import WbaConfig, WbaReport, WbaState, wba_solve

__all__ = [
    "IterationRecord",
    "RefineConfig",
    "SfmResult",
    "flow_mixup",
    "refine_weights",
    "run_pipeline",
]


@dataclass
class RefineConfig:
    """Outer-loop settings: RBF bandwidth in pixels, rounds, blend factor."""

    sigma: float = 2.0
    outer_iterations: int = 4
    mixup_alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.outer_iterations < 0:
            raise ValueError("outer_iterations must be non-negative")
        if not 0.0 <= self.mixup_alpha <= 1.0:
            raise ValueError("mixup_alpha must lie in [0, 1]")


@dataclass
class IterationRecord:
    """Snapshot after one solve; iteration 0 is the initial pass."""

    iteration: int
    pose: PoseSE3
    cost: float
    wba_converged: bool
    wba_steps: int
    active_fwd: int
    active_bwd: int
    median_depth_r: float
    rot_error_deg: float | None = None
    trans_error_deg: float | None = None


@dataclass
class SfmResult:
    """Final pose/depth state plus the flow and weights that produced it."""

    pose: PoseSE3
    depth_r: DepthMap
    depth_s: DepthMap
    flow_fwd: FlowField
    flow_bwd: FlowField
    w_fwd: np.ndarray
    w_bwd: np.ndarray
    ransac_pose: PoseSE3
    diagnostics: list[IterationRecord] = field(default_factory=list)
    warning: str | None = None


def refine_weights(
    flow: FlowField,
    induced: FlowField,
    weights: np.ndarray,
    sigma: float,
) -> np.ndarray:
    """Shrink weights by an RBF kernel of the flow / induced-flow gap.

    delta_w = exp(-||gap||^2 / (2 sigma^2)) multiplies onto the current
    weight, so repeated refinement only ever tightens. Pixels invalid in
    either field drop to zero.
    """
    if sigma <= 0.0:
        raise ValueError("sigma must be positive")
    if flow.shape != induced.shape:
        raise DimensionMismatch("flow and induced-flow grids disagree")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != flow.shape:
        raise DimensionMismatch("weight grid does not match flow")
    gap_sq = np.sum((flow.vectors - induced.vectors) ** 2, axis=-1)
    out = np.exp(-gap_sq / (2.0 * sigma * sigma)) * weights
    out[~(flow.valid & induced.valid)] = 0.0
    return out


def flow_mixup(flow: FlowField, induced: FlowField, alpha: float) -> FlowField:
    """Convex blend alpha * flow + (1 - alpha) * induced, valid where both are."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if flow.shape != induced.shape:
        raise DimensionMismatch("flow and induced-flow grids disagree")
    valid = flow.valid & induced.valid
    vectors = alpha * flow.vectors + (1.0 - alpha) * induced.vectors
    return FlowField(np.where(valid[..., None], vectors, 0.0), valid)


def _record(
    iteration: int,
    state: WbaState,
    report: WbaReport,
    w_fwd: np.ndarray,
    w_bwd: np.ndarray,
    gt_pose: PoseSE3 | None,
) -> IterationRecord:
    depth_r = state.depth_r()
    median_depth = (
        float(np.median(depth_r.values[depth_r.valid]))
        if depth_r.valid.any()
        else float("nan")
    )
    rot = trans = None
    if gt_pose is not None:
        try:
            err = pose_error(gt_pose, state.pose)
            rot, trans = err.rot_deg, err.trans_deg
        except ZeroTranslation:
            pass
    return IterationRecord(
        iteration=iteration,
        pose=state.pose,
        cost=report.final_cost,
        wba_converged=report.converged,
        wba_steps=len(report.step_norms),
        active_fwd=int(((w_fwd > 0) & state.valid_r).sum()),
        active_bwd=int(((w_bwd > 0) & state.valid_s).sum()),
        median_depth_r=median_depth,
        rot_error_deg=rot,
        trans_error_deg=trans,
    )


def run_pipeline(
    flow_fwd: FlowField,
    flow_bwd: FlowField | None,
    conf_fwd: np.ndarray,
    conf_bwd: np.ndarray | None,
    intrinsics: CameraIntrinsics,
    ransac_cfg: RansacConfig | None = None,
    wba_cfg: WbaConfig | None = None,
    refine_cfg: RefineConfig | None = None,
    conf_cfg: ConfidenceConfig | None = None,
    *,
    single_direction: bool = False,
    gt_pose: PoseSE3 | None = None,
) -> SfmResult:
    """Full two-view estimate: robust initialization, weighted bundle
    adjustment, then outer rounds of reweighting and flow blending.

    With single_direction the backward inputs may be None and only the
    forward energy term contributes. A failed refinement round leaves the
    last good state in place and is reported through `warning`; errors in
    initialization or the first solve propagate. Diagnostics carry pose
    errors when gt_pose is supplied.
    """
    ransac_cfg = ransac_cfg if ransac_cfg is not None else RansacConfig()
    wba_cfg = wba_cfg if wba_cfg is not None else WbaConfig()
    refine_cfg = refine_cfg if refine_cfg is not None else RefineConfig()
    conf_cfg = conf_cfg if conf_cfg is not None else ConfidenceConfig()

    conf_f = np.asarray(conf_fwd, dtype=np.float64)
    if conf_f.shape != flow_fwd.shape:
        raise DimensionMismatch("forward confidence does not match flow")
    if single_direction:
        h, w = intrinsics.shape
        flow_bwd = FlowField(np.zeros((h, w, 2)), np.zeros((h, w), bool))
        conf_b = np.zeros((h, w))
    else:
        if flow_bwd is None or conf_bwd is None:
            raise ValueError("backward flow and confidence required unless single_direction")
        conf_b = np.asarray(conf_bwd, dtype=np.float64)
        if conf_b.shape != flow_bwd.shape:
            raise DimensionMismatch("backward confidence does not match flow")

    if conf_cfg.grid_filter:
        conf_f = local_grid_filter(conf_f, conf_cfg.cell, conf_cfg.quantile)
        if not single_direction:
            conf_b = local_grid_filter(conf_b, conf_cfg.cell, conf_cfg.quantile)

    # pixels below the weight threshold can never influence the solve, so
    # they are kept out of the initialization pool as well; the set stays
    # dense (stride 1) because the returned inliers feed the dense mask,
    # while ransac_essential thins its own hypothesis pool by the config
    corr = flow_to_correspondences(
        flow_fwd, conf_f, intrinsics, min_conf=wba_cfg.gamma, stride=1
    )
    pose0, inliers = ransac_essential(corr, intrinsics, ransac_cfg)

    mask_f = build_mask(conf_f, inliers, wba_cfg.gamma, flow_valid=flow_fwd.valid)
    w_f = make_weights(conf_f, mask_f)
    if single_direction:
        w_b = np.zeros(intrinsics.shape)
    else:
        if ransac_cfg.transfer_backward_inliers:
            inlier_b = backward_inlier_grid(corr, inliers)
        else:
            inlier_b = np.ones(intrinsics.shape, bool)
        mask_b = build_mask(conf_b, inlier_b, wba_cfg.gamma, flow_valid=flow_bwd.valid)
        w_b = make_weights(conf_b, mask_b)

    state, report = wba_solve(flow_fwd, flow_bwd, w_f, w_b, pose0, intrinsics, wba_cfg)

    cur_flow_f, cur_flow_b = flow_fwd, flow_bwd
    diagnostics = [_record(0, state, report, w_f, w_b, gt_pose)]
    warning: str | None = None

    for k in range(1, refine_cfg.outer_iterations + 1):
        try:
            induced_f = induced_flow(state.pose, state.depth_r(), intrinsics)
            induced_b = induced_flow(inverse(state.pose), state.depth_s(), intrinsics)
            next_w_f = refine_weights(cur_flow_f, induced_f, w_f, refine_cfg.sigma)
            next_w_b = refine_weights(cur_flow_b, induced_b, w_b, refine_cfg.sigma)
            next_flow_f = flow_mixup(cur_flow_f, induced_f, refine_cfg.mixup_alpha)
            next_flow_b = flow_mixup(cur_flow_b, induced_b, refine_cfg.mixup_alpha)
            state, report = wba_solve(
                next_flow_f,
                next_flow_b,
                next_w_f,
                next_w_b,
                state.pose,
                intrinsics,
                wba_cfg,
                inv_depth_init=(state.inv_depth_r, state.inv_depth_s),
            )
        except DenseSfmError as exc:
            warning = f"refinement round {k} failed: {exc}"
            break
        cur_flow_f, cur_flow_b = next_flow_f, next_flow_b
        w_f, w_b = next_w_f, next_w_b
        diagnostics.append(_record(k, state, report, w_f, w_b, gt_pose))

    return SfmResult(
        pose=state.pose,
        depth_r=state.depth_r(),
        depth_s=state.depth_s(),
        flow_fwd=cur_flow_f,
        flow_bwd=cur_flow_b,
        w_fwd=w_f,
        w_bwd=w_b,
        ransac_pose=pose0,
        diagnostics=diagnostics,
        warning=warning,
    )
