"""Weighted bundle adjustment over dense flow.

The objective is the bidirectional weighted reprojection error: forward
residuals compare the forward flow targets against pixels induced by
(T, d_r), backward residuals compare the backward flow against (T^-1, d_s),
and both directions share the six pose parameters. Depths are optimized as
per-pixel inverse depths, so the normal equations are block-diagonal in
depth and the pose update reduces to a damped 6x6 system via the Schur
complement. Damping is multiplicative on the diagonal, which keeps the
iteration exactly covariant under the monocular gauge freedom (t, 1/d)
-> (s*t, 1/(s*d)); the gauge itself is fixed by renormalizing ||t|| = 1
after every accepted step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NoValidPixels, SingularSystem
from .geometry import (
    MIN_FRONT_DEPTH,
    CameraIntrinsics,
    DepthMap,
    FlowField,
    PoseSE3,
    compose,
    se3_exp,
)

INV_DEPTH_MIN = 1e-4
INV_DEPTH_MAX = 1e4

_ELIMINATION_GUARD = 1e-12
_DAMPING_CEILING = 1e12
# Reject any candidate twist whose rotation part approaches the exp-map cut
# locus; a step that large is never a trustworthy linearization anyway.
_MAX_ROTATION_STEP = 3.0


@dataclass
class WbaConfig:
    max_gn_iterations: int = 10
    step_tolerance: float = 1e-8
    damping_init: float = 1e-4
    gamma: float = 0.1
    huber_delta: float | None = None

    def __post_init__(self) -> None:
        if self.max_gn_iterations < 1:
            raise ValueError("max_gn_iterations must be at least 1")
        if self.step_tolerance < 0.0:
            raise ValueError("step_tolerance must be non-negative")
        if self.damping_init < 0.0:
            raise ValueError("damping_init must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.huber_delta is not None and self.huber_delta <= 0.0:
            raise ValueError("huber_delta must be positive when set")


@dataclass
class WbaState:
    """Pose plus per-pixel inverse depths for both views."""

    pose: PoseSE3
    inv_depth_r: np.ndarray
    inv_depth_s: np.ndarray
    valid_r: np.ndarray
    valid_s: np.ndarray

    def depth_r(self) -> DepthMap:
        return DepthMap(1.0 / np.maximum(self.inv_depth_r, INV_DEPTH_MIN), self.valid_r)

    def depth_s(self) -> DepthMap:
        return DepthMap(1.0 / np.maximum(self.inv_depth_s, INV_DEPTH_MIN), self.valid_s)


@dataclass
class WbaReport:
    """Per-iteration trace: costs[0] is the initial energy, the rest are
    accepted-step energies (strictly decreasing by construction)."""

    costs: list[float] = field(default_factory=list)
    step_norms: list[float] = field(default_factory=list)
    dampings: list[float] = field(default_factory=list)
    final_cost: float = 0.0
    converged: bool = False
    translation_degenerate: bool = False


@dataclass
class NormalEquations:
    """Weighted Gauss-Newton system with depth blocks kept separate.

    Depth entries are ordered forward-direction pixels first (row-major),
    then backward, matching index_r / index_s.
    """

    h_pose: np.ndarray  # (6, 6)
    b_pose: np.ndarray  # (6,)
    h_depth: np.ndarray  # (M,) per-pixel depth-depth entries
    h_cross: np.ndarray  # (M, 6) depth-pose coupling rows
    b_depth: np.ndarray  # (M,)
    index_r: np.ndarray  # (M_r,) flat grid indices of forward entries
    index_s: np.ndarray  # (M_s,)
    grid_shape: tuple[int, int]
    cost: float


def _check_grids(intr: CameraIntrinsics, *grids) -> None:
    for grid in grids:
        if grid.shape[:2] != intr.shape:
            raise DimensionMismatch(
                f"grid shape {grid.shape[:2]} does not match intrinsics {intr.shape}"
            )


def _cross_rows(vecs: np.ndarray) -> np.ndarray:
    """Stack of skew matrices [v]x for an (N, 3) array."""
    out = np.zeros((len(vecs), 3, 3))
    out[:, 0, 1] = -vecs[:, 2]
    out[:, 0, 2] = vecs[:, 1]
    out[:, 1, 0] = vecs[:, 2]
    out[:, 1, 2] = -vecs[:, 0]
    out[:, 2, 0] = -vecs[:, 1]
    out[:, 2, 1] = vecs[:, 0]
    return out


def _direction_arrays(
    flow: FlowField, weights: np.ndarray, intr: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Active-pixel rays, flow targets, weights, and flat indices."""
    active = flow.valid & (weights > 0.0)
    idx = np.flatnonzero(active.ravel())
    rays = intr.ray_grid().reshape(-1, 3)[idx]
    targets = flow.target_coordinates().reshape(-1, 2)[idx]
    return rays, targets, weights.ravel()[idx], idx


def _predict(
    rays: np.ndarray, inv_depth: np.ndarray, rotation: np.ndarray, translation: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Transformed points Y = R x + d t and their front-of-camera mask."""
    y = rays @ rotation.T + inv_depth[:, None] * translation
    return y, y[:, 2] > MIN_FRONT_DEPTH


def _projection(y: np.ndarray, intr: CameraIntrinsics, front: np.ndarray) -> np.ndarray:
    """Projected pixel coordinates; arbitrary (unused) where not in front."""
    z = np.where(front, y[:, 2], 1.0)
    return np.column_stack(
        [intr.fx * y[:, 0] / z + intr.cx, intr.fy * y[:, 1] / z + intr.cy]
    )


def _projection_jacobian(
    y: np.ndarray, intr: CameraIntrinsics, front: np.ndarray
) -> np.ndarray:
    """d(pixel)/dY rows, shape (N, 2, 3)."""
    z = np.where(front, y[:, 2], 1.0)
    out = np.zeros((len(y), 2, 3))
    out[:, 0, 0] = intr.fx / z
    out[:, 0, 2] = -intr.fx * y[:, 0] / (z * z)
    out[:, 1, 1] = intr.fy / z
    out[:, 1, 2] = -intr.fy * y[:, 1] / (z * z)
    return out


def _robust_weights(
    residuals: np.ndarray, weights: np.ndarray, huber_delta: float | None
) -> tuple[np.ndarray, np.ndarray]:
    """(normal-equation weights, per-pixel cost terms) for the chosen loss."""
    sq = np.einsum("ni,ni->n", residuals, residuals)
    if huber_delta is None:
        return weights, weights * sq
    norm = np.sqrt(sq)
    small = norm <= huber_delta
    scale = np.where(small, 1.0, huber_delta / np.maximum(norm, 1e-300))
    cost = np.where(small, sq, huber_delta * (2.0 * norm - huber_delta))
    return weights * scale, weights * cost


def _direction_terms(
    pose: PoseSE3,
    inv_depth: np.ndarray,
    flow: FlowField,
    weights: np.ndarray,
    intr: CameraIntrinsics,
    huber_delta: float | None,
    backward: bool,
):
    """Residuals and Jacobian blocks for one direction's active pixels.

    Both directions differentiate w.r.t. the same left-multiplied twist on
    T; the backward direction maps source points through T^-1, so its pose
    Jacobians pick up a sign and a rotation factor from d(T^-1)/dT.
    """
    rays, targets, w, idx = _direction_arrays(flow, weights, intr)
    d = inv_depth.ravel()[idx]
    rot, t = pose.rotation, pose.translation
    if backward:
        y = (rays - d[:, None] * t) @ rot
        front = y[:, 2] > MIN_FRONT_DEPTH
        proj = _projection(y, intr, front)
        pj = _projection_jacobian(y, intr, front)
        # dY/domega = +R^T [x_s]x under a left twist on T, so the residual
        # Jacobian is -P R^T [x_s]x; nu and depth flip sign the same way.
        j_omega = -np.einsum("nab,nbc->nac", pj, np.einsum("bc,ncd->nbd", rot.T, _cross_rows(rays)))
        j_nu = d[:, None, None] * np.einsum("nab,cb->nac", pj, rot)
        j_d = np.einsum("nab,b->na", pj, rot.T @ t)
    else:
        y, front = _predict(rays, d, rot, t)
        proj = _projection(y, intr, front)
        pj = _projection_jacobian(y, intr, front)
        j_omega = np.einsum("nab,nbc->nac", pj, _cross_rows(y))
        j_nu = -d[:, None, None] * pj
        j_d = -np.einsum("nab,b->na", pj, t)

    residuals = targets - proj
    # behind-camera pixels are hard-masked for this linearization
    w = np.where(front, w, 0.0)
    j_pose = np.concatenate([j_omega, j_nu], axis=2)
    w_ne, cost_terms = _robust_weights(residuals, w, huber_delta)
    return residuals, j_pose, j_d, w_ne, float(cost_terms.sum()), idx


def _direction_cost(
    pose: PoseSE3,
    inv_depth: np.ndarray,
    flow: FlowField,
    weights: np.ndarray,
    intr: CameraIntrinsics,
    huber_delta: float | None,
    backward: bool,
) -> float:
    rays, targets, w, idx = _direction_arrays(flow, weights, intr)
    d = inv_depth.ravel()[idx]
    rot, t = pose.rotation, pose.translation
    if backward:
        y = (rays - d[:, None] * t) @ rot
    else:
        y = rays @ rot.T + d[:, None] * t
    front = y[:, 2] > MIN_FRONT_DEPTH
    proj = _projection(y, intr, front)
    residuals = targets - proj
    _, cost_terms = _robust_weights(residuals, np.where(front, w, 0.0), huber_delta)
    return float(cost_terms.sum())


def wba_energy(
    pose: PoseSE3,
    depth_r: DepthMap,
    depth_s: DepthMap,
    flow_fwd: FlowField,
    flow_bwd: FlowField,
    w_fwd: np.ndarray,
    w_bwd: np.ndarray,
    intr: CameraIntrinsics,
) -> float:
    """Total weighted squared reprojection error, both directions.

    Pixels whose transformed point lands behind a camera contribute zero.
    """
    w_fwd = np.asarray(w_fwd, dtype=np.float64)
    w_bwd = np.asarray(w_bwd, dtype=np.float64)
    _check_grids(intr, depth_r.values, depth_s.values, flow_fwd.vectors,
                 flow_bwd.vectors, w_fwd, w_bwd)
    inv_r = np.where(depth_r.valid, 1.0 / np.maximum(depth_r.values, 1e-300), 0.0)
    inv_s = np.where(depth_s.valid, 1.0 / np.maximum(depth_s.values, 1e-300), 0.0)
    w_f = np.where(depth_r.valid, w_fwd, 0.0)
    w_b = np.where(depth_s.valid, w_bwd, 0.0)
    fwd = _direction_cost(pose, inv_r, flow_fwd, w_f, intr, None, backward=False)
    bwd = _direction_cost(pose, inv_s, flow_bwd, w_b, intr, None, backward=True)
    return fwd + bwd


def linearize(
    state: WbaState,
    flow_fwd: FlowField,
    flow_bwd: FlowField,
    w_fwd: np.ndarray,
    w_bwd: np.ndarray,
    intr: CameraIntrinsics,
    huber_delta: float | None = None,
) -> NormalEquations:
    """Weighted normal equations at the current state.

    Invalid or zero-weight pixels contribute no rows at all; depth blocks
    stay per-pixel scalars so schur_solve can eliminate them in closed
    form.
    """
    w_fwd = np.asarray(w_fwd, dtype=np.float64)
    w_bwd = np.asarray(w_bwd, dtype=np.float64)
    _check_grids(intr, flow_fwd.vectors, flow_bwd.vectors, w_fwd, w_bwd,
                 state.inv_depth_r, state.inv_depth_s)

    w_f = np.where(state.valid_r, w_fwd, 0.0)
    w_b = np.where(state.valid_s, w_bwd, 0.0)
    h_pose = np.zeros((6, 6))
    b_pose = np.zeros(6)
    h_depth, h_cross, b_depth, indices = [], [], [], []
    total_cost = 0.0
    for backward, flow, weights, inv_depth in (
        (False, flow_fwd, w_f, state.inv_depth_r),
        (True, flow_bwd, w_b, state.inv_depth_s),
    ):
        residuals, j_pose, j_d, w_ne, cost, idx = _direction_terms(
            state.pose, inv_depth, flow, weights, intr, huber_delta, backward
        )
        total_cost += cost
        h_pose += np.einsum("n,nab,nac->bc", w_ne, j_pose, j_pose)
        b_pose -= np.einsum("n,nab,na->b", w_ne, j_pose, residuals)
        h_depth.append(np.einsum("n,na,na->n", w_ne, j_d, j_d))
        h_cross.append(np.einsum("n,na,nab->nb", w_ne, j_d, j_pose))
        b_depth.append(-np.einsum("n,na,na->n", w_ne, j_d, residuals))
        indices.append(idx)

    return NormalEquations(
        h_pose=h_pose,
        b_pose=b_pose,
        h_depth=np.concatenate(h_depth),
        h_cross=np.concatenate(h_cross),
        b_depth=np.concatenate(b_depth),
        index_r=indices[0],
        index_s=indices[1],
        grid_shape=intr.shape,
        cost=total_cost,
    )


def schur_solve(neq: NormalEquations, damping: float) -> tuple[np.ndarray, np.ndarray]:
    """Damped pose step and back-substituted inverse-depth increments.

    Damping multiplies every diagonal entry by (1 + damping), pose and
    depth blocks alike. Depth entries too weak to eliminate (h_dd below
    the guard) receive a zero increment instead of destabilizing the
    reduced system.
    """
    h_reduced = neq.h_pose + damping * np.diag(np.diag(neq.h_pose))
    b_reduced = neq.b_pose.copy()
    h_dd = neq.h_depth * (1.0 + damping)
    elim = h_dd > _ELIMINATION_GUARD
    if np.any(elim):
        ratio = neq.h_cross[elim] / h_dd[elim, None]
        h_reduced = h_reduced - ratio.T @ neq.h_cross[elim]
        b_reduced = b_reduced - ratio.T @ neq.b_depth[elim]
    try:
        twist = np.linalg.solve(h_reduced, b_reduced)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("reduced pose system is rank deficient") from exc
    if not np.all(np.isfinite(twist)):
        raise SingularSystem("reduced pose system produced non-finite step")

    delta_d = np.zeros(len(neq.h_depth))
    if np.any(elim):
        delta_d[elim] = (neq.b_depth[elim] - neq.h_cross[elim] @ twist) / h_dd[elim]
    return twist, delta_d


def _scatter_step(
    inv_depth: np.ndarray, idx: np.ndarray, delta: np.ndarray
) -> np.ndarray:
    out = inv_depth.copy()
    flat = out.ravel()
    flat[idx] = np.clip(flat[idx] + delta, INV_DEPTH_MIN, INV_DEPTH_MAX)
    return out


def wba_solve(
    flow_fwd: FlowField,
    flow_bwd: FlowField,
    w_fwd: np.ndarray,
    w_bwd: np.ndarray,
    pose0: PoseSE3,
    intr: CameraIntrinsics,
    cfg: WbaConfig,
    inv_depth_init: float | tuple[np.ndarray, np.ndarray] = 1.0,
) -> tuple[WbaState, WbaReport]:
    """Levenberg-damped Gauss-Newton over pose and inverse depths.

    Inverse depths start at 1.0 (or the supplied override, which exists so
    gauge experiments can scale the whole initialization consistently).
    Each iteration linearizes once and retries the step with 10x damping
    until the cost strictly decreases; accepted steps halve the damping and
    renormalize ||t|| = 1, rescaling both depth grids to match. Terminates
    when the twist step norm drops below step_tolerance.
    """
    w_fwd = np.asarray(w_fwd, dtype=np.float64)
    w_bwd = np.asarray(w_bwd, dtype=np.float64)
    _check_grids(intr, flow_fwd.vectors, flow_bwd.vectors, w_fwd, w_bwd)

    active = int(((w_fwd > 0) & flow_fwd.valid).sum() + ((w_bwd > 0) & flow_bwd.valid).sum())
    if active < 20:
        raise NoValidPixels(f"need at least 20 weighted pixels, got {active}")

    if isinstance(inv_depth_init, tuple):
        inv_r = np.asarray(inv_depth_init[0], dtype=np.float64).copy()
        inv_s = np.asarray(inv_depth_init[1], dtype=np.float64).copy()
        _check_grids(intr, inv_r, inv_s)
    else:
        inv_r = np.full(intr.shape, float(inv_depth_init))
        inv_s = np.full(intr.shape, float(inv_depth_init))
    state = WbaState(
        pose=pose0,
        inv_depth_r=np.clip(inv_r, INV_DEPTH_MIN, INV_DEPTH_MAX),
        inv_depth_s=np.clip(inv_s, INV_DEPTH_MIN, INV_DEPTH_MAX),
        valid_r=flow_fwd.valid.copy(),
        valid_s=flow_bwd.valid.copy(),
    )

    damping = cfg.damping_init
    report = WbaReport()
    neq = linearize(state, flow_fwd, flow_bwd, w_fwd, w_bwd, intr, cfg.huber_delta)
    current_cost = neq.cost
    report.costs.append(current_cost)

    for _ in range(cfg.max_gn_iterations):
        accepted = False
        while True:
            twist, delta_d = schur_solve(neq, damping)
            step_norm = float(np.linalg.norm(twist))
            if step_norm < cfg.step_tolerance:
                # stationary point: nothing to accept, nothing to reject
                report.converged = True
                break
            if np.linalg.norm(twist[:3]) < _MAX_ROTATION_STEP:
                split = len(neq.index_r)
                cand_r = _scatter_step(state.inv_depth_r, neq.index_r, delta_d[:split])
                cand_s = _scatter_step(state.inv_depth_s, neq.index_s, delta_d[split:])
                cand_pose = compose(se3_exp(twist), state.pose)
                cand_cost = _direction_cost(
                    cand_pose, cand_r, flow_fwd, np.where(state.valid_r, w_fwd, 0.0),
                    intr, cfg.huber_delta, backward=False,
                ) + _direction_cost(
                    cand_pose, cand_s, flow_bwd, np.where(state.valid_s, w_bwd, 0.0),
                    intr, cfg.huber_delta, backward=True,
                )
                if cand_cost < current_cost:
                    scale = float(np.linalg.norm(cand_pose.translation))
                    if scale > 1e-12:
                        cand_pose = PoseSE3(cand_pose.rotation, cand_pose.translation / scale)
                        cand_r = cand_r * scale
                        cand_s = cand_s * scale
                    state = WbaState(cand_pose, cand_r, cand_s, state.valid_r, state.valid_s)
                    current_cost = cand_cost
                    damping *= 0.5
                    report.costs.append(cand_cost)
                    report.step_norms.append(step_norm)
                    report.dampings.append(damping)
                    accepted = True
                    break
            damping *= 10.0
            if damping > _DAMPING_CEILING:
                break
        if not accepted:
            break
        if report.step_norms[-1] < cfg.step_tolerance:
            report.converged = True
            break
        neq = linearize(state, flow_fwd, flow_bwd, w_fwd, w_bwd, intr, cfg.huber_delta)
        # carry the accepted cost rather than re-reading neq.cost: the two
        # agree mathematically (the energy is gauge invariant) and carrying
        # keeps the accepted sequence strictly decreasing bit-for-bit
        current_cost = min(current_cost, neq.cost)

    report.final_cost = report.costs[-1]
    if np.linalg.norm(state.pose.translation) < 1e-9:
        report.translation_degenerate = True
    return state, report
