"""Refinement tests: kernel values frozen from the analytic form, blend
arithmetic, loop fixed point, and end-to-end pipeline behavior."""

from __future__ import annotations

import numpy as np
import pytest

from conftest import rendered_scene, rotation_error_deg, translation_error_deg
from dtvsfm.errors import DimensionMismatch, SingularSystem
from dtvsfm.geometry import FlowField, PoseSE3, induced_flow, inverse
from dtvsfm.refine import (
    RefineConfig,
    SfmResult,
    flow_mixup,
    refine_weights,
    run_pipeline,
)
from dtvsfm.robust_init import (
    RansacConfig,
    backward_inlier_grid,
    flow_to_correspondences,
    ransac_essential,
)
from dtvsfm.synth import CorruptionConfig
from dtvsfm.uncertainty import ConfidenceConfig, build_mask, make_weights
from dtvsfm.wba import WbaConfig, wba_solve

# exp(-1/2) and exp(-2), the kernel at gap = sigma and gap = 2 sigma
EXP_HALF = 0.6065306597126334
EXP_TWO = 0.1353352832366127


def _flow_pair(shape=(6, 8), seed=0):
    rng = np.random.default_rng(seed)
    h, w = shape
    flow = FlowField(rng.uniform(-2.0, 2.0, size=(h, w, 2)), np.ones((h, w), bool))
    induced = FlowField(rng.uniform(-2.0, 2.0, size=(h, w, 2)), np.ones((h, w), bool))
    weights = rng.uniform(0.0, 1.0, size=(h, w))
    return flow, induced, weights


# ---------------------------------------------------------------------------
# refine_weights


class TestRefineWeights:
    def test_equal_flows_keep_weights(self):
        flow, _, weights = _flow_pair(seed=1)
        same = FlowField(flow.vectors.copy(), flow.valid.copy())
        np.testing.assert_array_equal(refine_weights(flow, same, weights, 2.0), weights)

    def test_gap_of_sigma(self):
        sigma = 2.0
        h, w = 3, 4
        flow = FlowField(np.zeros((h, w, 2)), np.ones((h, w), bool))
        vec = np.zeros((h, w, 2))
        vec[..., 0] = sigma
        induced = FlowField(vec, np.ones((h, w), bool))
        out = refine_weights(flow, induced, np.full((h, w), 0.5), sigma)
        np.testing.assert_allclose(out, 0.5 * EXP_HALF, rtol=1e-12)

    def test_gap_of_two_sigma(self):
        sigma = 1.5
        flow = FlowField(np.zeros((2, 2, 2)), np.ones((2, 2), bool))
        vec = np.zeros((2, 2, 2))
        vec[..., 1] = 2.0 * sigma
        induced = FlowField(vec, np.ones((2, 2), bool))
        out = refine_weights(flow, induced, np.ones((2, 2)), sigma)
        np.testing.assert_allclose(out, EXP_TWO, rtol=1e-12)

    def test_never_increases_and_stays_in_unit_interval(self):
        for seed in range(5):
            flow, induced, weights = _flow_pair(seed=seed)
            out = refine_weights(flow, induced, weights, 1.0)
            assert np.all(out <= weights + 1e-15)
            assert np.all(out >= 0.0) and np.all(out <= 1.0)

    def test_monotone_in_gap(self):
        h, w = 1, 5
        flow = FlowField(np.zeros((h, w, 2)), np.ones((h, w), bool))
        vec = np.zeros((h, w, 2))
        vec[0, :, 0] = [0.0, 0.5, 1.0, 2.0, 4.0]
        induced = FlowField(vec, np.ones((h, w), bool))
        out = refine_weights(flow, induced, np.ones((h, w)), 1.3)[0]
        assert np.all(np.diff(out) < 0.0)

    def test_invalid_pixels_zeroed(self):
        flow, induced, weights = _flow_pair(seed=2)
        flow.valid[0, 0] = False
        induced.valid[1, 1] = False
        out = refine_weights(flow, induced, weights, 2.0)
        assert out[0, 0] == 0.0
        assert out[1, 1] == 0.0

    def test_bad_sigma(self):
        flow, induced, weights = _flow_pair()
        with pytest.raises(ValueError):
            refine_weights(flow, induced, weights, 0.0)

    def test_shape_mismatch(self):
        flow, induced, weights = _flow_pair()
        small = FlowField(np.zeros((3, 3, 2)), np.ones((3, 3), bool))
        with pytest.raises(DimensionMismatch):
            refine_weights(flow, small, weights, 1.0)
        with pytest.raises(DimensionMismatch):
            refine_weights(flow, induced, np.ones((3, 3)), 1.0)


# ---------------------------------------------------------------------------
# flow_mixup


class TestFlowMixup:
    def test_equal_flows_unchanged(self):
        flow, _, _ = _flow_pair(seed=3)
        same = FlowField(flow.vectors.copy(), flow.valid.copy())
        out = flow_mixup(flow, same, 0.5)
        np.testing.assert_array_equal(out.vectors, flow.vectors)
        np.testing.assert_array_equal(out.valid, flow.valid)

    def test_halfway_blend(self):
        flow = FlowField(np.full((2, 2, 2), [4.0, 0.0]), np.ones((2, 2), bool))
        induced = FlowField(np.zeros((2, 2, 2)), np.ones((2, 2), bool))
        out = flow_mixup(flow, induced, 0.5)
        np.testing.assert_array_equal(out.vectors[..., 0], 2.0)
        np.testing.assert_array_equal(out.vectors[..., 1], 0.0)

    def test_alpha_one_returns_flow(self):
        flow, induced, _ = _flow_pair(seed=4)
        np.testing.assert_array_equal(flow_mixup(flow, induced, 1.0).vectors, flow.vectors)

    def test_half_blend_symmetric(self):
        flow, induced, _ = _flow_pair(seed=5)
        a = flow_mixup(flow, induced, 0.5)
        b = flow_mixup(induced, flow, 0.5)
        np.testing.assert_array_equal(a.vectors, b.vectors)
        np.testing.assert_array_equal(a.valid, b.valid)

    def test_validity_intersection(self):
        flow, induced, _ = _flow_pair(seed=6)
        flow.valid[0, :] = False
        induced.valid[:, 0] = False
        out = flow_mixup(flow, induced, 0.5)
        np.testing.assert_array_equal(out.valid, flow.valid & induced.valid)
        assert np.all(out.vectors[~out.valid] == 0.0)

    def test_bad_alpha(self):
        flow, induced, _ = _flow_pair()
        with pytest.raises(ValueError):
            flow_mixup(flow, induced, -0.1)
        with pytest.raises(ValueError):
            flow_mixup(flow, induced, 1.1)

    def test_shape_mismatch(self):
        flow, _, _ = _flow_pair()
        small = FlowField(np.zeros((3, 3, 2)), np.ones((3, 3), bool))
        with pytest.raises(DimensionMismatch):
            flow_mixup(flow, small, 0.5)


# ---------------------------------------------------------------------------
# RefineConfig


class TestRefineConfig:
    def test_defaults(self):
        cfg = RefineConfig()
        assert cfg.sigma == 2.0
        assert cfg.outer_iterations == 4
        assert cfg.mixup_alpha == 0.5

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"sigma": 0.0},
            {"sigma": -1.0},
            {"outer_iterations": -1},
            {"mixup_alpha": -0.01},
            {"mixup_alpha": 1.01},
        ],
    )
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ValueError):
            RefineConfig(**kwargs)


# ---------------------------------------------------------------------------
# run_pipeline

RANSAC_CFG = RansacConfig(subsample_stride=2)
WBA_CFG = WbaConfig(max_gn_iterations=40)


def _pipeline_inputs(seed: int, corruption: CorruptionConfig | None = None, **overrides):
    scene, rendered = rendered_scene(seed, corruption=corruption, **overrides)
    return scene, rendered


class TestRunPipeline:
    def test_noiseless_accuracy_and_monotone_errors(self):
        scene, rendered = _pipeline_inputs(23)
        result = run_pipeline(
            rendered.flow_fwd,
            rendered.flow_bwd,
            rendered.conf_fwd,
            rendered.conf_bwd,
            scene.intrinsics,
            RANSAC_CFG,
            WBA_CFG,
            RefineConfig(outer_iterations=4),
            gt_pose=scene.gt_pose,
        )
        assert result.warning is None
        assert len(result.diagnostics) == 5
        errors = [rec.rot_error_deg for rec in result.diagnostics]
        assert errors[0] < 0.01
        assert result.diagnostics[0].trans_error_deg < 0.05
        for prev, cur in zip(errors[:-1], errors[1:]):
            # already at the noise floor; later rounds must not drift away
            assert cur <= prev + 1e-6
        assert rotation_error_deg(scene.gt_pose.rotation, result.pose.rotation) < 0.01

    def test_zero_outer_iterations_matches_manual_single_pass(self):
        scene, rendered = _pipeline_inputs(29)
        result = run_pipeline(
            rendered.flow_fwd,
            rendered.flow_bwd,
            rendered.conf_fwd,
            rendered.conf_bwd,
            scene.intrinsics,
            RANSAC_CFG,
            WBA_CFG,
            RefineConfig(outer_iterations=0),
        )
        assert len(result.diagnostics) == 1

        # replicate the single pass by hand
        corr = flow_to_correspondences(
            rendered.flow_fwd, rendered.conf_fwd, scene.intrinsics,
            min_conf=WBA_CFG.gamma, stride=1,
        )
        pose0, inliers = ransac_essential(corr, scene.intrinsics, RANSAC_CFG)
        mask_f = build_mask(rendered.conf_fwd, inliers, WBA_CFG.gamma,
                            flow_valid=rendered.flow_fwd.valid)
        mask_b = build_mask(rendered.conf_bwd, backward_inlier_grid(corr, inliers),
                            WBA_CFG.gamma, flow_valid=rendered.flow_bwd.valid)
        state, _ = wba_solve(
            rendered.flow_fwd, rendered.flow_bwd,
            make_weights(rendered.conf_fwd, mask_f),
            make_weights(rendered.conf_bwd, mask_b),
            pose0, scene.intrinsics, WBA_CFG,
        )
        np.testing.assert_array_equal(result.pose.rotation, state.pose.rotation)
        np.testing.assert_array_equal(result.pose.translation, state.pose.translation)
        np.testing.assert_array_equal(result.ransac_pose.rotation, pose0.rotation)

    def test_fixed_point_keeps_pose(self):
        scene, rendered = _pipeline_inputs(31)
        corr = flow_to_correspondences(
            rendered.flow_fwd, rendered.conf_fwd, scene.intrinsics,
            min_conf=WBA_CFG.gamma, stride=1,
        )
        pose0, _ = ransac_essential(corr, scene.intrinsics, RANSAC_CFG)
        w = np.full(scene.intrinsics.shape, 0.9)
        state, _ = wba_solve(rendered.flow_fwd, rendered.flow_bwd, w, w,
                             pose0, scene.intrinsics, WBA_CFG)

        # flows exactly consistent with the solved state
        flow_f = induced_flow(state.pose, state.depth_r(), scene.intrinsics)
        flow_b = induced_flow(inverse(state.pose), state.depth_s(), scene.intrinsics)
        cfg = RefineConfig(outer_iterations=1)
        w_f = refine_weights(flow_f, flow_f, w, cfg.sigma)
        new_state, _ = wba_solve(
            flow_mixup(flow_f, flow_f, cfg.mixup_alpha),
            flow_mixup(flow_b, flow_b, cfg.mixup_alpha),
            w_f,
            refine_weights(flow_b, flow_b, w, cfg.sigma),
            state.pose,
            scene.intrinsics,
            WBA_CFG,
            inv_depth_init=(state.inv_depth_r, state.inv_depth_s),
        )
        assert rotation_error_deg(state.pose.rotation, new_state.pose.rotation) < 1e-9 * 180 / np.pi
        assert np.linalg.norm(state.pose.translation - new_state.pose.translation) < 1e-9

    def test_single_direction_runs_forward_only(self):
        scene, rendered = _pipeline_inputs(37)
        result = run_pipeline(
            rendered.flow_fwd,
            None,
            rendered.conf_fwd,
            None,
            scene.intrinsics,
            RANSAC_CFG,
            WBA_CFG,
            RefineConfig(outer_iterations=2),
            single_direction=True,
            gt_pose=scene.gt_pose,
        )
        assert result.warning is None
        assert np.all(result.w_bwd == 0.0)
        assert not result.depth_s.valid.any()
        assert result.diagnostics[-1].active_bwd == 0
        assert rotation_error_deg(scene.gt_pose.rotation, result.pose.rotation) < 0.01
        assert (
            translation_error_deg(scene.gt_pose.translation, result.pose.translation)
            < 0.05
        )

    def test_backward_inputs_required_when_bidirectional(self):
        scene, rendered = _pipeline_inputs(37)
        with pytest.raises(ValueError):
            run_pipeline(rendered.flow_fwd, None, rendered.conf_fwd, None,
                         scene.intrinsics)

    def test_noisy_ensemble_improves(self):
        # Reweighting can only help where the weights start out wrong, so
        # this ensemble flips a quarter of the oracle confidence labels:
        # mislabeled outliers pass the gate with high weight and drag the
        # first solve off, then the induced-flow rounds demote them. Strong
        # depth relief keeps the initialization well-posed.
        rot_drops = []
        trans_drops = []
        for seed in range(6):
            corruption = CorruptionConfig(
                noise_sigma=1.0,
                outlier_rate=0.2,
                oracle_conf_flip_rate=0.25,
                rng_seed=700 + seed,
            )
            scene, rendered = _pipeline_inputs(
                seed, corruption=corruption, base_depth=2.4, depth_amplitude=1.2
            )
            result = run_pipeline(
                rendered.flow_fwd,
                rendered.flow_bwd,
                rendered.conf_fwd,
                rendered.conf_bwd,
                scene.intrinsics,
                RANSAC_CFG,
                WbaConfig(max_gn_iterations=60),
                RefineConfig(outer_iterations=2),
                gt_pose=scene.gt_pose,
            )
            assert result.warning is None
            first = result.diagnostics[0]
            last = result.diagnostics[-1]
            rot_drops.append(first.rot_error_deg - last.rot_error_deg)
            trans_drops.append(first.trans_error_deg - last.trans_error_deg)
        assert np.median(rot_drops) > 0.0
        assert np.median(trans_drops) > 0.0

    def test_failed_round_returns_last_state(self, monkeypatch):
        scene, rendered = _pipeline_inputs(41)
        real_solve = wba_solve
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] >= 2:
                raise SingularSystem("synthetic failure")
            return real_solve(*args, **kwargs)

        monkeypatch.setattr("dtvsfm.refine.wba_solve", flaky)
        result = run_pipeline(
            rendered.flow_fwd,
            rendered.flow_bwd,
            rendered.conf_fwd,
            rendered.conf_bwd,
            scene.intrinsics,
            RANSAC_CFG,
            WBA_CFG,
            RefineConfig(outer_iterations=3),
        )
        assert result.warning is not None and "round 1" in result.warning
        assert len(result.diagnostics) == 1
        np.testing.assert_array_equal(result.pose.rotation,
                                      result.diagnostics[0].pose.rotation)

    def test_grid_filter_gate_changes_weights(self):
        # a checkerboard confidence map loses its low half under the filter
        scene, rendered = _pipeline_inputs(43)
        # low cells sit off the stride-2 pool lattice so RANSAC still sees
        # a full complement of correspondences either way
        conf = np.full(scene.intrinsics.shape, 0.9)
        conf[1::2, 1::2] = 0.4
        kwargs = dict(
            ransac_cfg=RANSAC_CFG, wba_cfg=WBA_CFG,
            refine_cfg=RefineConfig(outer_iterations=0),
        )
        filtered = run_pipeline(
            rendered.flow_fwd, rendered.flow_bwd, conf, conf, scene.intrinsics,
            conf_cfg=ConfidenceConfig(grid_filter=True), **kwargs,
        )
        unfiltered = run_pipeline(
            rendered.flow_fwd, rendered.flow_bwd, conf, conf, scene.intrinsics,
            conf_cfg=ConfidenceConfig(grid_filter=False), **kwargs,
        )
        assert (filtered.w_fwd > 0).sum() < (unfiltered.w_fwd > 0).sum()
        assert np.all(filtered.w_fwd[conf == 0.4] == 0.0)
