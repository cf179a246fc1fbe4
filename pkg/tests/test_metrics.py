"""Metrics against independent oracles: closed forms, counting, and
per-pixel recomputation with scalar math."""

from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import rotation_error_deg, translation_error_deg
from dtvsfm.errors import DimensionMismatch, EmptyInput, NoValidPixels, ZeroTranslation
from dtvsfm.geometry import DepthMap, PoseSE3, so3_exp
from dtvsfm.metrics import depth_metrics, pose_auc, pose_error, pose_map


def _random_rotation(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    return so3_exp(rng.normal(scale=scale, size=3))


def _random_pose(rng: np.random.Generator) -> PoseSE3:
    return PoseSE3(_random_rotation(rng), rng.normal(size=3))


# ---------------------------------------------------------------------------
# pose_error


class TestPoseError:
    def test_identical_poses(self):
        pose = PoseSE3(so3_exp(np.array([0.1, -0.2, 0.3])), np.array([0.0, 0.0, 1.0]))
        err = pose_error(pose, pose)
        # the atan2 form is fully conditioned at zero error; roundoff in the
        # relative rotation product is all that remains
        assert err.rot_deg < 1e-12
        assert err.trans_deg < 1e-12
        assert err.max_deg == max(err.rot_deg, err.trans_deg)

    def test_ten_degree_rotation_offset(self):
        t = np.array([0.3, -0.1, 1.0])
        gt = PoseSE3(np.eye(3), t)
        est = PoseSE3(so3_exp(np.array([0.0, 0.0, np.deg2rad(10.0)])), t)
        err = pose_error(gt, est)
        assert abs(err.rot_deg - 10.0) < 1e-9
        assert err.trans_deg < 1e-9

    def test_orthogonal_translations(self):
        gt = PoseSE3(np.eye(3), np.array([1.0, 0.0, 0.0]))
        est = PoseSE3(np.eye(3), np.array([0.0, 1.0, 0.0]))
        assert abs(pose_error(gt, est).trans_deg - 90.0) < 1e-12

    def test_zero_translation_rejected(self):
        good = PoseSE3(np.eye(3), np.array([1.0, 0.0, 0.0]))
        bad = PoseSE3(np.eye(3), np.zeros(3))
        with pytest.raises(ZeroTranslation):
            pose_error(bad, good)
        with pytest.raises(ZeroTranslation):
            pose_error(good, bad)

    def test_rotation_error_symmetric(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            a, b = _random_pose(rng), _random_pose(rng)
            assert abs(pose_error(a, b).rot_deg - pose_error(b, a).rot_deg) < 1e-12

    def test_translation_scale_invariant(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            a, b = _random_pose(rng), _random_pose(rng)
            scaled = PoseSE3(b.rotation, b.translation * 7.3)
            assert abs(pose_error(a, b).trans_deg - pose_error(a, scaled).trans_deg) < 1e-12

    def test_matches_plain_form_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(30):
            a, b = _random_pose(rng), _random_pose(rng)
            err = pose_error(a, b)
            assert abs(err.rot_deg - rotation_error_deg(a.rotation, b.rotation)) < 1e-12
            assert (
                abs(err.trans_deg - translation_error_deg(a.translation, b.translation))
                < 1e-12
            )
            assert err.max_deg == max(err.rot_deg, err.trans_deg)


# ---------------------------------------------------------------------------
# pose_auc / pose_map


def _auc_oracle(errors: list[float], tau: float) -> float:
    """Integrate the step recall curve segment by segment."""
    errs = np.sort(np.asarray(errors, dtype=np.float64))
    knots = [0.0] + [float(e) for e in errs if 0.0 < e < tau] + [tau]
    area = 0.0
    for lo, hi in zip(knots[:-1], knots[1:]):
        recall = np.count_nonzero(errs <= lo) / errs.size
        area += (hi - lo) * recall
    return 100.0 * area / tau


class TestPoseAuc:
    def test_all_zero_errors(self):
        assert pose_auc([0.0, 0.0, 0.0], [5.0, 10.0, 20.0]) == [100.0, 100.0, 100.0]

    def test_single_error_half_threshold(self):
        assert pose_auc([5.0], [10.0]) == [50.0]

    def test_one_in_one_out(self):
        assert pose_auc([5.0, 15.0], [10.0]) == [25.0]

    def test_matches_segment_integration(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            errors = list(rng.uniform(0.0, 30.0, size=rng.integers(1, 40)))
            for tau in (5.0, 10.0, 20.0):
                got = pose_auc(errors, [tau])[0]
                want = _auc_oracle(errors, tau)
                assert abs(got - want) < 1e-9

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(22)
        errors = list(rng.uniform(0.0, 40.0, size=25))
        taus = [1.0, 2.0, 5.0, 10.0, 20.0, 45.0]
        vals = pose_auc(errors, taus)
        assert all(a <= b + 1e-12 for a, b in zip(vals[:-1], vals[1:]))

    def test_never_exceeds_map(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            errors = list(rng.uniform(0.0, 30.0, size=30))
            taus = [5.0, 10.0, 20.0]
            for auc, ap in zip(pose_auc(errors, taus), pose_map(errors, taus)):
                assert auc <= ap + 1e-12

    def test_empty_errors_rejected(self):
        with pytest.raises(EmptyInput):
            pose_auc([], [10.0])

    def test_nonpositive_threshold_rejected(self):
        with pytest.raises(ValueError):
            pose_auc([1.0], [0.0])

    def test_negative_error_rejected(self):
        with pytest.raises(ValueError):
            pose_auc([-1.0], [10.0])


class TestPoseMap:
    def test_half_below(self):
        assert pose_map([5.0, 15.0], [10.0]) == [50.0]

    def test_threshold_is_strict(self):
        assert pose_map([5.0], [5.0]) == [0.0]

    def test_all_above(self):
        assert pose_map([30.0, 40.0], [5.0, 10.0, 20.0]) == [0.0, 0.0, 0.0]

    def test_all_zero(self):
        assert pose_map([0.0, 0.0], [5.0]) == [100.0]

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(24)
        errors = list(rng.uniform(0.0, 30.0, size=37))
        for tau in (5.0, 10.0, 20.0):
            want = 100.0 * sum(1 for e in errors if e < tau) / len(errors)
            assert abs(pose_map(errors, [tau])[0] - want) < 1e-9

    def test_empty_errors_rejected(self):
        with pytest.raises(EmptyInput):
            pose_map([], [10.0])


# ---------------------------------------------------------------------------
# depth_metrics


def _random_depth_pair(rng: np.random.Generator, shape=(8, 8)):
    gt = DepthMap(rng.uniform(1.0, 9.0, size=shape), np.ones(shape, bool))
    est = DepthMap(gt.values * rng.uniform(0.6, 1.7, size=shape), np.ones(shape, bool))
    return gt, est


def _depth_oracle(gt: DepthMap, est: DepthMap):
    """Scalar-math recomputation, one pixel at a time."""
    inv_terms, rel_terms, logs = [], [], []
    for i in range(gt.shape[0]):
        for j in range(gt.shape[1]):
            if not (gt.valid[i, j] and est.valid[i, j]):
                continue
            dg = float(gt.values[i, j])
            de = float(est.values[i, j])
            inv_terms.append(abs(1.0 / de - 1.0 / dg))
            rel_terms.append(abs(de - dg) / dg)
            logs.append(math.log(de) - math.log(dg))
    n = len(logs)
    mean = sum(logs) / n
    var = sum((z - mean) ** 2 for z in logs) / n
    return (
        sum(inv_terms) / n,
        sum(rel_terms) / n,
        math.sqrt(max(var, 0.0)),
        n,
    )


class TestDepthMetrics:
    def test_identical_maps(self):
        gt, _ = _random_depth_pair(np.random.default_rng(31))
        report = depth_metrics(gt, gt)
        assert report.l1_inv == 0.0
        assert report.l1_rel == 0.0
        assert report.sc_inv == 0.0
        assert report.num_pixels == gt.values.size

    def test_uniform_double(self):
        gt, _ = _random_depth_pair(np.random.default_rng(32))
        est = DepthMap(2.0 * gt.values, gt.valid)
        report = depth_metrics(gt, est)
        assert report.l1_rel == 1.0
        assert report.sc_inv < 1e-12
        assert abs(report.l1_inv - np.mean(1.0 / (2.0 * gt.values))) < 1e-12

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(33)
        for _ in range(10):
            gt, est = _random_depth_pair(rng)
            report = depth_metrics(gt, est)
            l1_inv, l1_rel, sc_inv, n = _depth_oracle(gt, est)
            assert abs(report.l1_inv - l1_inv) < 1e-12
            assert abs(report.l1_rel - l1_rel) < 1e-12
            assert abs(report.sc_inv - sc_inv) < 1e-12
            assert report.num_pixels == n

    def test_sc_inv_scale_invariant(self):
        rng = np.random.default_rng(34)
        gt, est = _random_depth_pair(rng)
        base = depth_metrics(gt, est).sc_inv
        for scale in (0.37, 3.0, 256.0):
            scaled = DepthMap(est.values * scale, est.valid)
            assert abs(depth_metrics(gt, scaled).sc_inv - base) < 1e-12

    def test_scale_align_removes_uniform_scale(self):
        gt, _ = _random_depth_pair(np.random.default_rng(35))
        est = DepthMap(3.0 * gt.values, gt.valid)
        report = depth_metrics(gt, est, scale_align=True)
        assert report.l1_rel < 1e-12
        assert report.l1_inv < 1e-12

    def test_joint_validity_only(self):
        rng = np.random.default_rng(36)
        gt, est = _random_depth_pair(rng)
        gt.valid[0, :] = False
        est.valid[:, 0] = False
        report = depth_metrics(gt, est)
        l1_inv, l1_rel, sc_inv, n = _depth_oracle(gt, est)
        assert report.num_pixels == n == 7 * 7
        assert abs(report.l1_inv - l1_inv) < 1e-12
        assert abs(report.l1_rel - l1_rel) < 1e-12
        assert abs(report.sc_inv - sc_inv) < 1e-12

    def test_disjoint_validity_rejected(self):
        values = np.full((4, 4), 2.0)
        top = np.zeros((4, 4), bool)
        top[:2] = True
        gt = DepthMap(values, top)
        est = DepthMap(values, ~top)
        with pytest.raises(NoValidPixels):
            depth_metrics(gt, est)

    def test_shape_mismatch_rejected(self):
        gt = DepthMap.constant(4, 4, 2.0)
        est = DepthMap.constant(4, 5, 2.0)
        with pytest.raises(DimensionMismatch):
            depth_metrics(gt, est)
