import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdkit.instance_matcher import GroundTruthInstance, InstancePrediction, giou, iou
from herdkit.losses import (
    LossWeights,
    NoiseConfig,
    ParamPrediction,
    build_denoising_groups,
    ground_truth_from_params,
    l_conf,
    l_keypoints,
    l_params,
    prediction_from_params,
    total_loss,
)
from herdkit.projection import BBox, PerspectiveCamera


def test_default_weights():
    w = LossWeights()
    assert (w.lambda_params, w.lambda_2d, w.lambda_3d, w.lambda_box) == (1.0, 5.0, 5.0, 1.0)


class TestParams:
    def test_exact(self):
        b, t = np.ones(4), np.ones((3, 3))
        assert l_params(b, t, b, t) == 0.0

    def test_absent_gt(self):
        assert l_params(np.ones(4), np.ones((3, 3)), None, None) == 0.0

    def test_unit_beta_offset(self):
        B, J = 10, 15
        gb, gt = np.zeros(B), np.zeros((J, 3))
        pb = gb.copy()
        pb[3] = 1.0
        assert l_params(pb, gt, gb, gt) == pytest.approx(1 / (B + 3 * J), abs=1e-15)

    def test_mismatch(self):
        with pytest.raises(ValueError):
            l_params(np.zeros(3), np.zeros((2, 3)), np.zeros(4), np.zeros((2, 3)))


class TestKeypoints:
    def test_exact_and_masked(self):
        kp = np.random.default_rng(0).random((5, 3))
        assert l_keypoints(kp, kp, np.ones(5, bool)) == 0.0
        assert l_keypoints(kp + 4, kp, np.zeros(5, bool)) == 0.0

    def test_single_visible_unit_offset(self):
        gt = np.zeros((4, 3))
        pred = gt.copy()
        pred[2] = 1.0
        pred[0] = 9.0  # invisible
        assert l_keypoints(pred, gt, [False, False, True, False]) == 1.0


class TestConf:
    def test_hard_targets(self):
        assert l_conf(1.0, 1.0) == 0.0
        assert l_conf(0.0, 0.0) == 0.0

    def test_half(self):
        assert l_conf(0.5, 0.0) == pytest.approx(math.log(2), abs=1e-15)

    @given(st.floats(0.01, 0.99))
    def test_minimized_at_target(self, t):
        cs = np.linspace(0.001, 0.999, 999)
        best = cs[np.argmin([l_conf(c, t) for c in cs])]
        assert abs(best - t) <= 1e-3 + 1e-12

    def test_clamped(self):
        assert math.isfinite(l_conf(0.0, 1.0))
        assert math.isfinite(l_conf(1.0, 0.0))


class TestDenoising:
    boxes = [BBox(0.3, 0.4, 0.2, 0.1), BBox(0.7, 0.6, 0.1, 0.3)]

    def test_zero_noise(self):
        groups = build_denoising_groups(self.boxes, NoiseConfig(0.0, 0.0, 3), np.random.default_rng(0))
        assert len(groups) == 6
        assert all(g.noised_bbox == self.boxes[g.source] for g in groups)

    def test_deterministic(self):
        a = build_denoising_groups(self.boxes, NoiseConfig(), np.random.default_rng(5))
        b = build_denoising_groups(self.boxes, NoiseConfig(), np.random.default_rng(5))
        assert a == b

    def test_center_bound(self):
        noise = NoiseConfig(center_frac=0.1, size_frac=0.3, copies=5000)
        groups = build_denoising_groups(self.boxes, noise, np.random.default_rng(1))
        assert len(groups) == 10_000
        for g in groups:
            src = self.boxes[g.source]
            assert abs(g.noised_bbox.cx - src.cx) <= 0.1 * src.w + 1e-15
            assert abs(g.noised_bbox.cy - src.cy) <= 0.1 * src.h + 1e-15
            assert 0.7 * src.w - 1e-15 <= g.noised_bbox.w <= 1.3 * src.w + 1e-15


def _scene(rng, n=3, K=5):
    gts, preds = [], []
    for _ in range(n):
        box = BBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.2, 2))
        gts.append(GroundTruthInstance(box, rng.random((K, 2)), rng.random(K) < 0.7, rng.standard_normal((K, 3)),
                                       rng.standard_normal(4), rng.standard_normal((2, 3))))
        pbox = BBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.05, 0.2, 2))
        preds.append(InstancePrediction(pbox, float(rng.uniform(0.05, 0.95)), rng.random((K, 2)),
                                        rng.standard_normal((K, 3)), rng.standard_normal(4),
                                        rng.standard_normal((2, 3))))
    return preds, gts


class TestTotal:
    def test_zero_at_ground_truth(self):
        rng = np.random.default_rng(0)
        _, gts = _scene(rng)
        preds = [InstancePrediction(g.bbox, 1.0, g.keypoints2d, g.keypoints3d, g.beta, g.theta) for g in gts]
        unmatched = [InstancePrediction(BBox(0.1, 0.1, 0.05, 0.05), 0.0, np.zeros((5, 2)))]
        dn = [(grp, gts[grp.source].bbox) for grp in
              build_denoising_groups([g.bbox for g in gts], NoiseConfig(), rng)]
        res = total_loss(list(zip(preds, gts)), unmatched, dn, [g.bbox for g in gts])
        assert res.total == 0.0
        assert all(v == 0.0 for v in res.as_dict().values())

    def test_recomputation_oracle(self):
        rng = np.random.default_rng(7)
        preds, gts = _scene(rng)
        extra = [InstancePrediction(BBox(0.2, 0.2, 0.1, 0.1), 0.3, np.zeros((5, 2)))]
        w = LossWeights(0.7, 2.0, 3.0, 1.5)
        res = total_loss(list(zip(preds, gts)), extra, weights=w)

        def bce(c, t):
            c = min(max(c, 1e-7), 1 - 1e-7)
            return -(t * math.log(c) + (1 - t) * math.log(1 - c))

        n = len(gts)
        lp = sum(np.mean((np.r_[p.beta, p.theta.ravel()] - np.r_[g.beta, g.theta.ravel()]) ** 2)
                 for p, g in zip(preds, gts)) / n
        l2 = sum(np.abs(p.keypoints2d - g.keypoints2d)[g.visibility].mean() for p, g in zip(preds, gts)) / n
        l3 = sum(np.abs(p.keypoints3d - g.keypoints3d)[g.visibility].mean() for p, g in zip(preds, gts)) / n
        lc = sum(np.abs(p.bbox.as_array() - g.bbox.as_array()).sum() for p, g in zip(preds, gts)) / n
        lg = sum(1 - giou(p.bbox, g.bbox) for p, g in zip(preds, gts)) / n
        conf = ([bce(p.confidence, iou(p.bbox, g.bbox)) for p, g in zip(preds, gts)]
                + [bce(extra[0].confidence, 0.0)])
        lconf = sum(conf) / len(conf)
        expect = 0.7 * lp + 2.0 * l2 + 3.0 * l3 + 1.5 * (lc + lg + lconf)
        assert res.total == pytest.approx(expect, abs=1e-12)
        assert res.l_conf == pytest.approx(lconf, abs=1e-12)

    def test_weight_isolation_and_linearity(self):
        rng = np.random.default_rng(2)
        pairs = list(zip(*_scene(rng)))
        full = total_loss(pairs)
        no2d = total_loss(pairs, weights=LossWeights(lambda_2d=0.0))
        assert full.total - no2d.total == pytest.approx(5.0 * full.l_2d, abs=1e-12)
        doubled = total_loss(pairs, weights=LossWeights(lambda_3d=10.0))
        assert doubled.total - full.total == pytest.approx(5.0 * full.l_3d, abs=1e-12)

    def test_invisible_keypoints_do_not_matter(self):
        rng = np.random.default_rng(3)
        preds, gts = _scene(rng)
        base = total_loss(list(zip(preds, gts)))
        for p, g in zip(preds, gts):
            p.keypoints2d[~g.visibility] += 5.0
            p.keypoints3d[~g.visibility] -= 5.0
        moved = total_loss(list(zip(preds, gts)))
        assert (moved.l_2d, moved.l_3d) == (base.l_2d, base.l_3d)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_nonnegative(self, seed):
        res = total_loss(list(zip(*_scene(np.random.default_rng(seed)))))
        assert all(v >= 0 for v in res.as_dict().values())

    def test_2d_only_ground_truth(self):
        rng = np.random.default_rng(4)
        preds, gts = _scene(rng, n=1)
        g = gts[0]
        bare = GroundTruthInstance(g.bbox, g.keypoints2d, g.visibility)
        res = total_loss([(preds[0], bare)])
        assert res.l_params == 0.0 and res.l_3d == 0.0


def test_param_round_trip_zero_loss(desk_template):
    t = desk_template
    cam = PerspectiveCamera.centered()
    rng = np.random.default_rng(0)
    beta, theta = rng.standard_normal(t.n_betas), rng.normal(0, 0.2, (t.n_joints, 3))
    gamma = np.array([0.2, 0.3, 12.0])
    gt = ground_truth_from_params(t, cam, beta, theta, gamma)
    pred = prediction_from_params(t, cam, ParamPrediction(beta, theta, gamma, gt.bbox.as_array(), 1.0))
    assert np.array_equal(pred.keypoints2d, gt.keypoints2d)
    assert total_loss([(pred, gt)]).total == 0.0
