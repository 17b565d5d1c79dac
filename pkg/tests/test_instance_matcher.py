import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from herdkit.instance_matcher import (
    GroundTruthInstance,
    InstancePrediction,
    InsufficientHypothesesError,
    MatchWeights,
    assignment_cost,
    bbox_l1,
    brute_force_assignment,
    cost_matrix,
    focal_conf_cost,
    giou,
    hungarian,
    injection_count,
    iou,
    keypoint_cost,
    match_and_reorder,
    match_cost,
)
from herdkit.projection import BBox


def enumerate_min(C):
    """Exhaustive oracle: minimum total over all injections rows -> columns."""
    M, P = C.shape
    best = None
    for perm in itertools.permutations(range(P), M):
        total = sum(C[i, j] for i, j in enumerate(perm))
        if best is None or total < best[0]:
            best = (total, perm)
    return best


class TestBoxes:
    def test_iou_identical_and_disjoint(self):
        a = BBox(0.5, 0.5, 0.2, 0.4)
        assert iou(a, a) == 1.0
        assert iou(a, BBox(0.1, 0.1, 0.05, 0.05)) == 0.0

    def test_iou_half_shift(self):
        a = BBox(0.3, 0.5, 0.2, 0.2)
        b = BBox(0.4, 0.5, 0.2, 0.2)
        assert math.isclose(iou(a, b), 1 / 3, rel_tol=1e-12)

    def test_iou_zero_union(self):
        p = BBox(0.5, 0.5, 0.0, 0.0)
        assert iou(p, p) == 0.0

    def test_giou_identical_and_contained(self):
        outer = BBox(0.5, 0.5, 0.4, 0.4)
        inner = BBox(0.5, 0.55, 0.2, 0.1)
        assert giou(outer, outer) == 1.0
        assert math.isclose(giou(outer, inner), iou(outer, inner), rel_tol=1e-12)

    def test_giou_disjoint_hand_computed(self):
        a = BBox.from_xyxy(0.0, 0.0, 0.2, 0.2)
        b = BBox.from_xyxy(0.5, 0.0, 0.7, 0.2)
        # union 0.08, hull 0.7 * 0.2 = 0.14
        assert math.isclose(giou(a, b), -(0.14 - 0.08) / 0.14, rel_tol=1e-12)

    @given(*[st.floats(0.05, 0.95)] * 8)
    def test_giou_symmetric_and_bounded(self, ax, ay, aw, ah, bx, by, bw, bh):
        a, b = BBox(ax, ay, aw / 2, ah / 2), BBox(bx, by, bw / 2, bh / 2)
        g = giou(a, b)
        assert g == pytest.approx(giou(b, a), abs=1e-15)
        assert -1 < g <= 1 + 1e-15

    def test_bbox_l1(self):
        assert math.isclose(bbox_l1(BBox(0.5, 0.5, 0.2, 0.2), BBox(0.6, 0.4, 0.2, 0.3)), 0.3, rel_tol=1e-12)


class TestCostTerms:
    def test_focal_values(self):
        assert focal_conf_cost(1.0) == 0.0
        assert abs(focal_conf_cost(0.5) - 0.25 * 0.25 * math.log(2)) <= 1e-12
        assert math.isclose(focal_conf_cost(0.5), 0.04332, abs_tol=1e-5)

    def test_focal_clamped_and_decreasing(self):
        assert math.isfinite(focal_conf_cost(0.0))
        assert focal_conf_cost(0.0) == focal_conf_cost(1e-9)
        cs = np.linspace(1e-6, 1, 500)
        vals = [focal_conf_cost(c) for c in cs]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_keypoint_cost_hand(self):
        gt = np.zeros((3, 2))
        pred = np.array([[0.1, 0.0], [0.0, 0.2], [5.0, 5.0]])
        assert math.isclose(keypoint_cost(pred, gt, [True, True, False]), 0.15, rel_tol=1e-12)
        assert keypoint_cost(pred, gt, [False] * 3) == 0.0
        assert keypoint_cost(gt, gt, [True] * 3) == 0.0

    def test_match_cost_identical(self):
        box = BBox(0.4, 0.5, 0.2, 0.3)
        kp = np.random.default_rng(0).random((5, 2))
        c = match_cost(InstancePrediction(box, 1.0, kp), GroundTruthInstance(box, kp, np.ones(5, bool)))
        assert c.total == -1.0
        assert (c.conf, c.bbox, c.kpts, c.giou) == (0.0, 0.0, 0.0, -1.0)

    def test_keypoints_dominate(self):
        box = BBox(0.5, 0.5, 0.2, 0.2)
        gt = GroundTruthInstance(box, np.zeros((4, 2)), np.ones(4, bool))
        near_box = InstancePrediction(BBox(0.5, 0.5, 0.21, 0.2), 0.9, np.full((4, 2), 0.05))
        near_kp = InstancePrediction(BBox(0.5, 0.5, 0.2, 0.2), 0.9, np.zeros((4, 2)))
        a, b = match_cost(near_box, gt), match_cost(near_kp, gt)
        assert a.kpts * 10 > 50 * a.bbox
        assert b.total < a.total

    def test_weight_isolation(self):
        w = MatchWeights(0.0, 1.0, 0.0, 0.0)
        p = InstancePrediction(BBox(0.3, 0.3, 0.1, 0.1), 0.2, np.ones((2, 2)))
        g = GroundTruthInstance(BBox(0.6, 0.5, 0.2, 0.1), np.zeros((2, 2)), [True, True])
        assert match_cost(p, g, w).total == bbox_l1(p.bbox, g.bbox)

    def test_invisible_keypoint_permutation(self):
        rng = np.random.default_rng(1)
        vis = np.array([True, False, True, False])
        g = GroundTruthInstance(BBox(0.5, 0.5, 0.2, 0.2), rng.random((4, 2)), vis)
        kp = rng.random((4, 2))
        swapped = kp.copy()
        swapped[[1, 3]] = kp[[3, 1]]
        a = match_cost(InstancePrediction(g.bbox, 0.7, kp), g)
        b = match_cost(InstancePrediction(g.bbox, 0.7, swapped), g)
        assert a == b

    def test_defaults(self):
        w = MatchWeights()
        assert (w.lambda_conf, w.lambda_bbox, w.lambda_giou, w.lambda_kpts) == (1, 1, 1, 10)
        assert (w.focal_alpha, w.focal_gamma) == (0.25, 2.0)
        with pytest.raises(ValueError):
            MatchWeights(lambda_bbox=-1)


class TestHungarian:
    def test_two_by_two(self):
        assert hungarian([[1, 2], [3, 0]]) == (0, 1)
        assert assignment_cost(np.array([[1.0, 2], [3, 0]]), (0, 1)) == 1.0

    def test_diagonal_dominant(self):
        C = np.ones((5, 5)) * 10 - 9 * np.eye(5)
        assert hungarian(C) == (0, 1, 2, 3, 4)

    def test_random_6x8_against_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            C = rng.random((6, 8))
            total, perm = enumerate_min(C)
            got = hungarian(C)
            assert got == perm
            assert assignment_cost(C, got) == pytest.approx(total, abs=1e-12)

    def test_lexicographic_ties(self):
        assert hungarian(np.zeros((3, 5))) == (0, 1, 2)
        C = np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
        assert hungarian(C) == (0, 2)
        assert brute_force_assignment(C)[0] == (0, 2)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 6).flatmap(lambda p: st.tuples(st.integers(0, p), st.just(p))), st.integers(0, 2**31))
    def test_matches_brute_force(self, mp, seed):
        M, P = mp
        rng = np.random.default_rng(seed)
        C = rng.integers(0, 4, (M, P)).astype(float) if seed % 2 else rng.normal(size=(M, P))
        a = hungarian(C)
        b, cost = brute_force_assignment(C)
        assert a == b
        assert (assignment_cost(C, a) if M else 0.0) == cost

    def test_row_constant_invariance(self):
        rng = np.random.default_rng(3)
        C = rng.random((4, 6))
        D = C.copy()
        D[2] += 7.5
        assert hungarian(C) == hungarian(D)

    def test_insufficient(self):
        with pytest.raises(InsufficientHypothesesError):
            hungarian(np.zeros((3, 2)))
        with pytest.raises(InsufficientHypothesesError):
            brute_force_assignment(np.zeros((3, 2)))
        assert injection_count(3, 5) == 60
        assert injection_count(4, 3) == 0

    def test_empty(self):
        assert hungarian(np.zeros((0, 4))) == ()


def _inst(cx, cy, conf=0.9):
    box = BBox(cx, cy, 0.1, 0.1)
    kp = np.array([[cx, cy], [cx + 0.01, cy]])
    return InstancePrediction(box, conf, kp), GroundTruthInstance(box, kp, [True, True])


class TestMatchAndReorder:
    def test_no_ground_truth(self):
        preds = [_inst(0.2, 0.2)[0], _inst(0.5, 0.5)[0]]
        res, ordered = match_and_reorder(preds, [])
        assert res.assignment == () and ordered == [] and res.unmatched == (0, 1)

    def test_single_pair(self):
        p, _ = _inst(0.1, 0.1, 0.01)
        _, g = _inst(0.9, 0.9)
        res, ordered = match_and_reorder([p], [g])
        assert res.assignment == (0,) and ordered == [p]

    def test_reorders_to_gt_order(self):
        preds = [_inst(x, 0.5)[0] for x in (0.8, 0.2, 0.5, 0.35, 0.65)]
        gts = [_inst(x, 0.5)[1] for x in (0.2, 0.5, 0.8)]
        res, ordered = match_and_reorder(preds, gts)
        assert res.assignment == (1, 2, 0)
        assert [o.bbox.cx for o in ordered] == [0.2, 0.5, 0.8]
        assert res.unmatched == (3, 4)
        assert sum(c.total for c in res.per_pair_costs) == pytest.approx(res.total_cost, abs=1e-12)

    def test_optimal_beats_greedy(self):
        C = np.array([[1.0, 2.0, 9.0, 9.0, 9.0],
                      [1.1, 9.0, 9.0, 9.0, 9.0],
                      [9.0, 9.0, 1.0, 1.2, 9.0]])
        # greedy row by row takes pred 0 for gt 0 and forces gt 1 onto a cost-9 column
        greedy = [0]
        greedy.append(min((j for j in range(5) if j not in greedy), key=lambda j: C[1, j]))
        greedy.append(min((j for j in range(5) if j not in greedy), key=lambda j: C[2, j]))
        best_total, best = enumerate_min(C)
        assert hungarian(C) == best == (1, 0, 2)
        assert assignment_cost(C, greedy) > best_total

    def test_cost_matrix_orientation(self):
        preds = [_inst(0.2, 0.2)[0], _inst(0.7, 0.7)[0], _inst(0.4, 0.4)[0]]
        gts = [_inst(0.7, 0.7)[1]]
        C = cost_matrix(preds, gts)
        assert C.shape == (1, 3)
        assert C[0, 1] == match_cost(preds[1], gts[0]).total
