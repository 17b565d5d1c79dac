"""Set-prediction matching between P predicted instances and M ground truths.

Pairwise cost::

    C = l_conf * C_conf + l_bbox * C_bbox + l_giou * C_giou + l_kpts * C_kpts

with ``C_conf = alpha (1 - c)^gamma (-log c)``, ``C_bbox`` the summed L1 over
(cx, cy, w, h), ``C_giou = -GIoU`` and ``C_kpts`` the mean per-keypoint L1
over visible keypoints.  The injection from ground truths to predictions that
minimizes the summed cost is found with the Hungarian algorithm.

Note the sign convention: matching uses ``-GIoU`` while the training loss in
:mod:`herdkit.losses` uses ``1 - GIoU``; they differ by a constant per pair and
therefore select the same assignment.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .projection import BBox

CONF_EPS = 1e-7


class InsufficientHypothesesError(ValueError):
    """More ground truths than prediction slots."""


@dataclass(frozen=True)
class MatchWeights:
    lambda_conf: float = 1.0
    lambda_bbox: float = 1.0
    lambda_giou: float = 1.0
    lambda_kpts: float = 10.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("lambda_conf", "lambda_bbox", "lambda_giou", "lambda_kpts"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class InstancePrediction:
    bbox: BBox
    confidence: float
    keypoints2d: np.ndarray  # (K, 2) normalized image coordinates
    keypoints3d: np.ndarray | None = None  # (K, 3)
    beta: np.ndarray | None = None
    theta: np.ndarray | None = None
    translation: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        self.keypoints2d = np.asarray(self.keypoints2d, dtype=float)


@dataclass
class GroundTruthInstance:
    bbox: BBox
    keypoints2d: np.ndarray  # (K, 2) normalized image coordinates
    visibility: np.ndarray  # (K,) bool
    keypoints3d: np.ndarray | None = None
    beta: np.ndarray | None = None
    theta: np.ndarray | None = None
    translation: np.ndarray | None = None

    def __post_init__(self):
        self.keypoints2d = np.asarray(self.keypoints2d, dtype=float)
        self.visibility = np.asarray(self.visibility, dtype=bool)
        if self.visibility.shape != (self.keypoints2d.shape[0],):
            raise ValueError("visibility must have one flag per keypoint")

    @property
    def has_params(self) -> bool:
        return self.beta is not None and self.theta is not None


@dataclass(frozen=True)
class CostBreakdown:
    conf: float
    bbox: float
    giou: float
    kpts: float
    total: float


@dataclass
class MatchResult:
    assignment: tuple[int, ...]  # assignment[i] = prediction index for ground truth i
    total_cost: float
    per_pair_costs: list[CostBreakdown] = field(default_factory=list)
    unmatched: tuple[int, ...] = ()


# ---------------------------------------------------------------------------
# box overlap


def _intersection_union_hull(a: BBox, b: BBox) -> tuple[float, float, float]:
    ax0, ay0, ax1, ay1 = a.xyxy()
    bx0, by0, bx1, by1 = b.xyxy()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    # areas from the same corners as the intersection, so identical boxes give IoU exactly 1
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    return inter, union, hull


def iou(a: BBox, b: BBox) -> float:
    inter, union, _ = _intersection_union_hull(a, b)
    return inter / union if union > 0 else 0.0


def giou(a: BBox, b: BBox) -> float:
    inter, union, hull = _intersection_union_hull(a, b)
    overlap = inter / union if union > 0 else 0.0
    if hull <= 0:
        return overlap
    return overlap - (hull - union) / hull


# ---------------------------------------------------------------------------
# cost terms


def focal_conf_cost(c: float, alpha: float = 0.25, gamma: float = 2.0) -> float:
    c = min(max(float(c), CONF_EPS), 1.0)
    return alpha * (1.0 - c) ** gamma * -math.log(c)


def keypoint_cost(pred, gt, vis) -> float:
    """Mean over visible keypoints of the per-keypoint L1 distance; 0 if none visible."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    vis = np.asarray(vis, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint shapes differ: {pred.shape} vs {gt.shape}")
    if not vis.any():
        return 0.0
    return float(np.abs(pred[vis] - gt[vis]).sum(axis=1).mean())


def bbox_l1(a: BBox, b: BBox) -> float:
    return float(np.abs(a.as_array() - b.as_array()).sum())


def match_cost(pred: InstancePrediction, gt: GroundTruthInstance, w: MatchWeights = MatchWeights()) -> CostBreakdown:
    conf = focal_conf_cost(pred.confidence, w.focal_alpha, w.focal_gamma)
    box = bbox_l1(pred.bbox, gt.bbox)
    g = -giou(pred.bbox, gt.bbox)
    kp = keypoint_cost(pred.keypoints2d, gt.keypoints2d, gt.visibility)
    total = w.lambda_conf * conf + w.lambda_bbox * box + w.lambda_giou * g + w.lambda_kpts * kp
    return CostBreakdown(conf, box, g, kp, total)


def cost_matrix(preds: Sequence[InstancePrediction], gts: Sequence[GroundTruthInstance],
                w: MatchWeights = MatchWeights()) -> np.ndarray:
    """(M, P) matrix of pairwise totals, ground truths along rows."""
    C = np.empty((len(gts), len(preds)))
    for i, g in enumerate(gts):
        for j, p in enumerate(preds):
            C[i, j] = match_cost(p, g, w).total
    return C


# ---------------------------------------------------------------------------
# assignment


def assignment_cost(cost: np.ndarray, assignment: Sequence[int]) -> float:
    """Sum of the assigned entries, accumulated in ground-truth order."""
    total = 0.0
    for i, j in enumerate(assignment):
        total = total + float(cost[i, j]) if i else float(cost[i, j])
    return total


def _solve(cost: np.ndarray) -> list[int]:
    """Shortest-augmenting-path Hungarian method for an n x m matrix, n <= m."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            assignment[p[j] - 1] = j - 1
    return assignment


def hungarian(cost, tie_tol: float = 1e-12) -> tuple[int, ...]:
    """Minimum-cost injection of rows (ground truths) into columns (predictions).

    Among optimal injections the lexicographically smallest assignment vector
    is returned; totals within ``tie_tol`` (relative) count as ties.
    """
    C = np.asarray(cost, dtype=float)
    if C.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    M, P = C.shape
    if M > P:
        raise InsufficientHypothesesError(f"{M} ground truths but only {P} prediction slots")
    if M == 0:
        return ()
    if not np.isfinite(C).all():
        raise ValueError("cost matrix must be finite")

    best = _solve(C)
    optimum = assignment_cost(C, best)
    tol = tie_tol * max(1.0, abs(optimum))
    # fix rows in order, trying smaller columns than the current optimum uses
    fixed: list[int] = []
    for i in range(M):
        rest_rows = list(range(i + 1, M))
        for j in range(best[i]):
            if j in fixed:
                continue
            cols = [c for c in range(P) if c not in fixed and c != j]
            sub = C[np.ix_(rest_rows, cols)] if rest_rows else np.empty((0, len(cols)))
            tail = [cols[k] for k in _solve(sub)] if rest_rows else []
            cand = fixed + [j] + tail
            if assignment_cost(C, cand) <= optimum + tol:
                best = cand
                break
        fixed.append(best[i])
    return tuple(int(j) for j in best)


def brute_force_assignment(cost) -> tuple[tuple[int, ...], float]:
    """Exhaustive minimum over all P!/(P-M)! injections (first minimum in lexicographic order)."""
    C = np.asarray(cost, dtype=float)
    M, P = C.shape
    if M > P:
        raise InsufficientHypothesesError(f"{M} ground truths but only {P} prediction slots")
    if M == 0:
        return (), 0.0
    perms = np.array(list(itertools.permutations(range(P), M)), dtype=np.int64)
    totals = C[0, perms[:, 0]]
    for i in range(1, M):
        totals = totals + C[i, perms[:, i]]
    k = int(np.argmin(totals))
    return tuple(int(j) for j in perms[k]), float(totals[k])


def injection_count(M: int, P: int) -> int:
    return math.perm(P, M) if M <= P else 0


def match_and_reorder(preds: Sequence[InstancePrediction], gts: Sequence[GroundTruthInstance],
                      w: MatchWeights = MatchWeights()) -> tuple[MatchResult, list[InstancePrediction]]:
    """Match and return predictions reordered to ground-truth order.

    Position ``i`` of the returned list holds the prediction assigned to ground
    truth ``i``; unmatched prediction indices are listed in ``MatchResult.unmatched``.
    """
    if len(gts) > len(preds):
        raise InsufficientHypothesesError(f"{len(gts)} ground truths but only {len(preds)} predictions")
    C = cost_matrix(preds, gts, w)
    assignment = hungarian(C)
    pairs = [match_cost(preds[j], gts[i], w) for i, j in enumerate(assignment)]
    used = set(assignment)
    result = MatchResult(
        assignment=assignment,
        total_cost=assignment_cost(C, assignment) if assignment else 0.0,
        per_pair_costs=pairs,
        unmatched=tuple(j for j in range(len(preds)) if j not in used),
    )
    return result, [preds[j] for j in assignment]
