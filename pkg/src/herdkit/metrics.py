"""Evaluation metrics: Procrustes-aligned joint error, PCK, OKS and keypoint AP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PCK_NORMALIZERS = ("bbox-max-side", "bbox-diagonal")


class DegenerateAlignmentError(ValueError):
    """Point set too degenerate (rank < 2) for a unique similarity alignment."""


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class EvalConfig:
    pck_threshold: float = 0.1
    pck_normalizer: str = "bbox-max-side"
    oks_sigma: float = 0.05
    oks_sigmas: tuple[float, ...] | None = None  # per-keypoint override
    ap_thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

    def __post_init__(self):
        if self.pck_normalizer not in PCK_NORMALIZERS:
            raise ValueError(f"pck_normalizer must be one of {PCK_NORMALIZERS}")
        if not all(0 < t < 1 for t in self.ap_thresholds):
            raise ValueError("AP thresholds must lie in (0, 1)")
        if not 0 < self.pck_threshold:
            raise ValueError("pck_threshold must be positive")

    def sigmas(self, k: int) -> np.ndarray:
        if self.oks_sigmas is not None:
            if len(self.oks_sigmas) != k:
                raise ValueError(f"expected {k} OKS sigmas, got {len(self.oks_sigmas)}")
            return np.asarray(self.oks_sigmas, dtype=float)
        return np.full(k, self.oks_sigma)


def procrustes_align(source, target) -> SimilarityTransform:
    """Least-squares similarity (s, R, t) minimizing sum ||s R x_i + t - y_i||^2, det R = +1."""
    X = np.asarray(source, dtype=float)
    Y = np.asarray(target, dtype=float)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"expected matching (n, 3) arrays, got {X.shape} and {Y.shape}")
    if X.shape[0] < 3:
        raise DegenerateAlignmentError("need at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    if sx[0] == 0 or sx[1] <= 1e-12 * sx[0]:
        raise DegenerateAlignmentError("source points are collinear or coincident")
    U, S, Vt = np.linalg.svd(Yc.T @ Xc)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = (U * D) @ Vt
    scale = float((S * D).sum() / (Xc**2).sum())
    return SimilarityTransform(scale, R, my - scale * R @ mx)


def pa_mpjpe(pred_joints, gt_joints) -> float:
    """Mean per-joint Euclidean error after aligning the prediction onto ground truth."""
    T = procrustes_align(pred_joints, gt_joints)
    aligned = T.apply(pred_joints)
    return float(np.linalg.norm(aligned - np.asarray(gt_joints, dtype=float), axis=1).mean())


def pck_normalizer(bbox_wh_pixels, kind: str = "bbox-max-side") -> float:
    w, h = bbox_wh_pixels
    if kind == "bbox-max-side":
        return float(max(w, h))
    if kind == "bbox-diagonal":
        return float(math.hypot(w, h))
    raise ValueError(f"unknown PCK normalizer {kind!r}")


def pck(pred2d, gt2d, vis, bbox_wh_pixels, config: EvalConfig = EvalConfig()) -> float:
    """Fraction of visible keypoints with pixel error below threshold * normalizer; NaN if none visible."""
    vis = np.asarray(vis, dtype=bool)
    if not vis.any():
        return math.nan
    err = np.linalg.norm(np.asarray(pred2d, float)[vis] - np.asarray(gt2d, float)[vis], axis=1)
    limit = config.pck_threshold * pck_normalizer(bbox_wh_pixels, config.pck_normalizer)
    return float(np.mean(err < limit))


def oks(pred2d, gt2d, vis, gt_area: float, sigmas) -> float:
    """Mean over visible keypoints of exp(-d^2 / (2 area sigma_k^2)); NaN if none visible."""
    if not gt_area > 0:
        raise ValueError("gt_area must be positive")
    vis = np.asarray(vis, dtype=bool)
    if not vis.any():
        return math.nan
    d2 = ((np.asarray(pred2d, float) - np.asarray(gt2d, float)) ** 2).sum(1)
    s = np.asarray(sigmas, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        e = np.exp(-d2 / (2.0 * gt_area * s**2))
    e = np.where(np.isfinite(d2), e, 0.0)
    return float(e[vis].mean())


@dataclass
class EvalInstance:
    """One keypoint instance in pixel coordinates, ground truth or detection."""

    keypoints2d: np.ndarray  # (K, 2) pixels
    visibility: np.ndarray | None = None  # ground truth only
    area: float = 0.0  # ground truth only, pixel^2
    confidence: float = 1.0  # detections only
    box: tuple[float, float, float, float] | None = None  # ground truth (x0, y0, w, h) pixels

    @property
    def ignored(self) -> bool:
        """Ground truth without visible keypoints: an ignore region, not a positive."""
        return not np.asarray(self.visibility, dtype=bool).any()


@dataclass
class APResult:
    ap: dict[float, float]
    mAP: float
    n_gt: int
    n_det: int
    curves: dict[float, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)


def box_similarity(pred2d, gt: EvalInstance, sigmas) -> float:
    """Similarity of a detection to an ignore-region ground truth.

    Keypoints are scored by their distance outside the GT box grown by its own
    size on each side (zero inside), through the OKS kernel.  NaN without a box.
    """
    if gt.box is None:
        return math.nan
    x0, y0, w, h = gt.box
    p = np.asarray(pred2d, dtype=float)
    dx = np.maximum(0.0, (x0 - w) - p[:, 0]) + np.maximum(0.0, p[:, 0] - (x0 + 2 * w))
    dy = np.maximum(0.0, (y0 - h) - p[:, 1]) + np.maximum(0.0, p[:, 1] - (y0 + 2 * h))
    area = max(gt.area, np.finfo(float).tiny)
    return float(np.exp(-(dx**2 + dy**2) / (2.0 * area * np.asarray(sigmas, dtype=float) ** 2)).mean())


def _match_scene(dets, gts, sigmas, threshold):
    """Greedy OKS matching in descending confidence.

    Returns per-detection flags: True (true positive), False (false positive)
    or None (matched an ignore region, excluded from the curve).
    """
    order = sorted(range(len(dets)), key=lambda d: -dets[d].confidence)
    taken = [False] * len(gts)
    flags = {}
    for d in order:
        best, best_sim = -1, -1.0
        for ignored_pass in (False, True):
            for g, gt in enumerate(gts):
                if taken[g] or gt.ignored != ignored_pass:
                    continue
                if ignored_pass:
                    sim = box_similarity(dets[d].keypoints2d, gt, sigmas)
                else:
                    sim = oks(dets[d].keypoints2d, gt.keypoints2d, gt.visibility, gt.area, sigmas)
                if sim >= threshold and sim > best_sim:
                    best, best_sim = g, sim
            if best >= 0:
                break
        if best >= 0:
            taken[best] = True
            flags[d] = None if gts[best].ignored else True
        else:
            flags[d] = False
    return flags


def _all_point_ap(tp_sorted: np.ndarray, n_gt: int) -> tuple[float, np.ndarray, np.ndarray]:
    tp_cum = np.cumsum(tp_sorted)
    fp_cum = np.cumsum(~tp_sorted)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    r = np.concatenate([[0.0], recall])
    p = np.concatenate([[0.0], precision])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    ap = float(np.sum((r[1:] - r[:-1]) * p[1:]))
    return ap, recall, precision


def average_precision(
    scene_dets: Sequence[Sequence[EvalInstance]],
    scene_gts: Sequence[Sequence[EvalInstance]],
    config: EvalConfig = EvalConfig(),
) -> APResult:
    """Corpus keypoint AP per OKS threshold plus their mean (mAP).

    Ground truths without visible keypoints are ignore regions: they are not
    positives, and a detection matched to one counts neither as a true nor as
    a false positive.  Detections are ranked by confidence across the corpus
    (ties keep scene, then in-scene order).  Returns NaN AP values when the
    corpus has no positive ground truth.
    """
    if len(scene_dets) != len(scene_gts):
        raise ValueError("detections and ground truths must cover the same scenes")
    gts = [list(scene) for scene in scene_gts]
    n_gt = sum(not g.ignored for s in gts for g in s)
    n_det = sum(len(s) for s in scene_dets)
    k = next((len(inst.keypoints2d) for scene in [*gts, *scene_dets] for inst in scene), None)
    sigmas = config.sigmas(k) if k is not None else None

    ranked = sorted(
        ((s, d) for s, dets in enumerate(scene_dets) for d in range(len(dets))),
        key=lambda sd: -scene_dets[sd[0]][sd[1]].confidence,
    )
    ap, curves = {}, {}
    for t in config.ap_thresholds:
        if n_gt == 0:
            ap[t] = math.nan
            continue
        if n_det == 0:
            ap[t] = 0.0
            continue
        flags = [_match_scene(scene_dets[s], gts[s], sigmas, t) for s in range(len(gts))]
        tp = np.array([flags[s][d] for s, d in ranked if flags[s][d] is not None], dtype=bool)
        ap[t], rec, prec = _all_point_ap(tp, n_gt)
        curves[t] = (rec, prec)
    values = list(ap.values())
    mAP = math.nan if n_gt == 0 else float(np.mean(values))
    return APResult(ap=ap, mAP=mAP, n_gt=n_gt, n_det=n_det, curves=curves)
