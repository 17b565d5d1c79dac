"""Multi-task training loss evaluated on matched prediction/ground-truth pairs.

    total = l_params * L_params + l_2d * L_2d + l_3d * L_3d + l_box * L_box
    L_box = L_coord + L_giou + L_conf + L_dn

Per-instance terms are averaged over matched pairs; the confidence term is
averaged over every prediction slot (unmatched slots target 0).  Keypoints
are in normalized image coordinates for 2D and model units for 3D.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .body_model import TemplateModel, pose_mesh
from .instance_matcher import GroundTruthInstance, InstancePrediction, giou, iou
from .projection import BBox, PerspectiveCamera, bbox_from_points, project

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_params: float = 1.0
    lambda_2d: float = 5.0
    lambda_3d: float = 5.0
    lambda_box: float = 1.0


@dataclass(frozen=True)
class LossBreakdown:
    l_params: float
    l_2d: float
    l_3d: float
    l_coord: float
    l_giou: float
    l_conf: float
    l_dn: float
    total: float

    @property
    def l_box(self) -> float:
        return self.l_coord + self.l_giou + self.l_conf + self.l_dn

    def as_dict(self) -> dict[str, float]:
        return {**{f.name: getattr(self, f.name) for f in fields(self)}, "l_box": self.l_box}


@dataclass(frozen=True)
class NoiseConfig:
    """Denoising-query construction; defaults are artifact choices."""

    center_frac: float = 0.2
    size_frac: float = 0.4
    copies: int = 5


@dataclass(frozen=True)
class DenoisingGroup:
    source: int
    noised_bbox: BBox
    center_frac: float
    size_frac: float


def l_params(pred_beta, pred_theta, gt_beta, gt_theta) -> float:
    """Mean squared error over the concatenated (beta, theta) vector; 0 without ground truth."""
    if gt_beta is None or gt_theta is None:
        return 0.0
    if pred_beta is None or pred_theta is None:
        raise ValueError("ground-truth parameters present but prediction has none")
    pred = np.concatenate([np.ravel(pred_beta), np.ravel(pred_theta)])
    gt = np.concatenate([np.ravel(gt_beta), np.ravel(gt_theta)])
    if pred.shape != gt.shape:
        raise ValueError(f"parameter dimension mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean((pred - gt) ** 2))


def l_keypoints(pred, gt, vis) -> float:
    """Visibility-masked L1, averaged over visible keypoints and coordinates."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    vis = np.asarray(vis, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"keypoint shapes differ: {pred.shape} vs {gt.shape}")
    if not vis.any():
        return 0.0
    return float(np.abs(pred[vis] - gt[vis]).mean())


def l_conf(c: float, t: float) -> float:
    """Binary cross-entropy of confidence ``c`` against soft target ``t`` (0 log 0 = 0)."""
    c = float(c)
    t = float(t)
    loss = 0.0
    if t > 0:
        loss -= t * math.log(max(c, BCE_EPS))
    if t < 1:
        loss -= (1.0 - t) * math.log(max(1.0 - c, BCE_EPS))
    return loss


def _clamp_box(cx, cy, w, h) -> BBox:
    w = min(max(w, 0.0), 1.0)
    h = min(max(h, 0.0), 1.0)
    return BBox(min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), w, h)


def build_denoising_groups(gt_boxes: Sequence[BBox], noise: NoiseConfig, rng: np.random.Generator) -> list[DenoisingGroup]:
    """``noise.copies`` jittered copies of every ground-truth box.

    Centers move uniformly within +-center_frac * (w, h); sizes scale by a
    uniform factor in [1 - size_frac, 1 + size_frac].
    """
    groups = []
    for copy in range(noise.copies):
        for src, box in enumerate(gt_boxes):
            dx, dy = rng.uniform(-1.0, 1.0, size=2) * noise.center_frac * np.array([box.w, box.h])
            sw, sh = 1.0 + rng.uniform(-1.0, 1.0, size=2) * noise.size_frac
            groups.append(DenoisingGroup(
                source=src,
                noised_bbox=_clamp_box(box.cx + dx, box.cy + dy, box.w * sw, box.h * sh),
                center_frac=noise.center_frac,
                size_frac=noise.size_frac,
            ))
    return groups


def _box_terms(pred: BBox, gt: BBox) -> tuple[float, float]:
    return float(np.abs(pred.as_array() - gt.as_array()).sum()), 1.0 - giou(pred, gt)


def total_loss(
    matched: Sequence[tuple[InstancePrediction, GroundTruthInstance]],
    unmatched: Sequence[InstancePrediction] = (),
    dn: Sequence[tuple[DenoisingGroup, BBox]] = (),
    gt_boxes: Sequence[BBox] = (),
    weights: LossWeights = LossWeights(),
) -> LossBreakdown:
    """Assemble every loss component for one scene.

    ``dn`` pairs each denoising group with the box the model reconstructed
    from it; it is scored against ``gt_boxes[group.source]``.
    """
    lp, l2, l3, lc, lg = [], [], [], [], []
    conf_terms = []
    for pred, gt in matched:
        if gt.has_params:
            lp.append(l_params(pred.beta, pred.theta, gt.beta, gt.theta))
        l2.append(l_keypoints(pred.keypoints2d, gt.keypoints2d, gt.visibility))
        if gt.keypoints3d is not None and pred.keypoints3d is not None:
            l3.append(l_keypoints(pred.keypoints3d, gt.keypoints3d, gt.visibility))
        coord, g = _box_terms(pred.bbox, gt.bbox)
        lc.append(coord)
        lg.append(g)
        conf_terms.append(l_conf(pred.confidence, iou(pred.bbox, gt.bbox)))
    conf_terms.extend(l_conf(p.confidence, 0.0) for p in unmatched)

    dn_terms = []
    for group, recon in dn:
        coord, g = _box_terms(recon, gt_boxes[group.source])
        dn_terms.append(coord + g)

    def mean(xs):
        return float(np.mean(xs)) if len(xs) else 0.0

    parts = dict(
        l_params=mean(lp), l_2d=mean(l2), l_3d=mean(l3),
        l_coord=mean(lc), l_giou=mean(lg), l_conf=mean(conf_terms), l_dn=mean(dn_terms),
    )
    l_box = parts["l_coord"] + parts["l_giou"] + parts["l_conf"] + parts["l_dn"]
    total = (weights.lambda_params * parts["l_params"] + weights.lambda_2d * parts["l_2d"]
             + weights.lambda_3d * parts["l_3d"] + weights.lambda_box * l_box)
    return LossBreakdown(total=total, **parts)


@dataclass
class ParamPrediction:
    """Raw per-instance outputs from which keypoints are regressed through the body model."""

    beta: np.ndarray
    theta: np.ndarray
    translation: np.ndarray
    bbox: np.ndarray  # (cx, cy, w, h)
    confidence: float
    extras: dict = field(default_factory=dict)


def prediction_from_params(template: TemplateModel, camera: PerspectiveCamera, p: ParamPrediction) -> InstancePrediction:
    """Pose the mesh, regress 3D keypoints and project them to normalized 2D."""
    mesh = pose_mesh(template, p.beta, p.theta, p.translation)
    uv, _ = project(mesh.keypoints3d, camera)
    kp2d = uv / np.asarray(camera.image_size, dtype=float)
    box = np.asarray(p.bbox, dtype=float)
    return InstancePrediction(
        bbox=BBox(float(box[0]), float(box[1]), max(float(box[2]), 0.0), max(float(box[3]), 0.0)),
        confidence=float(np.clip(p.confidence, 0.0, 1.0)),
        keypoints2d=kp2d,
        keypoints3d=mesh.keypoints3d,
        beta=np.asarray(p.beta, dtype=float),
        theta=np.asarray(p.theta, dtype=float),
        translation=np.asarray(p.translation, dtype=float),
    )


def ground_truth_from_params(template: TemplateModel, camera: PerspectiveCamera, beta, theta, translation,
                             visibility=None) -> GroundTruthInstance:
    mesh = pose_mesh(template, beta, theta, translation)
    uv, valid = project(mesh.keypoints3d, camera)
    vuv, vvalid = project(mesh.vertices, camera)
    vis = valid if visibility is None else np.asarray(visibility, dtype=bool)
    return GroundTruthInstance(
        bbox=bbox_from_points(vuv, camera.image_size, vvalid),
        keypoints2d=uv / np.asarray(camera.image_size, dtype=float),
        visibility=vis,
        keypoints3d=mesh.keypoints3d,
        beta=np.asarray(beta, dtype=float),
        theta=np.asarray(theta, dtype=float),
        translation=np.asarray(translation, dtype=float),
    )
