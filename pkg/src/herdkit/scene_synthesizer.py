"""Multi-animal synthetic scenes on a shared ground plane.

Layout: each animal gets a distinct horizontal bin (no two occupied bins
adjacent) for ``t_x``, a depth interval for ``t_z`` inside a shared window so
the group depth span stays within ``depth_span_max``, then x/z jitter.
``t_y`` is 0 and the mesh is lowered by ``ground_offset``.  Orientation is a
yaw about the vertical axis composed with a pitch about the body's lateral
axis, folded into the root joint rotation so every stored instance can be
re-posed from (shape, pose, translation) alone.

Keypoint visibility (the ``v`` flag in annotations) is 1 when the keypoint
projects inside the image with positive depth and is not covered by the box
of another instance whose root depth is nearer than the keypoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .body_model import TemplateModel, pose_mesh, rodrigues, rotation_to_axis_angle
from .projection import BBox, PerspectiveCamera, bbox_from_points, in_image, project

SCHEMA_VERSION = 1
_MASK64 = (1 << 64) - 1


class LayoutError(ValueError):
    """The requested layout cannot satisfy the placement constraints."""


@dataclass(frozen=True)
class LayoutConfig:
    min_animals: int = 2
    max_animals: int = 8
    tx_range: tuple[float, float] = (-1.5, 1.5)
    ty: float = 0.0
    tz_range: tuple[float, float] = (8.0, 50.0)
    depth_span_max: float = 30.0
    jitter_xz: float = 1.5
    ground_offset: float = 0.3
    pitch_range: tuple[float, float] = (-15.0, 15.0)
    yaw_range: tuple[float, float] = (0.0, 360.0)
    # 2 * 8 - 1 bins is the least that fits 8 non-adjacent animals
    n_horizontal_bins: int = 16
    depth_intervals: tuple[tuple[float, float], ...] | None = None  # default: 6 equal slices of tz_range

    def __post_init__(self):
        for name in ("tx_range", "tz_range", "pitch_range", "yaw_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise LayoutError(f"{name} must be ordered")
        if not 1 <= self.min_animals <= self.max_animals:
            raise LayoutError("need 1 <= min_animals <= max_animals")
        if self.max_animals > self.max_placeable:
            raise LayoutError(
                f"{self.n_horizontal_bins} bins fit at most {self.max_placeable} non-adjacent animals, "
                f"max_animals is {self.max_animals}")
        if self.depth_span_max <= 0:
            raise LayoutError("depth_span_max must be positive")
        intervals = self.intervals()
        lo, hi = self.tz_range
        if any(a > b or a < lo or b > hi for a, b in intervals):
            raise LayoutError("depth intervals must be ordered and inside tz_range")

    @property
    def max_placeable(self) -> int:
        return (self.n_horizontal_bins + 1) // 2

    def intervals(self) -> tuple[tuple[float, float], ...]:
        if self.depth_intervals is not None:
            return tuple((float(a), float(b)) for a, b in self.depth_intervals)
        edges = np.linspace(*self.tz_range, 7)
        return tuple((float(a), float(b)) for a, b in zip(edges[:-1], edges[1:]))

    def bin_edges(self) -> np.ndarray:
        return np.linspace(*self.tx_range, self.n_horizontal_bins + 1)


@dataclass(frozen=True)
class Placement:
    bin: int
    depth_interval: int
    tx_raw: float
    tz_raw: float
    jitter: tuple[float, float]
    tx: float
    ty: float
    tz: float


# ---------------------------------------------------------------------------
# seeds


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_scene_seed(master_seed: int, scene_index: int) -> int:
    """Per-scene seed: splitmix64(splitmix64(master) ^ index), truncated to 63 bits."""
    return splitmix64(splitmix64(master_seed & _MASK64) ^ (scene_index & _MASK64)) >> 1


# ---------------------------------------------------------------------------
# sampling


def _non_adjacent_bins(n: int, n_bins: int, rng: np.random.Generator) -> list[int]:
    # uniform over n-subsets of {0..n_bins-1} with gaps >= 2:
    # choose from n_bins - n + 1 slots, then spread by index
    slots = np.sort(rng.choice(n_bins - n + 1, size=n, replace=False))
    return [int(s + i) for i, s in enumerate(slots)]


def sample_layout(n: int, config: LayoutConfig, rng: np.random.Generator) -> list[Placement]:
    if n < 1 or n > config.max_placeable:
        raise LayoutError(f"cannot place {n} animals in {config.n_horizontal_bins} non-adjacent bins")
    bins = _non_adjacent_bins(n, config.n_horizontal_bins, rng)
    rng.shuffle(bins)
    edges = config.bin_edges()

    # shared depth window keeps the group span within depth_span_max
    lo, hi = config.tz_range
    span = min(config.depth_span_max, hi - lo)
    w0 = rng.uniform(lo, hi - span)
    w1 = w0 + span
    intervals = config.intervals()
    usable = [k for k, (a, b) in enumerate(intervals) if min(b, w1) >= max(a, w0)]

    out = []
    for b in bins:
        k = int(rng.choice(usable))
        a, bb = intervals[k]
        tz_raw = float(rng.uniform(max(a, w0), min(bb, w1)))
        tx_raw = float(rng.uniform(edges[b], edges[b + 1]))
        jx, jz = (float(v) for v in rng.uniform(-config.jitter_xz, config.jitter_xz, size=2))
        tx_lo, tx_hi = config.tx_range
        tx = min(max(tx_raw + jx, tx_lo - config.jitter_xz), tx_hi + config.jitter_xz)
        tz = min(max(tz_raw + jz, lo), hi)
        out.append(Placement(b, k, tx_raw, tz_raw, (jx, jz), tx, config.ty, tz))
    return out


def sample_orientation(config: LayoutConfig, rng: np.random.Generator) -> tuple[float, float]:
    """(pitch, yaw) in degrees, uniform over the configured ranges."""
    pitch = float(rng.uniform(*config.pitch_range))
    yaw = float(rng.uniform(*config.yaw_range))
    return pitch, yaw


def orientation_matrix(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    """Yaw about the vertical (y) axis after pitch about the lateral (z) axis."""
    yaw = rodrigues([0.0, math.radians(yaw_deg), 0.0])
    pitch = rodrigues([0.0, 0.0, math.radians(pitch_deg)])
    return yaw @ pitch


# ---------------------------------------------------------------------------
# scenes


@dataclass
class SceneInstance:
    species_tag: str
    shape: np.ndarray
    pose: np.ndarray
    translation: np.ndarray
    yaw_deg: float
    pitch_deg: float
    keypoints3d: np.ndarray
    keypoints2d: np.ndarray  # (K, 2) pixels
    visibility: np.ndarray  # (K,) bool
    bbox: BBox
    layout: dict = field(default_factory=dict)
    confidence: float | None = None  # predictions only


@dataclass
class SceneAnnotation:
    camera: PerspectiveCamera
    instances: list[SceneInstance]
    master_seed: int
    scene_seed: int
    scene_index: int = 0

    @property
    def image_size(self) -> tuple[int, int]:
        return self.camera.image_size


@dataclass(frozen=True)
class PoolEntry:
    tag: str
    values: np.ndarray


def make_shape_pool(template: TemplateModel, n_species: int = 8, seed: int = 0) -> list[PoolEntry]:
    rng = np.random.default_rng(seed)
    return [PoolEntry(f"species_{k:02d}", rng.normal(size=template.n_betas)) for k in range(n_species)]


def make_pose_pool(template: TemplateModel, n_poses: int = 32, seed: int = 1, spread: float = 0.2) -> list[PoolEntry]:
    """Random articulations with a neutral root; stands in for an external pose corpus."""
    rng = np.random.default_rng(seed)
    pool = []
    for k in range(n_poses):
        theta = rng.normal(scale=spread, size=(template.n_joints, 3))
        theta[0] = 0.0
        pool.append(PoolEntry(f"pose_{k:03d}", theta))
    return pool


def _visibility(kp_uv, kp_valid, kp_depth, idx, boxes, depths, image_size):
    vis = kp_valid & in_image(kp_uv, image_size)
    norm = kp_uv / np.asarray(image_size, dtype=float)
    for j, box in enumerate(boxes):
        if j == idx:
            continue
        x0, y0, x1, y1 = box.xyxy()
        with np.errstate(invalid="ignore"):
            inside = (norm[:, 0] >= x0) & (norm[:, 0] <= x1) & (norm[:, 1] >= y0) & (norm[:, 1] <= y1)
        vis &= ~(inside & (kp_depth > depths[j]))
    return vis


def derive_instances(template: TemplateModel, camera: PerspectiveCamera, specs: Sequence[dict]) -> list[SceneInstance]:
    """Pose every instance and derive keypoints, boxes and visibility.

    Each spec carries ``species_tag, shape, pose, translation, yaw_deg,
    pitch_deg`` and optionally ``layout``; ``pose`` already contains the
    orientation in its root rotation.
    """
    meshes = [pose_mesh(template, s["shape"], s["pose"], s["translation"]) for s in specs]
    boxes = []
    for mesh in meshes:
        uv, valid = project(mesh.vertices, camera)
        boxes.append(bbox_from_points(uv, camera.image_size, valid))
    depths = [float(s["translation"][2]) for s in specs]
    out = []
    for i, (s, mesh) in enumerate(zip(specs, meshes)):
        uv, valid = project(mesh.keypoints3d, camera)
        vis = _visibility(uv, valid, mesh.keypoints3d[:, 2], i, boxes, depths, camera.image_size)
        out.append(SceneInstance(
            species_tag=s["species_tag"],
            shape=np.asarray(s["shape"], dtype=float),
            pose=np.asarray(s["pose"], dtype=float),
            translation=np.asarray(s["translation"], dtype=float),
            yaw_deg=float(s["yaw_deg"]),
            pitch_deg=float(s["pitch_deg"]),
            keypoints3d=mesh.keypoints3d,
            keypoints2d=np.where(valid[:, None], uv, 0.0),
            visibility=vis,
            bbox=boxes[i],
            layout=dict(s.get("layout", {})),
        ))
    return out


def assemble_scene(
    template: TemplateModel,
    pose_pool: Sequence[PoolEntry],
    shape_pool: Sequence[PoolEntry],
    config: LayoutConfig = LayoutConfig(),
    master_seed: int = 0,
    scene_index: int = 0,
    camera: PerspectiveCamera | None = None,
) -> SceneAnnotation:
    """Generate one fully annotated scene, a pure function of (seed, index, config)."""
    if not pose_pool or not shape_pool:
        raise ValueError("pose and shape pools must be non-empty")
    camera = camera or PerspectiveCamera.centered()
    scene_seed = derive_scene_seed(master_seed, scene_index)
    rng = np.random.default_rng(scene_seed)
    n = int(rng.integers(config.min_animals, config.max_animals + 1))
    placements = sample_layout(n, config, rng)
    specs = []
    for place in placements:
        species = shape_pool[int(rng.integers(len(shape_pool)))]
        pose_entry = pose_pool[int(rng.integers(len(pose_pool)))]
        pitch, yaw = sample_orientation(config, rng)
        theta = np.array(pose_entry.values, dtype=float)
        theta[0] = rotation_to_axis_angle(orientation_matrix(yaw, pitch) @ rodrigues(theta[0]))
        specs.append(dict(
            species_tag=species.tag,
            shape=species.values,
            pose=theta,
            translation=np.array([place.tx, place.ty + config.ground_offset, place.tz]),
            yaw_deg=yaw,
            pitch_deg=pitch,
            layout=dict(bin=place.bin, depth_interval=place.depth_interval, tx_raw=place.tx_raw,
                        tz_raw=place.tz_raw, jitter=list(place.jitter), ty=place.ty,
                        ground_offset=config.ground_offset, pose_id=pose_entry.tag),
        ))
    return SceneAnnotation(camera, derive_instances(template, camera, specs), master_seed, scene_seed, scene_index)


def occlusion_stats(scene: SceneAnnotation) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise box IoU matrix and per-instance fraction of keypoints hidden by nearer instances."""
    from .instance_matcher import iou

    n = len(scene.instances)
    M = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            M[i, j] = M[j, i] = iou(scene.instances[i].bbox, scene.instances[j].bbox)
    boxes = [inst.bbox for inst in scene.instances]
    depths = [float(inst.translation[2]) for inst in scene.instances]
    frac = np.zeros(n)
    for i, inst in enumerate(scene.instances):
        kp_depth = inst.keypoints3d[:, 2]
        in_frame = (kp_depth > 0) & in_image(inst.keypoints2d, scene.image_size)
        unoccluded = _visibility(inst.keypoints2d, kp_depth > 0, kp_depth, i, boxes, depths, scene.image_size)
        frac[i] = float(np.mean(in_frame & ~unoccluded)) if len(kp_depth) else 0.0
    return M, frac


# ---------------------------------------------------------------------------
# rasterization (decoder input and inspection)


def rasterize(scene: SceneAnnotation, template: TemplateModel, size: tuple[int, int] | None = None) -> np.ndarray:
    """Flat-shaded point splat of every instance's posed vertices, (H, W, 3) in [0, 1]."""
    W, H = size or scene.image_size
    sx = W / scene.image_size[0]
    sy = H / scene.image_size[1]
    img = np.zeros((H, W, 3))
    zbuf = np.full((H, W), np.inf)
    for i, inst in enumerate(scene.instances):
        mesh = pose_mesh(template, inst.shape, inst.pose, inst.translation)
        uv, valid = project(mesh.vertices, scene.camera)
        px = np.floor(uv[valid, 0] * sx).astype(int)
        py = np.floor(uv[valid, 1] * sy).astype(int)
        z = mesh.vertices[valid, 2]
        keep = (px >= 0) & (px < W) & (py >= 0) & (py < H)
        hue = (0.17 + 0.61803398875 * i) % 1.0
        color = 0.5 + 0.5 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
        for x, y, d in zip(px[keep], py[keep], z[keep]):
            if d < zbuf[y, x]:
                zbuf[y, x] = d
                img[y, x] = color * (1.0 / (1.0 + 0.02 * d))
    return img


# ---------------------------------------------------------------------------
# JSON schema


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def instance_to_dict(inst: SceneInstance) -> dict:
    kp2d = [[float(x), float(y), int(v)] for (x, y), v in zip(inst.keypoints2d, inst.visibility)]
    d = {
        "species_tag": inst.species_tag,
        "shape": _floats(inst.shape),
        "pose": _floats(inst.pose),
        "translation": _floats(inst.translation),
        "yaw_deg": float(inst.yaw_deg),
        "pitch_deg": float(inst.pitch_deg),
        "keypoints3d": _floats(inst.keypoints3d),
        "keypoints2d": kp2d,
        "bbox": _floats(inst.bbox.as_array()),
    }
    if inst.layout:
        d["layout"] = inst.layout
    if inst.confidence is not None:
        d["confidence"] = float(inst.confidence)
    return d


def scene_to_dict(scene: SceneAnnotation) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "master_seed": int(scene.master_seed),
        "scene_seed": int(scene.scene_seed),
        "scene_index": int(scene.scene_index),
        "image_size": list(scene.image_size),
        "camera": scene.camera.to_dict(),
        "instances": [instance_to_dict(i) for i in scene.instances],
    }


def dumps_scene(scene: SceneAnnotation) -> str:
    return json.dumps(scene_to_dict(scene), allow_nan=False) + "\n"


class SchemaError(ValueError):
    """Annotation or prediction record does not follow the scene schema."""


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise SchemaError(f"{where}: missing field {key!r}")
    return d[key]


def instance_from_dict(d: dict, where: str = "instance") -> SceneInstance:
    try:
        kp2d = np.asarray(_require(d, "keypoints2d", where), dtype=float).reshape(-1, 3)
        kp3d = np.asarray(_require(d, "keypoints3d", where), dtype=float).reshape(-1, 3)
        if len(kp2d) != len(kp3d):
            raise SchemaError(f"{where}: keypoints2d and keypoints3d lengths differ")
        pose = np.asarray(_require(d, "pose", where), dtype=float)
        if pose.ndim != 2 or pose.shape[1] != 3:
            raise SchemaError(f"{where}: pose must be a list of [x, y, z]")
        translation = np.asarray(_require(d, "translation", where), dtype=float)
        if translation.shape != (3,):
            raise SchemaError(f"{where}: translation must have 3 entries")
        bbox = BBox.from_array(_require(d, "bbox", where))
        conf = d.get("confidence")
        if conf is not None and not 0.0 <= float(conf) <= 1.0:
            raise SchemaError(f"{where}: confidence outside [0, 1]")
        return SceneInstance(
            species_tag=str(d.get("species_tag", "")),
            shape=np.asarray(_require(d, "shape", where), dtype=float),
            pose=pose,
            translation=translation,
            yaw_deg=float(d.get("yaw_deg", 0.0)),
            pitch_deg=float(d.get("pitch_deg", 0.0)),
            keypoints3d=kp3d,
            keypoints2d=kp2d[:, :2],
            visibility=kp2d[:, 2] > 0.5,
            bbox=bbox,
            layout=dict(d.get("layout", {})),
            confidence=None if conf is None else float(conf),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"{where}: {exc}") from exc


def scene_from_dict(d: dict, where: str = "scene") -> SceneAnnotation:
    if not isinstance(d, dict):
        raise SchemaError(f"{where}: expected an object")
    version = _require(d, "schema_version", where)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{where}: unsupported schema_version {version}")
    cam = _require(d, "camera", where)
    try:
        size = tuple(int(x) for x in _require(d, "image_size", where))
        camera = PerspectiveCamera(float(_require(cam, "focal", where + ".camera")),
                                   tuple(_require(cam, "principal", where + ".camera")), size)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"{where}: bad camera ({exc})") from exc
    instances = [instance_from_dict(x, f"{where}.instances[{k}]")
                 for k, x in enumerate(_require(d, "instances", where))]
    return SceneAnnotation(
        camera=camera,
        instances=instances,
        master_seed=int(_require(d, "master_seed", where)),
        scene_seed=int(_require(d, "scene_seed", where)),
        scene_index=int(d.get("scene_index", 0)),
    )


def loads_scene(text: str, where: str = "scene") -> SceneAnnotation:
    try:
        return scene_from_dict(json.loads(text), where)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{where}: invalid JSON ({exc})") from exc


def with_instances(scene: SceneAnnotation, instances: list[SceneInstance]) -> SceneAnnotation:
    return replace(scene, instances=instances)
