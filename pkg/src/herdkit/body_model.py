"""Parametric articulated quadruped model: shape blendshapes, forward kinematics, LBS.

The model maps shape coefficients ``beta`` (B,), per-joint axis-angle pose
``theta`` (J, 3) and a global translation (3,) to a posed mesh plus regressed
joints and keypoints.  Learned animal assets are not bundled; instead
:func:`make_toy_template` builds a seeded procedural quadruped at any scale,
and :func:`save_template` / :func:`load_template` read and write the ``.npz``
template container described in the README.
"""

from __future__ import annotations

import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TEMPLATE_SCHEMA_VERSION = 1
SMALL_ANGLE = 1e-8

FULL_N_VERTS = 3889
FULL_N_FACES = 7774
FULL_N_BETAS = 145
FULL_N_JOINTS = 35
DEFAULT_N_KEYPOINTS = 26


class TemplateError(ValueError):
    """Raised for malformed templates, kinematic trees or template files."""


@dataclass(frozen=True)
class KinematicTree:
    """Parent table for J joints; the root carries parent ``-1``."""

    parent_of: tuple[int, ...]

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parent_of)
        object.__setattr__(self, "parent_of", parents)
        if not parents:
            raise TemplateError("kinematic tree has no joints")
        if parents[0] != -1:
            raise TemplateError("joint 0 must be the root (parent -1)")
        for j, p in enumerate(parents[1:], start=1):
            # parent < j gives topological order, a single root and connectivity
            if not 0 <= p < j:
                raise TemplateError(f"joint {j} has parent {p}; expected 0 <= parent < {j}")

    @property
    def joint_count(self) -> int:
        return len(self.parent_of)

    def children(self, joint: int) -> list[int]:
        return [j for j, p in enumerate(self.parent_of) if p == joint]


@dataclass(frozen=True, eq=False)
class TemplateModel:
    template_vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    shape_basis: np.ndarray  # (B, V, 3)
    skin_weights: np.ndarray  # (V, J)
    joint_regressor: np.ndarray  # (J, V)
    keypoint_regressor: np.ndarray  # (K, V)
    tree: KinematicTree
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_template(self)

    @property
    def n_verts(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def n_betas(self) -> int:
        return self.shape_basis.shape[0]

    @property
    def n_joints(self) -> int:
        return self.tree.joint_count

    @property
    def n_keypoints(self) -> int:
        return self.keypoint_regressor.shape[0]


@dataclass(frozen=True, eq=False)
class PosedMesh:
    vertices: np.ndarray  # (V, 3)
    keypoints3d: np.ndarray  # (K, 3)
    joints3d: np.ndarray  # (J, 3)


def validate_template(t: TemplateModel) -> None:
    V = t.template_vertices.shape[0] if t.template_vertices.ndim == 2 else -1
    J = t.tree.joint_count
    if t.template_vertices.shape != (V, 3) or V < 4:
        raise TemplateError(f"template_vertices must be (V, 3), got {t.template_vertices.shape}")
    if t.faces.ndim != 2 or t.faces.shape[1] != 3:
        raise TemplateError(f"faces must be (F, 3), got {t.faces.shape}")
    if t.faces.size and (t.faces.min() < 0 or t.faces.max() >= V):
        raise TemplateError("face index out of range")
    if t.shape_basis.ndim != 3 or t.shape_basis.shape[1:] != (V, 3):
        raise TemplateError(f"shape_basis must be (B, {V}, 3), got {t.shape_basis.shape}")
    if t.skin_weights.shape != (V, J):
        raise TemplateError(f"skin_weights must be ({V}, {J}), got {t.skin_weights.shape}")
    if (t.skin_weights < 0).any() or not np.allclose(t.skin_weights.sum(1), 1.0, rtol=0, atol=1e-9):
        raise TemplateError("skin_weights rows must be nonnegative and sum to 1")
    if t.joint_regressor.shape != (J, V):
        raise TemplateError(f"joint_regressor must be ({J}, {V}), got {t.joint_regressor.shape}")
    if t.keypoint_regressor.ndim != 2 or t.keypoint_regressor.shape[1] != V:
        raise TemplateError(f"keypoint_regressor must be (K, {V}), got {t.keypoint_regressor.shape}")
    for name in ("joint_regressor", "keypoint_regressor"):
        if not np.allclose(getattr(t, name).sum(1), 1.0, rtol=0, atol=1e-9):
            raise TemplateError(f"{name} rows must sum to 1")
    for name in ("template_vertices", "shape_basis", "skin_weights", "joint_regressor", "keypoint_regressor"):
        if not np.isfinite(getattr(t, name)).all():
            raise TemplateError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# rotations


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(axis_angle) -> np.ndarray:
    """Axis-angle 3-vector to a 3x3 rotation matrix."""
    r = np.asarray(axis_angle, dtype=float)
    if r.shape != (3,):
        raise ValueError(f"axis-angle must have shape (3,), got {r.shape}")
    angle = float(np.linalg.norm(r))
    if angle < SMALL_ANGLE:
        return np.eye(3) + skew(r)
    k = skew(r / angle)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def batch_rodrigues(axis_angles: np.ndarray) -> np.ndarray:
    """(N, 3) axis-angles to (N, 3, 3) rotation matrices."""
    r = np.asarray(axis_angles, dtype=float).reshape(-1, 3)
    angle = np.linalg.norm(r, axis=1)
    small = angle < SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    K = _batch_skew(r / safe[:, None])
    s = np.sin(angle)[:, None, None]
    c = (1.0 - np.cos(angle))[:, None, None]
    R = np.eye(3) + s * K + c * (K @ K)
    if small.any():
        R[small] = np.eye(3) + _batch_skew(r[small])
    return R


def _batch_skew(v: np.ndarray) -> np.ndarray:
    K = np.zeros((len(v), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -v[:, 2], v[:, 1]
    K[:, 1, 0], K[:, 1, 2] = v[:, 2], -v[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -v[:, 1], v[:, 0]
    return K


def rotation_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rodrigues` (log map), angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos))
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-6:
        return vee / 2.0
    if np.pi - angle > 1e-4:
        return angle * vee / (2.0 * np.sin(angle))
    # near pi: the axis is the dominant column of (R + I) / 2
    B = (R + np.eye(3)) / 2.0
    i = int(np.argmax(np.diag(B)))
    axis = B[:, i] / np.sqrt(max(B[i, i], 1e-300))
    if vee @ axis < 0:
        axis = -axis
    return angle * axis / np.linalg.norm(axis)


# ---------------------------------------------------------------------------
# model function


def shape_blend(template: TemplateModel, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (template.n_betas,):
        raise ValueError(f"beta must have shape ({template.n_betas},), got {beta.shape}")
    return template.template_vertices + np.tensordot(beta, template.shape_basis, axes=1)


def forward_kinematics(tree: KinematicTree, rest_joints: np.ndarray, theta: np.ndarray):
    """Global rigid transforms of every joint.

    Returns ``(A, posed_joints)`` where ``A`` is (J, 4, 4): ``A[j]`` maps a rest
    point rigidly attached to joint ``j`` to its posed location, so ``A[j]`` is
    the identity when ``theta`` is zero.  The root rotates about its own rest
    location; global translation is not included.
    """
    J = tree.joint_count
    rest_joints = np.asarray(rest_joints, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if rest_joints.shape != (J, 3) or theta.shape != (J, 3):
        raise ValueError(f"expected rest_joints and theta of shape ({J}, 3)")
    R = batch_rodrigues(theta)
    parents = np.asarray(tree.parent_of)
    local = np.zeros((J, 4, 4))
    local[:, :3, :3] = R
    local[:, :3, 3] = rest_joints - np.where(parents[:, None] >= 0, rest_joints[np.maximum(parents, 0)], 0.0)
    local[:, 3, 3] = 1.0
    G = np.empty((J, 4, 4))
    for j, p in enumerate(tree.parent_of):
        G[j] = local[j] if p < 0 else G[p] @ local[j]
    posed_joints = G[:, :3, 3].copy()
    A = G.copy()
    A[:, :3, 3] -= np.einsum("jab,jb->ja", G[:, :3, :3], rest_joints)
    return A, posed_joints


def pose_mesh(template: TemplateModel, beta, theta, gamma) -> PosedMesh:
    """Evaluate the model: blendshapes, then LBS, then the translation offset."""
    theta = np.asarray(theta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if theta.shape != (template.n_joints, 3):
        raise ValueError(f"theta must have shape ({template.n_joints}, 3), got {theta.shape}")
    if gamma.shape != (3,):
        raise ValueError(f"translation must have shape (3,), got {gamma.shape}")
    rest = shape_blend(template, beta)
    rest_joints = template.joint_regressor @ rest
    A, joints = forward_kinematics(template.tree, rest_joints, theta)
    T = np.einsum("vj,jab->vab", template.skin_weights, A[:, :3, :])
    verts = np.einsum("vab,vb->va", T[:, :, :3], rest) + T[:, :, 3]
    verts = verts + gamma
    return PosedMesh(
        vertices=verts,
        keypoints3d=template.keypoint_regressor @ verts,
        joints3d=joints + gamma,
    )


# ---------------------------------------------------------------------------
# procedural template


@dataclass(frozen=True)
class TemplateConfig:
    n_betas: int = 10
    n_joints: int = 15
    n_keypoints: int = DEFAULT_N_KEYPOINTS
    n_verts: int = 402
    seed: int = 0

    @classmethod
    def full_scale(cls, seed: int = 0) -> "TemplateConfig":
        return cls(FULL_N_BETAS, FULL_N_JOINTS, DEFAULT_N_KEYPOINTS, FULL_N_VERTS, seed)

    @property
    def n_faces(self) -> int:
        # closed genus-0 triangle mesh
        return 2 * self.n_verts - 4


def quadruped_tree(n_joints: int) -> tuple[KinematicTree, dict[str, list[int]]]:
    """Spine chain rooted at the hips, four legs, tail and neck/head chain.

    Joints beyond the minimal seven are handed out round-robin to
    spine, the four legs, tail and head.
    """
    if n_joints < 7:
        raise TemplateError("a quadruped needs at least 7 joints")
    order = ["spine", "leg_hl", "leg_hr", "leg_fl", "leg_fr", "tail", "head"]
    sizes = dict.fromkeys(order, 1)
    for i in range(n_joints - 7):
        sizes[order[i % len(order)]] += 1
    parents: list[int] = []
    chains: dict[str, list[int]] = {}

    def add_chain(name: str, attach: int) -> None:
        ids = []
        for k in range(sizes[name]):
            parents.append(attach if k == 0 else ids[-1])
            ids.append(len(parents) - 1)
        chains[name] = ids

    add_chain("spine", -1)
    hips, shoulders = chains["spine"][0], chains["spine"][-1]
    add_chain("leg_hl", hips)
    add_chain("leg_hr", hips)
    add_chain("leg_fl", shoulders)
    add_chain("leg_fr", shoulders)
    add_chain("tail", hips)
    add_chain("head", shoulders)
    return KinematicTree(tuple(parents)), chains


# body frame: x toward the head, y down (ground at y=0), z lateral
_BODY_CENTER = np.array([0.0, -0.55, 0.0])
_BODY_RADII = np.array([0.62, 0.22, 0.2])
_HIP_X, _SHOULDER_X, _LEG_Z = -0.4, 0.4, 0.12
# final size: about 2.4 units nose to rump, 1.5 units tall
_BODY_SCALE = 2.0


def _design_joints(chains: dict[str, list[int]], n_joints: int) -> np.ndarray:
    pos = np.zeros((n_joints, 3))

    def place(name, start, end):
        ids = chains[name]
        for k, j in enumerate(ids):
            a = k / max(len(ids), 1) if name.startswith("leg") else (k + 1) / (len(ids) + 1)
            if name == "spine":
                a = k / max(len(ids) - 1, 1)
            pos[j] = (1 - a) * np.asarray(start) + a * np.asarray(end)

    cy = _BODY_CENTER[1]
    place("spine", (_HIP_X, cy, 0.0), (_SHOULDER_X, cy, 0.0))
    for name, x, z in (("leg_hl", _HIP_X, _LEG_Z), ("leg_hr", _HIP_X, -_LEG_Z),
                       ("leg_fl", _SHOULDER_X, _LEG_Z), ("leg_fr", _SHOULDER_X, -_LEG_Z)):
        place(name, (x, cy + 0.1, z), (x, -0.02, z))
    place("tail", (-0.55, cy - 0.05, 0.0), (-1.0, cy - 0.2, 0.0))
    place("head", (0.55, cy - 0.05, 0.0), (0.8, cy - 0.3, 0.0))
    return pos


def _ring_layout(n_verts: int) -> tuple[int, int]:
    """Factor n_verts - 2 into (rings, columns) with at least 3 columns."""
    m = n_verts - 2
    target = np.sqrt(m / 6.0)
    best = None
    for r in range(1, m // 3 + 1):
        if m % r == 0 and m // r >= 3:
            if best is None or abs(r - target) < abs(best - target):
                best = r
    if best is None:
        raise TemplateError(f"cannot triangulate a closed mesh with {n_verts} vertices")
    return best, m // best


def _sphere_mesh(rings: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit sphere around the x axis: 2 poles + rings*cols vertices, 2*rings*cols faces."""
    polar = np.pi * (np.arange(rings) + 1) / (rings + 1)
    azim = 2 * np.pi * np.arange(cols) / cols
    P, A = np.meshgrid(polar, azim, indexing="ij")
    ring = np.stack([np.cos(P), np.sin(P) * np.cos(A), np.sin(P) * np.sin(A)], -1).reshape(-1, 3)
    verts = np.concatenate([[[1.0, 0.0, 0.0]], ring, [[-1.0, 0.0, 0.0]]])
    south = len(verts) - 1

    def vid(r, c):
        return 1 + r * cols + (c % cols)

    faces = []
    for c in range(cols):
        faces.append((0, vid(0, c + 1), vid(0, c)))
    for r in range(rings - 1):
        for c in range(cols):
            a, b = vid(r, c), vid(r, c + 1)
            d, e = vid(r + 1, c), vid(r + 1, c + 1)
            faces.append((a, b, e))
            faces.append((a, e, d))
    for c in range(cols):
        faces.append((south, vid(rings - 1, c), vid(rings - 1, c + 1)))
    return verts, np.asarray(faces, dtype=np.int64)


def _nearest_regressor(points: np.ndarray, verts: np.ndarray, k: int) -> np.ndarray:
    d = np.linalg.norm(points[:, None, :] - verts[None, :, :], axis=-1)
    k = min(k, verts.shape[0])
    idx = np.argsort(d, axis=1, kind="stable")[:, :k]
    W = np.zeros((len(points), len(verts)))
    for row, cols in enumerate(idx):
        w = 1.0 / (d[row, cols] + 1e-3)
        W[row, cols] = w / w.sum()
    return W


def make_toy_template(config: TemplateConfig | None = None) -> TemplateModel:
    """Seeded procedural quadruped satisfying every template invariant."""
    cfg = config or TemplateConfig()
    if cfg.n_betas < 1 or cfg.n_keypoints < 1:
        raise TemplateError("n_betas and n_keypoints must be >= 1")
    if cfg.n_verts < 8:
        raise TemplateError("n_verts must be >= 8")
    rng = np.random.default_rng(cfg.seed)
    tree, chains = quadruped_tree(cfg.n_joints)
    J = cfg.n_joints

    rings, cols = _ring_layout(cfg.n_verts)
    unit, faces = _sphere_mesh(rings, cols)
    verts = _BODY_CENTER + unit * _BODY_RADII
    # pull the belly down into four legs
    below = verts[:, 1] > _BODY_CENTER[1]
    for x, z in ((_HIP_X, _LEG_Z), (_HIP_X, -_LEG_Z), (_SHOULDER_X, _LEG_Z), (_SHOULDER_X, -_LEG_Z)):
        lateral = np.hypot(verts[:, 0] - x, (verts[:, 2] - z) * 1.5)
        pull = np.exp(-((lateral / 0.12) ** 2)) * below
        verts[:, 1] += pull * (0.0 - verts[:, 1])
    verts += rng.normal(scale=2e-3, size=verts.shape)
    verts *= _BODY_SCALE

    design = _design_joints(chains, J) * _BODY_SCALE
    d2 = ((verts[:, None, :] - design[None, :, :]) ** 2).sum(-1)
    k = min(4, J)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    skin = np.zeros((len(verts), J))
    rows = np.arange(len(verts))[:, None]
    logits = -d2[rows, nearest] / (2 * (0.1 * _BODY_SCALE) ** 2)
    w = np.exp(logits - logits.max(1, keepdims=True))
    skin[rows, nearest] = w / w.sum(1, keepdims=True)
    skin /= skin.sum(1, keepdims=True)

    joint_reg = _nearest_regressor(design, verts, 8)
    kp_joints = np.unique(np.round(np.linspace(0, J - 1, min(cfg.n_keypoints, J))).astype(int))
    kp_targets = [design[j] for j in kp_joints]
    extra = cfg.n_keypoints - len(kp_targets)
    if extra > 0:
        picks = rng.choice(len(verts), size=extra, replace=extra > len(verts))
        kp_targets.extend(verts[picks])
    kp_reg = _nearest_regressor(np.asarray(kp_targets), verts, 3)

    # smooth shape directions: per-joint affine deformations blended by skin weights
    rel = verts[:, None, :] - design[None, :, :]  # (V, J, 3)
    scale = 0.05 / np.sqrt(np.arange(cfg.n_betas) + 1.0)
    A = rng.normal(size=(cfg.n_betas, J, 3, 3)) * scale[:, None, None, None]
    weighted = (skin[:, :, None] * rel).reshape(len(verts), 3 * J)
    basis = np.einsum("vk,bkx->bvx", weighted, A.transpose(0, 1, 3, 2).reshape(cfg.n_betas, 3 * J, 3))

    return TemplateModel(
        template_vertices=verts,
        faces=faces,
        shape_basis=basis,
        skin_weights=skin,
        joint_regressor=joint_reg,
        keypoint_regressor=kp_reg,
        tree=tree,
        meta={"source": "procedural", "seed": cfg.seed},
    )


# ---------------------------------------------------------------------------
# template container


_ARRAYS = ("template_vertices", "faces", "shape_basis", "skin_weights", "joint_regressor", "keypoint_regressor")


def save_template(template: TemplateModel, path) -> None:
    dims = np.array([template.n_verts, template.n_faces, template.n_betas, template.n_joints, template.n_keypoints])
    with open(path, "wb") as fh:
        np.savez(
            fh,
            schema_version=np.array(TEMPLATE_SCHEMA_VERSION),
            dims=dims,
            parent_of=np.asarray(template.tree.parent_of, dtype=np.int64),
            **{name: getattr(template, name) for name in _ARRAYS},
        )


def load_template(path) -> TemplateModel:
    """Read a template written by :func:`save_template`; raises TemplateError on any schema problem."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such template file")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: np.array(data[k]) for k in data.files}
    except (OSError, ValueError, EOFError, zipfile.BadZipFile) as exc:
        raise TemplateError(f"{path}: unreadable template container ({exc})") from exc
    missing = {"schema_version", "dims", "parent_of", *_ARRAYS} - arrays.keys()
    if missing:
        raise TemplateError(f"{path}: missing fields {sorted(missing)}")
    if int(arrays["schema_version"]) != TEMPLATE_SCHEMA_VERSION:
        raise TemplateError(f"{path}: unsupported schema_version {int(arrays['schema_version'])}")
    try:
        template = TemplateModel(
            template_vertices=arrays["template_vertices"].astype(float),
            faces=arrays["faces"].astype(np.int64),
            shape_basis=arrays["shape_basis"].astype(float),
            skin_weights=arrays["skin_weights"].astype(float),
            joint_regressor=arrays["joint_regressor"].astype(float),
            keypoint_regressor=arrays["keypoint_regressor"].astype(float),
            tree=KinematicTree(tuple(arrays["parent_of"].tolist())),
            meta={"source": str(path)},
        )
    except TemplateError as exc:
        raise TemplateError(f"{path}: {exc}") from exc
    dims = tuple(int(x) for x in arrays["dims"])
    actual = (template.n_verts, template.n_faces, template.n_betas, template.n_joints, template.n_keypoints)
    if dims != actual:
        raise TemplateError(f"{path}: declared dims {dims} disagree with arrays {actual}")
    return template
