"""Oracle and invariant suites behind ``herdkit selfcheck``.

Each suite returns a :class:`SuiteResult`; none raises on failure.  Setting
``HERDKIT_SELFCHECK_MUTATE=matcher`` makes the matcher solve a mis-weighted
cost matrix so the optimality suite can be seen to fail.
"""

from __future__ import annotations

import math
import os
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .body_model import (
    TemplateConfig,
    TemplateError,
    forward_kinematics,
    load_template,
    make_toy_template,
    pose_mesh,
    rodrigues,
    save_template,
    shape_blend,
)
from .decoder_core import (
    DecoderConfig,
    DropoutConfig,
    PromptSet,
    apply_prompt_dropout,
    cross_attention,
    decode,
    init_weights,
    refresh_kp2d_tokens,
    refresh_kp3d_tokens,
    stub_encode,
    assemble_queries,
)
from .instance_matcher import (
    GroundTruthInstance,
    InstancePrediction,
    MatchWeights,
    assignment_cost,
    brute_force_assignment,
    cost_matrix,
    focal_conf_cost,
    hungarian,
)
from .losses import LossWeights, total_loss
from .metrics import EvalConfig, EvalInstance, average_precision, pa_mpjpe, pck
from .projection import BBox
from .scene_synthesizer import LayoutConfig, assemble_scene, dumps_scene, make_pose_pool, make_shape_pool

MUTATE_ENV = "HERDKIT_SELFCHECK_MUTATE"


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _random_instances(rng, n, K=6):
    out = []
    for _ in range(n):
        w, h = rng.uniform(0.05, 0.4, 2)
        box = BBox(rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), w, h)
        out.append((box, rng.random((K, 2)), rng.random(K) < 0.7))
    return out


def random_match_problem(rng, M, P, K=6):
    gts = [GroundTruthInstance(b, kp, v) for b, kp, v in _random_instances(rng, M, K)]
    preds = [InstancePrediction(b, float(rng.uniform(0.01, 1.0)), kp) for b, kp, _ in _random_instances(rng, P, K)]
    return preds, gts


def check_matcher(n_cases: int = 300, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    mutate = os.environ.get(MUTATE_ENV) == "matcher"
    solver_weights = MatchWeights(lambda_conf=10.0, lambda_bbox=0.0, lambda_giou=0.0, lambda_kpts=0.1) if mutate \
        else MatchWeights()
    bad = 0
    for _ in range(n_cases):
        P = int(rng.integers(1, 7))
        M = int(rng.integers(0, P + 1))
        preds, gts = random_match_problem(rng, M, P)
        C = cost_matrix(preds, gts, MatchWeights())
        assignment = hungarian(cost_matrix(preds, gts, solver_weights))
        _, best = brute_force_assignment(C)
        got = assignment_cost(C, assignment) if M else 0.0
        bad += got != best
    weights_ok = MatchWeights() == MatchWeights(1.0, 1.0, 1.0, 10.0, 0.25, 2.0)
    focal_ok = abs(focal_conf_cost(0.5) - 0.25 * 0.25 * math.log(2)) <= 1e-12
    passed = bad == 0 and weights_ok and focal_ok
    return SuiteResult("matcher_optimality", passed,
                       f"{bad}/{n_cases} non-optimal assignments; default weights ok={weights_ok}; focal ok={focal_ok}"
                       + ("; mutated solver weights" if mutate else ""))


def check_body_model(n_cases: int = 200, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    t = make_toy_template(TemplateConfig())
    J, B = t.n_joints, t.n_betas
    rest = pose_mesh(t, np.zeros(B), np.zeros((J, 3)), np.zeros(3)).vertices
    worst = {"rest": float(np.abs(rest - t.template_vertices).max()), "translation": 0.0, "rigid": 0.0, "rotation": 0.0}
    onehot = np.eye(J)[np.argmax(t.skin_weights, axis=1)]
    rigid_t = replace(t, skin_weights=onehot)
    owner = np.argmax(onehot, axis=1)
    for _ in range(n_cases):
        beta = rng.standard_normal(B)
        theta = rng.normal(0, 0.6, (J, 3))
        gamma = rng.normal(0, 5, 3)
        a = pose_mesh(t, beta, theta, gamma).vertices
        b = pose_mesh(t, beta, theta, np.zeros(3)).vertices + gamma
        worst["translation"] = max(worst["translation"], float(np.abs(a - b).max()))
        shaped = shape_blend(rigid_t, beta)
        A, _ = forward_kinematics(rigid_t.tree, rigid_t.joint_regressor @ shaped, theta)
        expect = np.einsum("vab,vb->va", A[owner, :3, :3], shaped) + A[owner, :3, 3] + gamma
        got = pose_mesh(rigid_t, beta, theta, gamma).vertices
        worst["rigid"] = max(worst["rigid"], float(np.abs(got - expect).max()))
        R = rodrigues(rng.normal(0, 2, 3))
        worst["rotation"] = max(worst["rotation"], float(np.abs(R.T @ R - np.eye(3)).max()),
                                abs(float(np.linalg.det(R)) - 1.0))
    passed = worst["rest"] <= 1e-12 and worst["translation"] <= 1e-9 and worst["rigid"] <= 1e-10 \
        and worst["rotation"] <= 1e-10
    return SuiteResult("body_model_identities", passed, ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))


def check_template_loader(template_path=None) -> SuiteResult:
    if template_path:
        try:
            t = load_template(template_path)
        except (TemplateError, OSError) as exc:
            return SuiteResult("template_loader", False, f"schema error: {exc}")
        return SuiteResult("template_loader", True, f"{template_path}: V={t.n_verts} J={t.n_joints} K={t.n_keypoints}")
    t = make_toy_template(TemplateConfig(n_verts=102, n_joints=9, n_betas=3, n_keypoints=8))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "t.npz"
        save_template(t, path)
        back = load_template(path)
        same = all(np.array_equal(getattr(t, k), getattr(back, k))
                   for k in ("template_vertices", "faces", "shape_basis", "skin_weights")) and back.tree == t.tree
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        try:
            load_template(path)
            rejected = False
        except TemplateError:
            rejected = True
    return SuiteResult("template_loader", same and rejected, f"round trip={same}; truncated file rejected={rejected}")


def _random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                     [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                     [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def check_procrustes(n_cases: int = 200, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        X = rng.standard_normal((int(rng.integers(3, 30)), 3))
        s = 10 ** rng.uniform(-1, 1)
        Y = s * X @ _random_rotation(rng).T + rng.normal(0, 3, 3)
        worst = max(worst, pa_mpjpe(X, Y))
    return SuiteResult("procrustes_recovery", worst <= 1e-9, f"max PA-MPJPE {worst:.1e}")


def check_losses(n_dirs: int = 100, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    K = 6
    gts = [GroundTruthInstance(b, kp, v, keypoints3d=rng.standard_normal((K, 3)), beta=rng.standard_normal(4),
                               theta=rng.standard_normal((3, 3))) for b, kp, v in _random_instances(rng, 3, K)]

    def preds_from(vec):
        out, k = [], 0
        for g in gts:
            n2, n3, nb, nt = 2 * K, 3 * K, 4, 9
            kp2 = g.keypoints2d + vec[k:k + n2].reshape(K, 2)
            kp3 = g.keypoints3d + vec[k + n2:k + n2 + n3].reshape(K, 3)
            beta = g.beta + vec[k + n2 + n3:k + n2 + n3 + nb]
            theta = g.theta + vec[k + n2 + n3 + nb:k + n2 + n3 + nb + nt].reshape(3, 3)
            box = g.bbox.as_array() + vec[k + n2 + n3 + nb + nt:k + n2 + n3 + nb + nt + 4]
            k += n2 + n3 + nb + nt + 4
            out.append(InstancePrediction(BBox(*box[:2], abs(box[2]), abs(box[3])), 1.0, kp2, kp3, beta, theta))
        return out

    dim = len(gts) * (5 * K + 4 + 9 + 4)
    base = total_loss(list(zip(preds_from(np.zeros(dim)), gts))).total
    decreased = 0
    for _ in range(n_dirs):
        d = rng.standard_normal(dim)
        d /= np.linalg.norm(d)
        decreased += total_loss(list(zip(preds_from(1e-3 * d), gts))).total < base
    weights_ok = LossWeights() == LossWeights(1.0, 5.0, 5.0, 1.0)
    passed = base == 0.0 and decreased == 0 and weights_ok
    return SuiteResult("loss_contract", passed,
                       f"loss at ground truth {base:g}; {decreased}/{n_dirs} directions decreased; weights ok={weights_ok}")


def check_layout(n_scenes: int = 300, seed: int = 0) -> SuiteResult:
    t = make_toy_template(TemplateConfig())
    cfg = LayoutConfig()
    shapes, poses = make_shape_pool(t), make_pose_pool(t)
    bad = 0
    for i in range(n_scenes):
        scene = assemble_scene(t, poses, shapes, cfg, seed, i)
        lay = [inst.layout for inst in scene.instances]
        bins = sorted(x["bin"] for x in lay)
        tz_raw = [x["tz_raw"] for x in lay]
        ok = (cfg.min_animals <= len(scene.instances) <= cfg.max_animals
              and all(inst.translation[1] == cfg.ty + cfg.ground_offset for inst in scene.instances)
              and all(cfg.tz_range[0] <= inst.translation[2] <= cfg.tz_range[1] for inst in scene.instances)
              and max(tz_raw) - min(tz_raw) <= cfg.depth_span_max
              and all(b - a >= 2 for a, b in zip(bins, bins[1:]))
              and dumps_scene(scene) == dumps_scene(assemble_scene(t, poses, shapes, cfg, seed, i)))
        bad += not ok
    return SuiteResult("layout_audit", bad == 0, f"{bad}/{n_scenes} scenes violate a layout constraint")


def check_dropout(n_draws: int = 10_000, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    K = 26
    kps = np.concatenate([rng.random((1, K, 2)), np.ones((1, K, 1))], axis=2)
    prompts = PromptSet(keypoints=kps, masks=np.ones((1, 8, 8)))
    cfg = DropoutConfig()
    mask_drop = kp_drop = 0
    kept = []
    for _ in range(n_draws):
        out = apply_prompt_dropout(prompts, cfg, rng)
        mask_drop += out.masks is None
        if out.keypoints is None:
            kp_drop += 1
        else:
            kept.append(out.keypoints[..., 2].mean())
    m, k, r = mask_drop / n_draws, kp_drop / n_draws, float(np.mean(kept))
    passed = 0.48 <= m <= 0.52 and 0.18 <= k <= 0.22 and 0.63 <= r <= 0.67
    return SuiteResult("prompt_dropout", passed, f"mask drop {m:.3f}, keypoint-prompt drop {k:.3f}, retention {r:.3f}")


def check_decoder(seed: int = 0) -> SuiteResult:
    full = DecoderConfig.full_scale()
    shape_ok = full.n_tokens == 12150 and full.width == 1024 and full.grid == (32, 32, 1280)
    c = DecoderConfig()
    rng = np.random.default_rng(seed)
    w = init_weights(c, rng)
    H, W = c.image_shape
    feats = stub_encode(rng.random((H, W, 3)), c)
    q = assemble_queries(c, PromptSet(), w)
    nxt, probs = cross_attention(q, feats, w.cross_attn)
    rows_ok = float(np.abs(probs.sum(-1) - 1).max()) <= 1e-6 and probs.min() >= 0 and probs.max() <= 1
    local_ok = True
    kp2 = refresh_kp2d_tokens(nxt, rng.random((c.n_instances, c.count("kp2d"), 2)), feats, w.feedback)
    kp3 = refresh_kp3d_tokens(nxt, rng.standard_normal((c.n_instances, c.count("kp3d"), 3)), w.feedback)
    for name, state in (("kp2d", kp2), ("kp3d", kp3)):
        outside = np.ones(c.n_tokens, dtype=bool)
        outside[c.group_slice(name)] = False
        local_ok &= np.array_equal(state.tokens[outside], nxt.tokens[outside])
    a = decode(feats, PromptSet(), c, w)
    b = decode(feats, PromptSet(), c, w)
    stable = all(np.array_equal(getattr(a, k), getattr(b, k)) for k in ("params", "bbox", "confidence"))
    passed = shape_ok and rows_ok and local_ok and stable
    return SuiteResult("decoder_mechanics", bool(passed),
                       f"full-scale shape ok={shape_ok}; softmax rows ok={rows_ok}; feedback locality={local_ok}; "
                       f"bit-stable={stable}")


def check_metrics(seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    K = 8
    gts, dets = [], []
    worst_pa = 0.0
    pcks = []
    for _ in range(3):
        scene_g, scene_d = [], []
        for _ in range(int(rng.integers(1, 5))):
            kp = rng.uniform(0, 500, (K, 2))
            vis = rng.random(K) < 0.8
            vis[0] = True
            scene_g.append(EvalInstance(kp, vis, area=float(rng.uniform(1e3, 1e4))))
            scene_d.append(EvalInstance(kp.copy(), confidence=float(rng.random())))
            j3 = rng.standard_normal((K, 3))
            worst_pa = max(worst_pa, pa_mpjpe(j3, j3))
            pcks.append(pck(kp, kp, vis, (100.0, 80.0), EvalConfig()))
        gts.append(scene_g)
        dets.append(scene_d)
    ap = average_precision(dets, gts)
    empty = average_precision([[] for _ in gts], gts)
    passed = worst_pa <= 1e-12 and min(pcks) == 1.0 and ap.mAP == 1.0 and all(v == 1.0 for v in ap.ap.values()) \
        and empty.mAP == 0.0
    return SuiteResult("metrics_oracles", bool(passed),
                       f"perfect: PA-MPJPE {worst_pa:.1e}, PCK {min(pcks):g}, mAP {ap.mAP:g}; empty mAP {empty.mAP:g}")


def run_suites(template_path=None, seed: int = 0) -> list[SuiteResult]:
    suites = [
        lambda: check_matcher(seed=seed),
        lambda: check_body_model(seed=seed),
        lambda: check_template_loader(template_path),
        lambda: check_procrustes(seed=seed),
        lambda: check_losses(seed=seed),
        lambda: check_layout(seed=seed),
        lambda: check_dropout(seed=seed),
        lambda: check_decoder(seed=seed),
        lambda: check_metrics(seed=seed),
    ]
    results = []
    for suite in suites:
        t0 = time.perf_counter()
        try:
            res = suite()
        except Exception as exc:  # a crashing suite is a failing suite
            res = SuiteResult(getattr(suite, "__name__", "suite"), False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


def format_results(results: list[SuiteResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24}{r.seconds:6.2f}s  {r.detail}" for r in results]
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} suites passed")
    return "\n".join(lines) + "\n"
