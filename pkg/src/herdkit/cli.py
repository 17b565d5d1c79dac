"""Command-line entry point: synth, decode, match, eval, selfcheck.

Every command resolves its configuration as built-in defaults, then the
``--config`` file (JSON or YAML), then command-line flags, and writes the
resolved record into each output it produces.

Exit codes: 0 success, 1 validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import functools
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from .body_model import TemplateConfig, TemplateError, TemplateModel, load_template, make_toy_template
from .decoder_core import (
    DecoderConfig,
    DropoutConfig,
    PromptSet,
    apply_prompt_dropout,
    decode,
    init_weights,
    load_weights,
    prompts_from_annotations,
    stub_encode,
)
from .instance_matcher import (
    GroundTruthInstance,
    InstancePrediction,
    InsufficientHypothesesError,
    MatchWeights,
    assignment_cost,
    brute_force_assignment,
    cost_matrix,
    hungarian,
    injection_count,
    match_cost,
)
from .losses import LossWeights, total_loss
from .metrics import DegenerateAlignmentError, EvalConfig, EvalInstance, average_precision, pa_mpjpe, pck
from .projection import BBox, PerspectiveCamera
from .scene_synthesizer import (
    LayoutConfig,
    LayoutError,
    SceneAnnotation,
    SceneInstance,
    SchemaError,
    assemble_scene,
    loads_scene,
    make_pose_pool,
    make_shape_pool,
    occlusion_stats,
    rasterize,
    scene_to_dict,
)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
SCENE_GLOB = "scene_*.json"
MAX_VERIFY_INJECTIONS = 1_000_000


class ValidationFailure(Exception):
    """Input or configuration is well-formed on disk but semantically invalid."""


def _decoder_defaults() -> dict:
    d = asdict(DecoderConfig())
    for k in ("n_prompt_keypoints", "n_out_keypoints", "n_betas", "n_joints"):
        d.pop(k)  # taken from the template
    d["n_instances"] = 8  # one slot per animal at the default max group size
    d["weights_path"] = None
    return d


def default_config() -> dict:
    layout = asdict(LayoutConfig())
    layout["depth_intervals"] = [list(iv) for iv in LayoutConfig().intervals()]
    ev = asdict(EvalConfig())
    ev["visibility_buckets"] = None  # default: thirds of the keypoint count
    return {
        "seed": 0,
        "num_scenes": 10,
        "template": {"preset": "desk", "path": None, "seed": 0},
        "pools": {"n_species": 8, "n_poses": 32, "pose_spread": 0.2},
        "camera": {"focal": PerspectiveCamera().focal, "image_size": list(PerspectiveCamera().image_size)},
        "layout": layout,
        "match": asdict(MatchWeights()),
        "loss": asdict(LossWeights()),
        "eval": ev,
        "decoder": _decoder_defaults(),
        "dropout": asdict(DropoutConfig()),
        "prompts": {"mode": "none", "file": None},
        "train_mode": False,
    }


def _merge(base: dict, override: dict, where: str = "config") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ValidationFailure(f"{where}: unknown key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def read_config_file(path) -> dict:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ValidationFailure(f"{path}: cannot parse config ({exc})") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValidationFailure(f"{path}: config must be a mapping")
    return data


def resolve_config(file_config: dict | None = None, flags: dict | None = None) -> dict:
    cfg = _merge(default_config(), file_config or {})
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    if "seed" in flags:
        cfg["seed"] = int(flags["seed"])
    if "num_scenes" in flags:
        cfg["num_scenes"] = int(flags["num_scenes"])
    if "max_animals" in flags:
        cfg["layout"]["max_animals"] = int(flags["max_animals"])
        if "min_animals" not in flags:
            cfg["layout"]["min_animals"] = min(cfg["layout"]["min_animals"], int(flags["max_animals"]))
    if "min_animals" in flags:
        cfg["layout"]["min_animals"] = int(flags["min_animals"])
    if "prompts" in flags:
        cfg["prompts"]["mode"] = flags["prompts"]
    if "prompts_file" in flags:
        cfg["prompts"]["file"] = str(flags["prompts_file"])
    if flags.get("train_mode"):
        cfg["train_mode"] = True
    if "weights" in flags:
        cfg["decoder"]["weights_path"] = str(flags["weights"])
    if "template" in flags:
        cfg["template"]["path"] = str(flags["template"])
    return cfg


# ---------------------------------------------------------------------------
# objects from the resolved config


def layout_config(cfg: dict) -> LayoutConfig:
    d = dict(cfg["layout"])
    for k in ("tx_range", "tz_range", "pitch_range", "yaw_range"):
        d[k] = tuple(d[k])
    if d.get("depth_intervals") is not None:
        d["depth_intervals"] = tuple(tuple(iv) for iv in d["depth_intervals"])
    try:
        return LayoutConfig(**d)
    except TypeError as exc:
        raise ValidationFailure(f"layout: {exc}") from exc


def eval_config(cfg: dict) -> EvalConfig:
    d = {k: v for k, v in cfg["eval"].items() if k != "visibility_buckets"}
    d["ap_thresholds"] = tuple(d["ap_thresholds"])
    if d.get("oks_sigmas") is not None:
        d["oks_sigmas"] = tuple(d["oks_sigmas"])
    return EvalConfig(**d)


@functools.lru_cache(maxsize=4)
def _preset_template(preset: str, seed: int) -> TemplateModel:
    if preset == "desk":
        return make_toy_template(TemplateConfig(seed=seed))
    if preset == "full":
        return make_toy_template(TemplateConfig.full_scale())
    raise ValidationFailure(f"unknown template preset {preset!r} (desk or full)")


def template_from_config(cfg: dict) -> TemplateModel:
    t = cfg["template"]
    if t.get("path"):
        return load_template(t["path"])
    return _preset_template(t["preset"], int(t.get("seed", 0)))


def camera_from_config(cfg: dict) -> PerspectiveCamera:
    return PerspectiveCamera.centered(tuple(cfg["camera"]["image_size"]), float(cfg["camera"]["focal"]))


def decoder_config(cfg: dict, template: TemplateModel) -> DecoderConfig:
    d = {k: v for k, v in cfg["decoder"].items() if k != "weights_path"}
    d["group_sizes"] = tuple(d["group_sizes"])
    d["grid"] = tuple(d["grid"])
    K = template.n_keypoints
    return DecoderConfig(n_prompt_keypoints=K, n_out_keypoints=K, n_betas=template.n_betas,
                         n_joints=template.n_joints, **d)


# ---------------------------------------------------------------------------
# file helpers


def scene_name(index: int) -> str:
    return f"scene_{index:05d}.json"


def write_json(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=1, allow_nan=False) + "\n")


def write_scene(path: Path, scene: SceneAnnotation, cfg: dict) -> None:
    record = scene_to_dict(scene)
    record["run_config"] = cfg
    path.write_text(json.dumps(record, allow_nan=False) + "\n")


def read_scene_dir(path) -> dict[str, SceneAnnotation]:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: not a directory")
    return {f.stem: loads_scene(f.read_text(), where=f.name) for f in sorted(root.glob(SCENE_GLOB))}


def _paired_scenes(annotations, predictions) -> list[tuple[str, SceneAnnotation, SceneAnnotation]]:
    gts, preds = read_scene_dir(annotations), read_scene_dir(predictions)
    missing = sorted(set(gts) ^ set(preds))
    if missing:
        raise ValidationFailure(f"scene ids present on one side only: {', '.join(missing[:5])}")
    return [(k, gts[k], preds[k]) for k in sorted(gts)]


def _null(x: float):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _size(scene: SceneAnnotation) -> np.ndarray:
    return np.asarray(scene.image_size, dtype=float)


def gt_instances(scene: SceneAnnotation) -> list[GroundTruthInstance]:
    wh = _size(scene)
    return [GroundTruthInstance(bbox=i.bbox, keypoints2d=i.keypoints2d / wh, visibility=i.visibility,
                                keypoints3d=i.keypoints3d, beta=i.shape, theta=i.pose, translation=i.translation)
            for i in scene.instances]


def pred_instances(scene: SceneAnnotation) -> list[InstancePrediction]:
    wh = _size(scene)
    return [InstancePrediction(bbox=i.bbox, confidence=1.0 if i.confidence is None else i.confidence,
                               keypoints2d=i.keypoints2d / wh, keypoints3d=i.keypoints3d,
                               beta=i.shape, theta=i.pose, translation=i.translation)
            for i in scene.instances]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, out) -> dict:
    """Generate ``num_scenes`` annotation files plus ``summary.json``."""
    out = Path(out)
    layout = layout_config(cfg)
    template = template_from_config(cfg)
    camera = camera_from_config(cfg)
    pools = cfg["pools"]
    shape_pool = make_shape_pool(template, int(pools["n_species"]), seed=cfg["seed"])
    pose_pool = make_pose_pool(template, int(pools["n_poses"]), seed=cfg["seed"] + 1, spread=pools["pose_spread"])
    out.mkdir(parents=True, exist_ok=True)
    counts: dict[int, int] = {}
    ious, occluded = [], []
    for idx in range(int(cfg["num_scenes"])):
        scene = assemble_scene(template, pose_pool, shape_pool, layout, cfg["seed"], idx, camera)
        write_scene(out / scene_name(idx), scene, cfg)
        n = len(scene.instances)
        counts[n] = counts.get(n, 0) + 1
        M, frac = occlusion_stats(scene)
        ious.extend(M[np.triu_indices(n, 1)].tolist())
        occluded.extend(frac.tolist())
    summary = {
        "config": cfg,
        "num_scenes": int(cfg["num_scenes"]),
        "instance_count_histogram": {str(k): counts[k] for k in sorted(counts)},
        "mean_pairwise_bbox_iou": float(np.mean(ious)) if ious else 0.0,
        "fraction_overlapping_pairs": float(np.mean(np.asarray(ious) > 0)) if ious else 0.0,
        "mean_occluded_keypoint_fraction": float(np.mean(occluded)) if occluded else 0.0,
    }
    write_json(out / "summary.json", summary)
    return summary


def _load_prompt_file(path) -> dict:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValidationFailure(f"{path}: prompt file must map scene ids to keypoint lists")
    return data


def cmd_decode(cfg: dict, annotations, out) -> dict:
    """Run the stub encoder and decoder on every scene and write one prediction file per scene."""
    out = Path(out)
    template = template_from_config(cfg)
    dcfg = decoder_config(cfg, template)
    path = cfg["decoder"].get("weights_path")
    if path:
        weights = load_weights(path)
        if weights.config != dcfg:
            raise ValidationFailure(f"{path}: weights were built for a different decoder/template config")
    else:
        weights = init_weights(dcfg, np.random.default_rng(cfg["seed"]))
    dropout = DropoutConfig(**cfg["dropout"])
    mode = cfg["prompts"]["mode"]
    if mode not in ("none", "gt-keypoints", "file"):
        raise ValidationFailure(f"unknown prompt mode {mode!r}")
    if mode == "file" and not cfg["prompts"]["file"]:
        raise ValidationFailure("--prompts file needs --prompts-file")
    prompt_file = _load_prompt_file(cfg["prompts"]["file"]) if mode == "file" else None
    scenes = read_scene_dir(annotations)
    H, W = dcfg.image_shape
    out.mkdir(parents=True, exist_ok=True)
    for name, scene in scenes.items():
        features = stub_encode(rasterize(scene, template, (W, H)), dcfg)
        wh = _size(scene)
        if mode == "gt-keypoints":
            full = prompts_from_annotations(dcfg, [i.keypoints2d / wh for i in scene.instances],
                                            [i.visibility for i in scene.instances],
                                            [i.bbox for i in scene.instances])
            prompts = PromptSet(keypoints=full.keypoints if scene.instances else None)
        elif mode == "file":
            entry = prompt_file.get(name)
            prompts = PromptSet() if not entry else PromptSet(keypoints=np.asarray(entry, dtype=float))
        else:
            prompts = PromptSet()
        if cfg["train_mode"]:
            prompts = apply_prompt_dropout(prompts, dropout, np.random.default_rng([cfg["seed"], scene.scene_seed]))
        result = decode(features, prompts, dcfg, weights)
        instances = []
        for i in range(dcfg.n_instances):
            beta, theta, translation = result.split_params(i)
            instances.append(SceneInstance(
                species_tag="", shape=beta, pose=theta, translation=translation, yaw_deg=0.0, pitch_deg=0.0,
                keypoints3d=result.keypoints3d[i], keypoints2d=result.keypoints2d[i] * wh,
                visibility=np.ones(dcfg.n_out_keypoints, dtype=bool),
                bbox=BBox.from_array(result.bbox[i]), confidence=float(result.confidence[i]),
            ))
        pred = SceneAnnotation(scene.camera, instances, scene.master_seed, scene.scene_seed, scene.scene_index)
        write_scene(out / f"{name}.json", pred, cfg)
    return {"config": cfg, "num_scenes": len(scenes), "instances_per_scene": dcfg.n_instances}


def _match_scene(gts, preds, weights: MatchWeights, loss_weights: LossWeights, verify: bool) -> dict:
    if len(gts) > len(preds):
        raise InsufficientHypothesesError(f"{len(gts)} ground truths but only {len(preds)} predictions")
    C = cost_matrix(preds, gts, weights)
    assignment = hungarian(C)
    total = assignment_cost(C, assignment) if assignment else 0.0
    pairs = [asdict(match_cost(preds[j], gts[i], weights)) for i, j in enumerate(assignment)]
    used = set(assignment)
    unmatched = [j for j in range(len(preds)) if j not in used]
    loss = total_loss([(preds[j], gts[i]) for i, j in enumerate(assignment)], [preds[j] for j in unmatched],
                      weights=loss_weights)
    record = {
        "assignment": list(assignment),
        "total_cost": total,
        "pairs": pairs,
        "unmatched": unmatched,
        "unmatched_confidence": [preds[j].confidence for j in unmatched],
        "loss": loss.as_dict(),
        "verified": None,
    }
    if verify and injection_count(len(gts), len(preds)) <= MAX_VERIFY_INJECTIONS:
        bf_assignment, bf_total = brute_force_assignment(C)
        record["verified"] = bool(bf_total == total and bf_assignment == assignment)
        record["brute_force_cost"] = bf_total
    return record


def cmd_match(cfg: dict, annotations, predictions, verify: bool = False) -> dict:
    weights = MatchWeights(**cfg["match"])
    loss_weights = LossWeights(**cfg["loss"])
    scenes = {}
    failures = []
    for name, gt, pred in _paired_scenes(annotations, predictions):
        try:
            rec = _match_scene(gt_instances(gt), pred_instances(pred), weights, loss_weights, verify)
        except InsufficientHypothesesError as exc:
            rec = {"error": str(exc)}
            failures.append(name)
        else:
            if rec["verified"] is False:
                failures.append(name)
        scenes[name] = rec
    checked = sum(1 for r in scenes.values() if r.get("verified") is not None)
    return {
        "config": cfg,
        "weights": [weights.lambda_conf, weights.lambda_bbox, weights.lambda_giou, weights.lambda_kpts],
        "focal": [weights.focal_alpha, weights.focal_gamma],
        "verify": verify,
        "verified_scenes": checked,
        "failures": failures,
        "scenes": scenes,
    }


def visibility_bucket_edges(cfg: dict, n_keypoints: int) -> tuple[float, float]:
    edges = cfg["eval"].get("visibility_buckets")
    if edges is None:
        return n_keypoints / 3.0, 2.0 * n_keypoints / 3.0
    lo, hi = (float(x) for x in edges)
    return lo, hi


def _bucket(n_visible: int, edges) -> str:
    if n_visible < edges[0]:
        return "low"
    return "mid" if n_visible < edges[1] else "high"


def _pair_for_eval(gts, preds, weights) -> list[tuple[int, int]]:
    """(gt, pred) pairs from the optimal assignment, solved on whichever side is smaller."""
    if not gts or not preds:
        return []
    if len(gts) <= len(preds):
        return list(enumerate(hungarian(cost_matrix(preds, gts, weights))))
    assignment = hungarian(cost_matrix(preds, gts, weights).T)
    return [(g, p) for p, g in enumerate(assignment)]


def _pixel_box(b: BBox, wh) -> tuple[float, float, float, float]:
    x0, y0, _, _ = b.xyxy()
    return x0 * wh[0], y0 * wh[1], b.w * wh[0], b.h * wh[1]


def _nanmean(xs) -> float:
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else math.nan


def cmd_eval(cfg: dict, annotations, predictions) -> dict:
    """Corpus PA-MPJPE, PCK, keypoint AP/mAP and per-visibility-bucket breakdown."""
    ec = eval_config(cfg)
    weights = MatchWeights(**cfg["match"])
    per_pair = []  # (bucket, pa_mpjpe, pck)
    scene_dets, scene_gts = [], []
    edges = None
    for _, gt_scene, pred_scene in _paired_scenes(annotations, predictions):
        gts, preds = gt_instances(gt_scene), pred_instances(pred_scene)
        wh = _size(gt_scene)
        for g, p in _pair_for_eval(gts, preds, weights):
            gt_inst, pr_inst = gt_scene.instances[g], pred_scene.instances[p]
            K = len(gt_inst.visibility)
            edges = edges or visibility_bucket_edges(cfg, K)
            try:
                err = pa_mpjpe(pr_inst.keypoints3d, gt_inst.keypoints3d)
            except DegenerateAlignmentError:
                err = math.nan
            score = pck(pr_inst.keypoints2d, gt_inst.keypoints2d, gt_inst.visibility,
                        gt_inst.bbox.pixel_size(gt_scene.image_size), ec)
            per_pair.append((_bucket(int(gt_inst.visibility.sum()), edges), err, score))
        scene_gts.append([EvalInstance(i.keypoints2d, i.visibility, max(i.bbox.area * wh[0] * wh[1], 1.0),
                                       box=_pixel_box(i.bbox, wh)) for i in gt_scene.instances])
        scene_dets.append([EvalInstance(i.keypoints2d, confidence=1.0 if i.confidence is None else i.confidence)
                           for i in pred_scene.instances])
    ap = average_precision(scene_dets, scene_gts, ec)
    buckets = {}
    for name in ("low", "mid", "high"):
        rows = [r for r in per_pair if r[0] == name]
        buckets[name] = {"n": len(rows), "pa_mpjpe": _null(_nanmean([r[1] for r in rows])),
                         "pck": _null(_nanmean([r[2] for r in rows]))}
    return {
        "config": cfg,
        "n_scenes": len(scene_gts),
        "n_pairs": len(per_pair),
        "pa_mpjpe": _null(_nanmean([r[1] for r in per_pair])),
        "pck": _null(_nanmean([r[2] for r in per_pair])),
        "pck_normalizer": ec.pck_normalizer,
        "ap": {f"{t:.2f}": _null(v) for t, v in ap.ap.items()},
        "mAP": _null(ap.mAP),
        "n_gt": ap.n_gt,
        "n_det": ap.n_det,
        "visibility_bucket_edges": list(edges) if edges else None,
        "buckets": buckets,
    }


def format_eval_table(report: dict) -> str:
    def f(x):
        return "nan" if x is None else f"{x:.4f}"

    lines = [f"{'metric':<12}{'value':>12}", f"{'PA-MPJPE':<12}{f(report['pa_mpjpe']):>12}",
             f"{'PCK':<12}{f(report['pck']):>12}", f"{'AP@0.50':<12}{f(report['ap'].get('0.50')):>12}",
             f"{'mAP':<12}{f(report['mAP']):>12}", "",
             f"{'bucket':<8}{'n':>6}{'PA-MPJPE':>12}{'PCK':>10}"]
    for name, b in report["buckets"].items():
        lines.append(f"{name:<8}{b['n']:>6}{f(b['pa_mpjpe']):>12}{f(b['pck']):>10}")
    return "\n".join(lines) + "\n"


def format_match_table(report: dict) -> str:
    w = report["weights"]
    lines = [f"match weights (conf, bbox, giou, kpts) = ({w[0]:g}, {w[1]:g}, {w[2]:g}, {w[3]:g}); "
             f"focal (alpha, gamma) = ({report['focal'][0]:g}, {report['focal'][1]:g})",
             f"{'scene':<14}{'M':>3}{'cost':>12}{'L_total':>10}{'L_box':>9}  verified"]
    for name, r in report["scenes"].items():
        if "error" in r:
            lines.append(f"{name:<14}  error: {r['error']}")
            continue
        v = {None: "-", True: "yes", False: "NO"}[r["verified"]]
        lines.append(f"{name:<14}{len(r['assignment']):>3}{r['total_cost']:>12.5f}"
                     f"{r['loss']['total']:>10.4f}{r['loss']['l_box']:>9.4f}  {v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument parsing


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="herdkit", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML file overriding built-in defaults")
    common.add_argument("--seed", type=int)
    common.add_argument("--template", help="template .npz file (default: procedural desk template)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate annotated scenes")
    s.add_argument("--num-scenes", type=int)
    s.add_argument("--min-animals", type=int)
    s.add_argument("--max-animals", type=int)
    s.add_argument("--out", required=True)

    d = sub.add_parser("decode", parents=[common], help="run the toy decoder on annotated scenes")
    d.add_argument("annotations")
    d.add_argument("--out", required=True)
    d.add_argument("--weights", help="decoder weights .npz (default: random weights from --seed)")
    d.add_argument("--prompts", choices=("none", "gt-keypoints", "file"))
    d.add_argument("--prompts-file")
    d.add_argument("--train-mode", action="store_true", help="apply prompt dropout")

    m = sub.add_parser("match", parents=[common], help="optimal assignment with per-pair cost breakdown")
    m.add_argument("annotations")
    m.add_argument("predictions")
    m.add_argument("--verify", action="store_true", help="check every assignment against brute force")
    m.add_argument("--out")

    e = sub.add_parser("eval", parents=[common], help="PA-MPJPE, PCK, AP and mAP")
    e.add_argument("annotations")
    e.add_argument("predictions")
    e.add_argument("--out")

    c = sub.add_parser("selfcheck", parents=[common], help="run the oracle and invariant suites")
    c.add_argument("--out")
    return p


def _resolve(args) -> dict:
    file_cfg = read_config_file(args.config) if args.config else None
    flags = {k: getattr(args, k, None) for k in ("seed", "num_scenes", "min_animals", "max_animals", "prompts",
                                                  "prompts_file", "train_mode", "weights", "template")}
    return resolve_config(file_cfg, flags)


def _write_report(out, report: dict, table: str) -> None:
    if out:
        path = Path(out)
        write_json(path, report)
        path.with_suffix(".txt").write_text(table)


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        if args.command == "synth":
            summary = cmd_synth(cfg, args.out)
            print(f"wrote {summary['num_scenes']} scenes to {args.out}; "
                  f"instance counts {summary['instance_count_histogram']}")
        elif args.command == "decode":
            summary = cmd_decode(cfg, args.annotations, args.out)
            print(f"decoded {summary['num_scenes']} scenes into {args.out}")
        elif args.command == "match":
            report = cmd_match(cfg, args.annotations, args.predictions, args.verify)
            table = format_match_table(report)
            print(table, end="")
            _write_report(args.out, report, table)
            if report["failures"]:
                print(f"match failed on {len(report['failures'])} scene(s)", file=sys.stderr)
                return EXIT_INVALID
        elif args.command == "eval":
            report = cmd_eval(cfg, args.annotations, args.predictions)
            table = format_eval_table(report)
            print(table, end="")
            _write_report(args.out, report, table)
        elif args.command == "selfcheck":
            from .selfcheck import format_results, run_suites

            results = run_suites(template_path=cfg["template"]["path"], seed=cfg["seed"])
            print(format_results(results), end="")
            if args.out:
                write_json(Path(args.out), {"config": cfg, "suites": [asdict(r) for r in results]})
            if not all(r.passed for r in results):
                return EXIT_INVALID
    except (ValidationFailure, SchemaError, LayoutError, TemplateError, InsufficientHypothesesError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
