"""``shapegrasp`` command line: gen-data, complete, grasp, experiment, report.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 degenerate input,
5 non-convergence. Log lines go to stderr as ``key=value`` pairs; stdout
carries only results.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .completion import CompletionConfig, fit_completion, silhouette_freespace
from .errors import (
    ConfigError,
    EmptyCloud,
    EmptyMesh,
    InsufficientPoints,
    NoGraspFound,
    NoMatch,
    ObjectNotVisible,
    ShapeGraspError,
)
from .geometry.io import read_cloud, read_obj, write_obj, write_ply, write_sdf
from .geometry.sdf import sdf_from_mesh
from .geometry.transforms import RigidTransform, sample_uniform_rotation
from .grasping import (
    GripperModel,
    attempt_sequence,
    rank_and_select,
    sample_antipodal_grasps,
    write_grasps_jsonl,
)
from .harness import (
    CLUTTER_LEVELS,
    MODES,
    ExperimentConfig,
    ExperimentReport,
    TrialConfig,
    TrialRecord,
    aggregate,
    reconstruction_report,
    report_csv,
    run_experiment,
    write_run,
)
from .priors import CATEGORIES, sample_latent
from .sensor import CameraModel, Scene, SceneObject, default_camera, extract_object_cloud, read_scene, render_depth, resolve_prompt

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DEGENERATE, EXIT_NO_CONVERGENCE = 0, 2, 3, 4, 5
DEGENERATE = (InsufficientPoints, EmptyCloud, EmptyMesh, ObjectNotVisible, NoMatch, NoGraspFound)


def log(**kv) -> None:
    print(" ".join(f"{k}={v}" for k, v in kv.items()), file=sys.stderr, flush=True)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _reject_unknown(cfg: dict, allowed: set, where: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def _trial_config(cfg: dict, args) -> TrialConfig:
    tc = TrialConfig.from_dict(cfg.get("trial", {}))
    if args.cone_deg is not None:
        tc = replace(tc, cone_half_angle_deg=args.cone_deg)
    if args.top_k is not None:
        tc = replace(tc, top_k=args.top_k)
    return tc


# --- gen-data --------------------------------------------------------------------------

GEN_KEYS = {"categories", "count", "seed", "sdf_resolution", "out"}


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    _reject_unknown(cfg, GEN_KEYS, "gen-data")
    categories = tuple(cfg.get("categories", CATEGORIES))
    count = int(args.count if args.count is not None else cfg.get("count", 5))
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    res = int(cfg.get("sdf_resolution", 64))
    if count < 0 or any(c not in CATEGORIES for c in categories):
        raise ConfigError("count must be >= 0 and categories known")
    out = Path(args.out or cfg.get("out", "dataset"))
    out.mkdir(parents=True, exist_ok=True)
    camera = default_camera()
    rng = np.random.default_rng(seed)
    entries = []
    for cat in categories:
        for i in range(count):
            shape = sample_latent(cat, rng)
            rot = sample_uniform_rotation(rng)
            # rest the rotated shape on the table so the plane never cuts it
            probe = SceneObject(1, cat, shape, rot).world_mesh
            pose = RigidTransform(rot.rotation, np.array([0.0, 0.0, -probe.bounds()[0][2]]))
            obj = SceneObject(1, cat, shape, pose)
            mesh = obj.world_mesh.with_frame("object")
            grid, _ = sdf_from_mesh(mesh, res)
            image = render_depth(Scene((obj,)), camera)
            stem = f"{cat}_{i:04d}"
            write_obj(out / f"{stem}.obj", mesh)
            write_sdf(out / f"{stem}.sdf", grid)
            visible = image.pixel_count(1)
            if visible:
                cloud = extract_object_cloud(image, camera, 1).transformed(camera.pose, "world")
                write_ply(out / f"{stem}.ply", cloud)
            entries.append({
                "id": stem, "category": cat, "latent": shape.to_dict(), "pose": pose.to_dict(),
                "mesh": f"{stem}.obj", "sdf": f"{stem}.sdf",
                "partial": f"{stem}.ply" if visible else None, "visible_pixels": visible,
            })
            log(event="sample", id=stem, visible_pixels=visible)
    manifest = {"seed": seed, "camera": camera.to_dict(), "entries": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(out / "manifest.json")
    return EXIT_OK


# --- complete --------------------------------------------------------------------------

COMPLETE_KEYS = {"cloud", "category", "camera", "scene", "prompt", "completion", "seed", "out"}


def cmd_complete(args) -> int:
    cfg = _load_config(args.config)
    _reject_unknown(cfg, COMPLETE_KEYS, "complete")
    conf = CompletionConfig.from_dict(cfg.get("completion", {}))
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    out = Path(args.out or cfg.get("out", "completion"))
    scene_path = args.scene or cfg.get("scene")
    category = args.category or cfg.get("category")
    rng = np.random.default_rng(seed)
    extra = None
    if scene_path:
        scene = read_scene(scene_path)
        prompt = args.prompt or cfg.get("prompt") or category
        if not prompt:
            raise ConfigError("--prompt or --category is required with --scene")
        image = render_depth(scene)
        target, resolved = resolve_prompt(prompt, scene, image)
        category = category or resolved
        camera = scene.camera
        world = extract_object_cloud(image, camera, target).transformed(camera.pose, "world")
        extra = silhouette_freespace(image, camera, target, conf, world.points)
    else:
        cloud_path = args.cloud or cfg.get("cloud")
        if not cloud_path:
            raise ConfigError("either --cloud or --scene is required")
        if category not in CATEGORIES:
            raise ConfigError(f"--category must be one of {CATEGORIES}")
        cam_path = args.camera or cfg.get("camera")
        camera = CameraModel.from_dict(json.loads(Path(cam_path).read_text())) if cam_path else default_camera()
        world = read_cloud(cloud_path, "world")
    result = fit_completion(world, category, camera, conf, rng, extra_freespace=extra)
    out.mkdir(parents=True, exist_ok=True)
    result.write(out / "result.json", out / "completed.obj")
    log(event="complete", category=category, residual_mm=f"{result.residual_mm:.4f}",
        no_convergence=result.no_convergence)
    print(f"{result.residual_mm:.6f}")
    return EXIT_NO_CONVERGENCE if result.no_convergence else EXIT_OK


# --- grasp -----------------------------------------------------------------------------

GRASP_KEYS = {"mesh", "scene", "target", "gripper", "attempts", "cone_half_angle_deg", "top_k", "seed", "out"}


def cmd_grasp(args) -> int:
    cfg = _load_config(args.config)
    _reject_unknown(cfg, GRASP_KEYS, "grasp")
    gripper = GripperModel.from_dict(cfg.get("gripper", {}))
    cone = args.cone_deg if args.cone_deg is not None else float(cfg.get("cone_half_angle_deg", 40.0))
    k = args.top_k if args.top_k is not None else int(cfg.get("top_k", 5))
    if k < 1 or not 0 <= cone <= 180:
        raise ConfigError("top_k must be >= 1 and cone within [0, 180]")
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    attempts = int(cfg.get("attempts", 300))
    mesh_path = args.mesh or cfg.get("mesh")
    if not mesh_path:
        raise ConfigError("--mesh is required")
    out = Path(args.out or cfg.get("out", "grasps"))
    mesh = read_obj(mesh_path, "world")
    cands = sample_antipodal_grasps(mesh, gripper, attempts, np.random.default_rng(seed))
    ranked = rank_and_select(cands, cone, k)
    out.mkdir(parents=True, exist_ok=True)
    write_grasps_jsonl(out / "grasps.jsonl", ranked)
    log(event="grasp", candidates=len(cands), in_cone=sum(f for _, f in ranked.entries))
    scene_path = args.scene or cfg.get("scene")
    if scene_path:
        target = args.target if args.target is not None else cfg.get("target")
        if target is None:
            raise ConfigError("--target is required with --scene")
        scene = read_scene(scene_path)
        try:
            chosen, used = attempt_sequence(ranked, scene, int(target), gripper)
        except ShapeGraspError as err:
            print(json.dumps({"chosen": None, "reason": err.reason}))
            return EXIT_OK
        print(json.dumps({"chosen": chosen.to_dict(), "attempts": used}, sort_keys=True))
    else:
        print(out / "grasps.jsonl")
    return EXIT_OK


# --- experiment ------------------------------------------------------------------------


def _experiment_config(cfg: dict, args) -> ExperimentConfig:
    _reject_unknown(cfg, {f.name for f in fields(ExperimentConfig)} | {"out"}, "experiment")
    d = {k: v for k, v in cfg.items() if k not in ("out", "trial")}
    d["trial"] = _trial_config(cfg, args)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.trials is not None:
        d["trials"] = args.trials
    if args.modes is not None:
        d["modes"] = tuple(m.strip() for m in args.modes.split(",") if m.strip())
    if args.clutter is not None:
        d["clutter"] = tuple(c.strip() for c in args.clutter.split(",") if c.strip())
    d["workers"] = args.workers if args.workers is not None else d.get("workers", os.cpu_count() or 1)
    return ExperimentConfig(**d)


def cmd_experiment(args) -> int:
    cfg = _load_config(args.config)
    conf = _experiment_config(cfg, args)
    out = Path(args.out or cfg.get("out", "runs/default"))
    log(event="experiment_start", seed=conf.seed, trials=conf.trials, modes=",".join(conf.modes),
        clutter=",".join(conf.clutter), workers=conf.workers)
    report = run_experiment(conf)
    recon = reconstruction_report(conf.categories, conf.clutter, conf.trials, conf.seed, conf.trial, conf.workers)
    report = replace(report, reconstruction=recon)
    write_run(out, report)
    line = " ".join(f"{m}={v:.2f}" for m, v in report.mode_average_pct.items())
    log(event="experiment_done", out=out)
    print(f"mode_average_pct {line}")
    return EXIT_OK


# --- report ----------------------------------------------------------------------------


def cmd_report(args) -> int:
    """Recompute the cells from records.jsonl and print report.csv to stdout."""
    run = Path(args.run or args.out or "")
    if not (run / "records.jsonl").is_file():
        raise FileNotFoundError(f"{run}: no records.jsonl")
    config = json.loads((run / "config.json").read_text())
    records = tuple(TrialRecord(**json.loads(line)) for line in (run / "records.jsonl").read_text().splitlines()
                    if line.strip())
    cells, avg = aggregate(records, config["categories"], config["modes"])
    recon = {}
    if (run / "report.json").is_file():
        recon = json.loads((run / "report.json").read_text()).get("reconstruction", {})
    sys.stdout.write(report_csv(ExperimentReport(config, records, cells, avg, recon)))
    return EXIT_OK


# --- entry -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override its values")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    common.add_argument("--modes", help=f"comma list from {','.join(MODES)}")
    common.add_argument("--trials", type=int)
    common.add_argument("--clutter", help=f"comma list from {','.join(CLUTTER_LEVELS)}")
    common.add_argument("--cone-deg", type=float, help="cone half-angle about vertical (default 40)")
    common.add_argument("--top-k", type=int, help="grasps tried in order (default 5)")

    p = argparse.ArgumentParser(prog="shapegrasp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="mesh, SDF and partial-cloud triples")
    g.add_argument("--count", type=int, help="samples per category")
    g.set_defaults(func=cmd_gen_data)
    c = sub.add_parser("complete", parents=[common], help="fit a category prior to a partial cloud")
    c.add_argument("--cloud", help="PLY or XYZ cloud in world frame")
    c.add_argument("--category", choices=CATEGORIES)
    c.add_argument("--camera", help="camera JSON (default camera if omitted)")
    c.add_argument("--scene", help="scene JSON to render instead of --cloud")
    c.add_argument("--prompt", help="target description when using --scene")
    c.set_defaults(func=cmd_complete)
    gr = sub.add_parser("grasp", parents=[common], help="sample and rank grasps on a mesh")
    gr.add_argument("--mesh", help="OBJ in world frame")
    gr.add_argument("--scene", help="scene JSON for feasibility checks")
    gr.add_argument("--target", type=int, help="target object id in --scene")
    gr.set_defaults(func=cmd_grasp)
    e = sub.add_parser("experiment", parents=[common], help="paired grasp trials plus reconstruction report")
    e.set_defaults(func=cmd_experiment)
    r = sub.add_parser("report", parents=[common], help="re-render report.csv from a run directory")
    r.add_argument("run", nargs="?", help="run directory (or use --out)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as err:
        log(error="ConfigError", detail=json.dumps(str(err)))
        return EXIT_CONFIG
    except (TypeError, KeyError) as err:
        # bad value types in a config file
        log(error="ConfigError", detail=json.dumps(str(err)))
        return EXIT_CONFIG
    except DEGENERATE as err:
        log(error=err.reason, detail=json.dumps(str(err)))
        return EXIT_DEGENERATE
    except (OSError, ValueError) as err:
        log(error="IOError", detail=json.dumps(str(err)))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
