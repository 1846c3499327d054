"""Clutter scene generation, paired grasp trials and report emission.

Every (category, trial) pair gets its own scene seed spawned from the master
seed, and all modes of that pair run on the same scene and the same noisy
depth image, so mode differences are paired comparisons.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .completion import CompletionConfig, fit_completion, silhouette_freespace
from .errors import ConfigError, ObjectNotVisibleAlone, PlacementFailed, ShapeGraspError
from .geometry.mesh import TriangleMesh, watertight_check
from .geometry.pointcloud import chamfer_bidirectional
from .geometry.transforms import RigidTransform
from .grasping import (
    GripperModel,
    attempt_sequence,
    evaluate_grasp_success,
    rank_and_select,
    sample_antipodal_grasps,
)
from .priors import CATEGORIES, LatentShape, latent_mesh, sample_latent
from .sensor import (
    DEFAULT_WORKSPACE,
    CameraModel,
    DepthImage,
    Scene,
    SceneObject,
    apply_depth_noise,
    default_camera,
    extract_object_cloud,
    projected_roi,
    render_depth,
    resolve_prompt,
)

MODES = ("no_completion", "completion", "oracle_gt")
CLUTTER_LEVELS = ("easy", "normal", "hard")


@dataclass(frozen=True)
class ClutterLevel:
    clearance_mm: float     # minimum surface-to-surface gap
    region_mm: float        # half-width of the square the objects are dropped into
    clutter_objects: int    # distractors added next to the target by run_experiment
    min_occlusion: float = 0.0
    max_occlusion: float = 0.85


CLUTTER = {
    "easy": ClutterLevel(40.0, 220.0, 2),
    "normal": ClutterLevel(10.0, 170.0, 3),
    "hard": ClutterLevel(2.0, 140.0, 4, min_occlusion=0.3),
}
MAX_REJECTIONS = 10_000
MIN_TARGET_PIXELS = 150
NO_COMPLETION_JUMP_MM = 10.0
CHAMFER_SAMPLES = 5000
GAP_SAMPLES = 1500
OCCLUDER_TRIES = 25


@dataclass(frozen=True)
class SceneSpec:
    clutter: str
    categories: tuple[str, ...]
    seed: int
    workspace_lo: tuple[float, float, float] = DEFAULT_WORKSPACE[0]
    workspace_hi: tuple[float, float, float] = DEFAULT_WORKSPACE[1]

    def __post_init__(self):
        if self.clutter not in CLUTTER:
            raise ConfigError(f"clutter must be one of {CLUTTER_LEVELS}")
        if not 1 <= len(self.categories) <= 12:
            raise ConfigError("a scene holds 1 to 12 objects")
        for c in self.categories:
            if c not in CATEGORIES:
                raise ConfigError(f"unknown category {c!r}")


# --- scenes --------------------------------------------------------------------------


def _footprint_radius(shape: LatentShape) -> float:
    lo, hi = shape.aabb()
    return float(np.hypot(max(abs(lo[0]), abs(hi[0])), max(abs(lo[1]), abs(hi[1]))))


@functools.lru_cache(maxsize=512)
def _local_samples(category: str, params: tuple) -> np.ndarray:
    shape = LatentShape(category, params)
    return latent_mesh(shape).sample_surface(GAP_SAMPLES, np.random.default_rng(0))[0]


def _surface_gap(a: SceneObject, b: SceneObject) -> float:
    """Approximate surface clearance from each object's samples against the other's SDF."""
    pa = a.pose.apply(_local_samples(a.category, a.shape.params))
    pb = b.pose.apply(_local_samples(b.category, b.shape.params))
    return min(float(b.sdf_world(pa).min()), float(a.sdf_world(pb).min()))


def _solo_and_full_counts(scene: Scene, target_id: int, camera: CameraModel,
                          full: DepthImage | None) -> tuple[int, int]:
    roi = projected_roi(scene.get(target_id).world_mesh, camera)
    if roi is None:
        return 0, 0
    alone = render_depth(scene.only(target_id), camera, roi).pixel_count(target_id)
    if full is None:
        full = render_depth(scene, camera, roi)
    return alone, full.pixel_count(target_id)


def occlusion_fraction(scene: Scene, target_id: int, camera: CameraModel | None = None,
                       full: DepthImage | None = None) -> float:
    """Share of the target's solo-view pixels hidden by the rest of the scene.

    ``full`` may pass in an existing render of the whole scene from ``camera``.

    Raises:
        ObjectNotVisibleAlone: the target shows no pixels even on its own.
    """
    camera = scene.camera if camera is None else camera
    alone, seen = _solo_and_full_counts(scene, target_id, camera, full)
    if alone == 0:
        raise ObjectNotVisibleAlone(f"object {target_id} is out of view")
    return float(min(1.0, max(0.0, 1.0 - seen / alone)))


def _place(shape: LatentShape, obj_id: int, category: str, placed: list[SceneObject],
           level: ClutterLevel, rng: np.random.Generator, spec: SceneSpec,
           near: tuple[np.ndarray, float] | None = None) -> tuple[SceneObject | None, int]:
    """Rejection-sample one resting pose; returns the object (or None) and the draws used."""
    r_new = _footprint_radius(shape)
    ws_lo = np.asarray(spec.workspace_lo)
    ws_hi = np.asarray(spec.workspace_hi)
    for draw in range(1, 201):
        if near is None:
            xy = rng.uniform(-level.region_mm, level.region_mm, 2)
        else:
            # drop on a short arc toward the camera from the target
            toward, r_t = near
            # bounding circles overstate footprints; the surface-gap test below rejects overlaps
            dist = rng.uniform(0.5, 1.0) * (r_t + r_new) + level.clearance_mm
            ang = math.atan2(toward[1], toward[0]) + rng.uniform(-0.35, 0.35)
            xy = placed[0].pose.translation[:2] + dist * np.array([math.cos(ang), math.sin(ang)])
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        pose = RigidTransform.from_planar(xy[0], xy[1], -shape.bottom_z(), yaw)
        cand = SceneObject(obj_id, category, shape, pose)
        local = pose.apply(_local_samples(category, shape.params))
        lo, hi = local.min(axis=0), local.max(axis=0)
        if np.any(lo[:2] < ws_lo[:2]) or np.any(hi[:2] > ws_hi[:2]) or hi[2] > ws_hi[2]:
            continue
        ok = True
        for other in placed:
            centre_gap = float(np.linalg.norm(other.pose.translation[:2] - xy))
            if centre_gap > _footprint_radius(other.shape) + r_new + level.clearance_mm:
                continue
            if _surface_gap(cand, other) < level.clearance_mm:
                ok = False
                break
        if ok:
            return cand, draw
    return None, 200


def _height(shape: LatentShape) -> float:
    lo, hi = shape.aabb()
    return float(hi[2] - lo[2])


def generate_scene(spec: SceneSpec, rng: np.random.Generator | None = None) -> Scene:
    """Drop the requested objects on the table at the clutter level's spacing.

    Object ids follow the order of ``spec.categories``; object 1 is the
    target. In ``hard`` scenes the tallest distractor is dropped first,
    between the camera and object 1, and redrawn until object 1 is at least
    30% occluded.

    Raises:
        PlacementFailed: more than 10^4 rejected draws.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    level = CLUTTER[spec.clutter]
    camera = default_camera()
    used = 0
    while used < MAX_REJECTIONS:
        shapes = [sample_latent(c, rng) for c in spec.categories]
        order = list(range(len(shapes)))
        occluder = None
        if level.min_occlusion > 0 and len(shapes) > 1:
            occluder = max(order[1:], key=lambda k: (_height(shapes[k]), -k))
            order = [0, occluder] + [k for k in order[1:] if k != occluder]
        placed: list[SceneObject] = []
        alone = 0
        for k in order:
            cat, shape = spec.categories[k], shapes[k]
            near = None
            tries = 1
            if k == occluder:
                toward = camera.center[:2] - placed[0].pose.translation[:2]
                near = (toward, _footprint_radius(placed[0].shape))
                tries = OCCLUDER_TRIES
                roi = projected_roi(placed[0].world_mesh, camera)
                alone = render_depth(Scene((placed[0],)), camera, roi).pixel_count(1) if roi else 0
            obj = None
            for _ in range(tries):
                obj, draws = _place(shape, k + 1, cat, placed, level, rng, spec, near)
                used += draws
                if obj is None or near is None:
                    break
                if alone:
                    seen = render_depth(Scene((placed[0], obj)), camera, roi).pixel_count(1)
                    if 1.0 - seen / alone >= level.min_occlusion:
                        break
                obj = None
            if obj is None:
                break
            placed.append(obj)
        if len(placed) < len(shapes):
            continue
        scene = Scene(tuple(sorted(placed, key=lambda o: o.id)), spec.workspace_lo, spec.workspace_hi)
        alone, seen = _solo_and_full_counts(scene, 1, camera, None)
        if seen < MIN_TARGET_PIXELS:
            used += 1
            continue
        occ = 1.0 - seen / alone if len(placed) > 1 else 0.0
        if not (level.min_occlusion <= occ <= level.max_occlusion):
            used += 1
            continue
        return scene
    raise PlacementFailed(f"{spec.clutter} scene with {len(spec.categories)} objects: {MAX_REJECTIONS} rejections")


# --- trials --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialConfig:
    completion: CompletionConfig = field(default_factory=CompletionConfig)
    gripper: GripperModel = field(default_factory=GripperModel)
    cone_half_angle_deg: float = 40.0
    top_k: int = 5
    grasp_attempts: int = 300
    depth_noise_sigma: float = 2.0
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if not 0 <= self.cone_half_angle_deg <= 180:
            raise ConfigError("cone_half_angle_deg must lie in [0, 180]")
        if self.grasp_attempts < 1:
            raise ConfigError("grasp_attempts must be >= 1")
        if self.depth_noise_sigma < 0 or not 0 <= self.dropout_rate < 1:
            raise ConfigError("noise settings out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["completion"] = self.completion.to_dict()
        d["gripper"] = self.gripper.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown trial keys: {sorted(unknown)}")
        d = dict(d)
        if "completion" in d:
            d["completion"] = CompletionConfig.from_dict(d["completion"])
        if "gripper" in d:
            d["gripper"] = GripperModel.from_dict(d["gripper"])
        return cls(**d)


@dataclass(frozen=True)
class TrialRecord:
    scene_seed: int
    category: str
    clutter: str
    trial: int
    mode: str
    target_id: int | None
    occlusion_fraction: float | None
    chamfer_mm: float | None
    reconstruction_valid: bool | None
    grasp: dict | None
    attempts: int
    outcome: str            # success | failure | invalid
    reason: str | None = None

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def to_dict(self) -> dict:
        return asdict(self)


def partial_surface_mesh(image: DepthImage, camera: CameraModel, object_id: int,
                         max_jump_mm: float = NO_COMPLETION_JUMP_MM) -> TriangleMesh:
    """Open world-frame mesh joining neighbouring pixels of one object.

    Each pixel quad contributes up to two triangles; a triangle is dropped when
    any vertex lies outside the mask or two of its ranges differ by more than
    ``max_jump_mm``. Triangles face the camera.
    """
    mask = image.instance == object_id
    h, w = mask.shape
    idx = -np.ones((h, w), dtype=np.int64)
    idx[mask] = np.arange(int(mask.sum()))
    pts = (camera.pixel_rays() * image.depth[..., None])[mask]
    depth = image.depth
    tris = []
    a, b, c, d = idx[:-1, :-1], idx[:-1, 1:], idx[1:, :-1], idx[1:, 1:]
    da, db, dc, dd = depth[:-1, :-1], depth[:-1, 1:], depth[1:, :-1], depth[1:, 1:]
    for (i0, i1, i2), (r0, r1, r2) in (((a, c, b), (da, dc, db)), ((b, c, d), (db, dc, dd))):
        ok = (i0 >= 0) & (i1 >= 0) & (i2 >= 0)
        spread = np.maximum(np.maximum(r0, r1), r2) - np.minimum(np.minimum(r0, r1), r2)
        ok &= spread <= max_jump_mm
        tris.append(np.column_stack([i0[ok], i1[ok], i2[ok]]))
    tri = np.vstack(tris) if tris else np.zeros((0, 3), dtype=np.int64)
    mesh = TriangleMesh(pts, tri, "camera")
    if mesh.n_triangles:
        # orient toward the camera (origin of the camera frame)
        n = mesh.face_normals()
        cen = mesh.vertices[tri].mean(axis=1)
        flip = np.einsum("ij,ij->i", n, cen) > 0
        tri = tri.copy()
        tri[flip] = tri[flip][:, [0, 2, 1]]
        mesh = TriangleMesh(pts, tri, "camera")
    return mesh.transformed(camera.pose, "world").drop_degenerate()


def _observe(scene: Scene, config: TrialConfig, scene_seed: int) -> tuple[DepthImage, DepthImage]:
    clean = render_depth(scene)
    noise_rng = np.random.default_rng([scene_seed, 1])
    return clean, apply_depth_noise(clean, config.depth_noise_sigma, config.dropout_rate, noise_rng)


def _chamfer_to_truth(mesh: TriangleMesh, truth: TriangleMesh, seed: int) -> float:
    rng = np.random.default_rng([seed, 7])
    a = mesh.sample_surface(CHAMFER_SAMPLES, rng)[0]
    b = truth.sample_surface(CHAMFER_SAMPLES, rng)[0]
    return chamfer_bidirectional(a, b).value_mm


def run_trial(scene: Scene, prompt: str, mode: str, config: TrialConfig, rng: np.random.Generator,
              scene_seed: int = 0, category: str = "", clutter: str = "", trial: int = 0,
              observed: tuple[DepthImage, DepthImage] | None = None) -> TrialRecord:
    """Sense, segment, (complete,) plan and judge one grasp; always returns a record.

    Pipeline errors (no match, no visible points, no grasp, all infeasible)
    end the trial as a failure carrying the error name as its reason.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}")
    clean, noisy = _observe(scene, config, scene_seed) if observed is None else observed
    rec = dict(scene_seed=scene_seed, category=category, clutter=clutter, trial=trial, mode=mode,
               target_id=None, occlusion_fraction=None, chamfer_mm=None, reconstruction_valid=None,
               grasp=None, attempts=0)
    try:
        tid, cat = resolve_prompt(prompt, scene, image=noisy)
        rec["target_id"] = tid
        rec["category"] = category or cat
        rec["occlusion_fraction"] = occlusion_fraction(scene, tid, full=clean)
        cam = scene.camera
        truth = scene.get(tid).world_mesh
        if mode == "oracle_gt":
            mesh = truth
        elif mode == "no_completion":
            extract_object_cloud(noisy, cam, tid)
            mesh = partial_surface_mesh(noisy, cam, tid)
        else:
            cloud = extract_object_cloud(noisy, cam, tid)
            world = cloud.transformed(cam.pose, "world")
            extra = silhouette_freespace(noisy, cam, tid, config.completion, world.points)
            result = fit_completion(world, cat, cam, config.completion, rng, extra_freespace=extra)
            mesh = result.completed_mesh
            rec["reconstruction_valid"] = watertight_check(mesh).valid
            rec["chamfer_mm"] = _chamfer_to_truth(mesh, truth, scene_seed)
        cands = sample_antipodal_grasps(mesh, config.gripper, config.grasp_attempts, rng)
        ranked = rank_and_select(cands, config.cone_half_angle_deg, config.top_k)
        grasp, attempts = attempt_sequence(ranked, scene, tid, config.gripper)
        rec["grasp"] = grasp.to_dict()
        rec["attempts"] = attempts
        verdict = evaluate_grasp_success(scene, tid, grasp, config.gripper)
        rec["outcome"] = "success" if verdict.ok else "failure"
        rec["reason"] = verdict.reason
    except ShapeGraspError as err:
        rec["outcome"] = "failure"
        rec["reason"] = err.reason
        if rec["attempts"] == 0 and err.reason == "AllInfeasible":
            rec["attempts"] = config.top_k
    return TrialRecord(**rec)


# --- experiments ---------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    categories: tuple[str, ...] = CATEGORIES
    trials: int = 10
    clutter: tuple[str, ...] = ("normal", "hard")
    modes: tuple[str, ...] = ("completion", "no_completion")
    seed: int = 0
    trial: TrialConfig = field(default_factory=TrialConfig)
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "clutter", tuple(self.clutter))
        object.__setattr__(self, "modes", tuple(self.modes))
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not self.categories or any(c not in CATEGORIES for c in self.categories):
            raise ConfigError(f"categories must be drawn from {CATEGORIES}")
        if not self.clutter or any(c not in CLUTTER for c in self.clutter):
            raise ConfigError(f"clutter levels must be drawn from {CLUTTER_LEVELS}")
        if not self.modes or any(m not in MODES for m in self.modes):
            raise ConfigError(f"modes must be drawn from {MODES}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def to_dict(self) -> dict:
        return {"categories": list(self.categories), "trials": self.trials, "clutter": list(self.clutter),
                "modes": list(self.modes), "seed": self.seed, "trial": self.trial.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        d = dict(d)
        if "trial" in d:
            d["trial"] = TrialConfig.from_dict(d["trial"])
        return cls(**d)


def trial_seeds(seed: int, categories, trials: int) -> dict[tuple[str, int], int]:
    """Independent 63-bit scene seeds for every (category, trial) pair."""
    children = np.random.SeedSequence(seed).spawn(len(categories) * trials)
    out = {}
    for ci, cat in enumerate(categories):
        for t in range(trials):
            out[(cat, t)] = int(children[ci * trials + t].generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
    return out


def distractors(category: str, count: int, rng: np.random.Generator) -> tuple[str, ...]:
    """Clutter categories, never repeating the target's, so the prompt stays unique."""
    pool = [c for c in CATEGORIES if c != category]
    return tuple(pool[i] for i in rng.integers(0, len(pool), count))


def _scene_task(args) -> list[TrialRecord]:
    cat, t, clutter, scene_seed, modes, tconf = args
    rng = np.random.default_rng(scene_seed)
    level = CLUTTER[clutter]
    try:
        spec = SceneSpec(clutter, (cat,) + distractors(cat, level.clutter_objects, rng), scene_seed)
        scene = generate_scene(spec, rng)
    except PlacementFailed:
        return [TrialRecord(scene_seed, cat, clutter, t, m, None, None, None, None, None, 0, "invalid",
                            "PlacementFailed") for m in modes]
    observed = _observe(scene, tconf, scene_seed)
    return [run_trial(scene, cat, m, tconf, np.random.default_rng([scene_seed, MODES.index(m)]),
                      scene_seed, cat, clutter, t, observed) for m in modes]


@dataclass(frozen=True)
class CellStats:
    category: str
    mode: str
    successes: int
    failures: int
    invalid: int

    @property
    def valid(self) -> bool:
        return self.invalid == 0 and self.successes + self.failures > 0

    @property
    def success_pct(self) -> float:
        n = self.successes + self.failures
        return 100.0 * self.successes / n if n else float("nan")


@dataclass(frozen=True)
class ExperimentReport:
    config: dict
    records: tuple[TrialRecord, ...]
    cells: tuple[CellStats, ...]
    mode_average_pct: dict
    reconstruction: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "cells": [dict(asdict(c), success_pct=c.success_pct, valid=c.valid) for c in self.cells],
            "mode_average_pct": self.mode_average_pct,
            "reconstruction": self.reconstruction,
            "records": [r.to_dict() for r in self.records],
        }


def aggregate(records, categories, modes) -> tuple[tuple[CellStats, ...], dict]:
    """S/F per (category, mode) and per-mode mean of valid cell S%."""
    cells = []
    for cat in categories:
        for mode in modes:
            rs = [r for r in records if r.category == cat and r.mode == mode]
            s = sum(r.outcome == "success" for r in rs)
            f = sum(r.outcome == "failure" for r in rs)
            bad = sum(r.outcome == "invalid" for r in rs)
            cells.append(CellStats(cat, mode, s, f, bad))
    avg = {}
    for mode in modes:
        vals = [c.success_pct for c in cells if c.mode == mode and c.valid]
        avg[mode] = float(np.mean(vals)) if vals else float("nan")
    return tuple(cells), avg


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Paired grasp trials over categories x trials; clutter levels cycle with the trial index."""
    seeds = trial_seeds(config.seed, config.categories, config.trials)
    tasks = [(cat, t, config.clutter[t % len(config.clutter)], seeds[(cat, t)], config.modes, config.trial)
             for cat in config.categories for t in range(config.trials)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            batches = list(pool.map(_scene_task, tasks))
    else:
        batches = [_scene_task(t) for t in tasks]
    records = tuple(r for batch in batches for r in batch)
    cells, avg = aggregate(records, config.categories, config.modes)
    return ExperimentReport(config.to_dict(), records, cells, avg)


# --- reconstruction ------------------------------------------------------------------

OCCLUSION_BINS = (0.0, 0.15, 0.3, 0.45, 1.0 + 1e-9)


@dataclass(frozen=True)
class ReconstructionRecord:
    category: str
    clutter: str
    trial: int
    scene_seed: int
    occlusion_fraction: float | None
    chamfer_mm: float | None
    valid_mesh: bool
    reason: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _recon_task(args) -> ReconstructionRecord:
    cat, clutter, t, scene_seed, tconf = args
    rng = np.random.default_rng(scene_seed)
    level = CLUTTER[clutter]
    occ = None
    try:
        spec = SceneSpec(clutter, (cat,) + distractors(cat, level.clutter_objects, rng), scene_seed)
        scene = generate_scene(spec, rng)
        clean, noisy = _observe(scene, tconf, scene_seed)
        occ = occlusion_fraction(scene, 1, full=clean)
        cam = scene.camera
        world = extract_object_cloud(noisy, cam, 1).transformed(cam.pose, "world")
        extra = silhouette_freespace(noisy, cam, 1, tconf.completion, world.points)
        result = fit_completion(world, cat, cam, tconf.completion, rng, extra_freespace=extra)
        cd = _chamfer_to_truth(result.completed_mesh, scene.get(1).world_mesh, scene_seed)
        return ReconstructionRecord(cat, clutter, t, scene_seed, occ, cd, watertight_check(result.completed_mesh).valid)
    except ShapeGraspError as err:
        return ReconstructionRecord(cat, clutter, t, scene_seed, occ, None, False, err.reason)


def reconstruction_report(categories, clutter_levels, trials: int, seed: int,
                          config: TrialConfig | None = None, workers: int = 1) -> dict:
    """Per (category, clutter) mean Chamfer and valid-mesh rate, plus occlusion-binned means."""
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    config = TrialConfig() if config is None else config
    categories = tuple(categories)
    clutter_levels = tuple(clutter_levels)
    seeds = trial_seeds(seed + 1, categories, trials * len(clutter_levels))
    tasks = [(cat, cl, t, seeds[(cat, li * trials + t)], config)
             for cat in categories for li, cl in enumerate(clutter_levels) for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            recs = list(pool.map(_recon_task, tasks))
    else:
        recs = [_recon_task(t) for t in tasks]
    cells = []
    for cat in categories:
        for cl in clutter_levels:
            rs = [r for r in recs if r.category == cat and r.clutter == cl]
            cds = [r.chamfer_mm for r in rs if r.chamfer_mm is not None]
            cells.append({
                "category": cat, "clutter": cl, "trials": len(rs),
                "mean_chamfer_mm": float(np.mean(cds)) if cds else float("nan"),
                "success_pct": 100.0 * sum(r.valid_mesh for r in rs) / len(rs),
            })
    bins = []
    for lo, hi in zip(OCCLUSION_BINS[:-1], OCCLUSION_BINS[1:]):
        cds = [r.chamfer_mm for r in recs
               if r.chamfer_mm is not None and r.occlusion_fraction is not None and lo <= r.occlusion_fraction < hi]
        bins.append({"occlusion_lo": lo, "occlusion_hi": min(hi, 1.0), "count": len(cds),
                     "mean_chamfer_mm": float(np.mean(cds)) if cds else float("nan")})
    return {"cells": cells, "occlusion_bins": bins, "records": [r.to_dict() for r in recs]}


# --- report files --------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.4f}"
    return str(x)


def report_csv(report: ExperimentReport) -> str:
    """One row per grasp cell, one per mode average, one per reconstruction cell."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "category", "mode", "clutter", "S", "F", "S_pct", "invalid",
                "mean_chamfer_mm", "reconstruction_success_pct"])
    for c in report.cells:
        w.writerow(["grasp", c.category, c.mode, "", c.successes, c.failures, _fmt(c.success_pct),
                    c.invalid, "", ""])
    for mode, v in report.mode_average_pct.items():
        w.writerow(["average", "", mode, "", "", "", _fmt(v), "", "", ""])
    for cell in report.reconstruction.get("cells", []):
        w.writerow(["reconstruction", cell["category"], "", cell["clutter"], "", "", "", "",
                    _fmt(cell["mean_chamfer_mm"]), _fmt(cell["success_pct"])])
    for b in report.reconstruction.get("occlusion_bins", []):
        w.writerow(["occlusion_bin", "", "", f"{b['occlusion_lo']:.2f}-{b['occlusion_hi']:.2f}", b["count"],
                    "", "", "", _fmt(b["mean_chamfer_mm"]), ""])
    return buf.getvalue()


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def write_run(out_dir, report: ExperimentReport) -> Path:
    """runs/<name>/{config.json, records.jsonl, report.csv, report.json}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(report.config, indent=2, sort_keys=True) + "\n")
    lines = [json.dumps(r.to_dict(), sort_keys=True, default=_json_default) for r in report.records]
    (out / "records.jsonl").write_text("".join(line + "\n" for line in lines))
    (out / "report.csv").write_text(report_csv(report))
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True,
                                                default=_json_default) + "\n")
    return out


def latent_resting_pose(shape: LatentShape, x: float, y: float, yaw: float) -> RigidTransform:
    """Planar pose that sets ``shape`` on the table at (x, y)."""
    return RigidTransform.from_planar(x, y, -shape.bottom_z(), yaw)


__all__ = [
    "CLUTTER", "ExperimentConfig", "ExperimentReport", "SceneSpec", "TrialConfig", "TrialRecord",
    "aggregate", "generate_scene", "occlusion_fraction", "partial_surface_mesh",
    "reconstruction_report", "report_csv", "run_experiment", "run_trial", "write_run",
]
