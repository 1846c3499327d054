"""Category-level shape completion by multi-start pose and shape fitting.

A partial world-frame cloud is explained by one parametric family: the pose
and latent parameters are chosen so the family surface passes through the
observed points while leaving the free space in front of them empty.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .errors import ConfigError, EmptyCloud, InsufficientPoints
from .geometry.io import write_obj
from .geometry.mesh import TriangleMesh
from .geometry.pointcloud import PointCloud
from .geometry.transforms import RigidTransform, rotz
from .priors import FAMILIES, LatentShape, family, latent_mesh, latent_sdf, latent_sdf_params
from .sensor import CameraModel

MIN_POINTS = 20
POSE_MODES = ("planar-4dof", "full-6dof")
# initial simplex edge for latents normalised to [0, 1]
LATENT_STEP = 0.4


@dataclass(frozen=True)
class CompletionConfig:
    pose_mode: str = "planar-4dof"
    multistart_count: int = 8
    max_iters: int = 400
    converge_tol: float = 1e-3
    truncation_delta: float = 10.0
    freespace_weight: float = 0.5
    freespace_samples_per_ray: int = 2
    mesh_resolution: int = 64
    max_points: int = 400
    support_z: float | None = 0.0
    silhouette_px: int = 40
    silhouette_rays: int = 800
    silhouette_depth: float = 120.0

    def __post_init__(self):
        if self.pose_mode not in POSE_MODES:
            raise ConfigError(f"pose_mode must be one of {POSE_MODES}")
        if self.multistart_count < 1:
            raise ConfigError("multistart_count must be >= 1")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if not self.truncation_delta > 0:
            raise ConfigError("truncation_delta must be > 0")
        if self.freespace_weight < 0 or self.freespace_samples_per_ray < 0:
            raise ConfigError("free-space settings must be >= 0")
        if self.converge_tol <= 0:
            raise ConfigError("converge_tol must be > 0")
        if self.mesh_resolution < 32:
            raise ConfigError("mesh_resolution must be >= 32")
        if self.silhouette_px < 0 or self.silhouette_rays < 0 or self.silhouette_depth < 0:
            raise ConfigError("silhouette settings must be >= 0")
        if self.max_points < MIN_POINTS:
            raise ConfigError(f"max_points must be >= {MIN_POINTS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CompletionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown completion keys: {sorted(unknown)}")
        return cls(**d)


# --- loss ------------------------------------------------------------------------------


def huber(x: np.ndarray, delta: float) -> np.ndarray:
    """Quadratic below ``delta``, linear above, in mm.

    h(x) = x^2 / delta for x <= delta, else 2x - delta. Value and slope are continuous
    at the knot, where h(delta) = delta, so a uniform ``delta`` offset costs ``delta`` mm.
    """
    x = np.abs(x)
    return np.where(x <= delta, x * x / delta, 2.0 * x - delta)


def freespace_samples(points: np.ndarray, camera_center: np.ndarray, config: CompletionConfig) -> np.ndarray:
    """Points strictly between the camera and each hit, ``delta * k`` in front of it."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = config.freespace_samples_per_ray
    if m == 0 or len(p) == 0:
        return np.zeros((0, 3))
    ray = p - np.asarray(camera_center, dtype=np.float64)
    rng_ = np.linalg.norm(ray, axis=1, keepdims=True)
    unit = ray / rng_
    out = []
    for k in range(1, m + 1):
        off = config.truncation_delta * k
        keep = rng_[:, 0] > off
        out.append(p[keep] - off * unit[keep])
    return np.vstack(out)


def silhouette_freespace(image, camera: CameraModel, object_id: int, config: CompletionConfig,
                         points: np.ndarray | None = None) -> np.ndarray:
    """Free-space samples on rays that pass outside the object's mask.

    Pixels within ``silhouette_px`` of the mask that returned a farther or
    unrelated surface prove the object does not extend across them. Samples
    sit every ``delta`` in front of the hit, from just before the target's
    nearest range to ``silhouette_depth`` past its farthest, so a shape that
    spills over its silhouette or stretches away from the camera is penalised.
    """
    mask = image.instance == object_id
    if config.silhouette_px == 0 or config.silhouette_rays == 0 or not mask.any():
        return np.zeros((0, 3))
    ring = ndimage.binary_dilation(mask, iterations=config.silhouette_px) & ~mask & (image.depth > 0)
    flat = np.flatnonzero(ring.ravel())
    if len(flat) == 0:
        return np.zeros((0, 3))
    if len(flat) > config.silhouette_rays:
        flat = flat[np.linspace(0, len(flat) - 1, config.silhouette_rays).round().astype(np.int64)]
    rays = camera.pixel_rays().reshape(-1, 3)[flat]
    hit = image.depth.ravel()[flat]
    tgt = image.depth[mask]
    delta = config.truncation_delta
    r_lo = float(tgt.min()) - delta
    r_hi = float(tgt.max()) + config.silhouette_depth
    out = []
    k = 1
    while True:
        r = hit - delta * k
        keep = (r >= r_lo) & (r <= r_hi)
        if not np.any(r >= r_lo):
            break
        out.append(rays[keep] * r[keep, None])
        k += 1
    cam_pts = np.vstack(out) if out else np.zeros((0, 3))
    world = camera.pose.apply(cam_pts)
    if points is not None and len(world):
        # samples beyond any plausible object reach cannot change the loss
        reach = np.linalg.norm(np.ptp(points, axis=0)) + 400.0
        world = world[np.linalg.norm(world - points.mean(axis=0), axis=1) <= reach]
    return world


def _loss_from_sdf(surf: np.ndarray, free: np.ndarray, config: CompletionConfig, sink: float = 0.0) -> float:
    val = float(huber(surf, config.truncation_delta).mean())
    if len(free) and config.freespace_weight > 0:
        val += config.freespace_weight * float(np.maximum(0.0, -free).mean())
    return val + max(0.0, sink)


def _sink_depth(shape_bottom_z: float, pose: RigidTransform, config: CompletionConfig) -> float:
    """How far a yaw-only posed shape pokes below the support plane (planar mode only)."""
    if config.support_z is None or config.pose_mode != "planar-4dof":
        return 0.0
    return config.support_z - (pose.translation[2] + shape_bottom_z)


def completion_loss(partial: PointCloud, freespace, shape: LatentShape, pose: RigidTransform,
                    config: CompletionConfig) -> float:
    """Truncated surface residual plus free-space occupancy penalty, in mm.

    In planar mode with ``support_z`` set, the table below the plane is solid
    and any sinking depth is added as well.

    Args:
        partial: observed points in the world frame.
        freespace: world points known to be empty.
        shape: candidate latent.
        pose: object-to-world transform of the candidate.
    """
    pts = partial.points if isinstance(partial, PointCloud) else np.asarray(partial, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloud("completion loss needs at least one observed point")
    free = np.asarray(freespace, dtype=np.float64).reshape(-1, 3)
    inv = pose.inverse()
    surf = latent_sdf(shape, inv.apply(pts))
    fs = latent_sdf(shape, inv.apply(free)) if len(free) else np.zeros(0)
    return _loss_from_sdf(np.atleast_1d(surf), np.atleast_1d(fs), config, _sink_depth(shape.bottom_z(), pose, config))


# --- results -------------------------------------------------------------------------


@dataclass(frozen=True)
class Hypothesis:
    pose: RigidTransform
    latent: LatentShape
    residual_mm: float
    initial_residual_mm: float
    iterations: int
    converged: bool
    start_index: int
    trace: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "latent": self.latent.to_dict(),
            "residual_mm": self.residual_mm,
            "initial_residual_mm": self.initial_residual_mm,
            "iterations": self.iterations,
            "converged": self.converged,
            "start_index": self.start_index,
        }


@dataclass(frozen=True)
class CompletionResult:
    pose: RigidTransform
    latent: LatentShape
    residual_mm: float
    completed_mesh: TriangleMesh
    hypotheses: tuple[Hypothesis, ...]
    no_convergence: bool = False
    freespace: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)), repr=False)

    @property
    def category(self) -> str:
        return self.latent.category

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "pose": self.pose.to_dict(),
            "latent": self.latent.to_dict(),
            "residual_mm": self.residual_mm,
            "no_convergence": self.no_convergence,
            "hypotheses": [h.to_dict() for h in self.hypotheses],
        }

    def write(self, json_path, obj_path) -> None:
        Path(json_path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        write_obj(obj_path, self.completed_mesh)


# --- fitting ---------------------------------------------------------------------------


def _heading(camera: CameraModel) -> float:
    """Yaw of the camera's optical axis projected on the table."""
    fwd = camera.pose.rotation[:, 2]
    if np.hypot(fwd[0], fwd[1]) < 1e-9:
        fwd = camera.pose.rotation[:, 1]
    return float(np.arctan2(fwd[1], fwd[0]))


class _Problem:
    """Loss over a normalised vector: pose offsets in the camera-heading frame, then latent in [0, 1]."""

    def __init__(self, category, pts, free, config, heading, anchor, yaw0, scale):
        self.category = category
        self.fam = family(category)
        self.pts = pts
        self.free = free
        self.config = config
        self.heading = rotz(heading)
        self.anchor = anchor
        self.yaw0 = yaw0
        self.scale = scale
        self.planar = config.pose_mode == "planar-4dof"
        self.fit_yaw = not (self.planar and self.fam.yaw_symmetric)
        self.n_pose = 3 + (1 if self.planar and self.fit_yaw else 0) + (0 if self.planar else 3)
        self.centre = 0.5 * np.add(*self.fam.aabb(self.fam.midpoint()))
        self.rests = self.planar and config.support_z is not None

    def decode(self, x: np.ndarray) -> tuple[RigidTransform, np.ndarray]:
        latent = self.fam.lo + np.clip(x[self.n_pose:], 0.0, 1.0) * (self.fam.hi - self.fam.lo)
        if self.planar:
            yaw = self.yaw0 + (x[3] if self.fit_yaw else 0.0)
            rot = rotz(yaw)
        else:
            rot = Rotation.from_rotvec(x[3:6]).as_matrix() @ rotz(self.yaw0)
        # anchor is where the midpoint shape's box centre sits; move it by the offset
        centre_world = self.anchor + self.heading @ (self.scale * x[:3])
        origin = centre_world - rot @ self.centre
        if self.rests:
            # vertical offset is the lift above the support plane for the current latent
            origin[2] = self.config.support_z - self.fam.aabb(latent)[0][2] + self.scale * x[2]
        return RigidTransform(rot, origin), latent

    def loss(self, x: np.ndarray) -> float:
        pose, latent = self.decode(x)
        rt = pose.rotation
        t = pose.translation
        surf = latent_sdf_params(self.category, latent, (self.pts - t) @ rt)
        free = latent_sdf_params(self.category, latent, (self.free - t) @ rt) if len(self.free) else np.zeros(0)
        sink = _sink_depth(float(self.fam.aabb(latent)[0][2]), pose, self.config)
        return _loss_from_sdf(surf, free, self.config, sink)

    def x0(self) -> np.ndarray:
        return np.concatenate([np.zeros(self.n_pose), np.full(self.fam.n_params, 0.5)])

    def simplex_steps(self) -> np.ndarray:
        pose = [0.25, 0.25, 0.25]
        if self.planar and self.fit_yaw:
            pose.append(0.3)
        if not self.planar:
            pose += [0.3, 0.3, 0.3]
        return np.array(pose + [LATENT_STEP] * self.fam.n_params)


def _local_descent(problem: _Problem, config: CompletionConfig) -> tuple[np.ndarray, float, float, int, bool, list]:
    x0 = problem.x0()
    f0 = problem.loss(x0)
    steps = problem.simplex_steps()
    sim = np.vstack([x0] + [x0 + np.eye(len(x0))[i] * steps[i] for i in range(len(x0))])
    n_pose = problem.n_pose
    lo = np.r_[np.full(n_pose, -np.inf), np.zeros(problem.fam.n_params)]
    hi = np.r_[np.full(n_pose, np.inf), np.ones(problem.fam.n_params)]
    sim = np.clip(sim, lo, hi)
    trace = [f0]

    def record(intermediate_result):
        trace.append(float(intermediate_result.fun))

    # restart the simplex around the incumbent whenever it collapses early
    x, f, used, scale, converged = x0, f0, 0, 1.0, False
    while used < config.max_iters:
        sim = np.vstack([x] + [x + np.eye(len(x))[i] * steps[i] * scale for i in range(len(x))])
        res = minimize(
            problem.loss, x, method="Nelder-Mead", bounds=list(zip(lo, hi)), callback=record,
            options={"maxiter": config.max_iters - used, "fatol": config.converge_tol, "xatol": 1e-4,
                     "initial_simplex": np.clip(sim, lo, hi), "adaptive": len(x) > 6},
        )
        used += max(int(res.nit), 1)
        gain = f - float(res.fun)
        if res.fun < f:
            x, f = res.x, float(res.fun)
        if not res.success:
            break
        if gain < config.converge_tol:
            converged = True
            break
        scale *= 0.5
    return x, f, f0, used, converged, trace


def prepare_partial(partial: PointCloud, camera: CameraModel, config: CompletionConfig,
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """World-frame, subsampled observation points and their free-space samples."""
    cloud = partial if partial.frame == "world" else partial.transformed(camera.pose, "world")
    pts = cloud.points
    if len(pts) > config.max_points:
        pts = pts[np.sort(rng.choice(len(pts), config.max_points, replace=False))]
    return pts, freespace_samples(pts, camera.center, config)


def fit_completion(partial: PointCloud, category: str, camera: CameraModel,
                   config: CompletionConfig | None = None,
                   rng: np.random.Generator | None = None,
                   extra_freespace: np.ndarray | None = None) -> CompletionResult:
    """Fit pose and latent of ``category`` to a partial cloud.

    Starts share the initial latent (bounds midpoint) and position (cloud
    centroid pushed half a median extent away from the camera along the
    table) and differ in yaw, spaced evenly from the camera heading.

    Args:
        partial: observed points, world or camera frame.
        category: family to fit.
        camera: sensor that produced ``partial``; sets the free-space rays.
        config: fitting settings, defaults if None.
        rng: used only to subsample large clouds.
        extra_freespace: further world points known to be empty, e.g. from
            ``silhouette_freespace``.

    Raises:
        InsufficientPoints: fewer than 20 observed points.
    """
    config = CompletionConfig() if config is None else config
    rng = np.random.default_rng(0) if rng is None else rng
    if category not in FAMILIES:
        raise ConfigError(f"unknown category {category!r}")
    if len(partial) < MIN_POINTS:
        raise InsufficientPoints(f"{len(partial)} points < {MIN_POINTS}")
    pts, free = prepare_partial(partial, camera, config, rng)
    if extra_freespace is not None and len(extra_freespace):
        free = np.vstack([free, np.asarray(extra_freespace, dtype=np.float64).reshape(-1, 3)])
    fam = family(category)
    extent = fam.median_extent()
    heading = _heading(camera)
    away = pts.mean(axis=0) - camera.center
    if config.pose_mode == "planar-4dof":
        away[2] = 0.0
    norm = np.linalg.norm(away)
    away = away / norm if norm > 1e-9 else np.array([np.cos(heading), np.sin(heading), 0.0])
    anchor = pts.mean(axis=0) + 0.5 * extent * away

    n = config.multistart_count
    yaws = [heading + 2.0 * np.pi * k / n for k in range(n)]
    hyps = []
    shared = None
    for k, yaw in enumerate(yaws):
        prob = _Problem(category, pts, free, config, heading, anchor, yaw, extent)
        if not prob.fit_yaw and shared is not None:
            # yaw leaves a surface of revolution unchanged: reuse the first start, rotated
            x, f, f0, nit, conv, trace = shared
        else:
            x, f, f0, nit, conv, trace = _local_descent(prob, config)
            if not prob.fit_yaw:
                shared = (x, f, f0, nit, conv, trace)
        pose, latent = prob.decode(x)
        hyps.append(Hypothesis(pose, LatentShape(category, tuple(latent)), f, f0, nit, conv, k, tuple(trace)))
    hyps.sort(key=lambda h: (h.residual_mm, h.start_index))
    best = hyps[0]
    no_conv = all((not h.converged) and h.residual_mm > 10.0 * config.truncation_delta for h in hyps)
    mesh = latent_mesh(best.latent, config.mesh_resolution).transformed(best.pose, "world")
    return CompletionResult(best.pose, best.latent, best.residual_mm, mesh, tuple(hyps), no_conv, free)


def completion_to_cloud(result: CompletionResult, samples: int, rng: np.random.Generator) -> PointCloud:
    """Area-uniform samples of the completed surface with outward face normals."""
    if samples <= 0:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), "world")
    pts, normals, _ = result.completed_mesh.sample_surface(samples, rng)
    return PointCloud(pts, normals, "world")
