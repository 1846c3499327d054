"""Simulated depth camera, instance labels, depth noise and prompt resolution.

Conventions: the camera frame is x right, y down, z forward; ``CameraModel.pose``
maps camera coordinates to world coordinates. Depth is the Euclidean range
along each pixel's ray, in mm, with 0 meaning no return.
"""

from __future__ import annotations

import functools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import AmbiguousTie, NoMatch, ObjectNotVisible
from .geometry.bvh import build_bvh, closest_distances, first_hits, inside_by_parity
from .geometry.io import read_obj, write_obj
from .geometry.mesh import TriangleMesh, merge_meshes
from .geometry.pointcloud import PointCloud
from .geometry.transforms import RigidTransform, look_at
from .priors import CATEGORIES, LatentShape, latent_mesh, latent_sdf

SUPPORT_TOL_MM = 0.5
PENETRATION_TOL_MM = 0.5
DEFAULT_WORKSPACE = ((-300.0, -300.0, 0.0), (300.0, 300.0, 500.0))
DEPTH_UNIT_MM = 0.1


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def pixel_rays(self) -> np.ndarray:
        """Unit ray directions in the camera frame, shape (height, width, 3)."""
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64),
                           np.arange(self.height, dtype=np.float64))
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Camera-frame points to continuous pixel coordinates (u, v)."""
        p = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
        return np.column_stack([self.fx * p[:, 0] / p[:, 2] + self.cx, self.fy * p[:, 1] / p[:, 2] + self.cy])

    def with_pose(self, pose: RigidTransform) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), RigidTransform.from_dict(d["pose"]))


def default_camera() -> CameraModel:
    """640x480, f = 600 px, 600 mm above the plane, pitched 45 degrees at the origin."""
    return CameraModel(600.0, 600.0, 319.5, 239.5, 640, 480,
                       look_at(eye=(-600.0, 0.0, 600.0), target=(0.0, 0.0, 0.0)))


@dataclass(frozen=True)
class DepthImage:
    depth: np.ndarray      # (H, W) float64, mm along the ray; 0 = no return
    instance: np.ndarray   # (H, W) int64; 0 = support plane or background

    def __post_init__(self):
        d = np.array(self.depth, dtype=np.float64)
        ins = np.array(self.instance, dtype=np.int64)
        if d.shape != ins.shape or d.ndim != 2:
            raise ValueError("depth and instance must be 2D arrays of equal shape")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError("depth must be finite and non-negative")
        if np.any((ins != 0) & (d <= 0)):
            raise ValueError("labelled pixels need positive depth")
        d.flags.writeable = False
        ins.flags.writeable = False
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "instance", ins)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    def pixel_count(self, object_id: int) -> int:
        return int(np.count_nonzero(self.instance == object_id))

    def visible_counts(self) -> dict[int, int]:
        ids, counts = np.unique(self.instance[self.instance > 0], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


# --- scenes --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SceneObject:
    id: int
    category: str
    shape: LatentShape | TriangleMesh
    pose: RigidTransform

    def __post_init__(self):
        if int(self.id) < 1:
            raise ValueError("object ids must be positive")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    @functools.cached_property
    def world_mesh(self) -> TriangleMesh:
        local = latent_mesh(self.shape) if isinstance(self.shape, LatentShape) else self.shape
        return local.transformed(self.pose, "world")

    @functools.cached_property
    def _bvh(self):
        m = self.world_mesh
        return build_bvh(m.vertices, m.triangles)

    def sdf_world(self, points: np.ndarray) -> np.ndarray:
        """Signed distance to this object's surface at world points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if isinstance(self.shape, LatentShape):
            return latent_sdf(self.shape, self.pose.inverse().apply(pts))
        dist, _ = closest_distances(self._bvh, pts)
        return np.where(inside_by_parity(self._bvh, pts), -dist, dist)


@dataclass(frozen=True, eq=False)
class Scene:
    """Objects resting on the plane z = 0 inside an axis-aligned workspace."""

    objects: tuple[SceneObject, ...]
    workspace_lo: tuple[float, float, float] = DEFAULT_WORKSPACE[0]
    workspace_hi: tuple[float, float, float] = DEFAULT_WORKSPACE[1]
    camera: CameraModel = field(default_factory=default_camera)
    aliases: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate object ids {ids}")
        object.__setattr__(self, "aliases", tuple((str(k).lower(), str(v)) for k, v in self.aliases))

    def get(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.id == object_id:
                return o
        raise KeyError(object_id)

    def without(self, *object_ids: int) -> "Scene":
        keep = tuple(o for o in self.objects if o.id not in object_ids)
        return Scene(keep, self.workspace_lo, self.workspace_hi, self.camera, self.aliases)

    def only(self, object_id: int) -> "Scene":
        return Scene((self.get(object_id),), self.workspace_lo, self.workspace_hi, self.camera, self.aliases)

    def validation_errors(self, samples: int = 1500) -> list[str]:
        """Support and interpenetration audit; empty list means the scene is valid."""
        errors = []
        for o in self.objects:
            zmin = float(o.world_mesh.vertices[:, 2].min())
            if zmin < -SUPPORT_TOL_MM:
                errors.append(f"object {o.id} sinks below the plane (min z {zmin:.3f})")
        rng = np.random.default_rng(0)
        pts = {o.id: o.world_mesh.sample_surface(samples, rng)[0] for o in self.objects}
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                depth = min(float(b.sdf_world(pts[a.id]).min()), float(a.sdf_world(pts[b.id]).min()))
                if depth < -PENETRATION_TOL_MM:
                    errors.append(f"objects {a.id} and {b.id} interpenetrate by {-depth:.3f} mm")
        return errors

    def to_dict(self, mesh_dir: Path | None = None) -> dict:
        objs = []
        for o in self.objects:
            entry = {"id": o.id, "category": o.category, "pose": o.pose.to_dict()}
            if isinstance(o.shape, LatentShape):
                entry["latent"] = list(o.shape.params)
            else:
                if mesh_dir is None:
                    raise ValueError("mesh objects need a mesh directory to serialize")
                name = f"object_{o.id}.obj"
                write_obj(Path(mesh_dir) / name, o.shape)
                entry["mesh_path"] = name
            objs.append(entry)
        return {
            "objects": objs,
            "camera": self.camera.to_dict(),
            "workspace_mm": {"lo": list(self.workspace_lo), "hi": list(self.workspace_hi)},
            "aliases": dict(self.aliases),
        }

    @classmethod
    def from_dict(cls, d: dict, mesh_dir: Path | None = None) -> "Scene":
        objs = []
        for e in d["objects"]:
            if "latent" in e:
                shape = LatentShape(e["category"], tuple(e["latent"]))
            else:
                shape = read_obj(Path(mesh_dir or ".") / e["mesh_path"])
            objs.append(SceneObject(int(e["id"]), e["category"], shape, RigidTransform.from_dict(e["pose"])))
        ws = d.get("workspace_mm", {"lo": DEFAULT_WORKSPACE[0], "hi": DEFAULT_WORKSPACE[1]})
        cam = CameraModel.from_dict(d["camera"]) if "camera" in d else default_camera()
        return cls(tuple(objs), tuple(ws["lo"]), tuple(ws["hi"]), cam, tuple(d.get("aliases", {}).items()))


def write_scene(path, scene: Scene) -> None:
    path = Path(path)
    path.write_text(json.dumps(scene.to_dict(path.parent), indent=2, sort_keys=True) + "\n")


def read_scene(path) -> Scene:
    path = Path(path)
    return Scene.from_dict(json.loads(path.read_text()), path.parent)


# --- rendering -----------------------------------------------------------------------


def render_depth(scene: Scene, camera: CameraModel | None = None, roi=None) -> DepthImage:
    """Raycast every pixel against all objects and the support plane.

    The nearest intersection wins; at exactly equal range the lowest id wins,
    with the plane counting as id 0. ``roi = (v0, v1, u0, u1)`` limits casting
    to rows v0:v1 and columns u0:u1; pixels outside it report no return.
    """
    camera = scene.camera if camera is None else camera
    rays_cam = camera.pixel_rays()
    if roi is not None:
        v0, v1, u0, u1 = roi
        rays_cam = rays_cam[v0:v1, u0:u1]
    sub_shape = rays_cam.shape[:2]
    rays = camera.pose.apply_vectors(rays_cam.reshape(-1, 3))
    origin = camera.center
    n = len(rays)
    # support plane z = 0, analytic
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = np.where(rays[:, 2] < 0.0, -origin[2] / rays[:, 2], np.inf)
    if origin[2] <= 0.0:
        t_plane[:] = np.inf
    depth = t_plane.copy()
    inst = np.zeros(n, dtype=np.int64)
    if scene.objects and n:
        meshes = [o.world_mesh for o in scene.objects]
        merged = merge_meshes(meshes, frame="world")
        owner = np.concatenate([np.full(m.n_triangles, o.id, dtype=np.int64)
                                for o, m in zip(scene.objects, meshes)])
        bvh = build_bvh(merged.vertices, merged.triangles)
        origins = np.broadcast_to(origin, (n, 3))
        t_obj, tri = first_hits(bvh, origins, rays, tmin=1e-9, tmax=np.inf, labels=owner)
        # the plane only loses when an object is strictly nearer
        take = t_obj < depth
        depth[take] = t_obj[take]
        inst[take] = owner[tri[take]]
    depth[~np.isfinite(depth)] = 0.0
    if roi is None:
        return DepthImage(depth.reshape(camera.height, camera.width), inst.reshape(camera.height, camera.width))
    full_d = np.zeros((camera.height, camera.width))
    full_i = np.zeros((camera.height, camera.width), dtype=np.int64)
    full_d[v0:v1, u0:u1] = depth.reshape(sub_shape)
    full_i[v0:v1, u0:u1] = inst.reshape(sub_shape)
    return DepthImage(full_d, full_i)


def projected_roi(mesh: TriangleMesh, camera: CameraModel, pad: int = 2):
    """Pixel box (v0, v1, u0, u1) enclosing a world mesh's projection, or None if unseen.

    Assumes the mesh lies wholly in front of the camera.
    """
    cam_pts = camera.pose.inverse().apply(mesh.vertices)
    if np.any(cam_pts[:, 2] <= 1e-6):
        return (0, camera.height, 0, camera.width)
    uv = camera.project(cam_pts)
    u0 = max(int(np.floor(uv[:, 0].min())) - pad, 0)
    u1 = min(int(np.ceil(uv[:, 0].max())) + pad + 1, camera.width)
    v0 = max(int(np.floor(uv[:, 1].min())) - pad, 0)
    v1 = min(int(np.ceil(uv[:, 1].max())) + pad + 1, camera.height)
    if u0 >= u1 or v0 >= v1:
        return None
    return (v0, v1, u0, u1)


def apply_depth_noise(image: DepthImage, sigma_mm: float, dropout_rate: float,
                      rng: np.random.Generator) -> DepthImage:
    """Gaussian range noise plus independent dropout on returning pixels.

    Draws are taken in row-major pixel order: first one normal per hit pixel,
    then one uniform per hit pixel. Dropped pixels lose both depth and label.
    """
    if sigma_mm < 0:
        raise ValueError("sigma_mm must be >= 0")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must lie in [0, 1)")
    if sigma_mm == 0 and dropout_rate == 0:
        return image
    depth = image.depth.copy()
    inst = image.instance.copy()
    hit = np.flatnonzero(depth.ravel() > 0)
    noise = rng.standard_normal(len(hit)) * sigma_mm
    drop = rng.random(len(hit)) < dropout_rate
    flat_d, flat_i = depth.ravel(), inst.ravel()
    flat_d[hit] = np.maximum(flat_d[hit] + noise, DEPTH_UNIT_MM)
    flat_d[hit[drop]] = 0.0
    flat_i[hit[drop]] = 0
    return DepthImage(depth, inst)


def corrupt_mask(image: DepthImage, object_id: int, pixels: int) -> DepthImage:
    """Dilate (``pixels`` > 0) or erode (< 0) one object's mask to mimic segmentation error.

    Dilation only claims pixels that have a depth return; eroded pixels fall back to label 0.
    """
    if pixels == 0:
        return image
    mask = image.instance == object_id
    inst = image.instance.copy()
    if pixels > 0:
        grown = ndimage.binary_dilation(mask, iterations=pixels) & (image.depth > 0)
        inst[grown] = object_id
    else:
        shrunk = ndimage.binary_erosion(mask, iterations=-pixels)
        inst[mask & ~shrunk] = 0
    return DepthImage(image.depth, inst)


# --- extraction ----------------------------------------------------------------------


@njit(cache=True)
def _depth_normals(pts, mask):
    """Cross product of masked image-space tangents; central where possible, else one-sided."""
    h, w = mask.shape
    out = np.zeros((h, w, 3))
    for v in range(h):
        for u in range(w):
            if not mask[v, u]:
                continue
            du = np.zeros(3)
            dv = np.zeros(3)
            okl = u > 0 and mask[v, u - 1]
            okr = u < w - 1 and mask[v, u + 1]
            oku = v > 0 and mask[v - 1, u]
            okd = v < h - 1 and mask[v + 1, u]
            if okl and okr:
                du = 0.5 * (pts[v, u + 1] - pts[v, u - 1])
            elif okr:
                du = pts[v, u + 1] - pts[v, u]
            elif okl:
                du = pts[v, u] - pts[v, u - 1]
            if oku and okd:
                dv = 0.5 * (pts[v + 1, u] - pts[v - 1, u])
            elif okd:
                dv = pts[v + 1, u] - pts[v, u]
            elif oku:
                dv = pts[v, u] - pts[v - 1, u]
            out[v, u, 0] = du[1] * dv[2] - du[2] * dv[1]
            out[v, u, 1] = du[2] * dv[0] - du[0] * dv[2]
            out[v, u, 2] = du[0] * dv[1] - du[1] * dv[0]
    return out


def extract_object_cloud(image: DepthImage, camera: CameraModel, object_id: int) -> PointCloud:
    """Back-project one object's pixels into a camera-frame cloud with depth normals.

    Normals come from masked image-space differences, averaged over a 3x3
    window and flipped to face the camera. Pixels without usable neighbours
    fall back to the reversed viewing ray.

    Raises:
        ObjectNotVisible: no pixel carries ``object_id``.
    """
    mask = image.instance == object_id
    if not mask.any():
        raise ObjectNotVisible(f"object {object_id} has no visible pixels")
    rays = camera.pixel_rays()
    pts = rays * image.depth[..., None]
    raw = _depth_normals(np.ascontiguousarray(pts), mask)
    mag = np.linalg.norm(raw, axis=-1, keepdims=True)
    raw = np.divide(raw, mag, out=np.zeros_like(raw), where=mag > 0)
    # 3x3 masked box filter of the raw normals
    summed = np.stack([ndimage.uniform_filter(raw[..., k], size=3, mode="constant") for k in range(3)], axis=-1)
    ray_sel = rays[mask]
    n = summed[mask]
    flip = np.einsum("ij,ij->i", n, ray_sel) > 0
    n[flip] *= -1.0
    norm = np.linalg.norm(n, axis=1)
    bad = norm < 1e-12
    n[bad] = -ray_sel[bad]
    norm[bad] = 1.0
    n /= norm[:, None]
    return PointCloud(pts[mask], n, frame="camera")


def visible_cloud_world(image: DepthImage, camera: CameraModel, object_id: int) -> PointCloud:
    return extract_object_cloud(image, camera, object_id).transformed(camera.pose, "world")


def visible_surface_fraction(scene: Scene, object_id: int, image: DepthImage | None = None,
                             samples: int = 4000, tol_mm: float = 1.0) -> float:
    """Share of area-uniform surface samples the camera sees directly.

    A sample counts as seen when its pixel carries ``object_id`` and the
    rendered range matches the sample's range within ``tol_mm``.
    """
    camera = scene.camera
    image = render_depth(scene) if image is None else image
    pts, _, _ = scene.get(object_id).world_mesh.sample_surface(samples, np.random.default_rng(0))
    cam_pts = camera.pose.inverse().apply(pts)
    front = cam_pts[:, 2] > 1e-6
    uv = np.full((len(pts), 2), -1.0)
    uv[front] = camera.project(cam_pts[front])
    u, v = np.rint(uv[:, 0]).astype(np.int64), np.rint(uv[:, 1]).astype(np.int64)
    inside = front & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    seen = np.zeros(len(pts), dtype=bool)
    idx = np.flatnonzero(inside)
    rng_ = np.linalg.norm(cam_pts[idx], axis=1)
    lab = image.instance[v[idx], u[idx]] == object_id
    # the pixel centre ray differs from the sample ray, so allow for local slope
    close = np.abs(image.depth[v[idx], u[idx]] - rng_) <= tol_mm + 0.01 * rng_
    seen[idx] = lab & close
    return float(seen.mean())


# --- prompts -------------------------------------------------------------------------

BUILTIN_ALIASES = {
    "wooden block": "box",
    "block": "box",
    "cube": "box",
    "carton": "box",
    "pringles can": "can",
    "tin": "can",
}


def _normalize_prompt(prompt: str) -> list[str]:
    return re.findall(r"[a-z0-9]+", prompt.lower())


def prompt_category(prompt: str, aliases=()) -> str:
    """Category named by the prompt's trailing noun phrase.

    Multi-word aliases are tried longest first, then single trailing words.
    Per-scene aliases override the built-in ones.
    """
    words = _normalize_prompt(prompt)
    if not words:
        raise NoMatch("empty prompt")
    table = dict(BUILTIN_ALIASES)
    table.update({c: c for c in CATEGORIES})
    table.update({c + "s": c for c in CATEGORIES})
    table.update({" ".join(_normalize_prompt(k)): v for k, v in dict(aliases).items()})
    for n_words in range(min(len(words), 4), 0, -1):
        tail = " ".join(words[-n_words:])
        if tail in table:
            return table[tail]
    raise NoMatch(f"no category noun recognised in {prompt!r}")


def resolve_prompt(prompt: str, scene: Scene, image: DepthImage | None = None) -> tuple[int, str]:
    """Map a short text prompt to (object id, category).

    Among several objects of the named category the one with the most visible
    pixels under ``scene.camera`` wins; ``image`` may supply that render.

    Raises:
        NoMatch: no category noun recognised, or no such object in the scene.
        AmbiguousTie: the two best matches have identical visible pixel counts.
    """
    if not prompt or not prompt.strip():
        raise NoMatch("empty prompt")
    category = prompt_category(prompt, scene.aliases)
    matches = [o.id for o in scene.objects if o.category == category]
    if not matches:
        raise NoMatch(f"no {category} in the scene")
    if len(matches) == 1:
        return matches[0], category
    image = render_depth(scene) if image is None else image
    counts = image.visible_counts()
    ranked = sorted(matches, key=lambda i: (-counts.get(i, 0), i))
    if counts.get(ranked[0], 0) == counts.get(ranked[1], 0):
        raise AmbiguousTie(f"objects {ranked[0]} and {ranked[1]} are equally visible")
    return ranked[0], category


# --- image files ---------------------------------------------------------------------


def _write_pgm16(path, data: np.ndarray) -> None:
    h, w = data.shape
    head = f"P5\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(head + data.astype(">u2").tobytes())


def _read_pgm16(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5" or int(tokens[3]) != 65535:
        raise ValueError(f"{path}: expected a 16-bit binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos + 1:pos + 1 + 2 * w * h]
    return np.frombuffer(body, dtype=">u2").reshape(h, w).astype(np.int64)


def write_depth_pgm(depth_path, instance_path, image: DepthImage) -> None:
    """Depth in 0.1 mm steps (saturating at 6553.5 mm) plus a sidecar instance map."""
    q = np.clip(np.rint(image.depth / DEPTH_UNIT_MM), 0, 65535)
    _write_pgm16(depth_path, q)
    _write_pgm16(instance_path, np.clip(image.instance, 0, 65535))


def read_depth_pgm(depth_path, instance_path) -> DepthImage:
    depth = _read_pgm16(depth_path) * DEPTH_UNIT_MM
    inst = _read_pgm16(instance_path)
    inst[depth <= 0] = 0
    return DepthImage(depth, inst)
