"""Parallel-jaw grasp sampling, cone ranking, feasibility and the lift oracle.

Gripper frame: origin at the midpoint between the two contacts, +z is the
approach direction (toward the object), +x the closing axis. Finger pads lie
in the planes x = +-width/2 and reach ``tip_margin`` past the contacts.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import AllInfeasible, ConfigError, NoGraspFound
from .geometry.bvh import build_bvh, first_hits
from .geometry.mesh import TriangleMesh
from .geometry.transforms import RigidTransform
from .sensor import Scene

DOWN = np.array([0.0, 0.0, -1.0])
CONE_EPS_DEG = 1e-9


@dataclass(frozen=True)
class GripperModel:
    max_opening: float = 85.0
    finger_length: float = 45.0
    finger_thickness: float = 10.0
    finger_width: float = 20.0
    palm_width: float = 85.0
    palm_thickness: float = 25.0
    palm_depth: float = 20.0
    friction_mu: float = 0.5
    sweep_depth: float = 40.0
    tip_margin: float = 3.0
    contact_patch: float = 3.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ConfigError(f"gripper {f.name} must be positive")
        if self.friction_mu > 2:
            raise ConfigError("friction_mu must lie in (0, 2]")
        if self.tip_margin >= self.finger_length:
            raise ConfigError("tip_margin must be shorter than the finger")

    def open_width(self, width: float) -> float:
        """Finger gap while approaching: the contact span plus one patch of clearance per side."""
        return min(self.max_opening, width + 2.0 * self.contact_patch)

    @property
    def cone_half_angle(self) -> float:
        """Friction-cone half angle in radians."""
        return math.atan(self.friction_mu)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GripperModel":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown gripper keys: {sorted(unknown)}")
        return cls(**d)

    def boxes(self, width: float, swept: bool = True) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """(name, lo, hi) gripper-frame boxes of both fingers and the palm.

        With ``swept`` each box is stretched ``sweep_depth`` back along -z to
        cover the approach motion.
        """
        half = 0.5 * width
        tip = self.tip_margin
        base = tip - self.finger_length
        back = self.sweep_depth if swept else 0.0
        fw = 0.5 * self.finger_width
        fingers = [
            ("finger_left", np.array([-half - self.finger_thickness, -fw, base - back]), np.array([-half, fw, tip])),
            ("finger_right", np.array([half, -fw, base - back]), np.array([half + self.finger_thickness, fw, tip])),
        ]
        px = max(0.5 * self.palm_width, half + self.finger_thickness)
        py = 0.5 * self.palm_thickness
        palm = ("palm", np.array([-px, -py, base - self.palm_depth - back]), np.array([px, py, base]))
        return fingers + [palm]


@dataclass(frozen=True)
class GraspCandidate:
    pose: RigidTransform  # gripper-to-world
    width: float
    score: float
    contacts: np.ndarray  # (2, 3) contact points, left then right
    normals: np.ndarray   # (2, 3) outward surface normals at the contacts

    @property
    def approach(self) -> np.ndarray:
        return self.pose.rotation[:, 2]

    @property
    def closing(self) -> np.ndarray:
        return self.pose.rotation[:, 0]

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def to_dict(self) -> dict:
        return {
            "pose": self.pose.to_dict(),
            "width_mm": float(self.width),
            "score": float(self.score),
            "contacts": {"points": self.contacts.tolist(), "normals": self.normals.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraspCandidate":
        c = d["contacts"]
        return cls(RigidTransform.from_dict(d["pose"]), float(d["width_mm"]), float(d["score"]),
                   np.asarray(c["points"], dtype=np.float64), np.asarray(c["normals"], dtype=np.float64))


def approach_angle_deg(candidate: GraspCandidate) -> float:
    """Angle between the approach axis and the world downward vertical."""
    a = candidate.approach
    return math.degrees(math.atan2(float(np.linalg.norm(np.cross(a, DOWN))), float(a @ DOWN)))


def grasp_pose(center: np.ndarray, closing: np.ndarray, approach: np.ndarray) -> RigidTransform:
    x = closing / np.linalg.norm(closing)
    z = approach - (approach @ x) * x
    z /= np.linalg.norm(z)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), center)


# --- sampling ------------------------------------------------------------------------


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    c = float(np.clip(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)), -1.0, 1.0))
    return math.acos(c)


def _points_in_box(local: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.all((local >= lo) & (local <= hi), axis=1)


def sweep_hits(gripper: GripperModel, pose: RigidTransform, width: float,
               points: np.ndarray, allow_contact: bool) -> bool:
    """True when any point lies inside the swept gripper.

    With ``allow_contact`` points within ``contact_patch`` of a finger pad plane are
    ignored, which lets the fingers slide along the faces they will squeeze.
    """
    local = pose.inverse().apply(points)
    for name, lo, hi in gripper.boxes(width):
        inside = _points_in_box(local, lo, hi)
        if allow_contact and name.startswith("finger"):
            pad = -0.5 * width if name == "finger_left" else 0.5 * width
            inside &= np.abs(local[:, 0] - pad) > gripper.contact_patch
        if inside.any():
            return True
    return False


_APPROACH_TILTS = np.radians([0.0, 30.0, -30.0, 60.0, -60.0, 90.0, -90.0, 120.0, -120.0, 150.0, -150.0, 180.0])


def _approach_options(closing: np.ndarray) -> list[np.ndarray]:
    """Directions perpendicular to ``closing``, the one nearest world -z first."""
    x = closing / np.linalg.norm(closing)
    base = DOWN - (DOWN @ x) * x
    if np.linalg.norm(base) < 1e-6:
        helper = np.array([1.0, 0.0, 0.0]) if abs(x[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        base = helper - (helper @ x) * x
    base /= np.linalg.norm(base)
    other = np.cross(x, base)
    return [math.cos(t) * base + math.sin(t) * other for t in _APPROACH_TILTS]


def _mesh_cache(mesh: TriangleMesh):
    """BVH and fixed surface samples, memoised on the (immutable) mesh."""
    cached = mesh.__dict__.get("_grasp_cache")
    if cached is None:
        bvh = build_bvh(mesh.vertices, mesh.triangles)
        pts, _, _ = mesh.sample_surface(4000, np.random.default_rng(12345))
        cached = (bvh, pts)
        mesh.__dict__["_grasp_cache"] = cached
    return cached


def grasp_score(n1: np.ndarray, n2: np.ndarray, closing: np.ndarray, center: np.ndarray,
                centroid: np.ndarray, radius: float, gripper: GripperModel) -> float:
    """Friction margin and centring, each weighted 0.5, clamped to [0, 1]."""
    worst = max(_angle(n1, -closing), _angle(n2, closing))
    s = 0.5 * (1.0 - worst / gripper.cone_half_angle)
    s += 0.5 * (1.0 - float(np.linalg.norm(center - centroid)) / radius)
    return float(min(1.0, max(0.0, s)))


def sample_antipodal_grasps(mesh: TriangleMesh, gripper: GripperModel, attempts: int,
                            rng: np.random.Generator) -> list[GraspCandidate]:
    """Antipodal pairs from surface samples and opposing ray hits.

    Each attempt draws a surface point, shoots a ray inward along its normal
    and keeps the pair when the normals oppose within twice the friction
    angle, the span fits the gripper and some approach direction (tried from
    most downward) sweeps in without hitting the object.

    Raises:
        NoGraspFound: no attempt produced a candidate.
    """
    if mesh.is_empty():
        raise NoGraspFound("empty mesh")
    if attempts < 1:
        raise ValueError("attempts must be >= 1")
    bvh, surface = _mesh_cache(mesh)
    pts, normals, _ = mesh.sample_surface(attempts, rng)
    face_n = mesh.face_normals()
    t, tri = first_hits(bvh, pts - 1e-6 * normals, -normals, tmin=1e-9)
    lo, hi = mesh.bounds()
    centroid = surface.mean(axis=0)
    radius = max(0.5 * float(np.linalg.norm(hi - lo)), 1e-9)
    limit = 2.0 * gripper.cone_half_angle
    out = []
    for i in range(attempts):
        if tri[i] < 0 or not np.isfinite(t[i]):
            continue
        p1, n1 = pts[i], normals[i]
        p2 = p1 - (t[i] + 1e-6) * n1
        n2 = face_n[tri[i]]
        span = float(np.linalg.norm(p2 - p1))
        if span > gripper.max_opening or span < 1e-6 or _angle(n1, -n2) > limit:
            continue
        closing = (p2 - p1) / span
        center = 0.5 * (p1 + p2)
        for approach in _approach_options(closing):
            pose = grasp_pose(center, closing, approach)
            if not sweep_hits(gripper, pose, gripper.open_width(span), surface, allow_contact=False):
                score = grasp_score(n1, n2, closing, center, centroid, radius, gripper)
                out.append(GraspCandidate(pose, span, score, np.array([p1, p2]), np.array([n1, n2])))
                break
    if not out:
        raise NoGraspFound(f"no antipodal grasp in {attempts} attempts")
    return out


# --- ranking -------------------------------------------------------------------------


@dataclass(frozen=True)
class RankedGrasps:
    entries: tuple[tuple[GraspCandidate, bool], ...]
    indices: tuple[int, ...]
    cone_half_angle_deg: float
    k: int

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def candidates(self) -> list[GraspCandidate]:
        return [c for c, _ in self.entries]


def in_cone(candidate: GraspCandidate, cone_half_angle_deg: float) -> bool:
    """Closed cone: exactly on the boundary counts as inside."""
    return approach_angle_deg(candidate) <= cone_half_angle_deg + CONE_EPS_DEG


def rank_and_select(candidates: list[GraspCandidate], cone_half_angle_deg: float = 40.0,
                    k: int = 5) -> RankedGrasps:
    """In-cone grasps by score, then out-of-cone grasps by score, truncated to ``k``.

    Ties keep the original candidate order.
    """
    flags = [in_cone(c, cone_half_angle_deg) for c in candidates]
    inside = sorted((i for i, f in enumerate(flags) if f), key=lambda i: (-candidates[i].score, i))
    outside = sorted((i for i, f in enumerate(flags) if not f), key=lambda i: (-candidates[i].score, i))
    chosen = (inside + outside)[:max(k, 0)]
    return RankedGrasps(tuple((candidates[i], flags[i]) for i in chosen), tuple(chosen),
                        float(cone_half_angle_deg), int(k))


# --- feasibility and outcome ---------------------------------------------------------


@dataclass(frozen=True)
class GraspCheck:
    ok: bool
    reason: str | None = None

    def __bool__(self) -> bool:
        return self.ok


def _box_lattice(lo: np.ndarray, hi: np.ndarray, n: int = 4) -> np.ndarray:
    axes = [np.linspace(lo[k], hi[k], n) for k in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def _world_boxes(gripper: GripperModel, grasp: GraspCandidate, width: float):
    for name, lo, hi in gripper.boxes(width):
        corners = _box_lattice(lo, hi, 2)
        yield name, lo, hi, grasp.pose.apply(corners), grasp.pose.apply(_box_lattice(lo, hi))


def check_feasibility(scene: Scene, target_id: int, grasp: GraspCandidate, gripper: GripperModel) -> GraspCheck:
    """Swept gripper against the plane, the workspace and every non-target object."""
    width = min(grasp.width, gripper.max_opening)
    ws_lo = np.asarray(scene.workspace_lo)
    ws_hi = np.asarray(scene.workspace_hi)
    boxes = list(_world_boxes(gripper, grasp, width))
    for _, _, _, corners, _ in boxes:
        if corners[:, 2].min() < 0.0:
            return GraspCheck(False, "CollisionWithPlane")
    for _, _, _, corners, _ in boxes:
        if np.any(corners < ws_lo - 1e-9) or np.any(corners > ws_hi + 1e-9):
            return GraspCheck(False, "OutOfWorkspace")
    inv = grasp.pose.inverse()
    for obj in scene.objects:
        if obj.id == target_id:
            continue
        surf = surface_samples(obj)
        local = inv.apply(surf)
        hit = any(_points_in_box(local, lo, hi).any() for _, lo, hi, _, _ in boxes)
        if not hit:
            # a box buried wholly inside the object has no surface samples in it
            hit = any((obj.sdf_world(lattice) < 0).any() for _, _, _, _, lattice in boxes)
        if hit:
            return GraspCheck(False, f"CollisionWithObject({obj.id})")
    return GraspCheck(True)


def surface_samples(obj, count: int = 6000) -> np.ndarray:
    return _object_samples(obj, count)[0]


def _object_samples(obj, count: int = 6000):
    cache = obj.__dict__.setdefault("_surface_cache", {})
    if count not in cache:
        pts, n, _ = obj.world_mesh.sample_surface(count, np.random.default_rng(777))
        cache[count] = (pts, n)
    return cache[count]


def attempt_sequence(ranked: RankedGrasps, scene: Scene, target_id: int,
                     gripper: GripperModel) -> tuple[GraspCandidate, int]:
    """First feasible grasp in ranked order with its 1-based attempt number.

    Raises:
        AllInfeasible: every ranked grasp was rejected.
    """
    reasons = []
    for i, cand in enumerate(ranked.candidates, start=1):
        check = check_feasibility(scene, target_id, cand, gripper)
        if check:
            return cand, i
        reasons.append(check.reason)
    raise AllInfeasible(f"all {len(reasons)} ranked grasps infeasible: {reasons}")


def evaluate_grasp_success(scene: Scene, target_id: int, grasp: GraspCandidate,
                           gripper: GripperModel) -> GraspCheck:
    """Lift oracle on the target's ground-truth surface.

    The fingers approach open at the planned width plus clearance and close
    along the closing axis. The first surface samples met by each pad form
    the contact patches; the grasp holds when both patch normals push back
    within the friction cone and the squeezed span fits the gripper.
    """
    check = check_feasibility(scene, target_id, grasp, gripper)
    if not check:
        return check
    pts, normals = _object_samples(scene.get(target_id), 12000)
    local = grasp.pose.inverse().apply(pts)
    nloc = grasp.pose.inverse().apply_vectors(normals)
    tip = gripper.tip_margin
    fw = 0.5 * gripper.finger_width
    open_half = 0.5 * gripper.open_width(grasp.width)
    band = (np.abs(local[:, 1]) <= fw) & (local[:, 2] <= tip) & (local[:, 2] >= tip - gripper.finger_length)
    reach = band & (np.abs(local[:, 0]) <= open_half + gripper.finger_thickness)
    between = reach & (np.abs(local[:, 0]) < open_half)
    if not between.any():
        return GraspCheck(False, "NoContact")
    if (reach & ~between).any():
        # the open fingers land on the object instead of straddling it
        xs = local[reach, 0]
        if float(xs.max() - xs.min()) > gripper.max_opening:
            return GraspCheck(False, "ObjectTooWide")
        return GraspCheck(False, f"CollisionWithObject({target_id})")
    for name, lo, hi in gripper.boxes(2.0 * open_half):
        if _points_in_box(local, lo, hi).any():
            return GraspCheck(False, f"CollisionWithObject({target_id})")
    sel = np.flatnonzero(between)
    xs = local[sel, 0]
    if float(xs.max() - xs.min()) > gripper.max_opening:
        return GraspCheck(False, "ObjectTooWide")
    cone = gripper.cone_half_angle
    for x_edge, push in ((float(xs.min()), np.array([-1.0, 0.0, 0.0])), (float(xs.max()), np.array([1.0, 0.0, 0.0]))):
        patch = sel[np.abs(local[sel, 0] - x_edge) <= gripper.contact_patch]
        # only surface facing the pad can touch it; edge-on faces are skipped
        patch = patch[nloc[patch] @ push > 1e-6]
        if len(patch) == 0:
            return GraspCheck(False, "NoContact")
        mean_n = nloc[patch].mean(axis=0)
        if np.linalg.norm(mean_n) < 1e-9 or _angle(mean_n, push) > cone:
            return GraspCheck(False, "FrictionConeViolated")
    return GraspCheck(True)


# --- serialization -------------------------------------------------------------------


def write_grasps_jsonl(path, ranked: RankedGrasps) -> None:
    lines = []
    for cand, flag in ranked.entries:
        row = cand.to_dict()
        row["in_cone"] = bool(flag)
        lines.append(json.dumps(row, sort_keys=True))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_grasps_jsonl(path) -> list[tuple[GraspCandidate, bool]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            out.append((GraspCandidate.from_dict(d), bool(d.get("in_cone", False))))
    return out
