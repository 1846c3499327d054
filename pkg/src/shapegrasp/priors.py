"""Parametric household-object families with analytic signed distance functions.

Each category owns a fixed parameter schema (lengths in mm). Frames:

* apple  - spheroid centred at the origin
* bottle, bowl, can - surfaces of revolution about +z, base at z = 0
* box    - rounded cuboid centred at the origin
* hammer - handle box centred at the origin along x, head box across y at x = +L/2
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numba import njit

from .errors import ResolutionTooLow
from .geometry.isosurface import marching_cubes
from .geometry.mesh import TriangleMesh
from .geometry.sdf import sdf_grid_from_function

CATEGORIES = ("apple", "bottle", "bowl", "box", "can", "hammer")


# --- 2D distance helpers ------------------------------------------------------------


@njit(cache=True)
def _sd_polygon_kernel(px, py, vx, vy):
    n = px.shape[0]
    m = vx.shape[0]
    out = np.empty(n)
    for i in range(n):
        x = px[i]
        y = py[i]
        d2 = np.inf
        inside = False
        j = m - 1
        for k in range(m):
            ex = vx[j] - vx[k]
            ey = vy[j] - vy[k]
            wx = x - vx[k]
            wy = y - vy[k]
            h = (wx * ex + wy * ey) / (ex * ex + ey * ey)
            if h < 0.0:
                h = 0.0
            elif h > 1.0:
                h = 1.0
            bx = wx - ex * h
            by = wy - ey * h
            dd = bx * bx + by * by
            if dd < d2:
                d2 = dd
            c1 = y >= vy[k]
            c2 = y < vy[j]
            c3 = ex * wy > ey * wx
            if (c1 and c2 and c3) or ((not c1) and (not c2) and (not c3)):
                inside = not inside
            j = k
        out[i] = -np.sqrt(d2) if inside else np.sqrt(d2)
    return out


def sd_polygon(px: np.ndarray, py: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Exact signed distance to a closed simple polygon (negative inside)."""
    v = np.ascontiguousarray(verts, dtype=np.float64)
    return _sd_polygon_kernel(np.ascontiguousarray(px, dtype=np.float64),
                              np.ascontiguousarray(py, dtype=np.float64), v[:, 0].copy(), v[:, 1].copy())


@njit(cache=True)
def _ellipse_quadrant(y0, y1, e0, e1):
    """Distance from (y0, y1) >= 0 to the ellipse with semi-axes e0 >= e1.

    Root of Eberly's G(s) = (r0 z0 / (s + r0))^2 + (z1 / (s + 1))^2 - 1, which is
    convex and decreasing, so Newton from the left bracket end converges monotonically.
    """
    if y1 > 0.0:
        if y0 > 0.0:
            z0 = y0 / e0
            z1 = y1 / e1
            g = z0 * z0 + z1 * z1 - 1.0
            if g == 0.0:
                return 0.0
            r0 = (e0 / e1) ** 2
            n0 = r0 * z0
            lo = z1 - 1.0
            hi = 0.0 if g < 0.0 else np.sqrt(n0 * n0 + z1 * z1) - 1.0
            s = lo
            for _ in range(100):
                a = n0 / (s + r0)
                b = z1 / (s + 1.0)
                gs = a * a + b * b - 1.0
                if gs > 0.0:
                    lo = s
                else:
                    hi = s
                if abs(gs) < 1e-15 or hi - lo < 1e-14 * (1.0 + abs(s)):
                    break
                dg = -2.0 * (a * a / (s + r0) + b * b / (s + 1.0))
                nxt = s - gs / dg
                if not (nxt > lo and nxt < hi):
                    nxt = 0.5 * (lo + hi)
                s = nxt
            x0 = r0 * y0 / (s + r0)
            x1 = y1 / (s + 1.0)
            return np.sqrt((x0 - y0) ** 2 + (x1 - y1) ** 2)
        return abs(y1 - e1)
    numer = e0 * y0
    denom = e0 * e0 - e1 * e1
    if denom > 0.0 and numer < denom:
        xde = numer / denom
        x0 = e0 * xde
        x1 = e1 * np.sqrt(max(1.0 - xde * xde, 0.0))
        return np.sqrt((x0 - y0) ** 2 + x1 * x1)
    return abs(y0 - e0)


@njit(cache=True)
def _sd_ellipse_kernel(px, py, a, b):
    n = px.shape[0]
    out = np.empty(n)
    swap = b > a
    e0 = b if swap else a
    e1 = a if swap else b
    for i in range(n):
        y0 = abs(py[i]) if swap else abs(px[i])
        y1 = abs(px[i]) if swap else abs(py[i])
        d = _ellipse_quadrant(y0, y1, e0, e1)
        if (y0 / e0) ** 2 + (y1 / e1) ** 2 < 1.0:
            d = -d
        out[i] = d
    return out


def sd_ellipse(px: np.ndarray, py: np.ndarray, a: float, b: float) -> np.ndarray:
    """Exact signed distance to the ellipse (x/a)^2 + (y/b)^2 = 1."""
    return _sd_ellipse_kernel(np.ascontiguousarray(px, dtype=np.float64),
                              np.ascontiguousarray(py, dtype=np.float64), float(a), float(b))


def _sd_box2(qx, qy, bx, by):
    dx, dy = np.abs(qx) - bx, np.abs(qy) - by
    outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
    return outside + np.minimum(np.maximum(dx, dy), 0.0)


@njit(cache=True)
def _sd_box3_kernel(p, cx, cy, cz, hx, hy, hz):
    n = p.shape[0]
    out = np.empty(n)
    for i in range(n):
        qx = abs(p[i, 0] - cx) - hx
        qy = abs(p[i, 1] - cy) - hy
        qz = abs(p[i, 2] - cz) - hz
        ox, oy, oz = max(qx, 0.0), max(qy, 0.0), max(qz, 0.0)
        out[i] = np.sqrt(ox * ox + oy * oy + oz * oz) + min(max(qx, max(qy, qz)), 0.0)
    return out


def _sd_box3(p: np.ndarray, half: np.ndarray, centre=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Signed distance to an axis-aligned box given its half extents."""
    return _sd_box3_kernel(np.ascontiguousarray(p, dtype=np.float64), float(centre[0]), float(centre[1]),
                           float(centre[2]), float(half[0]), float(half[1]), float(half[2]))


def _mirror_profile(right: list[tuple[float, float]]) -> np.ndarray:
    """Close a half-profile (r >= 0) into a polygon symmetric about the axis.

    Distances to the mirrored polygon equal distances to the revolved surface,
    because the mirrored half is never nearer than the original half.
    """
    r = np.asarray(right, dtype=np.float64)
    left = r[::-1].copy()
    left[:, 0] *= -1.0
    return np.vstack([r, left])


# --- families --------------------------------------------------------------------------


@dataclass(frozen=True)
class Family:
    category: str
    param_names: tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray
    sdf: Callable[[np.ndarray, np.ndarray], np.ndarray]
    aabb: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    yaw_symmetric: bool = False
    constraint: Callable[[np.ndarray], bool] = lambda p: True

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def median_extent(self) -> float:
        lo, hi = self.aabb(self.midpoint())
        return float(np.median(hi - lo))


def _apple_sdf(p, x):
    r, zs = p
    return sd_ellipse(np.hypot(x[:, 0], x[:, 1]), x[:, 2], r, r * zs)


def _apple_aabb(p):
    r, zs = p
    return np.array([-r, -r, -r * zs]), np.array([r, r, r * zs])


def bottle_profile(p) -> np.ndarray:
    rb, hb, rn, hn, sh = p
    right = [(rb, 0.0), (rb, hb)]
    for s in np.linspace(0.0, 1.0, 7)[1:]:
        right.append((rn + (rb - rn) * 0.5 * (1.0 + np.cos(np.pi * s)), hb + sh * s))
    right.append((rn, hb + sh + hn))
    return _mirror_profile(right)


def _bottle_sdf(p, x):
    return sd_polygon(np.hypot(x[:, 0], x[:, 1]), x[:, 2], bottle_profile(p))


def _bottle_aabb(p):
    rb, hb, rn, hn, sh = p
    return np.array([-rb, -rb, 0.0]), np.array([rb, rb, hb + sh + hn])


BOWL_FOOT = 0.4


def bowl_profile(p) -> np.ndarray:
    radius, height, t = p
    foot = BOWL_FOOT * radius
    foot_in = max(foot - t, 0.0)
    theta = np.linspace(0.0, 0.5 * np.pi, 9)
    outer = [(foot + (radius - foot) * np.sin(a), height * (1.0 - np.cos(a))) for a in theta]
    inner = [(foot_in + (radius - t - foot_in) * np.sin(a), t + (height - t) * (1.0 - np.cos(a)))
             for a in theta[::-1]]
    return _mirror_profile(outer + inner)


def _bowl_sdf(p, x):
    return sd_polygon(np.hypot(x[:, 0], x[:, 1]), x[:, 2], bowl_profile(p))


def _bowl_aabb(p):
    radius, height, _ = p
    return np.array([-radius, -radius, 0.0]), np.array([radius, radius, height])


def _box_sdf(p, x):
    half = np.asarray(p[:3])
    rr = min(p[3], half.min())
    return _sd_box3(x, half - rr) - rr


def _box_aabb(p):
    half = np.asarray(p[:3])
    return -half, half.copy()


def _can_sdf(p, x):
    radius, height, rr = p
    rr = min(rr, radius, 0.5 * height)
    q = np.hypot(x[:, 0], x[:, 1])
    return _sd_box2(q, x[:, 2] - 0.5 * height, radius - rr, 0.5 * height - rr) - rr


def _can_aabb(p):
    radius, height, _ = p
    return np.array([-radius, -radius, 0.0]), np.array([radius, radius, height])


def hammer_parts(p) -> list[tuple[np.ndarray, np.ndarray]]:
    """(centre, half-extents) of the handle and head boxes."""
    length, hw, head_len, head_hw, head_hh = p
    return [
        (np.zeros(3), np.array([0.5 * length, hw, hw])),
        (np.array([0.5 * length, 0.0, 0.0]), np.array([head_hw, 0.5 * head_len, head_hh])),
    ]


def _hammer_sdf(p, x):
    (c0, h0), (c1, h1) = hammer_parts(p)
    return np.minimum(_sd_box3(x, h0, c0), _sd_box3(x, h1, c1))


def _hammer_aabb(p):
    parts = hammer_parts(p)
    lo = np.min([c - h for c, h in parts], axis=0)
    hi = np.max([c + h for c, h in parts], axis=0)
    return lo, hi


FAMILIES: dict[str, Family] = {
    "apple": Family("apple", ("radius", "z_scale"), np.array([30.0, 0.8]), np.array([60.0, 1.1]),
                    _apple_sdf, _apple_aabb, yaw_symmetric=True),
    "bottle": Family(
        "bottle",
        ("body_radius", "body_height", "neck_radius", "neck_height", "shoulder"),
        np.array([25.0, 120.0, 8.0, 20.0, 5.0]), np.array([45.0, 220.0, 18.0, 60.0, 20.0]),
        _bottle_sdf, _bottle_aabb, yaw_symmetric=True, constraint=lambda p: p[2] < p[0],
    ),
    "bowl": Family("bowl", ("outer_radius", "height", "wall_thickness"),
                   np.array([50.0, 40.0, 3.0]), np.array([90.0, 80.0, 8.0]),
                   _bowl_sdf, _bowl_aabb, yaw_symmetric=True, constraint=lambda p: p[2] < p[1]),
    "box": Family("box", ("half_x", "half_y", "half_z", "edge_radius"),
                  np.array([20.0, 20.0, 20.0, 0.0]), np.array([80.0, 80.0, 80.0, 5.0]),
                  _box_sdf, _box_aabb),
    "can": Family("can", ("radius", "height", "rim_radius"),
                  np.array([25.0, 80.0, 0.0]), np.array([40.0, 150.0, 3.0]),
                  _can_sdf, _can_aabb, yaw_symmetric=True),
    "hammer": Family(
        "hammer",
        ("handle_length", "handle_half_width", "head_length", "head_half_width", "head_half_height"),
        np.array([200.0, 10.0, 60.0, 15.0, 15.0]), np.array([300.0, 15.0, 100.0, 25.0, 25.0]),
        _hammer_sdf, _hammer_aabb,
    ),
}


def family(category: str) -> Family:
    try:
        return FAMILIES[category]
    except KeyError:
        raise ValueError(f"unknown category {category!r}") from None


@dataclass(frozen=True)
class LatentShape:
    category: str
    params: tuple[float, ...]

    def __post_init__(self):
        fam = family(self.category)
        p = tuple(float(v) for v in np.asarray(self.params, dtype=np.float64).reshape(-1))
        if len(p) != fam.n_params:
            raise ValueError(f"{self.category} expects {fam.n_params} parameters, got {len(p)}")
        arr = np.asarray(p)
        if np.any(arr < fam.lo - 1e-9) or np.any(arr > fam.hi + 1e-9):
            raise ValueError(f"{self.category} parameters {p} outside bounds")
        object.__setattr__(self, "params", p)

    @property
    def family(self) -> Family:
        return family(self.category)

    @property
    def bounds(self) -> np.ndarray:
        fam = self.family
        return np.column_stack([fam.lo, fam.hi])

    def as_array(self) -> np.ndarray:
        return np.asarray(self.params)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.family.aabb(self.as_array())

    def bottom_z(self) -> float:
        return float(self.aabb()[0][2])

    def to_dict(self) -> dict:
        return {"category": self.category, "params": list(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentShape":
        return cls(d["category"], tuple(d["params"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def clip_latent(category: str, params) -> LatentShape:
    fam = family(category)
    return LatentShape(category, tuple(np.clip(np.asarray(params, dtype=np.float64), fam.lo, fam.hi)))


def midpoint_latent(category: str) -> LatentShape:
    return LatentShape(category, tuple(family(category).midpoint()))


def sample_latent(category: str, rng: np.random.Generator) -> LatentShape:
    """Uniform draw inside the bounds, rejecting draws that break the family constraint."""
    fam = family(category)
    while True:
        p = fam.lo + (fam.hi - fam.lo) * rng.random(fam.n_params)
        if fam.constraint(p):
            return LatentShape(category, tuple(p))


def latent_sdf(shape: LatentShape, points) -> np.ndarray | float:
    """Signed distance (mm) in the object frame; scalar in, scalar out."""
    x = np.asarray(points, dtype=np.float64)
    single = x.ndim == 1
    vals = shape.family.sdf(shape.as_array(), x.reshape(-1, 3))
    return float(vals[0]) if single else vals


def latent_sdf_params(category: str, params: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Unvalidated fast path used inside optimisers."""
    return FAMILIES[category].sdf(params, points)


MESH_PAD_VOXELS = 3


def latent_mesh(shape: LatentShape, resolution: int = 64) -> TriangleMesh:
    """Closed object-frame mesh of the zero level set, ``resolution`` nodes on the longest axis."""
    if resolution < 32:
        raise ResolutionTooLow(f"resolution {resolution} < 32")
    return _latent_mesh_cached(shape.category, shape.params, int(resolution))


@functools.lru_cache(maxsize=256)
def _latent_mesh_cached(category: str, params: tuple, resolution: int) -> TriangleMesh:
    shape = LatentShape(category, params)
    lo, hi = shape.aabb()
    voxel = float((hi - lo).max()) / (resolution - 1 - 2 * MESH_PAD_VOXELS)
    pad = MESH_PAD_VOXELS * voxel
    grid = sdf_grid_from_function(lambda pts: latent_sdf(shape, pts), lo - pad, hi + pad, resolution)
    return marching_cubes(grid, 0.0, frame="object")


def latent_mesh_voxel(shape: LatentShape, resolution: int = 64) -> float:
    lo, hi = shape.aabb()
    return float((hi - lo).max()) / (resolution - 1 - 2 * MESH_PAD_VOXELS)
