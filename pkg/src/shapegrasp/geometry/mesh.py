"""Indexed triangle meshes, closedness diagnostics and primitive builders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import EmptyMesh
from .transforms import RigidTransform

FRAMES = ("object", "world", "camera")
DEGENERATE_AREA_MM2 = 1e-6


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    frame: str = "object"

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame tag {self.frame!r}")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite vertex")
        v.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        v, t = self.vertices, self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def face_areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = self.corners()
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n_vertices == 0:
            raise EmptyMesh("mesh has no vertices")
        used = self.vertices[np.unique(self.triangles)] if self.n_triangles else self.vertices
        return used.min(axis=0), used.max(axis=0)

    def signed_volume(self) -> float:
        a, b, c = self.corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def transformed(self, transform: RigidTransform, frame: str | None = None) -> "TriangleMesh":
        return TriangleMesh(transform.apply(self.vertices), self.triangles, frame or self.frame)

    def with_frame(self, frame: str) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles, frame)

    def drop_degenerate(self, min_area: float = DEGENERATE_AREA_MM2) -> "TriangleMesh":
        keep = self.face_areas() >= min_area
        return TriangleMesh(self.vertices, self.triangles[keep], self.frame)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices, self.triangles[:, ::-1], self.frame)

    def compact(self) -> "TriangleMesh":
        """Drop vertices that no triangle references."""
        used, inv = np.unique(self.triangles, return_inverse=True)
        return TriangleMesh(self.vertices[used], inv.reshape(-1, 3), self.frame)

    def sample_surface(
        self, count: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Area-uniform surface samples.

        Returns:
            points (count, 3), unit face normals (count, 3), face indices (count,).
        """
        if count <= 0:
            return np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
        areas = self.face_areas()
        total = areas.sum()
        if total <= 0:
            raise EmptyMesh("mesh has zero surface area")
        cdf = np.cumsum(areas) / total
        faces = np.searchsorted(cdf, rng.random(count), side="right")
        faces = np.minimum(faces, len(areas) - 1)
        r1 = np.sqrt(rng.random(count))
        r2 = rng.random(count)
        a, b, c = (x[faces] for x in self.corners())
        pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
        return pts, self.face_normals()[faces], faces


def merge_meshes(meshes: list[TriangleMesh], frame: str | None = None) -> TriangleMesh:
    verts, tris, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + offset)
        offset += m.n_vertices
    if not verts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), frame or "object")
    return TriangleMesh(np.vstack(verts), np.vstack(tris), frame or meshes[0].frame)


@dataclass(frozen=True)
class WatertightReport:
    closed: bool
    consistent_winding: bool
    boundary_edges: int
    nonmanifold_edges: int
    inconsistent_edges: int
    degenerate_triangles: int

    @property
    def valid(self) -> bool:
        return self.closed and self.consistent_winding and self.degenerate_triangles == 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["valid"] = self.valid
        return d


def watertight_check(mesh: TriangleMesh) -> WatertightReport:
    """Edge-manifold, winding and degeneracy audit. Never raises."""
    t = mesh.triangles
    if len(t) == 0:
        return WatertightReport(False, False, 0, 0, 0, 0)
    n = max(mesh.n_vertices, 1)
    src = t.reshape(-1)
    dst = t[:, [1, 2, 0]].reshape(-1)
    directed = src * n + dst
    undirected = np.minimum(src, dst) * n + np.maximum(src, dst)
    ukeys, ucounts = np.unique(undirected, return_counts=True)
    boundary = int(np.sum(ucounts == 1))
    nonmanifold = int(np.sum(ucounts > 2))
    dkeys, dcounts = np.unique(directed, return_counts=True)
    # an edge used twice in the same direction means neighbouring faces disagree
    repeated = dkeys[dcounts > 1]
    rs, rd = repeated // n, repeated % n
    rep_undirected = np.minimum(rs, rd) * n + np.maximum(rs, rd)
    manifold_keys = ukeys[ucounts == 2]
    inconsistent = int(np.isin(rep_undirected, manifold_keys).sum())
    degenerate = int(np.sum(mesh.face_areas() < DEGENERATE_AREA_MM2))
    closed = boundary == 0 and nonmanifold == 0
    return WatertightReport(
        closed=closed,
        consistent_winding=inconsistent == 0 and nonmanifold == 0,
        boundary_edges=boundary,
        nonmanifold_edges=nonmanifold,
        inconsistent_edges=inconsistent,
        degenerate_triangles=degenerate,
    )


# --- primitives (outward winding) -------------------------------------------------


def box_mesh(half_extents, center=(0.0, 0.0, 0.0), frame: str = "object") -> TriangleMesh:
    hx, hy, hz = half_extents
    c = np.asarray(center, dtype=np.float64)
    v = np.array(
        [[sx * hx, sy * hy, sz * hz] for sz in (-1, 1) for sy in (-1, 1) for sx in (-1, 1)],
        dtype=np.float64,
    ) + c
    # vertex index = ix + 2*iy + 4*iz
    quads = [
        (0, 2, 3, 1),  # -z
        (4, 5, 7, 6),  # +z
        (0, 1, 5, 4),  # -y
        (2, 6, 7, 3),  # +y
        (0, 4, 6, 2),  # -x
        (1, 3, 7, 5),  # +x
    ]
    tris = []
    for a, b, cc, d in quads:
        tris += [(a, b, cc), (a, cc, d)]
    return TriangleMesh(v, np.array(tris), frame)


def icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0),
              frame: str = "object") -> TriangleMesh:
    phi = (1 + 5 ** 0.5) / 2
    v = [
        (-1, phi, 0), (1, phi, 0), (-1, -phi, 0), (1, -phi, 0),
        (0, -1, phi), (0, 1, phi), (0, -1, -phi), (0, 1, -phi),
        (phi, 0, -1), (phi, 0, 1), (-phi, 0, -1), (-phi, 0, 1),
    ]
    f = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [np.asarray(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    vv = np.array(verts) * radius + np.asarray(center, dtype=np.float64)
    return TriangleMesh(vv, np.array(faces), frame)


def cylinder_mesh(radius: float, height: float, segments: int = 64,
                  center_base=(0.0, 0.0, 0.0), frame: str = "object") -> TriangleMesh:
    """Capped cylinder along +z from ``center_base``."""
    ang = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(segments)])
    top = ring + [0.0, 0.0, height]
    v = np.vstack([ring, top, [[0.0, 0.0, 0.0], [0.0, 0.0, height]]])
    v += np.asarray(center_base, dtype=np.float64)
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, j, segments + j), (i, segments + j, segments + i)]
        tris += [(cb, j, i), (ct, segments + i, segments + j)]
    return TriangleMesh(v, np.array(tris), frame)
