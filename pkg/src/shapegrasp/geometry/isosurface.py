"""Iso-surface extraction from SDF grids."""

from __future__ import annotations

import numpy as np
from skimage.measure import marching_cubes as _lewiner

from ..errors import EmptySurface, IsoOutOfRange
from .mesh import DEGENERATE_AREA_MM2, TriangleMesh
from .sdf import SdfGrid

# node values this close to iso (in voxels) are pushed off it so no vertex sits on a node
_NUDGE = 1e-3


def marching_cubes(grid: SdfGrid, iso: float = 0.0, frame: str = "object") -> TriangleMesh:
    """Extract the ``iso`` level set as a triangle mesh with outward winding.

    Uses Lewiner's topology-consistent case tables, so the result is closed and
    consistently wound whenever the level set stays inside the grid.

    Raises:
        IsoOutOfRange: ``iso`` is not finite.
        EmptySurface: no node lies on each side of ``iso``.
    """
    if not np.isfinite(iso):
        raise IsoOutOfRange(f"iso {iso!r} is not finite")
    v = np.array(grid.values, dtype=np.float64)
    if not (v.min() < iso < v.max()):
        raise EmptySurface(f"iso {iso} outside value range [{v.min():.3f}, {v.max():.3f}]")
    eps = _NUDGE * grid.voxel_size
    near = np.abs(v - iso) < eps
    v[near] = np.where(v[near] >= iso, iso + eps, iso - eps)
    verts, faces, _, _ = _lewiner(v, level=iso, spacing=(grid.voxel_size,) * 3, method="lewiner")
    verts = verts.astype(np.float64) + grid.origin
    mesh = _collapse_degenerate(verts, faces.astype(np.int64))
    return mesh.with_frame(frame)


def _collapse_degenerate(verts: np.ndarray, faces: np.ndarray) -> TriangleMesh:
    """Merge the shortest edge of every sub-threshold triangle until none remain."""
    for _ in range(16):
        a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        bad = np.flatnonzero(area < DEGENERATE_AREA_MM2)
        if len(bad) == 0:
            break
        remap = np.arange(len(verts))
        for f in bad:
            tri = [remap[i] for i in faces[f]]
            if len(set(tri)) < 3:
                continue
            pairs = [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])]
            i, j = min(pairs, key=lambda e: np.linalg.norm(verts[e[0]] - verts[e[1]]))
            verts[i] = 0.5 * (verts[i] + verts[j])
            remap[remap == j] = i
        faces = remap[faces]
        keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 2] != faces[:, 0])
        faces = faces[keep]
    return TriangleMesh(verts, faces).compact()
