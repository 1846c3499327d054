"""Regular signed-distance grids: construction from meshes and trilinear sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import DegenerateBounds, EmptyMesh, OutOfBounds, ResolutionTooLow
from .bvh import build_bvh, closest_distances, first_hits
from .mesh import TriangleMesh, WatertightReport, watertight_check

LIPSCHITZ_EPS_MM = 1e-3
# band nodes reach the exterior through at most this many uncrossed 6-neighbour steps
BAND_HOPS = 3


@dataclass(frozen=True)
class SdfGrid:
    """Signed distances sampled at nodes ``origin + (i, j, k) * voxel_size``.

    ``values`` has shape ``dims`` and is indexed ``[i, j, k]`` (x, y, z).
    """

    origin: np.ndarray
    voxel_size: float
    values: np.ndarray

    def __post_init__(self):
        o = np.array(self.origin, dtype=np.float64).reshape(3)
        vals = np.array(self.values, dtype=np.float64)
        if vals.ndim != 3 or min(vals.shape) < 2:
            raise ValueError("values must be a 3D array with at least 2 nodes per axis")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not np.all(np.isfinite(vals)):
            raise ValueError("SDF values must be finite")
        o.flags.writeable = False
        vals.flags.writeable = False
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.asarray(self.dims) - 1) * self.voxel_size

    def node_positions(self) -> np.ndarray:
        axes = [self.origin[k] + np.arange(self.dims[k]) * self.voxel_size for k in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack(g, axis=-1)

    def max_adjacent_difference(self) -> float:
        v = self.values
        return float(max(np.abs(np.diff(v, axis=k)).max() for k in range(3)))

    def lipschitz_ok(self) -> bool:
        return self.max_adjacent_difference() <= self.voxel_size * np.sqrt(3) + LIPSCHITZ_EPS_MM

    def contains(self, points: np.ndarray, tol: float = 1e-9) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.origin - tol) & (p <= self.upper + tol), axis=1)


def _grid_layout(lo: np.ndarray, hi: np.ndarray, resolution: int) -> tuple[np.ndarray, float, tuple]:
    ext = hi - lo
    voxel = float(ext.max()) / (resolution - 1)
    dims = np.maximum(np.ceil(ext / voxel - 1e-9).astype(int) + 1, 2)
    center = 0.5 * (lo + hi)
    origin = center - 0.5 * (dims - 1) * voxel
    return origin, voxel, tuple(int(d) for d in dims)


def sdf_from_mesh(
    mesh: TriangleMesh, resolution: int = 64, padding: float | None = None
) -> tuple[SdfGrid, WatertightReport]:
    """Signed distance grid of ``mesh`` via unsigned distance plus exterior flood fill.

    Nodes farther than one voxel from the surface are exterior iff 6-connected to
    the grid boundary through such nodes. Nodes inside that one-voxel band join the
    exterior when a short chain of neighbour steps links them to it without crossing
    a triangle. Everything else is negated.

    Args:
        mesh: input surface, need not be closed.
        resolution: nodes along the longest padded axis.
        padding: mm added on every side of the AABB; defaults to 10% of its diagonal.

    Returns:
        The grid and the closedness diagnostic of the (degenerate-free) input.
    """
    if mesh.is_empty():
        raise EmptyMesh("cannot convert an empty mesh")
    if resolution < 8:
        raise ResolutionTooLow(f"resolution {resolution} < 8")
    clean = mesh.drop_degenerate()
    if clean.is_empty():
        raise EmptyMesh("mesh has only degenerate triangles")
    lo, hi = clean.bounds()
    if padding is None:
        padding = 0.1 * float(np.linalg.norm(hi - lo))
    if padding < 0:
        raise ValueError("padding must be >= 0")
    lo, hi = lo - padding, hi + padding
    if np.any(hi - lo <= 0):
        raise DegenerateBounds("zero-extent bounding box")
    origin, voxel, dims = _grid_layout(lo, hi, resolution)

    probe = SdfGrid(origin, voxel, np.zeros(dims))
    nodes = probe.node_positions().reshape(-1, 3)
    bvh = build_bvh(clean.vertices, clean.triangles)
    udf, _ = closest_distances(bvh, nodes)
    udf = udf.reshape(dims)

    exterior = _flood_exterior(udf, voxel, bvh, origin)
    values = np.where(exterior, udf, -udf)
    return SdfGrid(origin, voxel, values), watertight_check(clean)


def _flood_exterior(udf: np.ndarray, voxel: float, bvh, origin: np.ndarray) -> np.ndarray:
    free = udf > voxel
    labels, _ = ndimage.label(free)  # default structure = 6-connectivity
    border = np.concatenate([
        labels[0].ravel(), labels[-1].ravel(), labels[:, 0].ravel(),
        labels[:, -1].ravel(), labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
    ])
    keep = np.unique(border[border > 0])
    exterior = np.isin(labels, keep)

    band = ~free
    for _ in range(BAND_HOPS):
        added = np.zeros_like(exterior)
        for axis in range(3):
            for step in (-1, 1):
                # candidate = band node whose neighbour at `step` along `axis` is exterior
                nb = np.zeros_like(exterior)
                src = [slice(None)] * 3
                dst = [slice(None)] * 3
                if step == 1:
                    dst[axis], src[axis] = slice(0, -1), slice(1, None)
                else:
                    dst[axis], src[axis] = slice(1, None), slice(0, -1)
                nb[tuple(dst)] = exterior[tuple(src)]
                cand = nb & band & ~exterior & ~added
                if not cand.any():
                    continue
                idx = np.argwhere(cand)
                start = origin + (idx + np.eye(3, dtype=int)[axis] * step) * voxel
                direction = np.zeros((len(idx), 3))
                direction[:, axis] = -step
                t, _ = first_hits(bvh, start, direction, tmin=0.0, tmax=voxel * (1 + 1e-9))
                ok = ~np.isfinite(t)
                sel = idx[ok]
                added[sel[:, 0], sel[:, 1], sel[:, 2]] = True
        if not added.any():
            break
        exterior |= added
    return exterior


def _trilinear(grid: SdfGrid, points: np.ndarray) -> np.ndarray:
    f = (points - grid.origin) / grid.voxel_size
    dims = np.asarray(grid.dims)
    i0 = np.clip(np.floor(f).astype(np.int64), 0, dims - 2)
    t = np.clip(f - i0, 0.0, 1.0)
    v = grid.values
    out = np.zeros(len(points))
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1 - t[:, 2]
                out += wx * wy * wz * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out


def sample_sdf(grid: SdfGrid, point) -> float:
    """Trilinear interpolation of the 8 nodes surrounding ``point``."""
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    if not grid.contains(p)[0]:
        raise OutOfBounds(f"point {p[0].tolist()} outside grid")
    return float(_trilinear(grid, p)[0])


def sample_sdf_many(grid: SdfGrid, points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not grid.contains(p).all():
        raise OutOfBounds("some points lie outside the grid")
    return _trilinear(grid, p)


def sdf_grid_from_function(fn, lo, hi, resolution: int) -> SdfGrid:
    """Sample an SDF callable ``fn(points) -> values`` on a grid spanning [lo, hi]."""
    origin, voxel, dims = _grid_layout(np.asarray(lo, float), np.asarray(hi, float), resolution)
    probe = SdfGrid(origin, voxel, np.zeros(dims))
    vals = fn(probe.node_positions().reshape(-1, 3)).reshape(dims)
    return SdfGrid(origin, voxel, vals)
