"""Point clouds and the bidirectional Chamfer metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..errors import EmptyCloud
from .mesh import FRAMES
from .transforms import RigidTransform

NORMAL_TOL = 1e-6


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    frame: str = "world"

    def __post_init__(self):
        p = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame tag {self.frame!r}")
        p.flags.writeable = False
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(p):
                raise ValueError("normals and points differ in length")
            if len(n) and np.abs(np.linalg.norm(n, axis=1) - 1.0).max() > NORMAL_TOL:
                raise ValueError("normals must be unit length")
            n.flags.writeable = False
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, transform: RigidTransform, frame: str) -> "PointCloud":
        n = None if self.normals is None else transform.apply_vectors(self.normals)
        if n is not None and len(n):
            n = n / np.linalg.norm(n, axis=1, keepdims=True)
        return PointCloud(transform.apply(self.points), n, frame)

    def subset(self, index) -> "PointCloud":
        n = None if self.normals is None else self.normals[index]
        return PointCloud(self.points[index], n, self.frame)

    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise EmptyCloud("empty cloud has no centroid")
        return self.points.mean(axis=0)


def unit_normals(n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


@dataclass(frozen=True)
class ChamferReport:
    value_mm: float
    direction_a_to_b_mm: float
    direction_b_to_a_mm: float
    count_a: int
    count_b: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def chamfer_bidirectional(a, b) -> ChamferReport:
    """Mean of the two directed mean nearest-neighbour Euclidean distances (mm)."""
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyCloud("Chamfer distance needs two non-empty clouds")
    ab = float(cKDTree(pb).query(pa)[0].mean())
    ba = float(cKDTree(pa).query(pb)[0].mean())
    return ChamferReport(0.5 * (ab + ba), ab, ba, len(pa), len(pb))
