"""Shared geometric substrate: meshes, SDF grids, iso-surfaces, transforms, Chamfer."""

from .isosurface import marching_cubes
from .mesh import (
    TriangleMesh,
    WatertightReport,
    box_mesh,
    cylinder_mesh,
    icosphere,
    merge_meshes,
    watertight_check,
)
from .pointcloud import ChamferReport, PointCloud, chamfer_bidirectional
from .sdf import SdfGrid, sample_sdf, sample_sdf_many, sdf_from_mesh
from .transforms import RigidTransform, look_at, sample_uniform_rotation

__all__ = [
    "ChamferReport", "PointCloud", "RigidTransform", "SdfGrid", "TriangleMesh",
    "WatertightReport", "box_mesh", "chamfer_bidirectional", "cylinder_mesh", "icosphere",
    "look_at", "marching_cubes", "merge_meshes", "sample_sdf", "sample_sdf_many",
    "sample_uniform_rotation", "sdf_from_mesh", "watertight_check",
]
