"""File formats: ASCII OBJ meshes, ASCII PLY / XYZ clouds, binary SDF containers.

All lengths on disk are millimetres.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh
from .pointcloud import PointCloud, unit_normals
from .sdf import SdfGrid

SDF_MAGIC = b"SHPGRASP-SDF-v1\n"
assert len(SDF_MAGIC) == 16
_SDF_HEADER = struct.Struct("<4d3q")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path, frame: str = "object") -> TriangleMesh:
    """Vertices and faces only; polygons are fan-triangulated, ``v/vt/vn`` refs accepted."""
    verts, faces = [], []
    for raw in Path(path).read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            for k in range(1, len(idx) - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3), frame)


def write_ply(path, cloud: PointCloud) -> None:
    has_n = cloud.normals is not None
    header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
              "property double x", "property double y", "property double z"]
    if has_n:
        header += ["property double nx", "property double ny", "property double nz"]
    header.append("end_header")
    rows = np.hstack([cloud.points, cloud.normals]) if has_n else cloud.points
    body = [" ".join(_fmt(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(header + body) + "\n")


def read_ply(path, frame: str = "world") -> PointCloud:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    count, props, i = 0, [], 1
    while lines[i].strip() != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["format", "ascii"] or parts[0] in ("comment", "obj_info", "format"):
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValueError("only ASCII PLY is supported")
        elif parts[0] == "element":
            if parts[1] == "vertex":
                count = int(parts[2])
        elif parts[0] == "property" and len(props) < 64:
            props.append(parts[-1])
        i += 1
    data = np.array([[float(x) for x in ln.split()] for ln in lines[i + 1:i + 1 + count]]).reshape(count, -1)
    col = {name: k for k, name in enumerate(props)}
    pts = data[:, [col["x"], col["y"], col["z"]]]
    normals = None
    if all(k in col for k in ("nx", "ny", "nz")):
        normals = unit_normals(data[:, [col["nx"], col["ny"], col["nz"]]])
    return PointCloud(pts, normals, frame)


def write_xyz(path, cloud: PointCloud) -> None:
    rows = np.hstack([cloud.points, cloud.normals]) if cloud.normals is not None else cloud.points
    Path(path).write_text("".join(" ".join(_fmt(v) for v in r) + "\n" for r in rows))


def read_xyz(path, frame: str = "world") -> PointCloud:
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    if not rows:
        return PointCloud(np.zeros((0, 3)), None, frame)
    data = np.array(rows, dtype=np.float64)
    if data.shape[1] not in (3, 6):
        raise ValueError("XYZ rows must have 3 or 6 columns")
    normals = unit_normals(data[:, 3:6]) if data.shape[1] == 6 else None
    return PointCloud(data[:, :3], normals, frame)


def read_cloud(path, frame: str = "world") -> PointCloud:
    p = Path(path)
    if p.suffix.lower() == ".ply":
        return read_ply(p, frame)
    return read_xyz(p, frame)


def write_sdf(path, grid: SdfGrid) -> None:
    """16-byte magic, ``<4d3q`` header (origin xyz, voxel size, dims), then float32 x-fastest."""
    head = _SDF_HEADER.pack(*grid.origin, grid.voxel_size, *grid.dims)
    body = np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(SDF_MAGIC + head + body)


def read_sdf(path) -> SdfGrid:
    raw = Path(path).read_bytes()
    if raw[:16] != SDF_MAGIC:
        raise ValueError(f"{path}: bad SDF magic")
    ox, oy, oz, vs, nx, ny, nz = _SDF_HEADER.unpack_from(raw, 16)
    off = 16 + _SDF_HEADER.size
    vals = np.frombuffer(raw, dtype="<f4", count=nx * ny * nz, offset=off)
    return SdfGrid((ox, oy, oz), vs, vals.reshape((nx, ny, nz), order="F").astype(np.float64))
