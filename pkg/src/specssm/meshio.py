"""Mesh and voxel-grid file formats.

Meshes: ASCII OFF and binary little-endian PLY (float64 vertices, uint32 faces).

Voxel grids use a small text header followed by the raw little-endian payload::

    VOXR 1
    dims <nx> <ny> <nz>
    spacing <sx> <sy> <sz>
    dtype <numpy dtype string, e.g. <f8 or |u1>
    end_header
    <nx*ny*nz values, x fastest>
"""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .geomcore import DataError, Mesh, VoxelGrid


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_off(path, mesh: Mesh) -> None:
    lines = ["OFF", f"{mesh.n} {len(mesh.faces)} 0"]
    lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_off(path) -> Mesh:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise DataError(f"{path}: not an OFF file")
    nv, nf = int(tokens[1]), int(tokens[2])
    pos = 4
    verts = np.array(tokens[pos: pos + 3 * nv], dtype=np.float64).reshape(nv, 3)
    pos += 3 * nv
    faces = []
    for _ in range(nf):
        cnt = int(tokens[pos])
        idx = [int(t) for t in tokens[pos + 1: pos + 1 + cnt]]
        pos += 1 + cnt
        # fan-triangulate polygons
        for q in range(1, cnt - 1):
            faces.append((idx[0], idx[q], idx[q + 1]))
    return Mesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(path, mesh: Mesh) -> None:
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {mesh.n}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar uint vertex_indices\nend_header\n"
    )
    vbytes = mesh.vertices.astype("<f8").tobytes()
    ftype = np.dtype([("cnt", "u1"), ("idx", "<u4", (3,))])
    fdata = np.empty(len(mesh.faces), dtype=ftype)
    fdata["cnt"] = 3
    fdata["idx"] = mesh.faces
    atomic_write_bytes(path, header.encode("ascii") + vbytes + fdata.tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> Mesh:
    """Read a binary little-endian PLY with x/y/z vertex properties and triangle faces."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise DataError(f"{path}: only binary little-endian PLY is supported")
    elements = []
    for line in header:
        parts = line.split()
        if parts[:1] == ["element"]:
            elements.append([parts[1], int(parts[2]), []])
        elif parts[:1] == ["property"]:
            elements[-1][2].append(parts[1:])
    verts = faces = None
    offset = 0
    for name, count, props in elements:
        if name == "face":
            (_, cnt_t, idx_t, _) = props[0]
            dt = np.dtype([("cnt", "<" + _PLY_TYPES[cnt_t]), ("idx", "<" + _PLY_TYPES[idx_t], (3,))])
            data = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            if count and np.any(data["cnt"] != 3):
                raise DataError(f"{path}: only triangle faces are supported")
            faces = data["idx"].astype(np.int64)
        else:
            dt = np.dtype([(p[1], "<" + _PLY_TYPES[p[0]]) for p in props])
            data = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            if name == "vertex":
                verts = np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64)
        offset += dt.itemsize * count
    if verts is None:
        raise DataError(f"{path}: no vertex element")
    return Mesh(verts, faces if faces is not None else np.zeros((0, 3), dtype=np.int64))


def read_mesh(path) -> Mesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".off":
        return read_off(path)
    if suffix == ".ply":
        return read_ply(path)
    raise DataError(f"unsupported mesh format: {path}")


def write_mesh(path, mesh: Mesh) -> None:
    if Path(path).suffix.lower() == ".off":
        write_off(path, mesh)
    else:
        write_ply(path, mesh)


def write_voxels(path, grid: VoxelGrid) -> None:
    dt = grid.data.dtype.newbyteorder("<") if grid.data.dtype.byteorder not in "|" else grid.data.dtype
    header = (
        "VOXR 1\n"
        f"dims {grid.dims[0]} {grid.dims[1]} {grid.dims[2]}\n"
        f"spacing {grid.spacing[0]!r} {grid.spacing[1]!r} {grid.spacing[2]!r}\n"
        f"dtype {dt.str}\nend_header\n"
    )
    atomic_write_bytes(path, header.encode("ascii") + grid.data.astype(dt).tobytes())


def read_voxels(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"VOXR 1\n") or end < 0:
        raise DataError(f"{path}: not a VOXR voxel file")
    fields = {}
    for line in raw[:end].decode("ascii").splitlines()[1:]:
        key, *vals = line.split()
        fields[key] = vals
    dims = tuple(int(v) for v in fields["dims"])
    spacing = tuple(float(v) for v in fields["spacing"])
    dtype = np.dtype(fields["dtype"][0])
    payload = np.frombuffer(raw, dtype=dtype, offset=end + len(b"end_header\n"))
    return VoxelGrid(dims, spacing, payload.copy())
