"""Synthetic deformable shape families with ground-truth correspondences.

Every clean family member is a deformation of one parametric sphere mesh,
so vertex ``v`` of any member corresponds to vertex ``v`` of the family
template. The optional voxelize/remesh path destroys that shared indexing
and replaces it with an approximate nearest-neighbor ground truth.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, cKDTree

from .correspond import PointMap
from .geomcore import (DataError, Mesh, VoxelGrid, chamfer_distance, largest_component,
                       marching_cubes, n_components)

BASES = ("ellipsoid", "thyroid", "heart")


@dataclass
class FamilySpec:
    base: str = "ellipsoid"
    semi_axes: tuple[float, float, float] = (30.0, 20.0, 12.0)
    n_shapes: int = 20
    amplitude: float = 0.05
    n_modes: int = 4
    noise: float = 0.0
    remesh: bool = False
    label_noise: float = 0.0
    voxel_size: float = 0.0
    seed: int = 0
    resolution: int = 1500

    def __post_init__(self):
        self.semi_axes = tuple(float(a) for a in self.semi_axes)
        if self.base not in BASES:
            raise DataError(f"unknown base shape {self.base!r}; choose from {BASES}")
        if self.n_shapes < 2:
            raise DataError("a family needs at least two shapes")
        if min(self.amplitude, self.noise, self.label_noise, self.voxel_size) < 0 or self.n_modes < 0:
            raise DataError("amplitudes and noise levels must be non-negative")
        if self.resolution < 500:
            raise DataError("resolution must give at least 500 vertices")
        if min(self.semi_axes) <= 0:
            raise DataError("semi-axes must be positive")

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FamilySpec":
        kv = parse_kv(text)
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            t = str(f.type)
            if t.startswith("tuple"):
                kwargs[f.name] = tuple(float(x) for x in raw.split(","))
            elif t == "bool":
                kwargs[f.name] = raw.lower() in ("1", "true", "yes", "on")
            elif t == "int":
                kwargs[f.name] = int(raw)
            elif t == "float":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = raw
        return cls(**kwargs)


def parse_kv(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass
class FamilyMember:
    mesh: Mesh
    gt: PointMap
    gt_exact: bool
    grid: VoxelGrid | None = None
    clean: Mesh | None = None


# ------------------------------------------------------------------ meshes


def sphere_mesh(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Fibonacci-lattice unit sphere with ``n`` vertices and outward-facing triangles."""
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5 ** 0.5) * i
    u = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    faces = ConvexHull(u).simplices.astype(np.int64)
    normal = np.cross(u[faces[:, 1]] - u[faces[:, 0]], u[faces[:, 2]] - u[faces[:, 0]])
    flip = np.einsum("ij,ij->i", normal, u[faces].mean(axis=1)) < 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return u, faces


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    t = (1 + 5 ** 0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], float)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(3, -1).T + len(v)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        v = np.vstack([v, mid / np.linalg.norm(mid, axis=1, keepdims=True)])
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = inv[:, 0], inv[:, 1], inv[:, 2]
        f = np.concatenate([np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
                            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
    return Mesh(v * radius, f)


def base_shape(u: np.ndarray, spec: FamilySpec) -> np.ndarray:
    """Map unit-sphere parameters to the undeformed family template."""
    a, b, c = spec.semi_axes
    if spec.base == "ellipsoid":
        return u * np.array([a, b, c])
    if spec.base == "thyroid":
        # two lobes joined by a narrow isthmus, lobes bent forward
        waist = 1 - 0.6 * np.exp(-(u[:, 0] / 0.3) ** 2)
        p = np.stack([a * u[:, 0], b * u[:, 1] * waist, c * u[:, 2] * waist], axis=1)
        p[:, 1] += 0.35 * b * u[:, 0] ** 2
        return p
    # heart analogue: three lobes on a common body
    centers = np.array([[1.0, 0.0, 0.2], [-0.5, 0.8, -0.2], [-0.4, -0.7, 0.5]])
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    r = 1 + np.sum([0.45 * np.exp(4.0 * (u @ cc - 1)) for cc in centers], axis=0)
    return u * r[:, None] * np.array([a, b, c]) / max(a, b, c) * a


def _face_normals(v, f):
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


def deform(u, base, faces, spec: FamilySpec, rng: np.random.Generator) -> np.ndarray:
    """Smooth bump displacements plus per-vertex noise, applied as a radial scaling of the template.

    Scaling about the center keeps thin parts (lobe tips, isthmus) from
    inverting under bumps that are large compared to their local radius.
    """
    diam = Mesh(base, faces).diameter()
    radius = np.linalg.norm(base, axis=1).mean()
    disp = np.zeros(len(u))
    for _ in range(spec.n_modes):
        center = rng.normal(size=3)
        center /= np.linalg.norm(center)
        kappa = rng.uniform(1.5, 5.0)
        disp += rng.normal(0.0, spec.amplitude * diam) * np.exp(kappa * (u @ center - 1))
    if spec.noise > 0:
        disp += rng.normal(0.0, spec.noise * diam, size=len(u))
    return base * (1.0 + disp / radius)[:, None]


def _valid(v, f, ref_normals) -> bool:
    """No triangle flipped relative to the template and the mesh stays connected."""
    fn = _face_normals(v, f)
    return bool(np.all(np.einsum("ij,ij->i", fn, ref_normals) > 0))


# ---------------------------------------------------------- voxel remeshing


def voxelize(mesh: Mesh, spacing: float, margin: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Inside/outside occupancy of a closed mesh by z-ray parity; returns (occupancy[x,y,z], origin)."""
    v, f = mesh.vertices, mesh.faces
    # irrational offsets keep rays off vertices and edges
    origin = v.min(0) - margin * spacing + spacing * np.array([0.1234567, 0.2345678, 0.0])
    dims = np.ceil((v.max(0) + margin * spacing - origin) / spacing).astype(int) + 1
    toggles = np.zeros((dims[0], dims[1], dims[2] + 1), dtype=np.int32)
    g = (v - origin) / spacing
    for tri in f:
        p = g[tri]
        lo = np.ceil(p[:, :2].min(0)).astype(int)
        hi = np.floor(p[:, :2].max(0)).astype(int)
        if np.any(hi < lo):
            continue
        xs, ys = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
        xs, ys = xs.ravel(), ys.ravel()
        (x0, y0, z0), (x1, y1, z1), (x2, y2, z2) = p
        det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(det) < 1e-14:
            continue
        l0 = ((y1 - y2) * (xs - x2) + (x2 - x1) * (ys - y2)) / det
        l1 = ((y2 - y0) * (xs - x2) + (x0 - x2) * (ys - y2)) / det
        l2 = 1 - l0 - l1
        inside = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not inside.any():
            continue
        z = l0[inside] * z0 + l1[inside] * z1 + l2[inside] * z2
        iz = np.clip(np.ceil(z).astype(int), 0, dims[2])
        np.add.at(toggles, (xs[inside], ys[inside], iz), 1)
    occ = (np.cumsum(toggles, axis=2)[:, :, : dims[2]] % 2).astype(np.uint8)
    return occ, origin


def corrupt_labels(occ: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Flip voxels in a two-voxel band around the boundary with probability ``prob``."""
    if prob <= 0:
        return occ
    solid = occ.astype(bool)
    band = ndimage.binary_dilation(solid, iterations=2) & ~ndimage.binary_erosion(solid, iterations=2)
    flips = band & (rng.random(occ.shape) < prob)
    out = solid ^ flips
    return out.astype(np.uint8)


def remesh(clean: Mesh, spacing: float, label_noise: float, rng: np.random.Generator):
    occ, origin = voxelize(clean, spacing)
    occ = corrupt_labels(occ, label_noise, rng)
    grid = VoxelGrid.from_array(occ, (spacing, spacing, spacing))
    mesh = largest_component(marching_cubes(grid, 0.5))
    return Mesh(mesh.vertices + origin, mesh.faces), grid


def default_voxel_size(mesh: Mesh, target_vertices: int) -> float:
    f = mesh.faces
    area = 0.5 * np.linalg.norm(_face_normals(mesh.vertices, f), axis=1).sum()
    # marching cubes on a binary volume gives about 3.6 vertices per unit of area / h^2
    return float(np.sqrt(3.6 * area / target_vertices))


def remesh_to_size(clean: Mesh, target_vertices: int, label_noise: float, rng: np.random.Generator,
                   tolerance: float = 0.2):
    """Remesh with the default voxel size, redone once at a rescaled size if the vertex count
    misses the target by more than ``tolerance`` (label noise roughens the surface and adds vertices)."""
    h = default_voxel_size(clean, target_vertices)
    state = rng.bit_generator.state
    mesh, grid = remesh(clean, h, label_noise, rng)
    ratio = mesh.n / target_vertices
    if abs(ratio - 1) > tolerance:
        rng.bit_generator.state = state
        mesh, grid = remesh(clean, h * np.sqrt(ratio), label_noise, rng)
    return mesh, grid


# ------------------------------------------------------------------ family


def generate_family(spec: FamilySpec) -> list[FamilyMember]:
    """Deterministic family of ``spec.n_shapes`` members with ground-truth maps to the template."""
    rng = np.random.default_rng(spec.seed)
    u, faces = sphere_mesh(spec.resolution)
    base = base_shape(u, spec)
    template_id = "template"
    ref_normals = _face_normals(base, faces)
    members = []
    for s in range(spec.n_shapes):
        for _attempt in range(10):
            verts = deform(u, base, faces, spec, rng)
            if _valid(verts, faces, ref_normals):
                break
        else:
            raise DataError(f"shape {s}: could not draw a valid deformation in 10 attempts")
        clean = Mesh(verts, faces)
        sid = f"shape_{s:03d}"
        if not spec.remesh:
            gt = PointMap(sid, template_id, np.arange(clean.n), True)
            members.append(FamilyMember(clean, gt, True, None, clean))
            continue
        if spec.voxel_size:
            mesh, grid = remesh(clean, spec.voxel_size, spec.label_noise, rng)
        else:
            mesh, grid = remesh_to_size(clean, spec.resolution, spec.label_noise, rng)
        if n_components(mesh) != 1:
            raise DataError(f"shape {s}: remeshed surface is not connected")
        _, nearest = cKDTree(clean.vertices).query(mesh.vertices)
        members.append(FamilyMember(mesh, PointMap(sid, template_id, nearest, False), False, grid, clean))
    return members


def pairwise_chamfer(meshes) -> np.ndarray:
    n = len(meshes)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = chamfer_distance(meshes[i].vertices, meshes[j].vertices)
    return out


def correspondence_error(predicted: PointMap, gt: PointMap, target_points: np.ndarray,
                         radii=(0.01, 0.05, 0.10)) -> tuple[float, dict[float, float]]:
    """Mean Euclidean distance between predicted and true targets, and the fraction within
    each radius (given as fractions of the target's bounding-box diagonal)."""
    target_points = np.asarray(target_points, dtype=np.float64)
    if predicted.n != gt.n:
        raise DataError("predicted and ground-truth maps have different lengths")
    err = np.linalg.norm(target_points[predicted.assignment] - target_points[gt.assignment], axis=1)
    diam = float(np.linalg.norm(np.ptp(target_points, axis=0)))
    return float(err.mean()), {r: float(np.mean(err <= r * diam)) for r in radii}


def write_family(directory, spec: FamilySpec, members: list[FamilyMember]) -> None:
    """PLY meshes, ground-truth point-map CSVs and a manifest echoing the family spec."""
    from .correspond import write_pointmap
    from .meshio import atomic_write_text, write_ply, write_voxels

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for m in members:
        sid = m.gt.source_id
        write_ply(directory / f"{sid}.ply", m.mesh)
        write_pointmap(directory / f"{sid}.gt.csv", m.gt)
        if m.grid is not None:
            write_voxels(directory / f"{sid}.vox", m.grid)
        names.append(sid)
    manifest = spec.to_text() + f"gt_exact = {int(all(m.gt_exact for m in members))}\n"
    manifest += f"shapes = {','.join(names)}\n"
    atomic_write_text(directory / "manifest.txt", manifest)
