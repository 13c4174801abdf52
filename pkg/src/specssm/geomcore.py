"""Geometry substrate: meshes, voxel grids, subsampling, graphs, alignment, distances."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree


class DataError(ValueError):
    """Invalid or unusable input data."""


class EmptySurfaceError(DataError):
    """Raised when no voxel crosses the iso level."""


class NumericalError(RuntimeError):
    """A numerical routine failed (non-convergence, singular system)."""


@dataclass(frozen=True)
class VoxelGrid:
    """Scalar volume with x-fastest flat layout.

    ``data[x + nx * (y + ny * z)]`` holds the value at voxel ``(x, y, z)``.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or min(dims) < 2:
            raise DataError(f"grid dims must be three integers >= 2, got {dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise DataError(f"grid spacing must be positive, got {spacing}")
        data = np.ascontiguousarray(self.data).reshape(-1)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise DataError(f"data length {data.size} does not match dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, volume: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> "VoxelGrid":
        """Build from an array indexed ``volume[x, y, z]``."""
        volume = np.asarray(volume)
        return cls(volume.shape, spacing, volume.transpose(2, 1, 0).reshape(-1))

    def to_array(self) -> np.ndarray:
        """Return the volume indexed ``[x, y, z]``."""
        nx, ny, nz = self.dims
        return self.data.reshape(nz, ny, nx).transpose(2, 1, 0)


@dataclass
class Mesh:
    """Triangle mesh (or point cloud when ``faces`` is empty), coordinates in mm."""

    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def n(self) -> int:
        return len(self.vertices)

    @property
    def has_faces(self) -> bool:
        return len(self.faces) > 0

    def validate(self) -> None:
        if not np.all(np.isfinite(self.vertices)):
            raise DataError("mesh has non-finite vertex coordinates")
        if self.has_faces:
            f = self.faces
            if f.min() < 0 or f.max() >= self.n:
                raise DataError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise DataError("degenerate face (repeated vertex index)")

    def diameter(self) -> float:
        """Bounding-box diagonal, a cheap proxy for the shape diameter."""
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))


def face_adjacency(mesh: Mesh) -> sparse.csr_matrix:
    f = mesh.faces
    i = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    j = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    a = sparse.coo_matrix((np.ones(len(i)), (i, j)), shape=(mesh.n, mesh.n)).tocsr()
    a = a + a.T
    a.data[:] = 1.0
    return a


def n_components(mesh: Mesh) -> int:
    return connected_components(face_adjacency(mesh), directed=False)[0]


def largest_component_index(mesh: Mesh) -> np.ndarray:
    """Sorted indices of the vertices in the component with the most vertices."""
    if not mesh.has_faces:
        return np.arange(mesh.n)
    _, labels = connected_components(face_adjacency(mesh), directed=False)
    used = np.zeros(mesh.n, dtype=bool)
    used[mesh.faces.ravel()] = True
    counts = np.bincount(labels[used], minlength=labels.max() + 1)
    keep_label = int(np.argmax(counts))
    return np.flatnonzero(used & (labels == keep_label))


def largest_component(mesh: Mesh) -> Mesh:
    """Keep the connected component with the most vertices; drop unreferenced vertices."""
    if not mesh.has_faces:
        return mesh
    keep = np.zeros(mesh.n, dtype=bool)
    keep[largest_component_index(mesh)] = True
    return _compact(mesh, keep)


def _compact(mesh: Mesh, keep: np.ndarray) -> Mesh:
    remap = -np.ones(mesh.n, dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    faces = remap[mesh.faces]
    faces = faces[np.all(faces >= 0, axis=1)]
    return Mesh(mesh.vertices[keep], faces)


def vertex_normals(mesh: Mesh, k: int = 10) -> np.ndarray:
    """Area-weighted vertex normals; PCA normals oriented away from the centroid for point clouds."""
    v = mesh.vertices
    if mesh.has_faces:
        f = mesh.faces
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        normals = np.zeros_like(v)
        for c in range(3):
            np.add.at(normals, f[:, c], fn)
    else:
        k = min(k, mesh.n - 1)
        _, idx = cKDTree(v).query(v, k=k + 1)
        nb = v[idx] - v[idx].mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", nb, nb)
        _, vecs = np.linalg.eigh(cov)
        normals = vecs[:, :, 0]
        flip = np.einsum("ni,ni->n", normals, v - v.mean(0)) < 0
        normals[flip] *= -1
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    return normals / np.maximum(norm, 1e-300)


def marching_cubes(grid: VoxelGrid, iso: float) -> Mesh:
    """Extract the ``iso`` level set as a triangle mesh in mm.

    Uses the Lewiner lookup tables, which resolve the ambiguous cube
    configurations consistently so the surface is closed away from the grid
    boundary. Vertices are shared between adjacent cells.
    """
    vol = grid.to_array().astype(np.float64)
    lo, hi = vol.min(), vol.max()
    if not (lo < iso < hi):
        raise EmptySurfaceError(f"empty surface: iso={iso} outside data range [{lo}, {hi}]")
    from skimage.measure import marching_cubes as _mc

    verts, faces, _, _ = _mc(vol, level=iso, spacing=grid.spacing, method="lewiner",
                             allow_degenerate=False)
    if len(faces) == 0:
        raise EmptySurfaceError("empty surface: no voxel crosses the iso level")
    mesh = Mesh(_refine_on_edges(vol, verts, grid.spacing, iso), faces)
    # merge coincident vertices produced on cell boundaries
    rounded = np.round(mesh.vertices / (1e-9 * max(grid.spacing)))
    _, first, inverse = np.unique(rounded, axis=0, return_index=True, return_inverse=True)
    faces = inverse.reshape(-1)[mesh.faces]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    mesh = Mesh(mesh.vertices[first], faces[ok])
    used = np.zeros(mesh.n, dtype=bool)
    used[mesh.faces.ravel()] = True
    return _compact(mesh, used)


def _refine_on_edges(vol, verts, spacing, iso):
    """Redo the linear interpolation of each vertex along its grid edge in float64.

    The extraction above runs in single precision; every vertex lies on a
    grid edge, so its position is recomputed from the two edge samples. Of
    the candidate edges through the vertex, the one crossing ``iso`` closest
    to the single-precision position wins.
    """
    spacing = np.asarray(spacing, dtype=np.float64)
    idx = verts.astype(np.float64) / spacing
    near = np.round(idx).astype(np.int64)
    shape = np.array(vol.shape)
    best = idx.copy()
    best_d = np.full(len(idx), np.inf)
    rows = np.arange(len(idx))
    for axis in range(3):
        for start in (np.floor(idx[:, axis]).astype(np.int64), near[:, axis] - 1):
            lo = near.copy()
            lo[:, axis] = start
            hi = lo.copy()
            hi[:, axis] += 1
            inside = np.all((lo >= 0) & (hi < shape), axis=1)
            lo_c, hi_c = np.clip(lo, 0, shape - 1), np.clip(hi, 0, shape - 1)
            v0 = vol[lo_c[:, 0], lo_c[:, 1], lo_c[:, 2]]
            v1 = vol[hi_c[:, 0], hi_c[:, 1], hi_c[:, 2]]
            ok = inside & (v0 != v1) & ((v0 - iso) * (v1 - iso) <= 0)
            t = np.where(ok, (iso - v0) / np.where(v0 != v1, v1 - v0, 1.0), 0.0)
            pos = lo.astype(np.float64)
            pos[rows, axis] += t
            d = np.where(ok, np.linalg.norm(pos - idx, axis=1), np.inf)
            better = d < best_d
            best[better] = pos[better]
            best_d[better] = d[better]
    return best * spacing


def fps_subsample(points, target_n: int, seed: int | None = 0, first: int | None = None) -> np.ndarray:
    """Farthest point sampling.

    The first index is drawn uniformly with ``seed`` unless ``first`` is given.
    Ties are broken by the lowest index.
    """
    pts = points.vertices if isinstance(points, Mesh) else np.asarray(points, dtype=np.float64)
    n = len(pts)
    if target_n < 1 or target_n > n:
        raise DataError(f"target_n must be in [1, {n}], got {target_n}")
    if first is None:
        first = int(np.random.default_rng(seed).integers(n))
    selected = np.empty(target_n, dtype=np.int64)
    selected[0] = first
    mind = np.sum((pts - pts[first]) ** 2, axis=1)
    mind[first] = -1.0
    for s in range(1, target_n):
        nxt = int(np.argmax(mind))
        selected[s] = nxt
        mind = np.minimum(mind, np.sum((pts - pts[nxt]) ** 2, axis=1))
        mind[nxt] = -1.0
    return selected


@dataclass
class KnnGraph:
    n: int
    k: int
    adjacency: sparse.csr_matrix

    @property
    def normalized(self) -> sparse.csr_matrix:
        """Random-walk normalization D^-1 A (rows sum to one)."""
        deg = np.asarray(self.adjacency.sum(axis=1)).ravel()
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1e-300), 0.0)
        return sparse.diags(inv) @ self.adjacency

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz // 2


def knn_neighbors(points: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and distances of the k nearest other points, ties to lower index."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k >= n or k < 1:
        raise DataError(f"k must satisfy 1 <= k < n={n}, got {k}")
    kq = min(n, k + 9)
    dist, idx = cKDTree(pts).query(pts, k=kq)
    dist = np.asarray(dist).reshape(n, kq)
    idx = np.asarray(idx).reshape(n, kq)
    is_self = idx == np.arange(n)[:, None]
    # self sorts last; otherwise by (distance, index)
    order = np.lexsort((idx, dist, is_self), axis=1)
    idx = np.take_along_axis(idx, order, axis=1)[:, :k]
    dist = np.take_along_axis(dist, order, axis=1)[:, :k]
    return idx, dist


def knn_graph(points, k: int = 10) -> KnnGraph:
    """Symmetrized (union) k-nearest-neighbor graph without self loops."""
    pts = points.vertices if isinstance(points, Mesh) else np.asarray(points, dtype=np.float64)
    n = len(pts)
    idx, _ = knn_neighbors(pts, k)
    rows = np.repeat(np.arange(n), k)
    a = sparse.coo_matrix((np.ones(n * k), (rows, idx.ravel())), shape=(n, n)).tocsr()
    a = a.maximum(a.T).tocsr()
    a.setdiag(0)
    a.eliminate_zeros()
    a.data[:] = 1.0
    return KnnGraph(n=n, k=k, adjacency=a)


def kabsch(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Proper rotation R and translation t minimizing ||source @ R.T + t - target||."""
    mu_s, mu_t = source.mean(0), target.mean(0)
    h = (source - mu_s).T @ (target - mu_t)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, mu_t - mu_s @ r.T


def apply_rigid(points: np.ndarray, rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    return points @ rotation.T + translation


def invert_rigid(rotation: np.ndarray, translation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return rotation.T, -translation @ rotation


def procrustes_align(shapes, tol: float = 1e-6, max_iter: int = 50):
    """Generalized Procrustes analysis with rotations and translations only.

    Returns the aligned shapes and a list of ``(R, t)`` with
    ``aligned = shape @ R.T + t``.
    """
    shapes = [np.asarray(s, dtype=np.float64) for s in shapes]
    if len(shapes) < 2:
        raise DataError("procrustes alignment needs at least two shapes")
    n = shapes[0].shape
    if any(s.shape != n for s in shapes):
        raise DataError("all shapes must have the same number of corresponded points")
    mean = shapes[0] - shapes[0].mean(0)
    transforms = [(np.eye(3), np.zeros(3))] * len(shapes)
    for _ in range(max_iter):
        transforms = [kabsch(s, mean) for s in shapes]
        aligned = [apply_rigid(s, r, t) for s, (r, t) in zip(shapes, transforms)]
        new_mean = np.mean(aligned, axis=0)
        moved = np.sqrt(np.mean(np.sum((new_mean - mean) ** 2, axis=1)))
        mean = new_mean
        if moved < tol:
            break
    aligned = [apply_rigid(s, r, t) for s, (r, t) in zip(shapes, transforms)]
    return aligned, transforms


def chamfer_distance(a, b) -> float:
    """Symmetric mean of unsquared nearest-neighbor distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise DataError("chamfer distance of an empty point set")
    return chamfer_with_trees(a, b, cKDTree(a), cKDTree(b))


def chamfer_with_trees(a, b, tree_a: cKDTree, tree_b: cKDTree) -> float:
    d_ab, _ = tree_b.query(a)
    d_ba, _ = tree_a.query(b)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))
