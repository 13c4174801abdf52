"""Template selection, point-map extraction and bijective refinement."""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .fmap import LossWeights, ShapeView, features_loss, solve_fmap
from .geomcore import DataError, fps_subsample
from .meshio import atomic_write_text

log = logging.getLogger(__name__)


@dataclass
class PointMap:
    """Vertex assignment from a source shape into a target shape."""

    source_id: str
    target_id: str
    assignment: np.ndarray
    bijective: bool = False

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64).ravel()

    @property
    def n(self) -> int:
        return len(self.assignment)

    def validate(self, n_target: int | None = None) -> None:
        a = self.assignment
        if len(a) and (a.min() < 0 or (n_target is not None and a.max() >= n_target)):
            raise DataError("point map index out of range")
        if self.bijective and not is_permutation(a):
            raise DataError("point map flagged bijective is not a permutation")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source_id", "target_id", "n", "bijective"])
        w.writerow([self.source_id, self.target_id, self.n, int(self.bijective)])
        buf.write("\n".join(str(int(i)) for i in self.assignment))
        buf.write("\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PointMap":
        lines = text.splitlines()
        if len(lines) < 2 or lines[0].strip() != "source_id,target_id,n,bijective":
            raise DataError("point map CSV is missing its header")
        src, tgt, n, bij = next(csv.reader([lines[1]]))
        values = np.array([int(x) for x in lines[2:] if x.strip()], dtype=np.int64)
        if len(values) != int(n):
            raise DataError(f"point map declares {n} entries but has {len(values)}")
        pm = cls(src, tgt, values, bool(int(bij)))
        pm.validate()
        return pm


def write_pointmap(path, pm: PointMap) -> None:
    atomic_write_text(path, pm.to_csv())


def read_pointmap(path) -> PointMap:
    return PointMap.from_csv(Path(path).read_text())


def is_permutation(a: np.ndarray) -> bool:
    a = np.asarray(a)
    return bool(np.array_equal(np.sort(a), np.arange(len(a))))


def pair_loss_matrix(features, views, weights: LossWeights = LossWeights(), tau=None, eps=None,
                     workers: int = 1) -> np.ndarray:
    """Symmetric matrix of pair losses L(C_ij, C_ji) over all shapes (diagonal zero)."""
    n = len(features)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]

    def run(pair):
        i, j = pair
        return features_loss(features[i], features[j], views[i], views[j], weights, tau, eps,
                             need_grad=False)[0]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            values = list(pool.map(run, pairs))
    else:
        values = [run(p) for p in pairs]
    L = np.zeros((n, n))
    for (i, j), v in zip(pairs, values):
        L[i, j] = L[j, i] = v
    return L


def select_template(features, views, weights: LossWeights = LossWeights(), tau=None, eps=None,
                    workers: int = 1) -> tuple[int, np.ndarray]:
    """Index of the shape with the smallest summed loss to all others, plus the loss matrix."""
    if len(features) < 2:
        raise DataError("template selection needs at least two shapes")
    L = pair_loss_matrix(features, views, weights, tau, eps, workers)
    return int(np.argmin(L.sum(axis=1))), L


def nearest_rows(query: np.ndarray, reference: np.ndarray, tree: cKDTree | None = None) -> np.ndarray:
    """Nearest reference row per query row; exact distance ties go to the lowest index."""
    tree = tree or cKDTree(reference)
    k = min(4, len(reference))
    dist, idx = tree.query(query, k=k)
    dist = np.asarray(dist).reshape(len(query), k)
    idx = np.asarray(idx).reshape(len(query), k)
    tied = dist == dist[:, :1]
    return np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)


def extract_pointmap(C: np.ndarray, psi_src: np.ndarray, psi_tgt: np.ndarray,
                     source_id: str = "source", target_id: str = "template") -> PointMap:
    """Match rows of ``psi_src @ C.T`` to rows of ``psi_tgt`` by nearest neighbor."""
    C = np.asarray(C)
    if psi_src.shape[1] != C.shape[1] or psi_tgt.shape[1] != C.shape[0]:
        raise DataError("eigenfunction counts do not match the functional map")
    assignment = nearest_rows(psi_src @ C.T, psi_tgt)
    return PointMap(source_id, target_id, assignment, is_permutation(assignment))


def kernel_alignment(perm: np.ndarray, sqd_src: np.ndarray, sqd_tgt: np.ndarray, sigma: float) -> float:
    """sum_{v,w} G_src[v,w] G_tgt[perm v, perm w] for Gaussian kernels of width sigma."""
    g_s = np.exp(-sqd_src / (2 * sigma * sigma))
    g_t = np.exp(-sqd_tgt[np.ix_(perm, perm)] / (2 * sigma * sigma))
    return float(np.sum(g_s * g_t))


def pmf_step(perm: np.ndarray, g_src: np.ndarray, g_tgt: np.ndarray) -> np.ndarray:
    """One exact assignment maximizing sum_v K[v, new[v]] with ``K = G_src P G_tgt``."""
    K = g_src @ g_tgt[perm, :]
    return linear_sum_assignment(K, maximize=True)[1]


def pmf_refine(initial: PointMap, points_src: np.ndarray, points_tgt: np.ndarray,
               iterations: int = 5, sigma_start: float = 0.10, sigma_end: float = 0.02) -> PointMap:
    """Product manifold filter: alternate kernel smoothing of the map and exact assignment.

    ``sigma_*`` are fractions of the mean shape diameter; sigma anneals
    geometrically. A step is kept only if it does not lower the kernel
    alignment of the current permutation.
    """
    points_src = np.asarray(points_src, dtype=np.float64)
    points_tgt = np.asarray(points_tgt, dtype=np.float64)
    n = len(points_src)
    if len(points_tgt) != n or initial.n != n:
        raise DataError(f"PMF needs equal vertex counts, got {n}, {len(points_tgt)}, map {initial.n}")
    if iterations < 1:
        raise DataError("PMF needs at least one iteration")
    initial.validate(n)
    diam = 0.5 * (np.linalg.norm(np.ptp(points_src, axis=0)) + np.linalg.norm(np.ptp(points_tgt, axis=0)))
    sigmas = diam * np.geomspace(sigma_start, sigma_end, iterations)
    sqd_s = cdist(points_src, points_src, "sqeuclidean")
    sqd_t = cdist(points_tgt, points_tgt, "sqeuclidean")
    perm = initial.assignment.copy()
    init_is_perm = is_permutation(perm)
    for sigma in sigmas:
        g_s = np.exp(-sqd_s / (2 * sigma * sigma))
        g_t = np.exp(-sqd_t / (2 * sigma * sigma))
        cols = pmf_step(perm, g_s, g_t)
        if is_permutation(perm):
            old = float(np.sum(g_s * g_t[np.ix_(perm, perm)]))
            new = float(np.sum(g_s * g_t[np.ix_(cols, cols)]))
            if new < old:
                continue
        perm = cols
    if init_is_perm:
        s = sigmas[-1]
        if kernel_alignment(initial.assignment, sqd_s, sqd_t, s) > kernel_alignment(perm, sqd_s, sqd_t, s):
            perm = initial.assignment.copy()
    out = PointMap(initial.source_id, initial.target_id, perm, True)
    out.validate(n)
    return out


def corresponded_points(pm: PointMap, points_src: np.ndarray) -> np.ndarray:
    """Reorder source points into target vertex order using a bijective map."""
    if not is_permutation(pm.assignment):
        raise DataError("corresponded points need a bijective map")
    out = np.empty_like(points_src)
    out[pm.assignment] = points_src
    return out


def standardize_rows(points_list, n_c: int, seed: int = 0) -> list[np.ndarray]:
    """Row subsets giving every shape exactly ``n_c`` points (identity when already that size)."""
    rows = []
    for pts in points_list:
        if len(pts) == n_c:
            rows.append(np.arange(n_c))
        else:
            rows.append(fps_subsample(pts, n_c, seed=seed))
    return rows


@dataclass
class CorrespondenceResult:
    template: int
    maps: list[PointMap]
    rows: list[np.ndarray]
    loss_matrix: np.ndarray | None = None


def correspond_to_template(features_i, features_t, view_i: ShapeView, view_t: ShapeView,
                           rows_i, rows_t, points_i, points_t, source_id="source", target_id="template",
                           eps=None, pmf_iterations=5, sigma_start=0.10, sigma_end=0.02) -> PointMap:
    """Full-resolution functional map, nearest-neighbor extraction on the standardized rows, PMF."""
    A_i = view_i.proj @ features_i
    A_t = view_t.proj @ features_t
    C = solve_fmap(A_i, A_t, eps)
    pm = extract_pointmap(C, view_i.psi[rows_i], view_t.psi[rows_t], source_id, target_id)
    return pmf_refine(pm, points_i[rows_i], points_t[rows_t], pmf_iterations, sigma_start, sigma_end)


def correspond_dataset(features, views, points, ids=None, n_correspond: int = 3000, seed: int = 0,
                       weights: LossWeights = LossWeights(), tau=None, eps=None, pmf_iterations: int = 5,
                       sigma_start: float = 0.10, sigma_end: float = 0.02, workers: int = 1,
                       template: int | None = None) -> CorrespondenceResult:
    """Bijective maps from every shape to the selected template, on ``n_c``-point subsets."""
    n_shapes = len(features)
    ids = ids or [f"shape_{i:03d}" for i in range(n_shapes)]
    L = None
    if template is None:
        template, L = select_template(features, views, weights, tau, eps, workers)
    n_c = min(n_correspond, min(len(p) for p in points))
    rows = standardize_rows(points, n_c, seed)

    def run(i):
        if i == template:
            return PointMap(ids[i], ids[template], np.arange(n_c), True)
        return correspond_to_template(
            features[i], features[template], views[i], views[template], rows[i], rows[template],
            points[i], points[template], ids[i], ids[template], eps, pmf_iterations, sigma_start, sigma_end)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            maps = list(pool.map(run, range(n_shapes)))
    else:
        maps = [run(i) for i in range(n_shapes)]
    return CorrespondenceResult(template, maps, rows, L)
