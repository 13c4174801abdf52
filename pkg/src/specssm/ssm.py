"""Point distribution model: construction, sampling, reconstruction and evaluation."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geomcore import DataError, apply_rigid, chamfer_with_trees, invert_rigid, kabsch
from .meshio import atomic_write_bytes

ZERO_EIGENVALUE_RTOL = 1e-12


@dataclass(frozen=True)
class PointDistributionModel:
    """Mean shape and principal modes of corresponded, aligned point sets.

    ``modes`` has one unit-norm row of length 3n per retained mode, ordered
    by descending eigenvalue. Modes with zero variance are dropped.
    """

    mean: np.ndarray
    modes: np.ndarray
    eigenvalues: np.ndarray
    n_train: int

    @property
    def n_points(self) -> int:
        return len(self.mean) // 3

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    def mean_shape(self) -> np.ndarray:
        return self.mean.reshape(-1, 3)


def build_pdm(shapes) -> PointDistributionModel:
    """Eigen-decompose the covariance of flattened shapes through the N x N Gram matrix."""
    shapes = [np.asarray(s, dtype=np.float64) for s in shapes]
    if len(shapes) < 2:
        raise DataError("a shape model needs at least two shapes")
    if any(s.shape != shapes[0].shape for s in shapes):
        raise DataError("all shapes must have the same number of corresponded points")
    X = np.stack([s.reshape(-1) for s in shapes])
    N = len(X)
    mean = X.mean(axis=0)
    Xc = X - mean
    gram = Xc @ Xc.T / (N - 1)
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(vals)[::-1][: N - 1]
    vals, vecs = vals[order], vecs[:, order]
    top = max(float(vals[0]), 0.0) if len(vals) else 0.0
    # round-off in the Gram matrix scales with the raw coordinates, not the variance
    roundoff = 1e3 * np.finfo(np.float64).eps * float(np.max(np.sum(X * X, axis=1))) / (N - 1)
    keep = vals > max(ZERO_EIGENVALUE_RTOL * top, roundoff)
    vals, vecs = vals[keep], vecs[:, keep]
    modes = (Xc.T @ vecs).T
    modes /= np.linalg.norm(modes, axis=1, keepdims=True)
    return PointDistributionModel(mean, modes, vals, N)


def covariance(pdm: PointDistributionModel) -> np.ndarray:
    """Dense 3n x 3n covariance implied by the model (small models only)."""
    return (pdm.modes.T * pdm.eigenvalues) @ pdm.modes


def sample(pdm: PointDistributionModel, alpha=None, seed: int | None = None,
           strict_paper: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Draw ``mean + sum_j alpha_j s_j v_j`` with ``s_j = sqrt(lambda_j)``.

    With ``strict_paper`` the modes are scaled by ``lambda_j`` instead, which
    does not reproduce the model covariance unless every eigenvalue is 0 or 1.
    """
    if alpha is None:
        rng = rng if rng is not None else np.random.default_rng(seed)
        alpha = rng.standard_normal(pdm.n_modes)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (pdm.n_modes,):
        raise DataError(f"expected {pdm.n_modes} coefficients, got {alpha.shape}")
    scale = pdm.eigenvalues if strict_paper else np.sqrt(pdm.eigenvalues)
    return (pdm.mean + (alpha * scale) @ pdm.modes).reshape(-1, 3)


def reconstruct(pdm: PointDistributionModel, shape: np.ndarray, n_modes: int | None = None):
    """Project an aligned, corresponded shape onto the model; returns (reconstruction, coefficients)."""
    x = np.asarray(shape, dtype=np.float64).reshape(-1)
    if x.shape != pdm.mean.shape:
        raise DataError(f"shape has {len(x) // 3} points, model has {pdm.n_points}")
    modes = pdm.modes if n_modes is None else pdm.modes[:n_modes]
    beta = modes @ (x - pdm.mean)
    return (pdm.mean + beta @ modes).reshape(-1, 3), beta


def _mean_sd(values) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return float(np.mean(values)), sd


def generality(pdm: PointDistributionModel, held_out, originals, n_modes: int | None = None,
               return_values: bool = False):
    """Mean and sd of the Chamfer distance between each held-out original and its reconstruction.

    ``held_out`` are corresponded point sets in template order (any rigid
    pose); each is aligned to the model mean, reconstructed, mapped back to
    its own pose and compared with the full-resolution ``originals``.
    """
    if len(held_out) != len(originals) or not len(held_out):
        raise DataError("need one original per held-out shape")
    mean = pdm.mean_shape()
    values = []
    for pts, orig in zip(held_out, originals):
        r, t = kabsch(np.asarray(pts, dtype=np.float64), mean)
        recon, _ = reconstruct(pdm, apply_rigid(pts, r, t), n_modes)
        recon = apply_rigid(recon, *invert_rigid(r, t))
        orig = np.asarray(orig, dtype=np.float64)
        values.append(chamfer_with_trees(recon, orig, cKDTree(recon), cKDTree(orig)))
    out = _mean_sd(values)
    return (out, np.array(values)) if return_values else out


def specificity(pdm: PointDistributionModel, training_shapes, n_samples: int = 1000, seed: int = 0,
                strict_paper: bool = False, return_values: bool = False):
    """Mean and sd over model samples of the minimum Chamfer distance to the training shapes."""
    if n_samples < 1:
        raise DataError("n_samples must be positive")
    train = [np.asarray(s, dtype=np.float64) for s in training_shapes]
    trees = [cKDTree(s) for s in train]
    rng = np.random.default_rng(seed)
    values = np.empty(n_samples)
    for k in range(n_samples):
        s = sample(pdm, rng=rng, strict_paper=strict_paper)
        tree_s = cKDTree(s)
        values[k] = min(chamfer_with_trees(s, t, tree_s, tt) for t, tt in zip(train, trees))
    out = _mean_sd(values)
    return (out, values) if return_values else out


_MAGIC = b"SPDM0001"


def save_pdm(path, pdm: PointDistributionModel) -> None:
    """Layout: magic, uint64 n_points, uint64 n_modes, uint64 n_train, then float64 LE
    mean[3n], eigenvalues[n_modes], modes[n_modes x 3n] row-major."""
    payload = (
        _MAGIC
        + struct.pack("<QQQ", pdm.n_points, pdm.n_modes, pdm.n_train)
        + pdm.mean.astype("<f8").tobytes()
        + pdm.eigenvalues.astype("<f8").tobytes()
        + np.ascontiguousarray(pdm.modes).astype("<f8").tobytes()
    )
    atomic_write_bytes(path, payload)


def load_pdm(path) -> PointDistributionModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise DataError(f"{path}: not a shape model file")
    n, k, n_train = struct.unpack_from("<QQQ", raw, len(_MAGIC))
    if (len(raw) - len(_MAGIC) - 24) % 8:
        raise DataError(f"{path}: truncated shape model")
    vals = np.frombuffer(raw, dtype="<f8", offset=len(_MAGIC) + 24)
    if len(vals) != 3 * n + k + 3 * n * k:
        raise DataError(f"{path}: truncated shape model")
    mean = vals[: 3 * n].copy()
    ev = vals[3 * n: 3 * n + k].copy()
    modes = vals[3 * n + k:].reshape(k, 3 * n).copy()
    return PointDistributionModel(mean, modes, ev, int(n_train))
