"""Laplace-Beltrami discretization, truncated eigenbases and spectral descriptors."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .geomcore import DataError, Mesh, NumericalError, face_adjacency, knn_neighbors
from .meshio import atomic_write_bytes

COT_CLAMP = 1e4
DENSE_EIGH_MAX_N = 200


@dataclass(frozen=True)
class LaplaceOperator:
    """Positive semidefinite cotangent stiffness matrix and lumped vertex areas.

    Off-diagonal entries are ``-w_ij`` and the diagonal holds the row sums of
    ``w``, so every row sums to zero.
    """

    stiffness: sparse.csr_matrix
    mass: np.ndarray

    @property
    def n(self) -> int:
        return self.stiffness.shape[0]


@dataclass(frozen=True)
class SpectralBasis:
    evals: np.ndarray
    evecs: np.ndarray
    mass: np.ndarray

    @property
    def m(self) -> int:
        return self.evecs.shape[1]

    @property
    def n(self) -> int:
        return self.evecs.shape[0]

    @property
    def area(self) -> float:
        return float(self.mass.sum())

    def truncate(self, m: int) -> "SpectralBasis":
        return SpectralBasis(self.evals[:m], self.evecs[:, :m], self.mass)


def _cotangents(v: np.ndarray, f: np.ndarray):
    """Cotangent of the angle at each corner, indexed like ``f``."""
    cots = np.empty(f.shape, dtype=np.float64)
    for c in range(3):
        a, b = f[:, (c + 1) % 3], f[:, (c + 2) % 3]
        e1 = v[a] - v[f[:, c]]
        e2 = v[b] - v[f[:, c]]
        cross = np.linalg.norm(np.cross(e1, e2), axis=1)
        dot = np.einsum("ij,ij->i", e1, e2)
        with np.errstate(divide="ignore", invalid="ignore"):
            cot = dot / cross
        cot = np.where(np.isfinite(cot), cot, np.sign(dot) * COT_CLAMP)
        cots[:, c] = np.clip(cot, -COT_CLAMP, COT_CLAMP)
    return cots


def cotan_laplacian(mesh: Mesh, k: int = 10) -> LaplaceOperator:
    """Cotangent Laplacian with lumped (one third of incident area) mass.

    Point clouds without faces fall back to a Gaussian-weighted kNN graph
    Laplacian with unit mass.
    """
    if not mesh.has_faces:
        return knn_laplacian(mesh.vertices, k)
    mesh.validate()
    v, f = mesh.vertices, mesh.faces
    if connected_components(face_adjacency(mesh), directed=False)[0] > 1:
        raise DataError("mesh is disconnected; split it into components first")
    used = np.zeros(mesh.n, dtype=bool)
    used[f.ravel()] = True
    if not used.all():
        raise DataError("mesh has vertices that belong to no face")
    cots = _cotangents(v, f)
    rows, cols, vals = [], [], []
    for c in range(3):
        a, b = f[:, (c + 1) % 3], f[:, (c + 2) % 3]
        rows += [a, b]
        cols += [b, a]
        vals += [0.5 * cots[:, c], 0.5 * cots[:, c]]
    n = mesh.n
    w = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    stiffness = (sparse.diags(np.asarray(w.sum(axis=1)).ravel()) - w).tocsr()
    area = 0.5 * np.linalg.norm(np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1)
    mass = np.zeros(n)
    for c in range(3):
        np.add.at(mass, f[:, c], area / 3.0)
    mass = np.maximum(mass, 1e-12 * max(mass.mean(), 1e-300))
    return LaplaceOperator(stiffness, mass)


def knn_laplacian(points: np.ndarray, k: int = 10) -> LaplaceOperator:
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    idx, dist = knn_neighbors(points, min(k, n - 1))
    h = float(dist.mean())
    if h <= 0:
        raise DataError("point cloud has zero spread")
    wts = np.exp(-(dist ** 2) / (2 * h * h))
    rows = np.repeat(np.arange(n), idx.shape[1])
    w = sparse.coo_matrix((wts.ravel(), (rows, idx.ravel())), shape=(n, n)).tocsr()
    w = w.maximum(w.T).tocsr()
    if connected_components(w, directed=False)[0] > 1:
        raise DataError("kNN graph of the point cloud is disconnected")
    stiffness = (sparse.diags(np.asarray(w.sum(axis=1)).ravel()) - w).tocsr()
    return LaplaceOperator(stiffness, np.ones(n))


def _fix_signs(evecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(evecs), axis=0)
    signs = np.sign(evecs[idx, np.arange(evecs.shape[1])])
    signs[signs == 0] = 1.0
    return evecs * signs


def eigenbasis(op: LaplaceOperator, m: int = 20, residual_tol: float = 1e-6) -> SpectralBasis:
    """Smallest ``m`` eigenpairs of ``stiffness psi = lambda mass psi``.

    Uses shift-invert Lanczos around a small negative shift; tiny problems
    are solved densely. Eigenvectors are mass-orthonormal and each one is
    signed so that its largest-magnitude entry is positive.
    """
    n = op.n
    if not 1 <= m < n:
        raise DataError(f"need 1 <= m < n, got m={m}, n={n}")
    K = op.stiffness
    if n <= DENSE_EIGH_MAX_N:
        evals, evecs = scipy.linalg.eigh(K.toarray(), np.diag(op.mass), subset_by_index=[0, m - 1])
    else:
        scale = float(np.mean(K.diagonal() / op.mass))
        M = sparse.diags(op.mass).tocsc()
        try:
            evals, evecs = eigsh(K.tocsc(), k=m, M=M, sigma=-1e-5 * scale, which="LM", maxiter=5000)
        except ArpackNoConvergence as err:
            raise NumericalError(f"eigensolver did not converge: {err}") from err
    order = np.argsort(evals)
    evals, evecs = evals[order], evecs[:, order]
    norms = np.sqrt(np.einsum("ik,i,ik->k", evecs, op.mass, evecs))
    evecs = _fix_signs(evecs / norms)
    res = residuals(op, evals, evecs)
    if np.any(res > residual_tol):
        raise NumericalError(f"eigenpairs did not converge; worst relative residual {res.max():.3e}")
    return SpectralBasis(evals, evecs, op.mass.copy())


def residuals(op: LaplaceOperator, evals: np.ndarray, evecs: np.ndarray) -> np.ndarray:
    """Relative residual per eigenpair, floored for the null-space vector."""
    K = op.stiffness
    kpsi = K @ evecs
    r = np.linalg.norm(kpsi - op.mass[:, None] * evecs * evals, axis=0)
    knorm = abs(K).sum(axis=1).max()
    denom = np.maximum(np.linalg.norm(kpsi, axis=0), 1e-6 * knorm * np.linalg.norm(evecs, axis=0))
    return r / denom


def projection_matrix(basis: SpectralBasis, rows=None, ridge: float = 1e-8) -> np.ndarray:
    """Linear map P (m x n_rows) such that coefficients are ``P @ F``.

    With all rows this is ``psi.T @ diag(mass)``. With a row subset it is the
    mass-weighted least-squares fit of the selected eigenfunction rows.
    """
    psi, mass = basis.evecs, basis.mass
    if rows is None:
        return (psi * mass[:, None]).T
    rows = np.asarray(rows)
    if len(rows) < basis.m:
        raise DataError(f"row subset of size {len(rows)} cannot determine {basis.m} coefficients")
    ps = psi[rows]
    ws = mass[rows]
    if np.linalg.matrix_rank(ps * np.sqrt(ws)[:, None]) < basis.m:
        raise DataError("selected eigenfunction rows are rank deficient")
    gram = ps.T @ (ps * ws[:, None]) + ridge * np.eye(basis.m)
    return scipy.linalg.solve(gram, (ps * ws[:, None]).T, assume_a="pos")


def project_to_basis(basis: SpectralBasis, features: np.ndarray, rows=None) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    expected = basis.n if rows is None else len(rows)
    if features.shape[0] != expected:
        raise DataError(f"features have {features.shape[0]} rows, expected {expected}")
    return projection_matrix(basis, rows) @ features


def _positive_spectrum(basis: SpectralBasis):
    evals = basis.evals
    top = max(float(evals.max()), 0.0)
    pos = evals > 1e-9 * top if top > 0 else np.zeros_like(evals, dtype=bool)
    if not pos.any():
        raise DataError("spectrum has no positive eigenvalue")
    return pos


def _unit_columns(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=0, keepdims=True), 1e-300)


def hks_times(basis: SpectralBasis, n_times: int) -> np.ndarray:
    pos = _positive_spectrum(basis)
    lam = basis.evals[pos]
    return np.geomspace(4 * np.log(10) / lam[-1], 4 * np.log(10) / lam[0], n_times)


def hks_descriptor(basis: SpectralBasis, n_times: int = 16, times=None) -> np.ndarray:
    """Heat kernel signature, one L2-normalized column per diffusion time."""
    if n_times < 1:
        raise DataError("n_times must be positive")
    t = hks_times(basis, n_times) if times is None else np.asarray(times, dtype=np.float64)
    lam = np.maximum(basis.evals, 0.0)
    weights = np.exp(-np.outer(lam, t))
    return _unit_columns((basis.evecs ** 2) @ weights)


def wks_descriptor(basis: SpectralBasis, n_energies: int = 16, variance: float = 7.0) -> np.ndarray:
    """Wave kernel signature over log-spaced energies, L2-normalized per column."""
    if n_energies < 1:
        raise DataError("n_energies must be positive")
    pos = _positive_spectrum(basis)
    log_lam = np.log(basis.evals[pos])
    psi2 = basis.evecs[:, pos] ** 2
    e_min, e_max = log_lam[0], log_lam[-1]
    sigma = variance * max(e_max - e_min, 1e-12) / n_energies
    energies = np.linspace(e_min + 2 * sigma, e_max - 2 * sigma, n_energies)
    coeffs = np.exp(-((energies[None, :] - log_lam[:, None]) ** 2) / (2 * sigma ** 2))
    wks = psi2 @ coeffs / np.maximum(coeffs.sum(axis=0, keepdims=True), 1e-300)
    return _unit_columns(wks)


_BASIS_MAGIC = b"SPBASIS1"


def save_basis(path, basis: SpectralBasis) -> None:
    """Binary layout: magic, uint64 n, uint64 m, evals[m], evecs[n*m] row-major, mass[n]; float64 LE."""
    payload = (
        _BASIS_MAGIC
        + struct.pack("<QQ", basis.n, basis.m)
        + basis.evals.astype("<f8").tobytes()
        + np.ascontiguousarray(basis.evecs).astype("<f8").tobytes()
        + basis.mass.astype("<f8").tobytes()
    )
    atomic_write_bytes(path, payload)


def load_basis(path) -> SpectralBasis:
    raw = Path(path).read_bytes()
    if not raw.startswith(_BASIS_MAGIC):
        raise DataError(f"{path}: not a spectral basis file")
    n, m = struct.unpack_from("<QQ", raw, len(_BASIS_MAGIC))
    off = len(_BASIS_MAGIC) + 16
    if (len(raw) - off) % 8:
        raise DataError(f"{path}: truncated basis payload")
    vals = np.frombuffer(raw, dtype="<f8", offset=off)
    if len(vals) != m + n * m + n:
        raise DataError(f"{path}: truncated basis payload")
    evals = vals[:m].copy()
    evecs = vals[m: m + n * m].reshape(n, m).copy()
    mass = vals[m + n * m:].copy()
    return SpectralBasis(evals, evecs, mass)
