"""Functional maps between shape pairs, unsupervised map losses and descriptor training.

Every loss has a companion that also returns its gradient with respect to the
functional maps (and descriptors, for the point term); :func:`grad_pair`
chains these through the closed-form ridge solve, the spectral projection and
the descriptor network.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.linalg

from . import descnet
from .geomcore import DataError, Mesh, NumericalError, fps_subsample, knn_graph, knn_neighbors, vertex_normals
from .meshio import atomic_write_text
from .spectral import SpectralBasis, projection_matrix

log = logging.getLogger(__name__)

RELATIVE_RIDGE = 1e-6
COMPONENTS = ("bij", "orth", "iso", "point")


# --------------------------------------------------------------------- solve


def default_ridge(A_i: np.ndarray) -> float:
    return RELATIVE_RIDGE * float(np.sum(A_i * A_i)) / A_i.shape[0]


def _factor(A_i: np.ndarray, eps: float | None):
    if not (np.all(np.isfinite(A_i))):
        raise DataError("non-finite spectral descriptor")
    if eps is None:
        eps = default_ridge(A_i)
    if eps < 0:
        raise DataError("ridge must be non-negative")
    M = A_i @ A_i.T + eps * np.eye(A_i.shape[0])
    try:
        return scipy.linalg.cho_factor(M), eps
    except np.linalg.LinAlgError as err:
        raise NumericalError("normal equations are singular; increase the ridge") from err


def solve_fmap(A_i: np.ndarray, A_j: np.ndarray, eps: float | None = None) -> np.ndarray:
    """C = A_j A_i^T (A_i A_i^T + eps I)^-1, the ridge least-squares map with C A_i ~ A_j."""
    C, _ = solve_fmap_with_grad(A_i, A_j, eps)
    return C


def solve_fmap_with_grad(A_i, A_j, eps=None):
    """Solve for C and return a closure mapping dL/dC to (dL/dA_i, dL/dA_j).

    When ``eps`` is None the default relative ridge is used and its dependence
    on ``A_i`` is included in the gradient.
    """
    A_i = np.asarray(A_i, dtype=np.float64)
    A_j = np.asarray(A_j, dtype=np.float64)
    if A_i.shape != A_j.shape:
        raise DataError(f"descriptor shapes differ: {A_i.shape} vs {A_j.shape}")
    if not np.all(np.isfinite(A_j)):
        raise DataError("non-finite spectral descriptor")
    relative = eps is None
    cho, eps = _factor(A_i, eps)
    B = A_j @ A_i.T
    C = scipy.linalg.cho_solve(cho, B.T).T

    def back(g_C: np.ndarray):
        H = scipy.linalg.cho_solve(cho, g_C.T).T
        g_M = -C.T @ H
        g_Aj = H @ A_i
        g_Ai = H.T @ A_j + (g_M + g_M.T) @ A_i
        if relative:
            g_Ai = g_Ai + np.trace(g_M) * (2 * RELATIVE_RIDGE / A_i.shape[0]) * A_i
        return g_Ai, g_Aj

    return C, back


# -------------------------------------------------------------------- losses


def _fro_and_grad(x: np.ndarray):
    norm = float(np.linalg.norm(x))
    return norm, (x / norm if norm > 0 else np.zeros_like(x))


def _check_square_pair(C_ij, C_ji):
    C_ij, C_ji = np.asarray(C_ij, dtype=np.float64), np.asarray(C_ji, dtype=np.float64)
    if C_ij.ndim != 2 or C_ij.shape[0] != C_ij.shape[1] or C_ij.shape != C_ji.shape:
        raise DataError(f"functional maps must be square and equal-sized: {C_ij.shape}, {C_ji.shape}")
    return C_ij, C_ji


def loss_bij_grad(C_ij, C_ji):
    C_ij, C_ji = _check_square_pair(C_ij, C_ji)
    eye = np.eye(len(C_ij))
    v1, g1 = _fro_and_grad(C_ij @ C_ji - eye)
    v2, g2 = _fro_and_grad(C_ji @ C_ij - eye)
    g_ij = g1 @ C_ji.T + C_ji.T @ g2
    g_ji = C_ij.T @ g1 + g2 @ C_ij.T
    return v1 + v2, g_ij, g_ji


def loss_bij(C_ij, C_ji) -> float:
    """||C_ij C_ji - I||_F + ||C_ji C_ij - I||_F"""
    return loss_bij_grad(C_ij, C_ji)[0]


def loss_orth_grad(C_ij, C_ji):
    C_ij, C_ji = _check_square_pair(C_ij, C_ji)
    eye = np.eye(len(C_ij))
    v1, g1 = _fro_and_grad(C_ij.T @ C_ij - eye)
    v2, g2 = _fro_and_grad(C_ji.T @ C_ji - eye)
    return v1 + v2, C_ij @ (g1 + g1.T), C_ji @ (g2 + g2.T)


def loss_orth(C_ij, C_ji) -> float:
    """||C_ij^T C_ij - I||_F + ||C_ji^T C_ji - I||_F"""
    return loss_orth_grad(C_ij, C_ji)[0]


def loss_iso_grad(C_ij, C_ji, evals_i, evals_j):
    C_ij, C_ji = _check_square_pair(C_ij, C_ji)
    li = np.asarray(evals_i, dtype=np.float64)
    lj = np.asarray(evals_j, dtype=np.float64)
    if li.shape != (len(C_ij),) or lj.shape != li.shape:
        raise DataError("eigenvalue count must match the functional map size")
    v1, g1 = _fro_and_grad(C_ij * li[None, :] - lj[:, None] * C_ij)
    v2, g2 = _fro_and_grad(C_ji * lj[None, :] - li[:, None] * C_ji)
    return v1 + v2, g1 * li[None, :] - lj[:, None] * g1, g2 * lj[None, :] - li[:, None] * g2


def loss_iso(C_ij, C_ji, evals_i, evals_j) -> float:
    """||C_ij L_i - L_j C_ij||_F + ||C_ji L_j - L_i C_ji||_F with diagonal eigenvalue matrices."""
    return loss_iso_grad(C_ij, C_ji, evals_i, evals_j)[0]


def default_tau(m: int) -> float:
    return 30.0 / np.sqrt(m)


def _point_term(C, psi_src, psi_dst, D_src, D_dst, tau, chunk=1024):
    """||softmax(tau psi_dst C psi_src^T) D_src - D_dst||^2 / n_dst and its gradients."""
    n_dst = len(psi_dst)
    emb = psi_dst @ C
    value = 0.0
    g_C = np.zeros_like(C)
    g_src = np.zeros_like(D_src)
    g_dst = np.zeros_like(D_dst)
    for lo in range(0, n_dst, chunk):
        sl = slice(lo, min(lo + chunk, n_dst))
        s = tau * (emb[sl] @ psi_src.T)
        s -= s.max(axis=1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=1, keepdims=True)
        r = p @ D_src - D_dst[sl]
        value += float(np.sum(r * r))
        g_r = (2.0 / n_dst) * r
        g_p = g_r @ D_src.T
        g_s = p * (g_p - np.sum(g_p * p, axis=1, keepdims=True))
        g_C += tau * psi_dst[sl].T @ (g_s @ psi_src)
        g_src += p.T @ g_r
        g_dst[sl] -= g_r
    return value / n_dst, g_C, g_src, g_dst


def loss_point_grad(C_ij, C_ji, psi_i, psi_j, D_i, D_j, tau=None):
    C_ij, C_ji = _check_square_pair(C_ij, C_ji)
    psi_i, psi_j = np.asarray(psi_i, dtype=np.float64), np.asarray(psi_j, dtype=np.float64)
    D_i, D_j = np.asarray(D_i, dtype=np.float64), np.asarray(D_j, dtype=np.float64)
    if psi_i.shape[1] != len(C_ij) or psi_j.shape[1] != len(C_ij):
        raise DataError("eigenfunction count must match the functional map size")
    if len(D_i) != len(psi_i) or len(D_j) != len(psi_j) or D_i.shape[1] != D_j.shape[1]:
        raise DataError("descriptor rows must match eigenfunction rows")
    tau = default_tau(len(C_ij)) if tau is None else tau
    v1, gc1, gi1, gj1 = _point_term(C_ij, psi_i, psi_j, D_i, D_j, tau)
    v2, gc2, gj2, gi2 = _point_term(C_ji, psi_j, psi_i, D_j, D_i, tau)
    return v1 + v2, gc1, gc2, gi1 + gi2, gj1 + gj2


def loss_point(C_ij, C_ji, psi_i, psi_j, D_i, D_j, tau=None) -> float:
    """Descriptor transfer error through the soft point maps induced by C_ij and C_ji.

    ``Pi_ij = row_softmax(tau psi_j C_ij psi_i^T)`` maps functions on shape i
    to shape j; the loss is ``||Pi_ij D_i - D_j||^2 / n_j`` plus the
    symmetric term.
    """
    return loss_point_grad(C_ij, C_ji, psi_i, psi_j, D_i, D_j, tau)[0]


@dataclass(frozen=True)
class LossWeights:
    bij: float = 1.0
    orth: float = 1.0
    iso: float = 1.0
    point: float = 1.0

    def as_tuple(self):
        return (self.bij, self.orth, self.iso, self.point)


@dataclass
class PairState:
    """Everything the loss needs about one ordered pair."""

    C_ij: np.ndarray
    C_ji: np.ndarray
    evals_i: np.ndarray
    evals_j: np.ndarray
    psi_i: np.ndarray
    psi_j: np.ndarray
    D_i: np.ndarray
    D_j: np.ndarray
    tau: float | None = None


def loss_components(state: PairState) -> dict[str, float]:
    return {
        "bij": loss_bij(state.C_ij, state.C_ji),
        "orth": loss_orth(state.C_ij, state.C_ji),
        "iso": loss_iso(state.C_ij, state.C_ji, state.evals_i, state.evals_j),
        "point": loss_point(state.C_ij, state.C_ji, state.psi_i, state.psi_j,
                            state.D_i, state.D_j, state.tau),
    }


def total_loss(state: PairState, weights: LossWeights = LossWeights()) -> float:
    comps = loss_components(state)
    return float(sum(w * comps[k] for w, k in zip(weights.as_tuple(), COMPONENTS)))


# ------------------------------------------------------------ pair gradients


@dataclass
class ShapeView:
    """One (possibly subsampled, augmented) shape as seen by the network."""

    coords: np.ndarray
    adjacency: object
    proj: np.ndarray
    psi: np.ndarray
    evals: np.ndarray


@dataclass
class PairResult:
    total: float
    components: dict[str, float]
    grads: list[np.ndarray] | None = None
    C_ij: np.ndarray | None = None
    C_ji: np.ndarray | None = None


def _normalize_rows(F: np.ndarray):
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    D = np.where(norms > 0, F / safe, 0.0)

    def back(g_D):
        return np.where(norms > 0, (g_D - D * np.sum(g_D * D, axis=1, keepdims=True)) / safe, 0.0)

    return D, back


def pair_evals(evals_i: np.ndarray, evals_j: np.ndarray):
    """Eigenvalues rescaled by a scale shared across the pair so the largest is one."""
    scale = max(float(evals_i[-1]), float(evals_j[-1]), 1e-300)
    return evals_i / scale, evals_j / scale


def features_loss(F_i, F_j, view_i: ShapeView, view_j: ShapeView, weights: LossWeights,
                  tau=None, eps=None, need_grad=True):
    """Pair loss from per-vertex features; returns (total, components, dF_i, dF_j, C_ij, C_ji)."""
    A_i = view_i.proj @ F_i
    A_j = view_j.proj @ F_j
    C_ij, back_ij = solve_fmap_with_grad(A_i, A_j, eps)
    C_ji, back_ji = solve_fmap_with_grad(A_j, A_i, eps)
    li, lj = pair_evals(view_i.evals, view_j.evals)
    D_i, nback_i = _normalize_rows(F_i)
    D_j, nback_j = _normalize_rows(F_j)
    w = weights
    vb, gb_ij, gb_ji = loss_bij_grad(C_ij, C_ji)
    vo, go_ij, go_ji = loss_orth_grad(C_ij, C_ji)
    vi, gi_ij, gi_ji = loss_iso_grad(C_ij, C_ji, li, lj)
    vp, gp_ij, gp_ji, gD_i, gD_j = loss_point_grad(C_ij, C_ji, view_i.psi, view_j.psi, D_i, D_j, tau)
    comps = {"bij": vb, "orth": vo, "iso": vi, "point": vp}
    total = float(w.bij * vb + w.orth * vo + w.iso * vi + w.point * vp)
    if not need_grad:
        return total, comps, None, None, C_ij, C_ji
    g_ij = w.bij * gb_ij + w.orth * go_ij + w.iso * gi_ij + w.point * gp_ij
    g_ji = w.bij * gb_ji + w.orth * go_ji + w.iso * gi_ji + w.point * gp_ji
    gA_i, gA_j = back_ij(g_ij)
    gA_j2, gA_i2 = back_ji(g_ji)
    gF_i = view_i.proj.T @ (gA_i + gA_i2) + nback_i(w.point * gD_i)
    gF_j = view_j.proj.T @ (gA_j + gA_j2) + nback_j(w.point * gD_j)
    return total, comps, gF_i, gF_j, C_ij, C_ji


def grad_pair(net: descnet.DescriptorNet, view_i: ShapeView, view_j: ShapeView,
              weights: LossWeights = LossWeights(), tau=None, eps=None) -> PairResult:
    """Total pair loss and its gradient with respect to every network parameter."""
    F_i, cache_i = descnet.forward(net, view_i.adjacency, view_i.coords, return_cache=True)
    F_j, cache_j = descnet.forward(net, view_j.adjacency, view_j.coords, return_cache=True)
    total, comps, gF_i, gF_j, C_ij, C_ji = features_loss(F_i, F_j, view_i, view_j, weights, tau, eps)
    g_i = descnet.backward(net, view_i.adjacency, view_i.coords, gF_i, cache=cache_i)
    g_j = descnet.backward(net, view_j.adjacency, view_j.coords, gF_j, cache=cache_j)
    grads = [a + b for a, b in zip(g_i, g_j)]
    return PairResult(total, comps, grads, C_ij, C_ji)


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    iterations: int = 1000
    lr: float = 1e-3
    seed: int = 0
    n_train: int = 2000
    rotate: bool = True
    deform_sigma: float = 0.01
    w_bij: float = 1.0
    w_orth: float = 1.0
    w_iso: float = 1.0
    w_point: float = 1.0
    tau: float | None = None
    ridge: float | None = None
    k: int = 10
    widths: tuple[int, ...] = (64, 64, 64)
    hops: tuple[int, ...] = (1, 2, 3)
    d_out: int = 128
    net_seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.lr <= 0 or self.n_train < 1 or self.deform_sigma < 0:
            raise DataError("invalid training configuration")
        if min(self.w_bij, self.w_orth, self.w_iso, self.w_point) < 0:
            raise DataError("loss weights must be non-negative")
        if self.tau is not None and self.tau <= 0:
            raise DataError("tau must be positive")
        self.widths = tuple(int(w) for w in self.widths)
        self.hops = tuple(int(h) for h in self.hops)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.w_bij, self.w_orth, self.w_iso, self.w_point)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in mapping.items():
            if key not in types:
                continue
            kwargs[key] = parse_value(types[key], raw)
        return cls(**kwargs)


def parse_value(type_name, raw):
    raw = str(raw).strip()
    t = str(type_name)
    if t.startswith("tuple"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if "None" in t and raw.lower() in ("none", ""):
        return None
    if t.startswith("bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise DataError(f"not a boolean: {raw!r}")
    if t.startswith("int"):
        return int(raw)
    if t.startswith("float"):
        return float(raw)
    return raw


@dataclass
class TrainShape:
    """A dataset member with everything precomputed for training and inference."""

    mesh: Mesh
    basis: SpectralBasis
    normals: np.ndarray
    neighbors: np.ndarray
    graph: object = None

    @property
    def n(self) -> int:
        return self.mesh.n


def prepare_shape(mesh: Mesh, basis: SpectralBasis, k: int = 10) -> TrainShape:
    if basis.n != mesh.n:
        raise DataError("basis and mesh vertex counts differ")
    idx, _ = knn_neighbors(mesh.vertices, min(k, mesh.n - 1))
    neighbors = np.concatenate([np.arange(mesh.n)[:, None], idx], axis=1)
    return TrainShape(mesh, basis, vertex_normals(mesh), neighbors, knn_graph(mesh.vertices, min(k, mesh.n - 1)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def augment(shape: TrainShape, rng: np.random.Generator, rotate: bool, deform_sigma: float,
            smoothing_rounds: int = 3) -> np.ndarray:
    """Centered, smoothly deformed and optionally rotated copy of the vertex coordinates."""
    v = shape.mesh.vertices
    x = v - v.mean(axis=0)
    if deform_sigma > 0:
        disp = rng.normal(0.0, deform_sigma * shape.mesh.diameter(), size=len(v))
        for _ in range(smoothing_rounds):
            disp = disp[shape.neighbors].mean(axis=1)
        x = x + disp[:, None] * shape.normals
    if rotate:
        x = x @ random_rotation(rng).T
    return x


def make_view(shape: TrainShape, coords: np.ndarray, rows, k: int) -> ShapeView:
    """Network/loss view of ``shape`` restricted to ``rows`` (None = all vertices)."""
    # the basis is rescaled to unit total area so that maps between shapes of
    # different size stay close to orthogonal
    basis = shape.basis
    scale = np.sqrt(basis.area)
    if rows is None:
        adj = shape.graph.normalized if shape.graph is not None else knn_graph(coords, k).normalized
        return ShapeView(coords, adj, projection_matrix(basis) / scale, basis.evecs * scale, basis.evals)
    sub = coords[rows]
    adj = knn_graph(sub, min(k, len(rows) - 1)).normalized
    return ShapeView(sub, adj, projection_matrix(basis, rows) / scale, basis.evecs[rows] * scale, basis.evals)


def training_view(shape: TrainShape, rng: np.random.Generator, cfg: TrainConfig) -> ShapeView:
    coords = augment(shape, rng, cfg.rotate, cfg.deform_sigma)
    if cfg.n_train < shape.n:
        rows = fps_subsample(coords, cfg.n_train, seed=int(rng.integers(2 ** 31)))
    else:
        rows = np.arange(shape.n)
    return make_view(shape, coords, rows, cfg.k)


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params, grads):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            out.append(p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


@dataclass
class TrainResult:
    net: descnet.DescriptorNet
    history: np.ndarray  # iterations x (total, bij, orth, iso, point)

    def history_csv(self) -> str:
        return history_to_csv(self.history)


def history_to_csv(history: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "total", *COMPONENTS])
    for it, row in enumerate(history):
        writer.writerow([it] + [repr(float(x)) for x in row])
    return buf.getvalue()


def write_history(path, history: np.ndarray) -> None:
    atomic_write_text(path, history_to_csv(history))


def train(dataset: list[TrainShape], cfg: TrainConfig, net: descnet.DescriptorNet | None = None,
          callback=None) -> TrainResult:
    """Optimize the descriptor network on random augmented pairs, one pair per step."""
    if len(dataset) < 2:
        raise DataError("training needs at least two shapes")
    if net is None:
        net = descnet.init_weights(cfg.widths, cfg.net_seed, cfg.d_out, cfg.hops)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.lr)
    params = [p.copy() for p in net.params()]
    history = np.zeros((cfg.iterations, 1 + len(COMPONENTS)))
    for it in range(cfg.iterations):
        i, j = rng.choice(len(dataset), size=2, replace=False)
        view_i = training_view(dataset[i], rng, cfg)
        view_j = training_view(dataset[j], rng, cfg)
        res = grad_pair(net, view_i, view_j, cfg.weights, cfg.tau, cfg.ridge)
        history[it] = [res.total] + [res.components[c] for c in COMPONENTS]
        params = opt.step(params, res.grads)
        net = net.with_params(params)
        if callback is not None:
            callback(it, res)
        if it % 50 == 0:
            log.debug("iter %d loss %.4f %s", it, res.total, res.components)
    return TrainResult(net, history)
