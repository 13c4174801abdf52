"""Cross-validated pipeline stages: preprocess, train, correspond, build-ssm, eval, sample.

Every stage reads the artifacts of the previous one from ``out_dir`` and
writes its own into ``out_dir/<stage>/fold<f>``. A stage directory is
assembled in a temporary sibling and renamed into place, so an interrupted
run never leaves a half-written stage behind.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import sparse

from . import descnet
from .correspond import (PointMap, correspond_dataset, corresponded_points, read_pointmap,
                         select_template, write_pointmap)
from .fmap import TrainConfig, TrainShape, make_view, parse_value, prepare_shape, train, write_history
from .geomcore import (DataError, KnnGraph, Mesh, fps_subsample, knn_graph, largest_component_index,
                       marching_cubes, procrustes_align)
from .meshio import atomic_write_text, read_mesh, read_voxels, write_ply, read_ply
from .plots import write_loss_curve, write_scree
from .spectral import cotan_laplacian, eigenbasis, hks_descriptor, load_basis, save_basis, wks_descriptor
from .ssm import build_pdm, generality, load_pdm, sample, save_pdm, specificity
from .synth import correspondence_error, parse_kv

log = logging.getLogger(__name__)

CACHE_VERSION = "1"
DESCRIPTORS = ("learned", "wks", "hks")
MESH_SUFFIXES = (".ply", ".off")


class MissingArtifactError(DataError):
    """An upstream stage has not been run."""

    def __init__(self, stage: str, path):
        super().__init__(f"missing {path}; run the '{stage}' stage first")
        self.stage = stage


@dataclass
class PipelineConfig:
    data_dir: str = "data"
    cache_dir: str = "cache"
    out_dir: str = "out"
    m: int = 20
    k: int = 10
    n_mesh: int = 5000
    n_correspond: int = 3000
    iso: float = 0.5
    folds: int = 4
    seed: int = 0
    pmf_iterations: int = 5
    sigma_start: float = 0.10
    sigma_end: float = 0.02
    n_spec_samples: int = 1000
    n_draws: int = 5
    gen_modes: int | None = None
    descriptor: str = "learned"
    strict_paper_sampling: bool = False
    workers: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if self.m < 2 or self.k < 1 or self.n_mesh < 20 or self.n_correspond < 20:
            raise DataError("m, k and subsample sizes are out of range")
        if self.folds < 2:
            raise DataError("need at least two folds")
        if self.pmf_iterations < 1 or not 0 < self.sigma_end <= self.sigma_start:
            raise DataError("PMF needs iterations >= 1 and 0 < sigma_end <= sigma_start")
        if self.n_spec_samples < 1 or self.n_draws < 0 or self.workers < 1:
            raise DataError("sample counts and worker count must be positive")
        if self.gen_modes is not None and self.gen_modes < 1:
            raise DataError("gen_modes must be positive")
        if self.descriptor not in DESCRIPTORS:
            raise DataError(f"descriptor must be one of {DESCRIPTORS}")

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        """Flat ``key = value`` file; training keys (``iterations``, ``lr``, ...) go to ``train``."""
        kv = parse_kv(text)
        own = {f.name: f.type for f in fields(cls) if f.name != "train"}
        train_types = {f.name: f.type for f in fields(TrainConfig) if f.name != "seed"}
        kwargs, train_kwargs = {}, {}
        for key, raw in kv.items():
            name = key[len("train."):] if key.startswith("train.") else key
            if key in own:
                kwargs[key] = parse_value(own[key], raw)
            elif name in train_types:
                train_kwargs[name] = parse_value(train_types[name], raw)
            else:
                raise DataError(f"unknown config key {key!r}")
        cfg = cls(**kwargs, train=TrainConfig(**train_kwargs))
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "train":
                continue
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        for line in self.train.to_text().splitlines():
            if not line.startswith("seed "):
                lines.append(line)
        return "\n".join(lines) + "\n"

    @property
    def out(self) -> Path:
        return Path(self.out_dir)


# ------------------------------------------------------------------ helpers


def fold_assignment(n: int, n_folds: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle split into ``n_folds`` validation folds (sorted indices)."""
    if n < n_folds:
        raise DataError(f"{n} shapes cannot fill {n_folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(perm[f::n_folds]) for f in range(n_folds)]


class _StageDir:
    """Write into a temporary directory and rename over ``final`` on success."""

    def __init__(self, final: Path):
        self.final = Path(final)

    def __enter__(self) -> Path:
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(dir=self.final.parent, prefix=f".{self.final.name}."))
        return self.tmp

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            shutil.rmtree(self.tmp, ignore_errors=True)
            return False
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return False


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(stage, path)
    return path


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------- preprocess


@dataclass
class ShapeRecord:
    shape_id: str
    key: str
    source: str
    n_full: int
    n: int


def discover_inputs(data_dir) -> list[Path]:
    """Mesh files if any are present, otherwise voxel grids; sorted by name."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory {data_dir} does not exist")
    meshes = sorted(p for p in data_dir.iterdir() if p.suffix.lower() in MESH_SUFFIXES)
    if meshes:
        return meshes
    voxels = sorted(p for p in data_dir.iterdir() if p.suffix.lower() == ".vox")
    if not voxels:
        raise DataError(f"no .ply, .off or .vox inputs in {data_dir}")
    return voxels


def cache_key(path: Path, cfg: PipelineConfig) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    h.update(f"|v{CACHE_VERSION}|m={cfg.m}|k={cfg.k}|n={cfg.n_mesh}|iso={cfg.iso!r}".encode())
    return h.hexdigest()[:20]


_CACHE_FILES = ("full.ply", "mesh.ply", "index.txt", "basis.bin", "graph.npz")


def working_mesh(full: Mesh, n_mesh: int) -> tuple[Mesh, np.ndarray]:
    """The mesh itself when small enough, else a farthest-point subsample as a point cloud.

    Returns the working mesh and the rows of ``full`` it keeps.
    """
    if full.n > n_mesh:
        rows = fps_subsample(full.vertices, n_mesh, seed=0)
        return Mesh(full.vertices[rows]), rows
    return full, np.arange(full.n)


def _preprocess_one(path: Path, cfg: PipelineConfig) -> ShapeRecord:
    key = cache_key(path, cfg)
    entry = Path(cfg.cache_dir) / key
    if all((entry / f).exists() for f in _CACHE_FILES):
        full = read_ply(entry / "full.ply")
        n = len(np.loadtxt(entry / "index.txt", dtype=np.int64, ndmin=1))
        log.info("%s: cache hit %s", path.name, key)
        return ShapeRecord(path.stem, key, path.name, full.n, n)
    if path.suffix.lower() == ".vox":
        raw = marching_cubes(read_voxels(path), cfg.iso)
    else:
        raw = read_mesh(path)
    raw.validate()
    keep = largest_component_index(raw)
    remap = -np.ones(raw.n, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    faces = remap[raw.faces]
    full = Mesh(raw.vertices[keep], faces[np.all(faces >= 0, axis=1)])
    mesh, rows = working_mesh(full, cfg.n_mesh)
    basis = eigenbasis(cotan_laplacian(mesh, cfg.k), cfg.m)
    graph = knn_graph(mesh.vertices, min(cfg.k, mesh.n - 1))
    with _StageDir(entry) as tmp:
        write_ply(tmp / "full.ply", full)
        write_ply(tmp / "mesh.ply", mesh)
        # original input vertex index of every preprocessed vertex
        atomic_write_text(tmp / "index.txt", "\n".join(str(int(i)) for i in keep[rows]) + "\n")
        save_basis(tmp / "basis.bin", basis)
        sparse.save_npz(tmp / "graph.npz", graph.adjacency, compressed=False)
    return ShapeRecord(path.stem, key, path.name, full.n, mesh.n)


def preprocess(cfg: PipelineConfig) -> list[ShapeRecord]:
    cfg.validate()
    inputs = discover_inputs(cfg.data_dir)
    records = _map(lambda p: _preprocess_one(p, cfg), inputs, cfg.workers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["shape_id", "key", "source", "n_full", "n"])
    for r in records:
        w.writerow([r.shape_id, r.key, r.source, r.n_full, r.n])
    with _StageDir(cfg.out / "preprocess") as tmp:
        atomic_write_text(tmp / "shapes.csv", buf.getvalue())
        atomic_write_text(tmp / "config.txt", cfg.to_text())
    return records


# ------------------------------------------------------------ loaded dataset


@dataclass
class LoadedShape:
    record: ShapeRecord
    shape: TrainShape
    full: Mesh
    index: np.ndarray

    @property
    def points(self) -> np.ndarray:
        return self.shape.mesh.vertices


def load_records(cfg: PipelineConfig) -> list[ShapeRecord]:
    path = _require(cfg.out / "preprocess" / "shapes.csv", "preprocess")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [ShapeRecord(r["shape_id"], r["key"], r["source"], int(r["n_full"]), int(r["n"])) for r in rows]


def load_dataset(cfg: PipelineConfig) -> list[LoadedShape]:
    out = []
    for rec in load_records(cfg):
        entry = Path(cfg.cache_dir) / rec.key
        for f in _CACHE_FILES:
            _require(entry / f, "preprocess")
        mesh = read_ply(entry / "mesh.ply")
        basis = load_basis(entry / "basis.bin")
        adj = sparse.load_npz(entry / "graph.npz").tocsr()
        graph = KnnGraph(mesh.n, min(cfg.k, mesh.n - 1), adj)
        shape = prepare_shape(mesh, basis, cfg.k)
        shape.graph = graph
        index = np.loadtxt(entry / "index.txt", dtype=np.int64, ndmin=1)
        out.append(LoadedShape(rec, shape, read_ply(entry / "full.ply"), index))
    if len(out) < cfg.folds:
        raise DataError(f"{len(out)} shapes cannot fill {cfg.folds} folds")
    return out


def _folds(cfg: PipelineConfig, n: int, fold: int | None) -> tuple[list[np.ndarray], list[int]]:
    assignment = fold_assignment(n, cfg.folds, cfg.seed)
    if fold is None:
        return assignment, list(range(cfg.folds))
    if not 0 <= fold < cfg.folds:
        raise DataError(f"fold must be in [0, {cfg.folds})")
    return assignment, [fold]


def _train_ids(assignment, f: int, n: int) -> np.ndarray:
    return np.setdiff1d(np.arange(n), assignment[f])


# -------------------------------------------------------------------- train


def fold_train_config(cfg: PipelineConfig, f: int) -> TrainConfig:
    return replace(cfg.train, seed=cfg.seed * 1009 + f, net_seed=cfg.seed)


def train_stage(cfg: PipelineConfig, fold: int | None = None) -> None:
    cfg.validate()
    if cfg.descriptor != "learned":
        log.info("descriptor %s needs no training", cfg.descriptor)
        return
    data = load_dataset(cfg)
    assignment, selected = _folds(cfg, len(data), fold)
    for f in selected:
        tcfg = fold_train_config(cfg, f)
        shapes = [data[i].shape for i in _train_ids(assignment, f, len(data))]
        result = train(shapes, tcfg)
        with _StageDir(cfg.out / "train" / f"fold{f}") as tmp:
            descnet.save_checkpoint(tmp / "net.bin", result.net, {"fold": f, "iterations": tcfg.iterations})
            write_history(tmp / "history.csv", result.history)
            if len(result.history):
                write_loss_curve(tmp / "loss.svg", result.history)
        log.info("fold %d: final loss %.4f", f, result.history[-1, 0] if len(result.history) else float("nan"))


# --------------------------------------------------------------- correspond


def shape_features(cfg: PipelineConfig, data: list[LoadedShape], net: descnet.DescriptorNet | None):
    if cfg.descriptor == "wks":
        return [wks_descriptor(d.shape.basis) for d in data]
    if cfg.descriptor == "hks":
        return [hks_descriptor(d.shape.basis) for d in data]
    return [descnet.forward(net, d.shape.graph, d.points) for d in data]


def load_net(cfg: PipelineConfig, f: int) -> descnet.DescriptorNet | None:
    if cfg.descriptor != "learned":
        return None
    return descnet.load_checkpoint(_require(cfg.out / "train" / f"fold{f}" / "net.bin", "train"))


def correspond_stage(cfg: PipelineConfig, fold: int | None = None) -> None:
    cfg.validate()
    data = load_dataset(cfg)
    assignment, selected = _folds(cfg, len(data), fold)
    nets = {f: load_net(cfg, f) for f in selected}
    ids = [d.record.shape_id for d in data]
    for f in selected:
        feats = shape_features(cfg, data, nets[f])
        views = [make_view(d.shape, d.points, None, cfg.k) for d in data]
        train_ids = _train_ids(assignment, f, len(data))
        t_local, L = select_template([feats[i] for i in train_ids], [views[i] for i in train_ids],
                                     cfg.train.weights, cfg.train.tau, cfg.train.ridge, cfg.workers)
        template = int(train_ids[t_local])
        res = correspond_dataset(feats, views, [d.points for d in data], ids, cfg.n_correspond, cfg.seed,
                                 cfg.train.weights, cfg.train.tau, cfg.train.ridge, cfg.pmf_iterations,
                                 cfg.sigma_start, cfg.sigma_end, cfg.workers, template=template)
        with _StageDir(cfg.out / "correspond" / f"fold{f}") as tmp:
            atomic_write_text(tmp / "template.txt", ids[template] + "\n")
            for sid, pm, rows in zip(ids, res.maps, res.rows):
                write_pointmap(tmp / f"{sid}.map.csv", pm)
                atomic_write_text(tmp / f"{sid}.rows.txt", "\n".join(str(int(r)) for r in rows) + "\n")
            lines = [",".join(ids[i] for i in train_ids)]
            lines += [",".join(_fmt(x) for x in row) for row in L]
            atomic_write_text(tmp / "template_losses.csv", "\n".join(lines) + "\n")


@dataclass
class FoldMaps:
    template: int
    maps: list[PointMap]
    rows: list[np.ndarray]


def load_fold_maps(cfg: PipelineConfig, data: list[LoadedShape], f: int) -> FoldMaps:
    d = cfg.out / "correspond" / f"fold{f}"
    ids = [x.record.shape_id for x in data]
    tid = _require(d / "template.txt", "correspond").read_text().strip()
    if tid not in ids:
        raise DataError(f"template {tid} is not in the preprocessed dataset")
    maps = [read_pointmap(_require(d / f"{sid}.map.csv", "correspond")) for sid in ids]
    rows = [np.loadtxt(_require(d / f"{sid}.rows.txt", "correspond"), dtype=np.int64, ndmin=1) for sid in ids]
    return FoldMaps(ids.index(tid), maps, rows)


def corresponded_sets(data: list[LoadedShape], fm: FoldMaps) -> list[np.ndarray]:
    """Every shape's standardized points reordered into template row order."""
    return [corresponded_points(pm, d.points[r]) for d, pm, r in zip(data, fm.maps, fm.rows)]


# ---------------------------------------------------------------- build-ssm


def build_ssm_stage(cfg: PipelineConfig, fold: int | None = None) -> None:
    cfg.validate()
    data = load_dataset(cfg)
    assignment, selected = _folds(cfg, len(data), fold)
    for f in selected:
        fm = load_fold_maps(cfg, data, f)
        sets = corresponded_sets(data, fm)
        train_ids = _train_ids(assignment, f, len(data))
        aligned, _ = procrustes_align([sets[i] for i in train_ids])
        pdm = build_pdm(aligned)
        with _StageDir(cfg.out / "ssm" / f"fold{f}") as tmp:
            save_pdm(tmp / "model.pdm", pdm)
            np.save(tmp / "train_aligned.npy", np.stack(aligned))
            atomic_write_text(tmp / "eigenvalues.csv",
                              "mode,eigenvalue\n" + "".join(f"{j + 1},{_fmt(v)}\n" for j, v in enumerate(pdm.eigenvalues)))


def _load_ssm(cfg: PipelineConfig, f: int):
    d = cfg.out / "ssm" / f"fold{f}"
    pdm = load_pdm(_require(d / "model.pdm", "build-ssm"))
    aligned = np.load(_require(d / "train_aligned.npy", "build-ssm"))
    return pdm, list(aligned)


# --------------------------------------------------------------------- eval


def read_ground_truth(cfg: PipelineConfig, data: list[LoadedShape]) -> list[PointMap] | None:
    """Exact ground-truth maps to a shared family index, when every shape has one."""
    out = []
    for d in data:
        path = Path(cfg.data_dir) / f"{d.record.shape_id}.gt.csv"
        if not path.exists():
            return None
        pm = read_pointmap(path)
        if not pm.bijective:
            return None
        out.append(pm)
    return out


def fold_correspondence_errors(data, fm: FoldMaps, gts: list[PointMap]):
    """Per-shape correspondence error against the template through the family index."""
    T = fm.template
    fam_t = gts[T].assignment[data[T].index[fm.rows[T]]]
    lookup = {int(v): r for r, v in enumerate(fam_t)}
    target = data[T].points[fm.rows[T]]
    out = []
    for i, (d, pm, rows) in enumerate(zip(data, fm.maps, fm.rows)):
        if i == T:
            continue
        fam_i = gts[i].assignment[d.index[rows]]
        gt_rows = np.array([lookup.get(int(v), -1) for v in fam_i])
        ok = gt_rows >= 0
        if not ok.any():
            continue
        pred = PointMap(d.record.shape_id, "template", pm.assignment[ok])
        gt = PointMap(d.record.shape_id, "template", gt_rows[ok])
        mean, within = correspondence_error(pred, gt, target)
        out.append((i, mean, within))
    return out


def eval_stage(cfg: PipelineConfig, fold: int | None = None) -> list[tuple[int, str, float, float]]:
    cfg.validate()
    data = load_dataset(cfg)
    assignment, selected = _folds(cfg, len(data), fold)
    gts = read_ground_truth(cfg, data)
    metrics = []
    corr_rows = []
    for f in selected:
        pdm, train_aligned = _load_ssm(cfg, f)
        fm = load_fold_maps(cfg, data, f)
        sets = corresponded_sets(data, fm)
        held = assignment[f]
        g_mean, g_sd = generality(pdm, [sets[i] for i in held], [data[i].full.vertices for i in held],
                                  cfg.gen_modes)
        s_mean, s_sd = specificity(pdm, train_aligned, cfg.n_spec_samples, seed=cfg.seed + f,
                                   strict_paper=cfg.strict_paper_sampling)
        metrics += [(f, "generality", g_mean, g_sd), (f, "specificity", s_mean, s_sd)]
        if gts is not None:
            for i, mean, within in fold_correspondence_errors(data, fm, gts):
                corr_rows.append([f, data[i].record.shape_id, _fmt(mean)] + [_fmt(v) for v in within.values()])
    with _StageDir(cfg.out / "eval") as tmp:
        text = "fold,metric,mean,sd\n" + "".join(f"{f},{m},{_fmt(a)},{_fmt(b)}\n" for f, m, a, b in metrics)
        atomic_write_text(tmp / "metrics.csv", text)
        if gts is not None:
            head = "fold,shape_id,mean_error,within_1pct,within_5pct,within_10pct\n"
            atomic_write_text(tmp / "correspondence.csv", head + "".join(",".join(map(str, r)) + "\n" for r in corr_rows))
    return metrics


# ------------------------------------------------------------------- sample


def sample_stage(cfg: PipelineConfig, fold: int | None = None) -> None:
    cfg.validate()
    data = load_dataset(cfg)
    _, selected = _folds(cfg, len(data), fold)
    for f in selected:
        pdm, _ = _load_ssm(cfg, f)
        fm = load_fold_maps(cfg, data, f)
        t = data[fm.template]
        # template triangles carry over when the correspondence rows are the whole mesh
        faces = t.shape.mesh.faces if len(fm.rows[fm.template]) == t.shape.n and np.array_equal(
            fm.rows[fm.template], np.arange(t.shape.n)) else np.zeros((0, 3), dtype=np.int64)
        rng = np.random.default_rng(cfg.seed + f)
        with _StageDir(cfg.out / "sample" / f"fold{f}") as tmp:
            write_ply(tmp / "mean.ply", Mesh(pdm.mean_shape(), faces))
            for s in range(cfg.n_draws):
                pts = sample(pdm, rng=rng, strict_paper=cfg.strict_paper_sampling)
                write_ply(tmp / f"sample_{s:03d}.ply", Mesh(pts, faces))
            write_scree(tmp / "scree.svg", pdm.eigenvalues)
