"""Synthetic-family experiments with known ground truth.

``run_benchmark`` compares trained, untrained and random correspondences on
one cross-validation fold and builds shape models from predicted and from
ground-truth correspondences. ``run_noise_experiment`` compares a large
family corrupted by voxel remeshing with a small clean one.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import descnet
from .correspond import PointMap, correspond_dataset, corresponded_points, select_template
from .fmap import TrainConfig, TrainShape, make_view, prepare_shape, train
from .geomcore import procrustes_align
from .pipeline import fold_assignment, working_mesh
from .spectral import cotan_laplacian, eigenbasis
from .ssm import build_pdm, generality, specificity
from .synth import FamilySpec, correspondence_error, generate_family

log = logging.getLogger(__name__)


@dataclass
class BenchmarkConfig:
    family: FamilySpec = field(default_factory=lambda: FamilySpec(n_shapes=20, amplitude=0.05, resolution=1500))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        iterations=500, lr=1e-2, n_train=1000, rotate=False, w_bij=0.0, w_orth=0.0, w_iso=0.0, w_point=100.0))
    m: int = 20
    k: int = 10
    folds: int = 4
    fold: int = 0
    seed: int = 0
    n_correspond: int = 3000
    pmf_iterations: int = 5
    n_spec_samples: int = 1000
    n_random: int = 5


def prepare_family(meshes, m: int = 20, k: int = 10) -> list[TrainShape]:
    return [prepare_shape(mesh, eigenbasis(cotan_laplacian(mesh, k), m), k) for mesh in meshes]


def predict_maps(net, shapes: list[TrainShape], train_ids, cfg: BenchmarkConfig, weights=None):
    """Template among the training shapes, then bijective maps of every shape to it."""
    weights = weights or cfg.train.weights
    views = [make_view(s, s.mesh.vertices, None, cfg.k) for s in shapes]
    feats = [descnet.forward(net, v.adjacency, v.coords) for v in views]
    t_local, _ = select_template([feats[i] for i in train_ids], [views[i] for i in train_ids], weights,
                                 cfg.train.tau, cfg.train.ridge)
    template = int(train_ids[t_local])
    res = correspond_dataset(feats, views, [s.mesh.vertices for s in shapes], None, cfg.n_correspond,
                             cfg.seed, weights, cfg.train.tau, cfg.train.ridge, cfg.pmf_iterations,
                             template=template)
    return res


def mean_identity_error(maps: list[PointMap], template: int, target: np.ndarray) -> float:
    """Mean correspondence error when the ground truth is the shared vertex index."""
    errs = [correspondence_error(pm, PointMap(pm.source_id, pm.target_id, np.arange(pm.n)), target)[0]
            for i, pm in enumerate(maps) if i != template]
    return float(np.mean(errs))


def shape_model_metrics(sets, full_vertices, train_ids, held_ids, n_samples: int, seed: int):
    aligned, _ = procrustes_align([sets[i] for i in train_ids])
    pdm = build_pdm(aligned)
    gen = generality(pdm, [sets[i] for i in held_ids], [full_vertices[i] for i in held_ids])
    spec = specificity(pdm, aligned, n_samples, seed=seed)
    return pdm, gen, spec


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig()) -> dict:
    t0 = time.perf_counter()
    members = generate_family(cfg.family)
    meshes = [mem.mesh for mem in members]
    shapes = prepare_family(meshes, cfg.m, cfg.k)
    n = len(shapes)
    assignment = fold_assignment(n, cfg.folds, cfg.seed)
    held_ids = assignment[cfg.fold]
    train_ids = np.setdiff1d(np.arange(n), held_ids)
    tcfg = replace(cfg.train, seed=cfg.seed, net_seed=cfg.seed)
    result = train([shapes[i] for i in train_ids], tcfg)
    untrained = descnet.init_weights(tcfg.widths, tcfg.net_seed, tcfg.d_out, tcfg.hops)
    out = {"history": result.history, "train_ids": train_ids, "held_ids": held_ids}
    for name, net in (("trained", result.net), ("untrained", untrained)):
        res = predict_maps(net, shapes, train_ids, cfg)
        target = shapes[res.template].mesh.vertices
        out[f"{name}_error"] = mean_identity_error(res.maps, res.template, target)
        out[f"{name}_template"] = res.template
        if name == "trained":
            pred = res
    rng = np.random.default_rng(cfg.seed)
    target = shapes[pred.template].mesh.vertices
    nv = len(target)
    out["random_error"] = float(np.mean([
        correspondence_error(PointMap("r", "t", rng.permutation(nv)), PointMap("r", "t", np.arange(nv)), target)[0]
        for _ in range(cfg.n_random)]))
    full = [m.vertices for m in meshes]
    pred_sets = [corresponded_points(pm, shapes[i].mesh.vertices[r])
                 for i, (pm, r) in enumerate(zip(pred.maps, pred.rows))]
    _, out["generality"], out["specificity"] = shape_model_metrics(
        pred_sets, full, train_ids, held_ids, cfg.n_spec_samples, cfg.seed)
    _, out["gt_generality"], out["gt_specificity"] = shape_model_metrics(
        full, full, train_ids, held_ids, cfg.n_spec_samples, cfg.seed)
    out["seconds"] = time.perf_counter() - t0
    return out


@dataclass
class NoiseConfig:
    clean: FamilySpec = field(default_factory=lambda: FamilySpec(n_shapes=10, amplitude=0.05, resolution=1500, seed=1))
    corrupted: FamilySpec = field(default_factory=lambda: FamilySpec(
        n_shapes=40, amplitude=0.05, resolution=1500, seed=2, remesh=True, label_noise=0.3,
        voxel_size=1.0))
    held_out: FamilySpec = field(default_factory=lambda: FamilySpec(n_shapes=10, amplitude=0.05, resolution=1500, seed=3))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        iterations=500, lr=1e-2, n_train=1000, rotate=False, w_bij=0.0, w_orth=0.0, w_iso=0.0, w_point=100.0))
    m: int = 20
    k: int = 10
    seed: int = 0
    n_correspond: int = 1500
    n_mesh: int = 1500
    pmf_iterations: int = 5
    n_spec_samples: int = 1000


def _held_out_generality(meshes, held, cfg: NoiseConfig, tcfg: TrainConfig):
    """Train and build a shape model on ``meshes``; correspond ``held`` with the same network and
    template and return the model's generality on them. Meshes above ``cfg.n_mesh`` vertices are
    subsampled to point clouds as in preprocessing."""
    work = [working_mesh(mesh, cfg.n_mesh)[0] for mesh in list(meshes) + list(held)]
    shapes = prepare_family(work, cfg.m, cfg.k)
    n_fit = len(meshes)
    fit_ids = np.arange(n_fit)
    result = train(shapes[:n_fit], tcfg)
    bcfg = BenchmarkConfig(train=tcfg, m=cfg.m, k=cfg.k, seed=cfg.seed, n_correspond=cfg.n_correspond,
                           pmf_iterations=cfg.pmf_iterations)
    res = predict_maps(result.net, shapes, fit_ids, bcfg)
    sets = [corresponded_points(pm, s.mesh.vertices[r]) for pm, s, r in zip(res.maps, shapes, res.rows)]
    aligned, _ = procrustes_align(sets[:n_fit])
    pdm = build_pdm(aligned)
    held_ids = np.arange(n_fit, len(shapes))
    return generality(pdm, [sets[i] for i in held_ids], [held[i - n_fit].vertices for i in held_ids]), pdm


def run_noise_experiment(cfg: NoiseConfig = NoiseConfig()) -> dict:
    """Generality on clean held-out shapes of a corrupted-large versus a clean-small model."""
    t0 = time.perf_counter()
    tcfg = replace(cfg.train, seed=cfg.seed, net_seed=cfg.seed)
    clean = [m.mesh for m in generate_family(cfg.clean)]
    corrupted = [m.mesh for m in generate_family(cfg.corrupted)]
    held = [m.mesh for m in generate_family(cfg.held_out)]
    out = {}
    for name, meshes in (("clean", clean), ("corrupted", corrupted)):
        gen, pdm = _held_out_generality(meshes, held, cfg, tcfg)
        out[f"{name}_generality"] = gen
        out[f"{name}_n_points"] = pdm.n_points
    out["seconds"] = time.perf_counter() - t0
    return out
