"""Topology-adaptive graph convolution descriptor with exact reverse-mode gradients.

Each layer computes ``H_l = act(sum_h A^h H_{l-1} W_{l,h} + b_l)`` with the
random-walk normalized kNN adjacency ``A``; a linear head maps the last
hidden layer to the output descriptor.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

from .geomcore import DataError, KnnGraph
from .meshio import atomic_write_bytes, atomic_write_text


@dataclass
class DescriptorNet:
    widths: tuple[int, ...] = (64, 64, 64)
    hops: tuple[int, ...] = (1, 2, 3)
    d_out: int = 128
    in_dim: int = 3
    seed: int = 0
    negative_slope: float = 0.2
    layer_weights: list[list[np.ndarray]] = field(default_factory=list)
    layer_biases: list[np.ndarray] = field(default_factory=list)
    head_weight: np.ndarray | None = None
    head_bias: np.ndarray | None = None

    def params(self) -> list[np.ndarray]:
        """All weight tensors in declaration order (layer by layer, hop by hop, then head)."""
        out = []
        for ws, b in zip(self.layer_weights, self.layer_biases):
            out.extend(ws)
            out.append(b)
        out += [self.head_weight, self.head_bias]
        return out

    def with_params(self, params: list[np.ndarray]) -> "DescriptorNet":
        params = list(params)
        pos = 0
        lw, lb = [], []
        for h in self.hops:
            lw.append([np.array(p, dtype=np.float64) for p in params[pos: pos + h + 1]])
            pos += h + 1
            lb.append(np.array(params[pos], dtype=np.float64))
            pos += 1
        return DescriptorNet(
            self.widths, self.hops, self.d_out, self.in_dim, self.seed, self.negative_slope,
            lw, lb, np.array(params[pos], dtype=np.float64), np.array(params[pos + 1], dtype=np.float64),
        )

    def copy(self) -> "DescriptorNet":
        return self.with_params(self.params())

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_weights(widths=(64, 64, 64), seed: int = 0, d_out: int = 128, hops=(1, 2, 3),
                 in_dim: int = 3, negative_slope: float = 0.2) -> DescriptorNet:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    widths, hops = tuple(int(w) for w in widths), tuple(int(h) for h in hops)
    if len(widths) != len(hops):
        raise DataError("need one hop count per layer")
    if min(widths) < 1 or d_out < 1 or min(hops) < 0:
        raise DataError("widths and d_out must be positive")
    rng = np.random.default_rng(seed)
    lw, lb = [], []
    fan_in = in_dim
    for w, h in zip(widths, hops):
        lw.append([_glorot(rng, fan_in, w) for _ in range(h + 1)])
        lb.append(np.zeros(w))
        fan_in = w
    return DescriptorNet(widths, hops, d_out, in_dim, seed, negative_slope, lw, lb,
                         _glorot(rng, fan_in, d_out), np.zeros(d_out))


def _adjacency(graph) -> sparse.csr_matrix:
    if isinstance(graph, KnnGraph):
        return graph.normalized.tocsr()
    return sparse.csr_matrix(graph)


def _inputs(coords: np.ndarray, center: bool) -> np.ndarray:
    x = np.asarray(coords, dtype=np.float64)
    return x - x.mean(axis=0) if center else x


def forward(net: DescriptorNet, graph, coords: np.ndarray, center: bool = True,
            return_cache: bool = False):
    """Per-vertex descriptors (n x d_out). ``graph`` is a KnnGraph or a normalized adjacency."""
    adj = _adjacency(graph)
    x = _inputs(coords, center)
    if adj.shape[0] != x.shape[0]:
        raise DataError(f"graph has {adj.shape[0]} nodes but coords have {x.shape[0]} rows")
    if x.shape[1] != net.in_dim:
        raise DataError(f"expected {net.in_dim} input features, got {x.shape[1]}")
    slope = net.negative_slope
    cache = []
    h = x
    for ws, b in zip(net.layer_weights, net.layer_biases):
        if h.shape[1] != ws[0].shape[0]:
            raise DataError("layer width mismatch")
        powers = [h]
        for _ in range(len(ws) - 1):
            powers.append(adj @ powers[-1])
        pre = b + sum(z @ w for z, w in zip(powers, ws))
        cache.append((powers, pre))
        h = np.where(pre > 0, pre, slope * pre)
    if h.shape[1] != net.head_weight.shape[0]:
        raise DataError("head width mismatch")
    out = h @ net.head_weight + net.head_bias
    if return_cache:
        return out, (adj, cache, h)
    return out


def backward(net: DescriptorNet, graph, coords: np.ndarray, grad_out: np.ndarray,
             center: bool = True, cache=None) -> list[np.ndarray]:
    """Gradients of ``sum(grad_out * forward(...))`` wrt ``net.params()``, same order."""
    if cache is None:
        out, cache = forward(net, graph, coords, center, return_cache=True)
    adj, layers, h_last = cache
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (h_last.shape[0], net.d_out):
        raise DataError(f"grad_out shape {grad_out.shape} does not match output")
    adj_t = adj.T.tocsr()
    slope = net.negative_slope
    g_head_w = h_last.T @ grad_out
    g_head_b = grad_out.sum(axis=0)
    g_h = grad_out @ net.head_weight.T
    grads_rev = []
    for (powers, pre), ws in zip(reversed(layers), reversed(net.layer_weights)):
        g_pre = g_h * np.where(pre > 0, 1.0, slope)
        g_ws = [z.T @ g_pre for z in powers]
        g_b = g_pre.sum(axis=0)
        # Horner form of sum_h (A^T)^h g_pre W_h^T
        acc = g_pre @ ws[-1].T
        for w in reversed(ws[:-1]):
            acc = adj_t @ acc + g_pre @ w.T
        g_h = acc
        grads_rev.append(g_ws + [g_b])
    grads = [g for layer in reversed(grads_rev) for g in layer]
    return grads + [g_head_w, g_head_b]


_MAGIC = b"DESCNET1"


def save_checkpoint(path, net: DescriptorNet, extra: dict | None = None) -> None:
    """Binary checkpoint plus a ``.txt`` sidecar of hyperparameters.

    Layout (little endian): magic, uint32 L, uint32 widths[L], uint32 hops[L],
    uint32 in_dim, uint32 d_out, int64 seed, float64 negative_slope, then all
    tensors of ``net.params()`` as float64 in declaration order.
    """
    L = len(net.widths)
    header = _MAGIC + struct.pack(
        f"<I{L}I{L}IIIqd", L, *net.widths, *net.hops, net.in_dim, net.d_out, net.seed, net.negative_slope
    )
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params())
    atomic_write_bytes(path, header + payload)
    lines = [
        f"widths = {','.join(map(str, net.widths))}",
        f"hops = {','.join(map(str, net.hops))}",
        f"in_dim = {net.in_dim}",
        f"d_out = {net.d_out}",
        f"seed = {net.seed}",
        f"negative_slope = {net.negative_slope!r}",
        f"n_params = {net.n_params()}",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    atomic_write_text(Path(str(path) + ".txt"), "\n".join(lines) + "\n")


def load_checkpoint(path) -> DescriptorNet:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise DataError(f"{path}: not a descriptor checkpoint")
    off = len(_MAGIC)
    (L,) = struct.unpack_from("<I", raw, off)
    fmt = f"<I{L}I{L}IIIqd"
    vals = struct.unpack_from(fmt, raw, off)
    widths, hops = vals[1: 1 + L], vals[1 + L: 1 + 2 * L]
    in_dim, d_out, seed, slope = vals[1 + 2 * L:]
    template = init_weights(widths, seed, d_out, hops, in_dim, slope)
    data = np.frombuffer(raw, dtype="<f8", offset=off + struct.calcsize(fmt))
    if len(data) != template.n_params():
        raise DataError(f"{path}: checkpoint payload size mismatch")
    params, pos = [], 0
    for p in template.params():
        params.append(data[pos: pos + p.size].reshape(p.shape).copy())
        pos += p.size
    return template.with_params(params)
