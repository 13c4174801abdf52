"""Minimal static SVG charts for batch reports (loss curves, eigenvalue scree)."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .meshio import atomic_write_text

_W, _H = 640, 400
_PAD_L, _PAD_R, _PAD_T, _PAD_B = 70, 20, 40, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n)


def _frame(title: str, xlabel: str, ylabel: str, xlim, ylim, log_y: bool) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
        f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="16" y="{_H / 2}" text-anchor="middle" transform="rotate(-90 16 {_H / 2})">{escape(ylabel)}</text>',
        f'<rect x="{_PAD_L}" y="{_PAD_T}" width="{_W - _PAD_L - _PAD_R}" height="{_H - _PAD_T - _PAD_B}" '
        'fill="none" stroke="black"/>',
    ]
    for t in _ticks(*xlim):
        x = _sx(t, xlim)
        out.append(f'<text x="{x:.1f}" y="{_H - _PAD_B + 16}" text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(*ylim):
        y = _sy(t, ylim)
        label = 10 ** t if log_y else t
        out.append(f'<text x="{_PAD_L - 6}" y="{y + 4:.1f}" text-anchor="end">{label:.3g}</text>')
        out.append(f'<line x1="{_PAD_L}" x2="{_W - _PAD_R}" y1="{y:.1f}" y2="{y:.1f}" stroke="#ddd"/>')
    return out


def _sx(x, xlim):
    lo, hi = xlim
    return _PAD_L + (np.asarray(x) - lo) / max(hi - lo, 1e-300) * (_W - _PAD_L - _PAD_R)


def _sy(y, ylim):
    lo, hi = ylim
    return _H - _PAD_B - (np.asarray(y) - lo) / max(hi - lo, 1e-300) * (_H - _PAD_T - _PAD_B)


def line_chart(series: dict[str, tuple[np.ndarray, np.ndarray]], title: str, xlabel: str, ylabel: str,
               log_y: bool = False) -> str:
    """SVG text for one polyline per named (x, y) series."""
    prepared = {}
    for name, (x, y) in series.items():
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        if log_y:
            y = np.log10(np.maximum(y, 1e-300))
        prepared[name] = (x, y)
    allx = np.concatenate([x for x, _ in prepared.values()]) if prepared else np.zeros(1)
    ally = np.concatenate([y for _, y in prepared.values()]) if prepared else np.zeros(1)
    xlim = (float(allx.min()), float(allx.max()) if allx.max() > allx.min() else float(allx.min()) + 1)
    ylim = (float(ally.min()), float(ally.max()) if ally.max() > ally.min() else float(ally.min()) + 1)
    out = _frame(title, xlabel, ylabel, xlim, ylim, log_y)
    for idx, (name, (x, y)) in enumerate(prepared.items()):
        color = _COLORS[idx % len(_COLORS)]
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(_sx(x, xlim), _sy(y, ylim)))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = _PAD_T + 16 + 16 * idx
        out.append(f'<text x="{_W - _PAD_R - 8}" y="{ly}" text-anchor="end" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(values: np.ndarray, title: str, xlabel: str, ylabel: str) -> str:
    """SVG text for a bar per value, bars labelled 1..n."""
    values = np.asarray(values, dtype=float)
    n = len(values)
    xlim = (0.5, n + 0.5)
    ylim = (0.0, float(values.max()) if n and values.max() > 0 else 1.0)
    out = _frame(title, xlabel, ylabel, xlim, ylim, False)
    width = (_W - _PAD_L - _PAD_R) / max(n, 1) * 0.8
    for i, v in enumerate(values):
        x = _sx(i + 1, xlim) - width / 2
        y = _sy(v, ylim)
        out.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{width:.1f}" height="{_H - _PAD_B - y:.1f}" '
                   f'fill="{_COLORS[0]}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_loss_curve(path, history: np.ndarray, names=("total", "bij", "orth", "iso", "point")) -> None:
    it = np.arange(len(history))
    series = {name: (it, history[:, c]) for c, name in enumerate(names)}
    atomic_write_text(path, line_chart(series, "Training loss", "iteration", "loss", log_y=True))


def write_scree(path, eigenvalues: np.ndarray) -> None:
    atomic_write_text(path, bar_chart(eigenvalues, "Shape model eigenvalues", "mode", "variance"))
