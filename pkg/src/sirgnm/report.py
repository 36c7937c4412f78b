"""CSV and SVG artifacts.

Numbers are written with ``repr`` (shortest round-trip form) and rows end in
``\\n`` so identical results give identical bytes on every platform.  The
SVGs are hand-built: polylines for convergence curves, a rect raster for
fields.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import Grid2D
from .diagnostics import TRACE_COLUMNS

SUMMARY_COLUMNS = ("replicate", "variant", "truth", "batch", "status", "iterations",
                   "final_rel_err", "min_rel_err", "final_residual_t", "wall_ms")
TABLE_COLUMNS = ("truth", "batch", "final_rel_err", "iterations", "wall_ms")
COMPARE_COLUMNS = ("iter", "variant", "mean_rel_err", "ci_lo", "ci_hi", "replicates")
FIELD_COLUMNS = ("i", "j", "x", "y", "value")
KERNEL_COLUMNS = ("r", "c")


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def trace_rows(history, record_timing: bool = False):
    for rec in history:
        row = list(rec.row())
        if not record_timing:
            row[-1] = 0.0
        yield row


def write_trace(path, history, record_timing: bool = False) -> Path:
    return write_csv(path, TRACE_COLUMNS, trace_rows(history, record_timing))


def write_field(path, grid: Grid2D, values) -> Path:
    values = np.asarray(getattr(values, "values", values), dtype=np.float64)
    x, y = grid.coordinates()
    rows = ((k % grid.nx, k // grid.nx, x[k], y[k], values[k]) for k in range(grid.size))
    return write_csv(path, FIELD_COLUMNS, rows)


# --------------------------------------------------------------------------
# SVG
# --------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _num(v: float) -> str:
    return f"{v:.2f}"


def line_chart(path, series: Mapping[str, tuple], title: str = "", xlabel: str = "iteration",
               ylabel: str = "", log_y: bool = True, bands: Mapping[str, tuple] = None) -> Path:
    """Polyline chart; ``series`` maps a label to ``(x, y)``, ``bands`` to ``(x, lo, hi)``."""
    W, H, L, R, T, B = 640, 400, 70, 150, 40, 50
    bands = bands or {}

    def tf(v):
        v = np.asarray(v, dtype=np.float64)
        if log_y:
            return np.log10(np.where(v > 0, v, np.nan))
        return v

    ys = [tf(y) for _, y in series.values()] + [tf(b[k]) for b in bands.values() for k in (1, 2)]
    xs = [np.asarray(x, dtype=np.float64) for x, _ in series.values()]
    finite_y = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.array([0.0])
    finite_x = np.concatenate(xs) if xs else np.array([0.0])
    y0, y1 = (finite_y.min(), finite_y.max()) if finite_y.size else (0.0, 1.0)
    x0, x1 = (finite_x.min(), finite_x.max()) if finite_x.size else (0.0, 1.0)
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    if x1 == x0:
        x1 = x0 + 1

    def px(x):
        return L + (np.asarray(x, dtype=np.float64) - x0) / (x1 - x0) * (W - L - R)

    def py(y):
        return T + (y1 - y) / (y1 - y0) * (H - T - B)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<rect x="{L}" y="{T}" width="{W - L - R}" height="{H - T - B}" fill="none" stroke="black"/>']
    for k, (label, (x, lo, hi)) in enumerate(bands.items()):
        color = _PALETTE[list(series).index(label) % len(_PALETTE)] if label in series else "#999999"
        lo_t, hi_t = tf(lo), tf(hi)
        ok = np.isfinite(lo_t) & np.isfinite(hi_t)
        if ok.sum() < 2:
            continue
        xx = px(np.asarray(x)[ok])
        pts = [f"{_num(a)},{_num(b)}" for a, b in zip(xx, py(hi_t[ok]))]
        pts += [f"{_num(a)},{_num(b)}" for a, b in zip(xx[::-1], py(lo_t[ok])[::-1])]
        out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
    for k, (label, (x, y)) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        yt = tf(y)
        ok = np.isfinite(yt)
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in zip(px(np.asarray(x)[ok]), py(yt[ok])))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = T + 18 * k + 10
        out.append(f'<line x1="{W - R + 10}" y1="{ly}" x2="{W - R + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{W - R + 35}" y="{ly + 4}" font-size="12">{_escape(label)}</text>')
    for frac in (0.0, 0.5, 1.0):
        yv = y0 + frac * (y1 - y0)
        lab = f"{10 ** yv:.3g}" if log_y else f"{yv:.3g}"
        out.append(f'<text x="{L - 5}" y="{_num(py(yv) + 4)}" font-size="11" text-anchor="end">{lab}</text>')
        xv = x0 + frac * (x1 - x0)
        out.append(f'<text x="{_num(px(xv))}" y="{H - B + 16}" font-size="11" text-anchor="middle">{xv:.4g}</text>')
    out.append(f'<text x="{(L + W - R) / 2}" y="{H - 10}" font-size="12" text-anchor="middle">{_escape(xlabel)}</text>')
    out.append(f'<text x="15" y="{(T + H - B) / 2}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 15 {(T + H - B) / 2})">{_escape(ylabel)}</text>')
    if title:
        out.append(f'<text x="{W / 2}" y="24" font-size="14" text-anchor="middle">{_escape(title)}</text>')
    out.append("</svg>")
    return _write(path, out)


def _ramp(t: float) -> str:
    # blue -> white -> red
    t = min(max(t, 0.0), 1.0)
    if t < 0.5:
        s = t / 0.5
        rgb = (int(40 + 215 * s), int(80 + 175 * s), 255)
    else:
        s = (t - 0.5) / 0.5
        rgb = (255, int(255 - 175 * s), int(255 - 215 * s))
    return "#%02x%02x%02x" % rgb


def field_raster(path, grid: Grid2D, values, title: str = "", vmin=None, vmax=None, cell: int = 10) -> Path:
    """Colour-mapped raster, one rect per node, ``y`` pointing up."""
    v = np.asarray(getattr(values, "values", values), dtype=np.float64).reshape(grid.ny, grid.nx)
    lo = float(np.nanmin(v)) if vmin is None else vmin
    hi = float(np.nanmax(v)) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    top = 30
    W, H = grid.nx * cell + 20, grid.ny * cell + top + 30
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>']
    for j in range(grid.ny):
        yy = top + (grid.ny - 1 - j) * cell
        for i in range(grid.nx):
            out.append(f'<rect x="{10 + i * cell}" y="{yy}" width="{cell}" height="{cell}" '
                       f'fill="{_ramp((v[j, i] - lo) / span)}"/>')
    if title:
        out.append(f'<text x="{W / 2}" y="20" font-size="13" text-anchor="middle">{_escape(title)}</text>')
    out.append(f'<text x="10" y="{H - 10}" font-size="11">range [{lo:.3g}, {hi:.3g}]</text>')
    out.append("</svg>")
    return _write(path, out)


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _write(path, lines) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
