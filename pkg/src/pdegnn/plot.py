"""Static field plots: barycentric rasterisation to PPM plus nodal CSV.

Pixel ``(r, c)`` of a ``width x height`` raster sits at
``x = x0 + c (x1 - x0) / (width - 1)`` and ``y = y1 - r (y1 - y0) / (height - 1)``,
so the corners of the bounds are pixel centres and row 0 is the top edge.
Pixels outside every triangle are NaN and drawn white.
"""
from __future__ import annotations

import csv
import io

import numpy as np

from .formats import atomic_write
from .mesh import Graph

# Colormap lookup table: nine evenly spaced stops from dark blue through
# teal and green to yellow. Values between stops are interpolated linearly
# and rounded to 8 bits.
COLORMAP = np.array([
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
], dtype=float)
BACKGROUND = (255, 255, 255)
GUTTER = 4


def _periods(graph: Graph):
    """Per-axis period implied by the edge shifts (0 for a non-periodic axis)."""
    out = []
    for k in range(2):
        s = np.abs(graph.shifts[:, k])
        s = s[s > 0]
        out.append(float(s.min()) if s.size else 0.0)
    return out


def _unwrapped_triangles(graph: Graph):
    tri = graph.triangles
    p = graph.positions[tri]  # (T, 3, 2)
    for k, L in enumerate(_periods(graph)):
        if L:
            d = p[:, 1:, k] - p[:, :1, k]
            p[:, 1:, k] -= L * np.round(d / L)
    return p


def default_bounds(graph: Graph):
    lo, hi = graph.positions.min(axis=0), graph.positions.max(axis=0)
    per = _periods(graph)
    for k, L in enumerate(per):
        if L:
            lo[k], hi[k] = 0.0, L
    return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])


def pixel_grid(bounds, width: int, height: int):
    x0, y0, x1, y1 = bounds
    xs = x0 + np.arange(width) * (x1 - x0) / (width - 1)
    ys = y1 - np.arange(height) * (y1 - y0) / (height - 1)
    return np.meshgrid(xs, ys)


def interpolate(graph: Graph, values, points) -> np.ndarray:
    """Barycentric interpolation of nodal ``values`` at ``points`` (NaN outside)."""
    values = np.asarray(values, dtype=float)
    if values.shape != (graph.n_nodes,):
        raise ValueError(f"field has {values.size} values but the graph has {graph.n_nodes} nodes")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    out = np.full(len(pts), np.nan)
    tri_p = _unwrapped_triangles(graph)
    per = _periods(graph)
    shifts = [(a * per[0], b * per[1]) for a in (-1, 0, 1) for b in (-1, 0, 1)
              if (a == 0 or per[0]) and (b == 0 or per[1])]
    eps = 1e-12
    for t, verts in enumerate(tri_p):
        vals = values[graph.triangles[t]]
        for sx, sy in shifts:
            v = verts + (sx, sy)
            lo, hi = v.min(axis=0) - eps, v.max(axis=0) + eps
            sel = np.flatnonzero(np.isnan(out) & np.all((pts >= lo) & (pts <= hi), axis=1))
            if sel.size == 0:
                continue
            a, b, c = v
            det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
            d = pts[sel] - a
            l1 = (d[:, 0] * (c[1] - a[1]) - (c[0] - a[0]) * d[:, 1]) / det
            l2 = ((b[0] - a[0]) * d[:, 1] - d[:, 0] * (b[1] - a[1])) / det
            l0 = 1.0 - l1 - l2
            inside = (l0 >= -1e-10) & (l1 >= -1e-10) & (l2 >= -1e-10)
            out[sel[inside]] = l0[inside] * vals[0] + l1[inside] * vals[1] + l2[inside] * vals[2]
    return out


def rasterize(graph: Graph, values, width: int = 200, height: int = 200, bounds=None) -> np.ndarray:
    if width < 2 or height < 2:
        raise ValueError("raster must be at least 2 x 2 pixels")
    bounds = bounds or default_bounds(graph)
    X, Y = pixel_grid(bounds, width, height)
    return interpolate(graph, values, np.column_stack([X.ravel(), Y.ravel()])).reshape(height, width)


def colorize(img: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """``(H, W)`` floats to ``(H, W, 3)`` uint8 through :data:`COLORMAP`."""
    finite = np.isfinite(img)
    if vmin is None:
        vmin = float(img[finite].min()) if finite.any() else 0.0
    if vmax is None:
        vmax = float(img[finite].max()) if finite.any() else 1.0
    span = vmax - vmin
    # spans at rounding level (a constant field after interpolation) map to one colour
    flat = span <= 1e-12 * max(1.0, abs(vmin), abs(vmax))
    s = np.zeros_like(img) if flat else np.clip((np.where(finite, img, vmin) - vmin) / span, 0, 1)
    pos = s * (len(COLORMAP) - 1)
    lo = np.minimum(np.floor(pos).astype(int), len(COLORMAP) - 2)
    frac = (pos - lo)[..., None]
    rgb = np.rint(COLORMAP[lo] * (1 - frac) + COLORMAP[lo + 1] * frac).astype(np.uint8)
    rgb[~finite] = BACKGROUND
    return rgb


def ppm_bytes(rgb: np.ndarray) -> bytes:
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(rgb, np.uint8).tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    """Inverse of :func:`ppm_bytes` (one header line per field)."""
    magic, size, depth, pixels = data.split(b"\n", 3)
    if magic != b"P6" or depth != b"255":
        raise ValueError("not an 8-bit binary PPM")
    w, h = (int(v) for v in size.split())
    return np.frombuffer(pixels[:w * h * 3], np.uint8).reshape(h, w, 3)


def nodal_csv(graph: Graph, values) -> str:
    values = np.asarray(values, dtype=float)
    if values.shape != (graph.n_nodes,):
        raise ValueError(f"field has {values.size} values but the graph has {graph.n_nodes} nodes")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "value"])
    for (x, y), v in zip(graph.positions, values):
        w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
    return buf.getvalue()


def triptych(graph: Graph, pred, truth, width: int = 200, height: int = 200, bounds=None):
    """Prediction, truth and absolute-error panels.

    Returns ``(panels, rgb)``: the three float rasters and the combined image.
    Prediction and truth share one colour scale; the error panel has its own.
    """
    p = rasterize(graph, pred, width, height, bounds)
    t = rasterize(graph, truth, width, height, bounds)
    e = np.abs(p - t)
    both = np.concatenate([p[np.isfinite(p)], t[np.isfinite(t)]])
    vmin, vmax = (float(both.min()), float(both.max())) if both.size else (0.0, 1.0)
    gap = np.full((height, GUTTER, 3), 255, np.uint8)
    rgb = np.concatenate([colorize(p, vmin, vmax), gap, colorize(t, vmin, vmax), gap, colorize(e)], axis=1)
    return (p, t, e), rgb


def write_plot(stem, graph: Graph, values, width: int = 200, height: int = 200,
               vmin=None, vmax=None):
    """Write ``<stem>.ppm`` and ``<stem>.csv``; returns the float raster."""
    img = rasterize(graph, values, width, height)
    atomic_write(f"{stem}.ppm", ppm_bytes(colorize(img, vmin, vmax)))
    atomic_write(f"{stem}.csv", nodal_csv(graph, values).encode())
    return img


def write_triptych(stem, graph: Graph, pred, truth, width: int = 200, height: int = 200):
    panels, rgb = triptych(graph, pred, truth, width, height)
    atomic_write(f"{stem}.ppm", ppm_bytes(rgb))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "prediction", "truth", "abs_error"])
    for (x, y), a, b in zip(graph.positions, np.asarray(pred, float), np.asarray(truth, float)):
        w.writerow([repr(float(x)), repr(float(y)), repr(float(a)), repr(float(b)), repr(abs(float(a - b)))])
    atomic_write(f"{stem}.csv", buf.getvalue().encode())
    return panels
