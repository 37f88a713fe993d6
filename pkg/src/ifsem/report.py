"""Scatter rasterization to PPM and run-metrics summaries."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ifsem.errors import DimensionError
from ifsem.geometry import compose

__all__ = ["RasterImage", "render_scatter", "draw_line", "write_ppm", "read_ppm",
           "summarize_runs", "write_metrics"]

RED = (255, 0, 0)
BLUE = (0, 96, 255)
MARGIN = 0.05


class RasterImage:
    """An RGB image stored as a ``(height, width, 3)`` uint8 array."""

    def __init__(self, width, height, pixels=None):
        if width < 1 or height < 1:
            raise ValueError("image dimensions must be at least 1")
        self.width, self.height = int(width), int(height)
        if pixels is None:
            pixels = np.zeros((self.height, self.width, 3), dtype=np.uint8)
        self.pixels = np.asarray(pixels, dtype=np.uint8)

    def to_ppm(self):
        header = f"P6\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + self.pixels.tobytes()


class _Frame:
    """Maps data coordinates onto pixel centres with equal x and y scale."""

    def __init__(self, points, size):
        lo, hi = points.min(axis=0), points.max(axis=0)
        span = float(max(hi - lo))
        if span <= 0:
            span = 1.0
        span *= 1 + 2 * MARGIN
        centre = (lo + hi) / 2
        self.origin = centre - span / 2
        self.span = span
        self.size = size

    def pixel(self, pts):
        u = (np.atleast_2d(pts) - self.origin) / self.span * self.size
        col = np.floor(u[:, 0]).astype(np.int64)
        row = self.size - 1 - np.floor(u[:, 1]).astype(np.int64)
        return col, row


def draw_line(image, p0, p1, color):
    """Integer midpoint (Bresenham) line from ``p0`` to ``p1`` in (col, row)."""
    x0, y0 = p0
    x1, y1 = p1
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    # bound the walk so far-off endpoints cannot stall rendering
    for _ in range(dx - dy + 1):
        if 0 <= x0 < image.width and 0 <= y0 < image.height:
            image.pixels[y0, x0] = color
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


_SQUARE = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
# keep line endpoints in a range where the integer walk stays short
_PIXEL_LIMIT = 1 << 20


def _draw_polygon(image, frame, corners, color):
    col, row = frame.pixel(corners)
    col = np.clip(col, -_PIXEL_LIMIT, _PIXEL_LIMIT)
    row = np.clip(row, -_PIXEL_LIMIT, _PIXEL_LIMIT)
    n = len(col)
    for i in range(n):
        j = (i + 1) % n
        draw_line(image, (int(col[i]), int(row[i])), (int(col[j]), int(row[j])), color)


def render_scatter(points, resolution=512, model=None):
    """Render 2D points as a log-scaled density image.

    Counts are accumulated per pixel over the points' bounding box (with a
    5% margin) and tone-mapped as ``log(1 + c / c_min)``, scaled so the
    densest pixel is 255; ``c_min`` is the smallest non-zero count, which
    makes the image invariant to duplicating the data.  When ``model`` is
    given, the post-transformed bi-unit square is outlined in red and its
    image under each component (followed by the post-transform) in blue.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        else:
            raise DimensionError(f"render_scatter needs (N, 2) points, got shape {pts.shape}")
    size = int(resolution)
    image = RasterImage(size, size)
    if len(pts) == 0:
        return image
    frame = _Frame(pts, size)
    col, row = frame.pixel(pts)
    col = np.clip(col, 0, size - 1)
    row = np.clip(row, 0, size - 1)
    counts = np.zeros((size, size))
    np.add.at(counts, (row, col), 1.0)
    lit = counts > 0
    rel = counts / counts[lit].min()
    tone = np.log1p(rel) / np.log1p(rel.max())
    gray = np.where(lit, np.maximum(1, np.round(255 * tone)), 0).astype(np.uint8)
    image.pixels[...] = gray[..., None]
    if model is not None:
        if model.H != 2:
            raise DimensionError("model overlay needs a 2D model")
        post = model.post
        _draw_polygon(image, frame, post(_SQUARE), RED)
        for f in model.components:
            _draw_polygon(image, frame, compose(post, f)(_SQUARE), BLUE)
    return image


def write_ppm(image, path):
    Path(path).write_bytes(image.to_ppm())


def read_ppm(path):
    """Read a binary P6 file written by :func:`write_ppm`."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError("truncated PPM header")
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError("not a P6 image with maxval 255")
    w, h = int(fields[1]), int(fields[2])
    # exactly one whitespace byte separates the header from the pixels
    data = np.frombuffer(raw[pos + 1: pos + 1 + w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError("truncated PPM pixel data")
    return RasterImage(w, h, data.reshape(h, w, 3))


def summarize_runs(values):
    """Mean, standard error (sample std / sqrt(n)), min and max of run scores."""
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("need at least one run")
    n = len(vals)
    mean = math.fsum(vals) / n
    if n > 1:
        var = math.fsum((v - mean) ** 2 for v in vals) / (n - 1)
        stderr = math.sqrt(var / n)
    else:
        stderr = 0.0
    return {"runs": vals, "mean": mean, "stderr": stderr, "min": min(vals), "max": max(vals)}


def write_metrics(results, path=None):
    """Summarize per-method run scores as a JSON document.

    ``results`` maps a method name to its list of per-run mean held-out
    log-likelihoods.  Returns the document text and writes it to ``path``
    when given.
    """
    doc = {name: summarize_runs(vals) for name, vals in results.items()}
    text = json.dumps(doc, indent=1) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text
