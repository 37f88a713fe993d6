"""Point-cloud datasets: synthetic generators, CSV I/O, splitting, normalization."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ifsem.errors import ParseError
from ifsem.geometry import Similitude, rotation_2d
from ifsem.model import IfsModel, sample_attractor

__all__ = [
    "Dataset",
    "SOURCES",
    "SIERPINSKI_VERTICES",
    "NONUNIFORM_WEIGHTS",
    "sierpinski_model",
    "koch_model",
    "generate",
    "load_csv",
    "write_csv",
    "split",
    "normalize",
]

SOURCES = ("sierpinski", "sierpinski-nonuniform", "koch", "square", "circle", "from-ifs")

SIERPINSKI_VERTICES = np.array([
    [0.0, 1.0],
    [-math.sqrt(3) / 2, -0.5],
    [math.sqrt(3) / 2, -0.5],
])
NONUNIFORM_WEIGHTS = (0.5, 0.3, 0.2)


@dataclass
class Dataset:
    points: np.ndarray
    name: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2:
            raise ValueError(f"points must be an (N, H) array, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("dataset contains non-finite coordinates")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]

    @property
    def H(self):
        return self.points.shape[1]


def sierpinski_model(weights=None):
    """Three half-scale maps fixing the vertices of :data:`SIERPINSKI_VERTICES`."""
    comps = [Similitude(0.5, np.eye(2), 0.5 * p) for p in SIERPINSKI_VERTICES]
    w = np.full(3, 1.0 / 3) if weights is None else np.asarray(weights, dtype=float)
    return IfsModel(comps, w, [1.0], Similitude.identity(2))


def koch_model():
    """The four-map Koch curve spanning the segment from (-1, 0) to (1, 0)."""
    third = 1.0 / 3
    e = np.array([1.0, 0.0])
    # maps for the unit segment from (0, 0) to (1, 0)
    unit = [
        (0.0, np.zeros(2)),
        (math.pi / 3, np.array([third, 0.0])),
        (-math.pi / 3, np.array([0.5, math.sqrt(3) / 6])),
        (0.0, np.array([2 * third, 0.0])),
    ]
    comps = []
    for angle, t in unit:
        R = rotation_2d(angle)
        # conjugate by y = 2x - e
        comps.append(Similitude(third, R, third * (R @ e) + 2 * t - e))
    return IfsModel(comps, np.full(4, 0.25), [1.0], Similitude.identity(2))


def generate(source, n, rng, params=None):
    """Draw ``n`` points from a named source.

    Parameters
    ----------
    source : str
        One of :data:`SOURCES`.  The fractal sources use the chaos game;
        ``square`` is uniform on ``[-1, 1]^2``; ``circle`` is uniform on the
        unit circle; ``from-ifs`` samples the attractor of
        ``params["model"]``.
    params : dict, optional
        ``burn_in`` for the chaos game (default 32) and ``model`` for
        ``from-ifs``.
    """
    params = dict(params or {})
    burn_in = int(params.get("burn_in", 32))
    if source not in SOURCES:
        raise ValueError(f"unknown source {source!r}; valid sources: {', '.join(SOURCES)}")
    if n < 0:
        raise ValueError("n must be non-negative")
    prov = {"source": source, "n": n, "burn_in": burn_in}
    H = 2
    if source == "sierpinski":
        pts = sample_attractor(sierpinski_model(), n, rng, burn_in)
    elif source == "sierpinski-nonuniform":
        pts = sample_attractor(sierpinski_model(NONUNIFORM_WEIGHTS), n, rng, burn_in)
        prov["weights"] = list(NONUNIFORM_WEIGHTS)
    elif source == "koch":
        pts = sample_attractor(koch_model(), n, rng, burn_in)
    elif source == "square":
        pts = rng.uniform(-1.0, 1.0, size=(n, 2))
        del prov["burn_in"]
    elif source == "circle":
        theta = rng.uniform(0.0, 2 * math.pi, size=n)
        pts = np.column_stack([np.cos(theta), np.sin(theta)])
        del prov["burn_in"]
    else:
        model = params.get("model")
        if not isinstance(model, IfsModel):
            raise ValueError("from-ifs needs params['model'] to be an IfsModel")
        H = model.H
        pts = sample_attractor(model, n, rng, burn_in)
    return Dataset(np.asarray(pts).reshape(n, H), source, prov)


def _is_number(cell):
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path):
    """Read one point per row of comma-separated floats.

    A first row containing a non-numeric cell is taken as a header.
    Blank lines are ignored.
    """
    path = Path(path)
    rows = []
    width = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not all(_is_number(c) for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"expected {width} columns, found {len(row)}", lineno)
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ParseError(f"non-numeric cell in {row!r}", lineno) from None
    pts = np.array(rows, dtype=float).reshape(len(rows), width or 0)
    if not np.all(np.isfinite(pts)):
        raise ParseError(f"{path}: non-finite coordinates")
    return Dataset(pts, path.stem, {"path": str(path)})


def write_csv(data, path):
    """Write points with shortest round-trip float formatting."""
    pts = data.points if isinstance(data, Dataset) else np.asarray(data, dtype=float)
    buf = io.StringIO()
    for row in pts:
        buf.write(",".join(repr(float(x)) for x in row))
        buf.write("\n")
    Path(path).write_text(buf.getvalue())


def split(data, holdout_fraction, rng):
    """Random train/test partition with ``round(fraction * N)`` test points."""
    if not 0 <= holdout_fraction < 1:
        raise ValueError("holdout_fraction must lie in [0, 1)")
    n = len(data)
    n_test = int(round(holdout_fraction * n))
    perm = rng.permutation(n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    prov = dict(data.provenance, split=holdout_fraction)
    return (Dataset(data.points[train_idx], data.name, dict(prov, part="train")),
            Dataset(data.points[test_idx], data.name, dict(prov, part="test")))


def normalize(data):
    """Center the points and scale them to unit RMS radius.

    Returns
    -------
    (Dataset, Similitude)
        The normalized data and the similitude mapping normalized
        coordinates back to the original frame.
    """
    pts = data.points
    if len(pts) < 2:
        raise ValueError("normalize needs at least two points")
    mean = pts.mean(axis=0)
    centered = pts - mean
    radius = math.sqrt(float(np.sum(centered ** 2)) / centered.size)
    if not radius > 0:
        raise ValueError("cannot normalize data with zero spread")
    back = Similitude(radius, np.eye(data.H), mean)
    return Dataset(centered / radius, data.name, dict(data.provenance, normalized=True)), back
