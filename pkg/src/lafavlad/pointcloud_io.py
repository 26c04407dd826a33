"""Labeled point clouds: ASCII I/O, synthetic scenes and training crops."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError, ValidationError

PRIMITIVES = ("plane", "box", "blob")

# distinct, well separated base colors; cycled when there are more classes
PALETTE = np.array([
    [0.80, 0.20, 0.20], [0.20, 0.70, 0.25], [0.20, 0.30, 0.85],
    [0.90, 0.80, 0.20], [0.70, 0.25, 0.80], [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15], [0.50, 0.50, 0.50], [0.55, 0.35, 0.20],
    [0.95, 0.60, 0.75], [0.15, 0.15, 0.15], [0.60, 0.85, 0.45],
    [0.35, 0.55, 0.95],
])


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    labels: Optional[np.ndarray] = None
    class_count: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        self.validate()

    def __len__(self):
        return self.positions.shape[0]

    def validate(self) -> None:
        n = self.positions.shape[0] if self.positions.ndim == 2 else 0
        if n < 1:
            raise ValidationError("point cloud is empty")
        if self.positions.shape != (n, 3) or self.colors.shape != (n, 3):
            raise ValidationError(f"positions {self.positions.shape} / colors {self.colors.shape} "
                                  f"must both be ({n}, 3)")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("positions contain non-finite values")
        if not (np.all(self.colors >= 0.0) and np.all(self.colors <= 1.0)):
            raise ValidationError("colors must lie in [0, 1]")
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise ValidationError(f"labels shape {self.labels.shape} != ({n},)")
            if self.labels.min() < 0 or self.labels.max() >= self.class_count:
                raise ValidationError(f"labels must lie in [0, {self.class_count})")

    def subset(self, idx: np.ndarray) -> "PointCloud":
        return PointCloud(self.positions[idx], self.colors[idx],
                          None if self.labels is None else self.labels[idx], self.class_count)


# ---------------------------------------------------------------- ASCII format

def read_ascii_cloud(path, has_labels: bool = True, class_count: Optional[int] = None) -> PointCloud:
    """Read ``x y z r g b [label]`` lines.

    Colors are divided by 255 when any channel exceeds 1.  Without an explicit
    ``class_count`` it is taken as ``max(label) + 1``.
    """
    ncols = 7 if has_labels else 6
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != ncols:
                raise ParseError(f"{path}:{lineno}: expected {ncols} fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric field in {text!r}") from None
    if not rows:
        raise ValidationError(f"{path}: no points")
    table = np.array(rows, dtype=np.float64)
    colors = table[:, 3:6]
    if colors.max() > 1.0:
        colors = colors / 255.0
    labels = None
    if has_labels:
        raw = table[:, 6]
        if np.any(raw != np.round(raw)):
            bad = int(np.argmax(raw != np.round(raw)))
            raise ParseError(f"{path}: label on data row {bad + 1} is not an integer")
        labels = raw.astype(np.int64)
        if class_count is None:
            class_count = int(labels.max()) + 1
        if labels.max() >= class_count:
            raise ValidationError(f"{path}: label {int(labels.max())} >= class count {class_count}")
    return PointCloud(table[:, :3], colors, labels, class_count or 0)


def write_ascii_cloud(cloud: PointCloud, path) -> None:
    """Write a cloud in the same format, colors in [0, 1] at full precision."""
    cols = [cloud.positions, cloud.colors]
    fmt = ["%.17g"] * 6
    if cloud.labels is not None:
        cols.append(cloud.labels[:, None].astype(np.float64))
        fmt.append("%d")
    np.savetxt(Path(path), np.hstack(cols), fmt=fmt)


# ---------------------------------------------------------------- synthetic scenes

@dataclass
class SyntheticSceneSpec:
    """Recipe for a labeled toy room.

    Plane classes are room surfaces (floor, walls, ceiling).  Box and blob
    classes are split into ``instances`` objects (box surfaces or clusters of
    Gaussian clutter) scattered over distinct floor cells, so any crop of a
    few thousand points usually sees several classes.
    """

    class_count: int = 3
    n_points: int = 16384
    noise: float = 0.01
    color_noise: float = 0.08
    seed: int = 7
    layouts: Optional[Sequence[str]] = None
    color_means: Optional[np.ndarray] = None
    room_size: float = 8.0
    instances: int = 4

    def resolved_layouts(self) -> list:
        if self.layouts is None:
            return [PRIMITIVES[c % 3] for c in range(self.class_count)]
        return list(self.layouts)

    def resolved_colors(self) -> np.ndarray:
        if self.color_means is None:
            return PALETTE[np.arange(self.class_count) % len(PALETTE)]
        return np.asarray(self.color_means, dtype=np.float64)


def _plane(rng, n, slot, size):
    u, v = rng.uniform(0, size, n), rng.uniform(0, size, n)
    h = size * 3 / 8
    kind = slot % 6
    if kind == 0:
        return np.c_[u, v, np.zeros(n)]
    if kind == 1:
        return np.c_[np.zeros(n) - 0.5, u, v * h / size]
    if kind == 2:
        return np.c_[u, np.zeros(n) - 0.5, v * h / size]
    if kind == 3:
        return np.c_[u, v, np.full(n, h + 0.5)]
    if kind == 4:
        return np.c_[np.full(n, size + 0.5), u, v * h / size]
    return np.c_[u, np.full(n, size + 0.5), v * h / size]


def _box(rng, n, corner, cell):
    ext = np.array([0.6, 0.45, 0.5]) * cell
    lo = np.array([corner[0] + 0.2 * cell, corner[1] + 0.25 * cell, 0.1])
    # uniform over the six faces, weighted by area
    areas = np.array([ext[1] * ext[2]] * 2 + [ext[0] * ext[2]] * 2 + [ext[0] * ext[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    pts = lo + rng.uniform(0, 1, (n, 3)) * ext
    axis = face // 2
    side = face % 2
    pts[np.arange(n), axis] = lo[axis] + side * ext[axis]
    return pts


def _blob(rng, n, corner, cell):
    center = np.array([corner[0] + 0.5 * cell, corner[1] + 0.5 * cell, 0.45 * cell])
    offsets = np.array([[0.0, 0.0, 0.0], [0.2, 0.12, 0.05], [-0.12, 0.2, -0.08]]) * cell
    which = rng.integers(0, len(offsets), n)
    return center + offsets[which] + rng.normal(0, 0.08 * cell, (n, 3))


def _split(n: int, parts: int) -> list:
    sizes = [n // parts] * parts
    for i in range(n % parts):
        sizes[i] += 1
    return sizes


_BUILDERS = {"plane": _plane, "box": _box, "blob": _blob}


def generate_synthetic_scene(spec: SyntheticSceneSpec) -> PointCloud:
    if spec.n_points < 1:
        raise ValidationError("point budget must be positive")
    if spec.class_count < 1 or spec.n_points < spec.class_count:
        raise ValidationError(f"point budget {spec.n_points} below class count {spec.class_count}")
    layouts = spec.resolved_layouts()
    colors = spec.resolved_colors()
    if len(layouts) != spec.class_count or colors.shape != (spec.class_count, 3):
        raise ValidationError("layouts and color means must have one entry per class")
    unknown = set(layouts) - set(_BUILDERS)
    if unknown:
        raise ValidationError(f"unknown primitive(s) {sorted(unknown)}; choose from {PRIMITIVES}")
    if spec.instances < 1:
        raise ValidationError("instances must be >= 1")
    rng = np.random.default_rng(spec.seed)
    counts = _split(spec.n_points, spec.class_count)
    objects = [c for c, kind in enumerate(layouts) if kind != "plane" for _ in range(spec.instances)]
    grid = max(1, math.ceil(math.sqrt(len(objects))))
    cell = spec.room_size / grid
    cells = rng.permutation(grid * grid)[: len(objects)]
    corners = iter([((i % grid) * cell, (i // grid) * cell) for i in cells])
    planes = 0
    pos, col, lab = [], [], []
    for c, (kind, n) in enumerate(zip(layouts, counts)):
        if kind == "plane":
            pts = _plane(rng, n, planes, spec.room_size)
            planes += 1
        else:
            parts = [_BUILDERS[kind](rng, m, next(corners), cell) for m in _split(n, spec.instances)]
            pts = np.concatenate(parts)
        pts = pts + rng.normal(0, spec.noise, pts.shape)
        rgb = np.clip(colors[c] + rng.normal(0, spec.color_noise, (n, 3)), 0.0, 1.0)
        pos.append(pts)
        col.append(rgb)
        lab.append(np.full(n, c))
    order = rng.permutation(spec.n_points)
    return PointCloud(np.concatenate(pos)[order], np.concatenate(col)[order],
                      np.concatenate(lab)[order], spec.class_count)


# ---------------------------------------------------------------- cropping

def crop_around(cloud: PointCloud, center: int, n_points: int, rng=None) -> np.ndarray:
    """Indices of the ``n_points`` nearest points to point ``center``.

    Clouds smaller than ``n_points`` are returned whole (shuffled) and padded
    by resampling with replacement.
    """
    if n_points < 1:
        raise ValidationError(f"n_points must be >= 1, got {n_points}")
    from .neighborhood import knn

    n = len(cloud)
    if n <= n_points:
        rng = np.random.default_rng(rng)
        idx = rng.permutation(n)
        if n < n_points:
            idx = np.concatenate([idx, rng.choice(n, n_points - n, replace=True)])
        return idx
    return knn(cloud.positions[center][None, :], cloud.positions, n_points)[0]


def crop_batch(cloud: PointCloud, n_points: int = 40960, seed=None) -> PointCloud:
    """The ``n_points`` nearest points to a random center point."""
    if n_points < 1:
        raise ValidationError(f"n_points must be >= 1, got {n_points}")
    rng = np.random.default_rng(seed)
    center = int(rng.integers(len(cloud)))
    return cloud.subset(crop_around(cloud, center, n_points, rng))


def epoch_steps(total_points: int, batch_size: int, n_points: int) -> int:
    """Crops per epoch: enough to cover the data once in expectation."""
    return max(1, math.ceil(total_points / (batch_size * n_points)))
