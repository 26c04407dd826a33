"""Exact KNN, random down-sampling and the per-level resolution hierarchy."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError

# query x base products up to this size go through dense brute force
_DENSE_LIMIT = 250_000
_BLOCK = 2_000_000


def _sqdist(q: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = q[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _knn_dense(query: np.ndarray, base: np.ndarray, k: int) -> np.ndarray:
    out = np.empty((len(query), k), dtype=np.int64)
    step = max(1, _BLOCK // max(1, len(base)))
    for s in range(0, len(query), step):
        d2 = _sqdist(query[s:s + step], base)
        # stable sort keeps equal distances in index order
        out[s:s + step] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def knn(query_positions, base_positions, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest base points for every query point.

    Exact by squared Euclidean distance; ties go to the smaller index.  Rows
    are ordered nearest first.
    """
    query = np.asarray(query_positions, dtype=np.float64)
    base = np.asarray(base_positions, dtype=np.float64)
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if k > len(base):
        raise ValidationError(f"k={k} exceeds the {len(base)} available base points")
    if not (np.all(np.isfinite(query)) and np.all(np.isfinite(base))):
        raise ValidationError("knn positions must be finite")
    if len(query) * len(base) <= _DENSE_LIMIT:
        return _knn_dense(query, base, k)

    extra = min(8, len(base) - k)
    m = k + extra
    tree = cKDTree(base)
    _, cand = tree.query(query, k=m)
    cand = np.asarray(cand, dtype=np.int64).reshape(len(query), m)
    # re-rank candidates with the same arithmetic as the dense path
    diff = base[cand] - query[:, None, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    order = np.lexsort((cand, d2), axis=-1)
    cand = np.take_along_axis(cand, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    result = cand[:, :k].copy()
    if extra > 0:
        # a tie at the k-th distance may continue past the candidate window
        unsafe = d2[:, -1] <= d2[:, k - 1] * (1 + 1e-12) + 1e-300
        if unsafe.any():
            result[unsafe] = _knn_dense(query[unsafe], base, k)
    return result


def seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def random_subsample(n_in: int, ratio: int = 4, seed=None) -> np.ndarray:
    """``ceil(n_in / ratio)`` distinct indices drawn uniformly, sorted."""
    if n_in < 1:
        raise ValidationError(f"n_in must be >= 1, got {n_in}")
    if ratio < 1:
        raise ValidationError(f"ratio must be >= 1, got {ratio}")
    rng = np.random.default_rng(seed)
    keep = math.ceil(n_in / ratio)
    return np.sort(rng.choice(n_in, size=keep, replace=False))


@dataclass
class SamplingHierarchy:
    """Nested random subsets of one cloud, finest level first.

    ``kept[l]`` indexes level ``l`` and selects the points of level ``l+1``;
    ``upsample[l]`` maps every level-``l`` point to its nearest level-``l+1``
    point; ``neighbors[l]`` is the KNN table of level ``l``; ``source[l]``
    indexes the original cloud.
    """

    positions: list
    source: list
    neighbors: list
    kept: list
    upsample: list

    @property
    def levels(self) -> int:
        return len(self.kept)

    @property
    def sizes(self) -> list:
        return [len(p) for p in self.positions]


def build_hierarchy(positions, levels: int = 4, k: int = 16, ratio: int = 4, seed=None) -> SamplingHierarchy:
    """Random down-sampling by ``ratio`` per level with neighbor tables.

    ``positions`` may be an (N, 3) array or anything with a ``positions``
    attribute.
    """
    pos = np.asarray(getattr(positions, "positions", positions), dtype=np.float64)
    n = len(pos)
    if levels < 0:
        raise ValidationError("levels must be >= 0")
    if n < ratio ** levels:
        raise ValidationError(f"{n} points cannot support {levels} levels at ratio {ratio}")
    seeds = seed_sequence(seed).spawn(max(levels, 1))
    source = [np.arange(n)]
    level_pos = [pos]
    kept, upsample = [], []
    for lvl in range(levels):
        keep = random_subsample(len(level_pos[-1]), ratio, np.random.default_rng(seeds[lvl]))
        kept.append(keep)
        source.append(source[-1][keep])
        level_pos.append(level_pos[-1][keep])
        upsample.append(knn(level_pos[-2], level_pos[-1], 1)[:, 0])
    neighbors = []
    for lp in level_pos:
        if k > len(lp):
            raise ValidationError(f"k={k} exceeds the {len(lp)} points of a coarse level")
        neighbors.append(knn(lp, lp, k))
    return SamplingHierarchy(level_pos, source, neighbors, kept, upsample)
