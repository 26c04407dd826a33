"""Local adaptive feature augmentation.

A LAFA unit encodes every neighbor of a centroid by the *differences* of its
position, color and semantic features (three pointwise mlps, concatenated),
turns a linear map of that encoding into per-channel softmax weights over the
neighbors, and pools ``sum(W * dl)`` together with ``max(dl)`` through a final
mlp.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, ValidationError
from .numerics import (
    BlockOptions,
    DiffArray,
    Linear,
    ParamStore,
    SharedMLP,
    as_array,
    broadcast_to,
    concat,
    gather_rows,
    glorot_uniform,
    matmul,
    multiply,
    reduce,
    reshape,
    softmax,
    subtract,
)

ENCODERS = ("xyz", "rgb", "f")
POOLINGS = ("sum+max", "sum", "max", "mean")


@dataclass(frozen=True)
class LafaOptions:
    """Component toggles used by the ablation presets.

    ``encoders`` selects which difference encoders feed the local encoding;
    ``semantic_concat`` appends raw gathered neighbor semantics instead of
    encoding them; ``repeat_semantics`` drops the local encoding entirely and
    lifts the centroid semantics with an mlp, repeated over the neighbors.
    ``pooling='mean'`` replaces the adaptive unit by plain mean pooling.
    """

    encoders: tuple = ENCODERS
    semantic_concat: bool = False
    repeat_semantics: bool = False
    adaptive: bool = True
    pooling: str = "sum+max"

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValidationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if set(self.encoders) - set(ENCODERS):
            raise ValidationError(f"unknown encoder in {self.encoders}")
        if not self.repeat_semantics and not self.encoders and not self.semantic_concat:
            raise ValidationError("at least one local encoder is required")
        if self.pooling == "mean" and self.adaptive:
            raise ValidationError("mean pooling replaces the adaptive unit; set adaptive=False")


@dataclass
class LafaOutput:
    features: DiffArray
    weights: Optional[DiffArray]
    local_encoding: DiffArray
    neighbor_semantic: Optional[DiffArray]
    centroid_semantic: Optional[DiffArray]


def _relative(values: DiffArray, nbr: np.ndarray) -> DiffArray:
    """``v_i - v_i^k`` for every neighbor, shape (N, K, C)."""
    n, c = values.shape
    return subtract(reshape(values, (n, 1, c)), gather_rows(values, nbr))


def encode_local_info(positions, colors, features, nbr, encoders: dict, train: bool,
                      semantic_concat: bool = False) -> DiffArray:
    """Concatenate mlp-encoded position, color and semantic differences.

    ``encoders`` maps any of ``xyz``, ``rgb``, ``f`` to a pointwise mlp.
    Result shape is (N, K, sum of encoder widths).
    """
    positions, colors, features = as_array(positions), as_array(colors), as_array(features)
    nbr = np.asarray(nbr)
    n = positions.shape[0]
    if colors.shape[0] != n or features.shape[0] != n or nbr.ndim != 2 or nbr.shape[0] != n:
        raise DimensionError(f"inconsistent inputs: positions {positions.shape}, colors {colors.shape}, "
                             f"features {features.shape}, neighbors {nbr.shape}")
    parts = []
    for key, src in (("xyz", positions), ("rgb", colors), ("f", features)):
        if key in encoders:
            parts.append(encoders[key](_relative(src, nbr), train))
    if semantic_concat:
        parts.append(gather_rows(features, nbr))
    return parts[0] if len(parts) == 1 else concat(parts, axis=-1)


def adaptive_weights(local_encoding: DiffArray, mapping: DiffArray) -> DiffArray:
    """Softmax over the neighbor axis of a linear map of the encoding."""
    if local_encoding.ndim != 3 or local_encoding.shape[1] == 0:
        raise DimensionError(f"local encoding must be (N, K>0, C), got {local_encoding.shape}")
    return softmax(matmul(local_encoding, mapping), axis=1)


class LAFA:
    """One LAFA unit with its own parameters, registered under ``name``."""

    def __init__(self, store: ParamStore, name: str, c_feat: int, d_out: int,
                 rng: np.random.Generator, opts: LafaOptions = LafaOptions(),
                 block: BlockOptions = BlockOptions()):
        self.opts = opts
        self.c_feat = c_feat
        self.d_out = d_out
        half = max(1, d_out // 2)
        self.encoders = {}
        if opts.repeat_semantics:
            width = half * 3
            self.lift = SharedMLP(store, f"{name}.lift", c_feat, width, rng, block)
        else:
            self.lift = None
            in_widths = {"xyz": 3, "rgb": 3, "f": c_feat}
            for key in ENCODERS:
                if key in opts.encoders:
                    self.encoders[key] = SharedMLP(store, f"{name}.enc_{key}", in_widths[key], half, rng, block)
            width = half * len(self.encoders) + (c_feat if opts.semantic_concat else 0)
        self.width = width
        if opts.adaptive:
            self.mapping = store.add_param(f"{name}.similarity", glorot_uniform(rng, width, width))
            self.projection = Linear(store, f"{name}.constraint_proj", c_feat, width, rng, bias=False)
        else:
            self.mapping = None
            self.projection = None
        pooled = 2 * width if opts.pooling == "sum+max" else width
        self.out = SharedMLP(store, f"{name}.out", pooled, d_out, rng, block)

    def __call__(self, positions, colors, features, nbr, train: bool) -> LafaOutput:
        features = as_array(features)
        nbr = np.asarray(nbr)
        if features.ndim != 2 or features.shape[1] != self.c_feat:
            raise DimensionError(f"expected (N, {self.c_feat}) features, got {features.shape}")
        if nbr.ndim != 2 or nbr.shape[1] == 0:
            raise DimensionError(f"neighbor table must be (N, K>0), got {nbr.shape}")
        n, k = nbr.shape
        if self.lift is not None:
            lifted = self.lift(features, train)
            dl = broadcast_to(reshape(lifted, (n, 1, self.width)), (n, k, self.width))
        else:
            dl = encode_local_info(positions, colors, features, nbr, self.encoders, train,
                                   self.opts.semantic_concat)
        weights = adaptive_weights(dl, self.mapping) if self.opts.adaptive else None
        weighted = multiply(weights, dl) if weights is not None else dl
        pool = self.opts.pooling
        if pool == "sum+max":
            pooled = concat([reduce(weighted, 1, "sum"), reduce(dl, 1, "max")], axis=-1)
        elif pool == "sum":
            pooled = reduce(weighted, 1, "sum")
        elif pool == "max":
            pooled = reduce(weighted, 1, "max")
        else:
            pooled = reduce(dl, 1, "mean")
        feats = self.out(pooled, train)
        centroid = nbr_sem = None
        if self.projection is not None:
            centroid = self.projection(features)
            nbr_sem = gather_rows(centroid, nbr)
        return LafaOutput(feats, weights, dl, nbr_sem, centroid)


def lafa_forward(positions, colors, features, nbr, unit: LAFA, train: bool = True) -> LafaOutput:
    return unit(positions, colors, features, nbr, train)
