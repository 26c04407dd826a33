"""Comprehensive VLAD: soft-assigned residual aggregation over every encoder level."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError
from .numerics import (
    DiffArray,
    Linear,
    ParamStore,
    add,
    as_array,
    broadcast_to,
    concat,
    divide,
    glorot_uniform,
    leaky_relu,
    matmul,
    multiply,
    reduce,
    reshape,
    softmax,
    sqrt,
    subtract,
    transpose,
)

GLOBAL_MODES = ("cvlad", "vlad_last", "max", "mean", "none")


@dataclass
class VladLayerParams:
    centers: DiffArray   # (Q, C)
    weights: DiffArray   # (C, Q)
    bias: DiffArray      # (Q,)

    @property
    def clusters(self) -> int:
        return self.centers.shape[0]

    @property
    def channels(self) -> int:
        return self.centers.shape[1]


def init_vlad_layer(store: ParamStore, name: str, channels: int, clusters: int,
                    rng: np.random.Generator) -> VladLayerParams:
    if clusters < 1:
        raise ValidationError("cluster count must be >= 1")
    return VladLayerParams(
        store.add_param(f"{name}.centers", glorot_uniform(rng, clusters, channels)),
        store.add_param(f"{name}.assign_weight", glorot_uniform(rng, channels, clusters)),
        store.add_param(f"{name}.assign_bias", np.zeros(clusters)),
    )


def soft_assignment(features, params: VladLayerParams) -> DiffArray:
    """Per-point probability over clusters, shape (..., N, Q)."""
    return softmax(add(matmul(features, params.weights), params.bias), axis=-1)


def _l2_normalize(x: DiffArray, axis: int, eps: float = 1e-12) -> DiffArray:
    norm = sqrt(add(reduce(multiply(x, x), axis, "sum", keepdims=True), eps))
    return divide(x, norm)


def vlad_layer(features, params: VladLayerParams, normalize: bool = False) -> DiffArray:
    """Sum over points of ``a_q(x) * (x - c_q)``, flattened cluster-major.

    ``features`` is (N, C) or batched (B, N, C); the result is (Q*C,) or
    (B, Q*C).
    """
    f = as_array(features)
    batched = f.ndim == 3
    if not batched:
        f = reshape(f, (1,) + f.shape)
    if f.ndim != 3 or f.shape[1] < 1:
        raise DimensionError(f"features must be (N>=1, C) or (B, N>=1, C), got {as_array(features).shape}")
    if f.shape[-1] != params.channels:
        raise DimensionError(f"features have {f.shape[-1]} channels, clusters expect {params.channels}")
    b, _, c = f.shape
    q = params.clusters
    a = soft_assignment(f, params)                                   # (B, N, Q)
    weighted = matmul(transpose(a, (0, 2, 1)), f)                     # (B, Q, C)
    mass = reshape(reduce(a, 1, "sum"), (b, q, 1))                    # (B, Q, 1)
    v = subtract(weighted, multiply(mass, params.centers))
    if normalize:
        v = _l2_normalize(v, axis=2)
    v = reshape(v, (b, q * c))
    if normalize:
        v = _l2_normalize(v, axis=1)
    return v if batched else reshape(v, (q * c,))


@dataclass
class GlobalDescriptor:
    vector: DiffArray          # (B, D) or (D,)
    slices: list               # per-level (start, stop)

    @property
    def length(self) -> int:
        return self.slices[-1][1] if self.slices else 0


def cvlad_forward(encoder_outputs, layer_params, normalize: bool = False) -> GlobalDescriptor:
    """Concatenate the VLAD vectors of every encoder level."""
    if not encoder_outputs:
        raise ValidationError("need at least one encoder output")
    if len(encoder_outputs) != len(layer_params):
        raise ValidationError(f"{len(encoder_outputs)} encoder outputs but {len(layer_params)} VLAD layers")
    parts, slices, start = [], [], 0
    for f, p in zip(encoder_outputs, layer_params):
        v = vlad_layer(f, p, normalize)
        parts.append(v)
        slices.append((start, start + v.shape[-1]))
        start += v.shape[-1]
    vec = parts[0] if len(parts) == 1 else concat(parts, axis=-1)
    return GlobalDescriptor(vec, slices)


def pooled_descriptor(encoder_outputs, mode: str) -> GlobalDescriptor:
    """Global max or mean pooling of every level, concatenated."""
    parts, slices, start = [], [], 0
    for f in encoder_outputs:
        f = as_array(f)
        v = reduce(f, f.ndim - 2, mode)
        parts.append(v)
        slices.append((start, start + v.shape[-1]))
        start += v.shape[-1]
    vec = parts[0] if len(parts) == 1 else concat(parts, axis=-1)
    return GlobalDescriptor(vec, slices)


class GlobalInjection:
    """Project the descriptor to the bottleneck width, broadcast, concat, fuse."""

    def __init__(self, store: ParamStore, name: str, descriptor_len: int, channels: int,
                 rng: np.random.Generator, slope: float = 0.2):
        self.channels = channels
        self.slope = slope
        self.project = Linear(store, f"{name}.project", descriptor_len, channels, rng)
        self.fuse = Linear(store, f"{name}.fuse", 2 * channels, channels, rng)

    def __call__(self, descriptor: DiffArray, bottleneck: DiffArray) -> DiffArray:
        """``descriptor`` (B, D); ``bottleneck`` (B, N_b, C_b) -> (B, N_b, C_b)."""
        descriptor, bottleneck = as_array(descriptor), as_array(bottleneck)
        if bottleneck.ndim == 2:
            return reshape(self(reshape(descriptor, (1, -1)), reshape(bottleneck, (1,) + bottleneck.shape)),
                           bottleneck.shape)
        b, n, c = bottleneck.shape
        if c != self.channels:
            raise DimensionError(f"bottleneck has {c} channels, injection expects {self.channels}")
        g = leaky_relu(self.project(descriptor), self.slope)          # (B, C)
        g = broadcast_to(reshape(g, (b, 1, c)), (b, n, c))
        return leaky_relu(self.fuse(concat([bottleneck, g], axis=-1)), self.slope)


def inject_global(descriptor, bottleneck, injection: GlobalInjection) -> DiffArray:
    return injection(descriptor, bottleneck)
