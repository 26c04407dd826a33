"""Encoder-decoder segmentation network.

Encoder level ``l`` runs two LAFA units at resolution ``l`` (the first at half
the level width) and hands its output to the next level through the random
down-sampling map.  The global descriptor of all encoder outputs is fused into
the deepest level; each decoder level up-samples by nearest coarse point,
concatenates the same-resolution encoder output, and applies an mlp.  A
three-layer classifier produces per-point logits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .config import NetworkConfig
from .cvlad import GlobalInjection, cvlad_forward, init_vlad_layer, pooled_descriptor
from .errors import ValidationError
from .lafa import LAFA
from .neighborhood import SamplingHierarchy, build_hierarchy, seed_sequence
from .numerics import (
    BlockOptions,
    DiffArray,
    Linear,
    ParamStore,
    SharedMLP,
    concat,
    count_parameters,
    dropout,
    gather_rows,
    load_checkpoint,
    reshape,
    save_checkpoint,
)
from .pointcloud_io import PointCloud


@dataclass
class Batch:
    """Several equally sized clouds flattened into one index space per level."""

    batch_size: int
    sizes: list                 # points per cloud at each level
    positions: list             # (B*N_l, 3)
    colors: list                # (B*N_l, 3)
    neighbors: list             # (B*N_l, K), indices into the same level
    down: list                  # (B*N_{l+1},), indices into level l
    up: list                    # (B*N_l,), indices into level l+1
    labels: Optional[np.ndarray] = None


def collate(clouds: Sequence[PointCloud], hierarchies: Sequence[SamplingHierarchy]) -> Batch:
    if not clouds or len(clouds) != len(hierarchies):
        raise ValidationError("need one hierarchy per cloud and at least one cloud")
    sizes = hierarchies[0].sizes
    for h in hierarchies:
        if h.sizes != sizes:
            raise ValidationError(f"clouds in a batch must share level sizes, got {h.sizes} vs {sizes}")
    if any(len(c) != sizes[0] for c in clouds):
        raise ValidationError("hierarchy was not built from this batch")
    b = len(clouds)
    nl = len(sizes)
    positions, colors, neighbors, down, up = [], [], [], [], []
    for lvl in range(nl):
        positions.append(np.concatenate([c.positions[h.source[lvl]] for c, h in zip(clouds, hierarchies)]))
        colors.append(np.concatenate([c.colors[h.source[lvl]] for c, h in zip(clouds, hierarchies)]))
        neighbors.append(np.concatenate([h.neighbors[lvl] + i * sizes[lvl] for i, h in enumerate(hierarchies)]))
        if lvl + 1 < nl:
            down.append(np.concatenate([h.kept[lvl] + i * sizes[lvl] for i, h in enumerate(hierarchies)]))
            up.append(np.concatenate([h.upsample[lvl] + i * sizes[lvl + 1] for i, h in enumerate(hierarchies)]))
    labels = None
    if all(c.labels is not None for c in clouds):
        labels = np.concatenate([c.labels for c in clouds])
    return Batch(b, list(sizes), positions, colors, neighbors, down, up, labels)


def prepare_batch(clouds: Sequence[PointCloud], config: NetworkConfig, seed=None) -> Batch:
    """Build a hierarchy for every cloud (seeded) and collate them."""
    seeds = seed_sequence(seed).spawn(len(clouds))
    hier = [build_hierarchy(c, config.levels - 1, config.k, config.ratio, s) for c, s in zip(clouds, seeds)]
    return collate(clouds, hier)


@dataclass
class LevelAux:
    units: list                 # LafaOutput of both units


class SegmentationNet:
    """All parameters live in ``self.store`` under unique dotted names."""

    def __init__(self, config: NetworkConfig):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        block = BlockOptions(cfg.slope, cfg.bn_momentum, cfg.bn_eps)
        self.store = store = ParamStore()
        opts = cfg.lafa_options()
        ch = list(cfg.channels)
        self.embed = SharedMLP(store, "embed", cfg.input_channels, ch[0], rng, block)
        self.encoder = []
        c_prev = ch[0]
        for lvl, width in enumerate(ch):
            half = max(1, width // 2)
            first = LAFA(store, f"enc{lvl}.lafa1", c_prev, half, rng, opts, block)
            second = LAFA(store, f"enc{lvl}.lafa2", half, width, rng, opts, block)
            self.encoder.append((first, second))
            c_prev = width

        mode = cfg.global_mode
        self.vlad = []
        if mode == "cvlad":
            self.vlad = [init_vlad_layer(store, f"cvlad{l}", c, cfg.clusters, rng) for l, c in enumerate(ch)]
            desc_len = cfg.clusters * sum(ch)
        elif mode == "vlad_last":
            self.vlad = [init_vlad_layer(store, "vlad_last", ch[-1], cfg.clusters, rng)]
            desc_len = cfg.clusters * ch[-1]
        elif mode in ("max", "mean"):
            desc_len = sum(ch)
        else:
            desc_len = 0
        self.descriptor_length = desc_len
        self.inject = GlobalInjection(store, "inject", desc_len, ch[-1], rng, cfg.slope) if desc_len else None

        self.decoder = {}
        for lvl in reversed(range(cfg.levels)):
            if lvl == cfg.levels - 1:
                c_in = ch[lvl] * (2 if self.inject else 1)
            else:
                c_in = ch[lvl + 1] + ch[lvl]
            self.decoder[lvl] = SharedMLP(store, f"dec{lvl}", c_in, ch[lvl], rng, block)

        widths = [ch[0]] + list(cfg.classifier)
        self.head = [SharedMLP(store, f"head{i}", a, b, rng, block) for i, (a, b) in enumerate(zip(widths, widths[1:]))]
        self.logits = Linear(store, "head_out", widths[-1], cfg.classes, rng)

    @property
    def params(self):
        return self.store.params

    def count_parameters(self) -> int:
        return count_parameters(self.store)

    def summary(self) -> str:
        lines = [f"{name:40s} {str(p.shape):>14s}" for name, p in self.store.params.items()]
        lines.append(f"total parameters: {self.count_parameters()}")
        return "\n".join(lines)

    def save(self, path) -> None:
        save_checkpoint(self.store, path)

    def load(self, path) -> None:
        load_checkpoint(self.store, path)

    def _check(self, batch: Batch) -> None:
        cfg = self.config
        if len(batch.sizes) != cfg.levels:
            raise ValidationError(f"batch has {len(batch.sizes)} levels, network expects {cfg.levels}")
        for lvl, n in enumerate(batch.sizes):
            rows = batch.batch_size * n
            if batch.positions[lvl].shape != (rows, 3) or batch.neighbors[lvl].shape != (rows, cfg.k):
                raise ValidationError(f"level {lvl}: expected {rows} points with k={cfg.k}, got "
                                      f"{batch.positions[lvl].shape} / {batch.neighbors[lvl].shape}")

    def forward(self, batch: Batch, train: bool = True, rng: Optional[np.random.Generator] = None,
                hook: Optional[Callable[[int, DiffArray], DiffArray]] = None):
        """Per-point logits (B*N, classes) and auxiliary tensors.

        ``aux`` holds ``levels`` (per encoder level, the two LafaOutputs),
        ``encoder`` outputs, ``descriptor``, ``decoder_inputs`` keyed by level,
        and ``sizes``.  ``hook(level, features)`` may replace an encoder output
        before it is used anywhere downstream.
        """
        cfg = self.config
        self._check(batch)
        b = batch.batch_size
        ch = cfg.channels
        pos = [DiffArray(p) for p in batch.positions]
        col = [DiffArray(c) for c in batch.colors]
        inp = np.concatenate([batch.colors[0], batch.positions[0]], axis=1) if cfg.xyz_input else batch.colors[0]
        x = self.embed(DiffArray(inp), train)

        levels, enc = [], []
        for lvl, (first, second) in enumerate(self.encoder):
            if lvl > 0:
                x = gather_rows(enc[-1], batch.down[lvl - 1])
            o1 = first(pos[lvl], col[lvl], x, batch.neighbors[lvl], train)
            o2 = second(pos[lvl], col[lvl], o1.features, batch.neighbors[lvl], train)
            f = o2.features
            if hook is not None:
                f = hook(lvl, f)
            levels.append(LevelAux([o1, o2]))
            enc.append(f)

        per_cloud = [reshape(f, (b, batch.sizes[l], ch[l])) for l, f in enumerate(enc)]
        mode = cfg.global_mode
        descriptor = None
        if mode == "cvlad":
            descriptor = cvlad_forward(per_cloud, self.vlad, cfg.vlad_normalize)
        elif mode == "vlad_last":
            descriptor = cvlad_forward(per_cloud[-1:], self.vlad, cfg.vlad_normalize)
        elif mode in ("max", "mean"):
            descriptor = pooled_descriptor(per_cloud, mode)

        deepest = cfg.levels - 1
        decoder_inputs = {}
        if self.inject is not None:
            fused = self.inject(descriptor.vector, per_cloud[-1])
            d_in = concat([reshape(fused, (b * batch.sizes[-1], ch[-1])), enc[-1]], axis=-1)
        else:
            d_in = enc[-1]
        decoder_inputs[deepest] = d_in
        d = self.decoder[deepest](d_in, train)
        for lvl in reversed(range(deepest)):
            d_in = concat([gather_rows(d, batch.up[lvl]), enc[lvl]], axis=-1)
            decoder_inputs[lvl] = d_in
            d = self.decoder[lvl](d_in, train)

        h = d
        for layer in self.head:
            h = layer(h, train)
        h = dropout(h, cfg.dropout, rng, train)
        logits = self.logits(h)
        aux = {"levels": levels, "encoder": enc, "descriptor": descriptor,
               "decoder_inputs": decoder_inputs, "sizes": list(batch.sizes)}
        return logits, aux

    __call__ = forward


def forward(batch: Batch, model: SegmentationNet, train: bool = True, rng=None, hook=None):
    return model.forward(batch, train, rng, hook)


def predict(logits) -> np.ndarray:
    """Highest-scoring class per point; ties go to the smallest class index."""
    data = logits.data if isinstance(logits, DiffArray) else np.asarray(logits)
    return np.argmax(data, axis=-1)
