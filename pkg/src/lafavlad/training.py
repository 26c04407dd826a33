"""Optimizer, training loop, run logging, and sliding-crop evaluation.

Every random draw in a run derives from ``TrainConfig.seed`` through
``SeedSequence([seed, epoch, step])``, so two runs with the same config and
data produce identical logs and checkpoints.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .config import NetworkConfig, TrainConfig
from .errors import NonFiniteError, ValidationError
from .losses_metrics import (
    ConfusionMatrix,
    aggregation_loss,
    class_weights,
    constraint_loss,
    weighted_cross_entropy,
)
from .network import SegmentationNet, predict, prepare_batch
from .numerics import DiffArray, Tape, add, finite_check, multiply, no_grad
from .pointcloud_io import PointCloud, crop_around, epoch_steps

RUNLOG_HEADER = "epoch,loss,oa,lr,seconds"


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.

    ``params`` maps names to DiffArray (updated by rebinding ``.data``);
    ``grads`` maps the same names to arrays, a missing or None entry counting
    as zero.  Returns ``(params, state)``.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        elif m.shape != p.shape or v.shape != p.shape:
            raise ValidationError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------- loss assembly

@dataclass
class LossTerms:
    total: DiffArray
    wce: DiffArray
    constraints: list           # one term per encoder level that has adaptive weights


def level_constraints(aux: dict) -> list:
    """Per encoder level, the mean constraint loss of its weighted LAFA units."""
    out = []
    for level in aux["levels"]:
        terms = [constraint_loss(u.centroid_semantic, u.neighbor_semantic, u.weights, u.local_encoding)
                 for u in level.units if u.weights is not None]
        if terms:
            total = terms[0]
            for t in terms[1:]:
                total = add(total, t)
            out.append(multiply(total, 1.0 / len(terms)))
    return out


def compute_loss(logits, aux: dict, labels, weights, mode: str) -> LossTerms:
    wce = weighted_cross_entropy(logits, labels, weights)
    if mode == "wce":
        return LossTerms(wce, wce, [])
    if mode != "aggregation":
        raise ValidationError(f"unknown loss mode {mode!r}")
    constraints = level_constraints(aux)
    if not constraints:
        raise ValidationError("aggregation loss needs adaptive weights; use loss = wce for this network")
    return LossTerms(aggregation_loss(wce, constraints), wce, constraints)


def _named_tensors(logits, aux, terms: Optional[LossTerms], model: SegmentationNet) -> dict:
    named = {}
    for lvl, level in enumerate(aux["levels"]):
        for u, unit in enumerate(level.units, start=1):
            prefix = f"enc{lvl}.lafa{u}"
            named[f"{prefix}.local_encoding"] = unit.local_encoding
            if unit.weights is not None:
                named[f"{prefix}.weights"] = unit.weights
            named[f"{prefix}.features"] = unit.features
    if aux.get("descriptor") is not None:
        named["descriptor"] = aux["descriptor"].vector
    named["logits"] = logits
    if terms is not None:
        named["loss.wce"] = terms.wce
        for i, c in enumerate(terms.constraints):
            named[f"loss.constraint{i}"] = c
    for name, p in model.params.items():
        named[f"param:{name}"] = p
    return named


# ---------------------------------------------------------------- run log

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    oa: float
    lr: float
    seconds: float
    wce: float = float("nan")
    constraint: float = float("nan")

    def csv_row(self) -> str:
        return f"{self.epoch},{self.loss!r},{self.oa!r},{self.lr!r},{self.seconds:.3f}"


class RunLog:
    """Per-epoch records, optionally streamed to a CSV file as they arrive."""

    def __init__(self, path=None):
        self.records: list = []
        self.path = path
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(RUNLOG_HEADER + "\n")

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ValidationError(f"epoch {record.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(record.csv_row() + "\n")
                fh.flush()

    def to_csv(self) -> str:
        return "\n".join([RUNLOG_HEADER] + [r.csv_row() for r in self.records]) + "\n"

    def deterministic_rows(self) -> list:
        """Records without wall time, for reproducibility comparisons."""
        return [(r.epoch, r.loss, r.oa, r.lr) for r in self.records]

    @staticmethod
    def parse(text: str) -> "RunLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0].strip() != RUNLOG_HEADER:
            raise ValidationError(f"run log must start with {RUNLOG_HEADER!r}")
        log = RunLog()
        for i, ln in enumerate(lines[1:], start=2):
            parts = ln.split(",")
            if len(parts) != 5:
                raise ValidationError(f"run log line {i}: expected 5 fields")
            try:
                log.append(EpochRecord(int(parts[0]), float(parts[1]), float(parts[2]),
                                       float(parts[3]), float(parts[4])))
            except ValueError:
                raise ValidationError(f"run log line {i}: bad number") from None
        return log

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: SegmentationNet
    log: RunLog
    optimizer: AdamState

    @property
    def params(self):
        return self.model.params


def _as_dataset(dataset) -> list:
    clouds = [dataset] if isinstance(dataset, PointCloud) else list(dataset)
    if not clouds:
        raise ValidationError("training dataset is empty")
    for c in clouds:
        if c.labels is None:
            raise ValidationError("training clouds must be labeled")
        if len(c) == 0:
            raise ValidationError("training cloud has no points")
    return clouds


def sample_batch(clouds: Sequence[PointCloud], config: TrainConfig, net: NetworkConfig, key):
    """Crops and hierarchy for one step, fully determined by ``key``."""
    ss = np.random.SeedSequence(key)
    pick_ss, crop_ss, hier_ss, drop_ss = ss.spawn(4)
    sizes = np.array([len(c) for c in clouds], dtype=np.float64)
    pick = np.random.default_rng(pick_ss).choice(len(clouds), config.batch_size, p=sizes / sizes.sum())
    crops = []
    for i, cs in zip(pick, crop_ss.spawn(config.batch_size)):
        cloud = clouds[i]
        rng = np.random.default_rng(cs)
        center = int(rng.integers(len(cloud)))
        crops.append(cloud.subset(crop_around(cloud, center, config.points, rng)))
    return prepare_batch(crops, net, hier_ss), np.random.default_rng(drop_ss)


def train(model: SegmentationNet, dataset, config: TrainConfig, log_path=None, checkpoint_dir=None,
          on_epoch: Optional[Callable[[EpochRecord], None]] = None) -> TrainResult:
    """Train in place and return the model with its run log.

    ``checkpoint_dir`` receives ``epoch_NNNN.ckpt`` every
    ``config.checkpoint_every`` epochs.  Training stops early once an epoch's
    train OA reaches ``config.stop_oa`` (when positive).
    """
    clouds = _as_dataset(dataset)
    net = model.config
    labels = np.concatenate([c.labels for c in clouds])
    if labels.max() >= net.classes:
        raise ValidationError(f"label {labels.max()} out of range for {net.classes} classes")
    weights = class_weights(labels, net.classes)
    steps = config.steps_per_epoch or epoch_steps(labels.size, config.batch_size, config.points)
    if config.checkpoint_every and checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    log = RunLog(log_path)
    state = AdamState()
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        lr = config.lr * config.lr_decay ** (epoch - 1)
        key_epoch = 0 if config.fixed_sampling else epoch
        loss_sum = wce_sum = con_sum = 0.0
        correct = seen = 0
        for step in range(steps):
            batch, drop_rng = sample_batch(clouds, config, net, [config.seed, key_epoch, step])
            with Tape() as tape:
                logits, aux = model.forward(batch, train=True, rng=drop_rng)
                terms = compute_loss(logits, aux, batch.labels, weights, config.loss)
                if not np.isfinite(terms.total.data):
                    bad = finite_check(_named_tensors(logits, aux, terms, model))
                    raise NonFiniteError(f"non-finite loss at epoch {epoch} step {step}; "
                                         f"first non-finite tensor: {bad}", bad)
                model.store.zero_grad()
                tape.backward(terms.total)
            grads = {name: p.grad for name, p in model.params.items()}
            bad = finite_check({f"grad:{n}": g for n, g in grads.items() if g is not None})
            if bad is not None:
                raise NonFiniteError(f"non-finite gradient at epoch {epoch} step {step}: {bad}", bad)
            adam_step(model.params, grads, state, lr, config.beta1, config.beta2, config.eps)
            loss_sum += float(terms.total.data)
            wce_sum += float(terms.wce.data)
            if terms.constraints:
                con_sum += float(sum(float(c.data) for c in terms.constraints) / len(terms.constraints))
            pred = predict(logits)
            correct += int(np.count_nonzero(pred == batch.labels))
            seen += pred.size
        record = EpochRecord(epoch, loss_sum / steps, correct / seen, lr, time.perf_counter() - start,
                             wce_sum / steps, con_sum / steps if config.loss == "aggregation" else float("nan"))
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if config.checkpoint_every and checkpoint_dir is not None and epoch % config.checkpoint_every == 0:
            model.save(os.path.join(checkpoint_dir, f"epoch_{epoch:04d}.ckpt"))
        if config.stop_oa > 0 and record.oa >= config.stop_oa:
            break
    return TrainResult(model, log, state)


def epochs_to_reach(values: Sequence[float], threshold: float) -> Optional[int]:
    """First 1-based epoch whose value is at or below ``threshold``."""
    for i, v in enumerate(values, start=1):
        if v <= threshold:
            return i
    return None


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    confusion: ConfusionMatrix
    predictions: list           # per cloud, (N,) predicted labels
    crops: int

    @property
    def oa(self) -> float:
        return self.confusion.oa()

    @property
    def miou(self) -> float:
        return self.confusion.miou()


def predict_cloud(model: SegmentationNet, cloud: PointCloud, points: int, seed=0):
    """Vote-based labels for every point of ``cloud`` and the number of crops used.

    Crops are centered on a random still-uncovered point until every point has
    been predicted at least once; points covered by several crops take the
    majority vote, ties going to the smallest class.
    """
    n = len(cloud)
    c = model.config.classes
    votes = np.zeros((n, c), dtype=np.int64)
    covered = np.zeros(n, dtype=bool)
    ss = np.random.SeedSequence(seed)
    crops = 0
    while not covered.all():
        crop_ss, hier_ss = ss.spawn(2)
        rng = np.random.default_rng(crop_ss)
        pending = np.flatnonzero(~covered)
        center = int(pending[rng.integers(pending.size)])
        idx = crop_around(cloud, center, points, rng)
        batch = prepare_batch([cloud.subset(idx)], model.config, hier_ss)
        with no_grad():
            logits, _ = model.forward(batch, train=False)
        np.add.at(votes, (idx, predict(logits)), 1)
        covered[idx] = True
        crops += 1
    return np.argmax(votes, axis=1), crops


def evaluate(model: SegmentationNet, dataset, points: int = 40960, seed: int = 0) -> EvalReport:
    clouds = [dataset] if isinstance(dataset, PointCloud) else list(dataset)
    if not clouds:
        raise ValidationError("evaluation dataset is empty")
    if any(cl.labels is None for cl in clouds):
        raise ValidationError("evaluation needs labeled clouds")
    cm = ConfusionMatrix(model.config.classes)
    preds, crops = [], 0
    for i, cloud in enumerate(clouds):
        pred, used = predict_cloud(model, cloud, points, [seed, i])
        cm.accumulate(cloud.labels, pred)
        preds.append(pred)
        crops += used
    return EvalReport(cm, preds, crops)
