"""Run configuration, its INI file format, and the ablation presets.

A run config file has up to four sections of ``key = value`` pairs::

    [network]
    channels = 8,32,128,256,512
    k = 16

    [train]
    lr = 0.01

Unknown sections or keys are rejected.  Every default reproduces the
reference training setup (K=16, 16 clusters, LR 0.01, batch 6, 40960 points,
channels 8/32/128/256/512 over five levels sampled 1/4 each).
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields, replace
from typing import Optional

from .cvlad import GLOBAL_MODES
from .errors import UsageError, ValidationError
from .lafa import ENCODERS, LafaOptions

LOSS_MODES = ("aggregation", "wce")


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 5
    k: int = 16
    clusters: int = 16
    channels: tuple = (8, 32, 128, 256, 512)
    ratio: int = 4
    classes: int = 13
    xyz_input: bool = False
    classifier: tuple = (64, 32)
    dropout: float = 0.5
    slope: float = 0.2
    bn_momentum: float = 0.99
    bn_eps: float = 1e-6
    global_mode: str = "cvlad"
    vlad_normalize: bool = False
    encoders: tuple = ENCODERS
    semantic_concat: bool = False
    repeat_semantics: bool = False
    adaptive: bool = True
    pooling: str = "sum+max"
    seed: int = 0

    def __post_init__(self):
        if len(self.channels) != self.levels:
            raise ValidationError(f"channel schedule {self.channels} must have {self.levels} entries")
        if self.levels < 1 or self.ratio < 2 or self.k < 1 or self.clusters < 1 or self.classes < 1:
            raise ValidationError("levels, k, clusters, classes must be >= 1 and ratio >= 2")
        if self.global_mode not in GLOBAL_MODES:
            raise ValidationError(f"global_mode must be one of {GLOBAL_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError("dropout must lie in [0, 1)")
        self.lafa_options()

    def lafa_options(self) -> LafaOptions:
        return LafaOptions(tuple(self.encoders), self.semantic_concat, self.repeat_semantics,
                           self.adaptive, self.pooling)

    @property
    def input_channels(self) -> int:
        return 6 if self.xyz_input else 3

    @property
    def first_lafa_widths(self) -> tuple:
        """Width of the first LAFA unit in each level: half the level width."""
        return tuple(max(1, c // 2) for c in self.channels)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 6
    points: int = 40960
    lr: float = 0.01
    lr_decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: str = "aggregation"
    seed: int = 0
    steps_per_epoch: int = 0
    checkpoint_every: int = 0
    fixed_sampling: bool = False
    stop_oa: float = 0.0

    def __post_init__(self):
        if self.loss not in LOSS_MODES:
            raise ValidationError(f"loss must be one of {LOSS_MODES}")
        if self.epochs < 0 or self.batch_size < 1 or self.points < 1 or self.lr < 0:
            raise ValidationError("epochs >= 0, batch_size >= 1, points >= 1, lr >= 0 required")
        if not 0.0 <= self.stop_oa <= 1.0:
            raise ValidationError("stop_oa must lie in [0, 1]")
        if not (0 < self.lr_decay <= 1 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValidationError("invalid optimizer hyperparameters")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    eval_path: str = ""
    classes: int = 0
    points: int = 16384
    noise: float = 0.01
    color_noise: float = 0.08
    instances: int = 4
    seed: int = 7
    eval_seed: int = 8

    def __post_init__(self):
        if self.source not in ("synthetic", "ascii"):
            raise ValidationError("data source must be 'synthetic' or 'ascii'")
        if self.source == "ascii" and not self.path:
            raise ValidationError("ascii data source needs a path")


@dataclass(frozen=True)
class AblationConfig:
    presets: tuple = ()
    converge_oa: float = 0.9


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if self.data.classes and self.data.classes != self.network.classes:
            raise ValidationError(f"data classes {self.data.classes} != network classes {self.network.classes}")


def toy_config(**train_overrides) -> RunConfig:
    """The default setup scaled to a 16384-point, 3-class desk scene."""
    net = NetworkConfig(levels=4, channels=(8, 16, 32, 64), classes=3, clusters=16, k=16,
                        bn_momentum=0.9, vlad_normalize=True)
    train = TrainConfig(epochs=200, batch_size=2, points=4096, lr_decay=0.99)
    train = replace(train, **train_overrides)
    return RunConfig(net, train, DataConfig(classes=3), AblationConfig())


def miniature_config(**train_overrides) -> RunConfig:
    """Smallest structurally complete network, for gradient checks and smoke runs."""
    net = NetworkConfig(levels=2, channels=(4, 8), classes=3, clusters=2, k=4)
    train = TrainConfig(epochs=2, batch_size=1, points=64, lr_decay=0.95, steps_per_epoch=2)
    train = replace(train, **train_overrides)
    return RunConfig(net, train, DataConfig(classes=3, points=512), AblationConfig())


# ---------------------------------------------------------------- INI format

_SECTIONS = {"network": NetworkConfig, "train": TrainConfig, "data": DataConfig, "ablation": AblationConfig}


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ValidationError(f"bad value for {key}: {raw!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse INI text over ``base`` (defaults when omitted)."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"config syntax: {exc}".splitlines()[0]) from None
    base = base or RunConfig()
    sections = {}
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ValidationError(f"unknown config section [{name}]")
    for name, cls in _SECTIONS.items():
        current = getattr(base, name)
        known = {f.name: getattr(current, f.name) for f in fields(cls)}
        updates = {}
        if parser.has_section(name):
            for key, raw in parser.items(name):
                if key not in known:
                    raise ValidationError(f"unknown key {key!r} in [{name}]")
                updates[key] = _parse_value(raw, known[key], f"{name}.{key}")
        sections[name] = replace(current, **updates)
    return RunConfig(**sections)


def load_config(path, base: Optional[RunConfig] = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name in _SECTIONS:
        section = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{f.name} = {_format_value(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- ablation presets

@dataclass(frozen=True)
class AblationPreset:
    id: str
    description: str
    network: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def apply(self, cfg: RunConfig) -> RunConfig:
        return dataclasses.replace(cfg, network=replace(cfg.network, **self.network),
                                   train=replace(cfg.train, **self.train))


_WCE = {"loss": "wce"}

PRESETS = {p.id: p for p in [
    AblationPreset("A1", "no adaptive augmentation unit (mean pooling)",
                   {"adaptive": False, "pooling": "mean"}, _WCE),
    AblationPreset("A2", "no local information encoding (repeated semantics + mlp)",
                   {"repeat_semantics": True}),
    AblationPreset("A3", "no C-VLAD module", {"global_mode": "none"}),
    AblationPreset("A4", "full network"),
    AblationPreset("B1", "encoding: f only", {"encoders": ("f",)}),
    AblationPreset("B2", "encoding: xyz + f", {"encoders": ("xyz", "f")}),
    AblationPreset("B3", "encoding: rgb + f", {"encoders": ("rgb", "f")}),
    AblationPreset("B4", "encoding: xyz + rgb, semantics concatenated",
                   {"encoders": ("xyz", "rgb"), "semantic_concat": True}),
    AblationPreset("B5", "encoding: xyz + rgb + f"),
    AblationPreset("C1", "no weight, max pooling", {"adaptive": False, "pooling": "max"}, _WCE),
    AblationPreset("C2", "no weight, sum pooling", {"adaptive": False, "pooling": "sum"}, _WCE),
    AblationPreset("C3", "no weight, max + sum pooling", {"adaptive": False, "pooling": "sum+max"}, _WCE),
    AblationPreset("C4", "adaptive weight, max pooling", {"pooling": "max"}, _WCE),
    AblationPreset("C5", "adaptive weight, sum pooling", {"pooling": "sum"}, _WCE),
    AblationPreset("C6", "adaptive weight, max + sum pooling", {}, _WCE),
    AblationPreset("D1", "remove C-VLAD module", {"global_mode": "none"}),
    AblationPreset("D2", "original VLAD (last layer only)", {"global_mode": "vlad_last"}),
    AblationPreset("D3", "global max pooling", {"global_mode": "max"}),
    AblationPreset("D4", "global mean pooling", {"global_mode": "mean"}),
    AblationPreset("D5", "comprehensive VLAD"),
    AblationPreset("E1", "weighted cross-entropy only", {}, _WCE),
    AblationPreset("E2", "aggregation loss"),
]}


def resolve_presets(ids) -> list:
    ids = [i.strip().upper() for i in ids if i.strip()]
    if not ids:
        raise UsageError(f"no presets given; valid ids: {', '.join(PRESETS)}")
    unknown = [i for i in ids if i not in PRESETS]
    if unknown:
        raise UsageError(f"unknown preset(s) {', '.join(unknown)}; valid ids: {', '.join(PRESETS)}")
    return [PRESETS[i] for i in ids]

