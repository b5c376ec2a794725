"""Run configuration: every knob of search, evaluation training and data, with strict key checking.

The ``desk`` preset (default) is the CPU-sized setup used by the acceptance
runs; ``full`` holds the full-scale settings.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from . import data as D
from .cell import NetworkConfig
from .ops import MODES, DomainMode, GroupConfig
from .search import OptimConfig, SearchConfig, SearchSchedule
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class DataSection:
    preset: str = "toy"  # "toy" (2 classes) or "cifar10"
    n_images: int = 2500  # toy preset size
    noise: float = 0.6  # pixel noise of the synthetic toy task
    seed: int = 0  # dataset generation seed
    test_fraction: float = 0.2  # held out for evaluation accuracy
    search_images: int = 512  # training images used by the search (0 = all)
    downsample: int = 2  # block-average factor applied to 32x32 inputs


@dataclass
class NetworkSection:
    init_channels: int = 12  # full: 36 (CIFAR), 80 (ImageNet)
    eval_layers: int = 5  # full: 20 (CIFAR), 14 (ImageNet)
    n_nodes: int = 2  # full / DARTS: 4
    channels_per_group: int = 3  # full: 3 (CIFAR), 5 (ImageNet)
    stem_stride: int = 2  # full: 1 on CIFAR
    activation: str = "prelu"
    binary_preprocess: bool = False


@dataclass
class SearchSection:
    depths: list = field(default_factory=lambda: [3, 4, 5])  # full: 5, 11, 17
    ops_kept: list = field(default_factory=lambda: [8, 5, 3])
    epochs: int = 4  # per stage; full: 25
    warmup_epochs: int = 2  # full: 10
    batch_size: int = 32  # full: 96
    arch_lr: float = 0.15  # full: 0.0006 over ~3900 alpha steps per stage; scaled to the same budget
    arch_weight_decay: float = 1e-3
    arch_betas: list = field(default_factory=lambda: [0.5, 0.999])
    weight_lr: float = 1e-3
    weight_decay: float = 3e-4
    weight_betas: list = field(default_factory=lambda: [0.9, 0.999])
    t_normal: float = 0.2
    t_reduce: float = 0.15
    split_fraction: float = 0.5
    pad_crop: int = 2  # full: 4 on 32x32
    flip: bool = True


@dataclass
class TrainSection:
    epochs: int = 6  # full: 600
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    cosine: bool = True
    pad_crop: int = 2
    flip: bool = True
    cutout: int = 8  # full: 16 on 32x32 inputs
    mixup: float = 0.0  # full: 0.2 on CIFAR-100
    recalibrate_bn: bool = False
    finetune_epochs: int = 0


SECTIONS = {"data": DataSection, "network": NetworkSection, "search": SearchSection, "train": TrainSection}
TOP_LEVEL = {"seed", "mode", "threads", "dtype", *SECTIONS}


@dataclass
class RunConfig:
    seed: int = 0
    mode: str = "bin-proposed"
    threads: int = 1
    dtype: str = "float32"
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    search: SearchSection = field(default_factory=SearchSection)
    train: TrainSection = field(default_factory=TrainSection)

    # construction -----------------------------------------------------------

    @classmethod
    def desk(cls) -> "RunConfig":
        return cls()

    @classmethod
    def full(cls) -> "RunConfig":
        return cls(
            data=DataSection(preset="cifar10", search_images=0, downsample=1, test_fraction=0.2),
            network=NetworkSection(init_channels=36, eval_layers=20, n_nodes=4, stem_stride=1),
            search=SearchSection(depths=[5, 11, 17], epochs=25, warmup_epochs=10, batch_size=96, arch_lr=6e-4,
                                 pad_crop=4),
            train=TrainSection(epochs=600, batch_size=96, pad_crop=4, cutout=16),
        )

    @classmethod
    def from_dict(cls, doc: dict, base: Optional["RunConfig"] = None) -> "RunConfig":
        cfg = dataclasses.replace(base) if base is not None else cls()
        for sec in SECTIONS:
            setattr(cfg, sec, dataclasses.replace(getattr(cfg, sec)))
        if not isinstance(doc, dict):
            raise ConfigError("config must be a mapping")
        for key, value in doc.items():
            if key not in TOP_LEVEL:
                raise ConfigError(f"unknown config key {key!r}")
            if key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be a mapping")
                section = getattr(cfg, key)
                names = {f.name for f in dataclasses.fields(section)}
                for sub, v in value.items():
                    if sub not in names:
                        raise ConfigError(f"unknown config key {key}.{sub!r}")
                    setattr(section, sub, _coerce(f"{key}.{sub}", getattr(section, sub), v))
            else:
                setattr(cfg, key, _coerce(key, getattr(cfg, key), value))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from None
        preset = doc.pop("preset", None) if isinstance(doc, dict) else None
        if preset is not None:
            if preset not in ("desk", "full"):
                raise ConfigError(f"unknown config key value preset={preset!r}")
            base = cls.full() if preset == "full" else cls.desk()
        return cls.from_dict(doc, base)

    def with_overrides(self, assignments: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings (values parsed as JSON, falling back to text)."""
        doc: dict[str, Any] = {}
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            parts = key.split(".")
            if len(parts) == 1:
                doc[parts[0]] = value
            elif len(parts) == 2:
                doc.setdefault(parts[0], {})[parts[1]] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return RunConfig.from_dict(doc, self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode: unknown value {self.mode!r}; choose from {sorted(MODES)}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype: must be float32 or float64, got {self.dtype!r}")
        if self.threads < 1:
            raise ConfigError("threads: must be >= 1")
        if self.data.preset not in ("toy", "cifar10"):
            raise ConfigError(f"data.preset: unknown value {self.data.preset!r}")
        if len(self.search.depths) != len(self.search.ops_kept):
            raise ConfigError("search.depths and search.ops_kept must have the same length")
        if self.train.cutout > 32 // self.data.downsample:
            raise ConfigError(f"train.cutout: {self.train.cutout} exceeds the input size")
        try:
            self.search_config()
            self.network_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # derived objects --------------------------------------------------------

    @property
    def domain(self) -> DomainMode:
        return MODES[self.mode]

    def network_config(self, num_classes: int = 2, layers: Optional[int] = None) -> NetworkConfig:
        n = self.network
        GroupConfig(n.channels_per_group).groups_for(n.init_channels)
        return NetworkConfig(init_channels=n.init_channels, layers=layers or n.eval_layers, num_classes=num_classes,
                             n_nodes=n.n_nodes, stem_stride=n.stem_stride, groups=GroupConfig(n.channels_per_group),
                             mode=self.domain, activation=n.activation, binary_preprocess=n.binary_preprocess)

    def search_config(self, num_classes: int = 2) -> SearchConfig:
        s = self.search
        real = self.mode == "real"
        optim = OptimConfig(arch_lr=s.arch_lr, arch_weight_decay=s.arch_weight_decay, arch_betas=tuple(s.arch_betas),
                            weight_optimizer="sgd" if real else "adam", weight_lr=0.1 if real else s.weight_lr,
                            weight_decay=s.weight_decay, weight_betas=tuple(s.weight_betas),
                            batch_size=s.batch_size, t_normal=s.t_normal, t_reduce=s.t_reduce)
        schedule = SearchSchedule.uniform(s.depths, s.ops_kept, s.epochs, s.warmup_epochs if s.epochs else 0)
        return SearchConfig(self.network_config(num_classes), schedule, optim, s.split_fraction,
                            self.data.downsample, s.pad_crop, s.flip, self.dtype)

    def train_config(self) -> TrainConfig:
        t = self.train
        real = self.mode == "real"
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, optimizer="sgd" if real else "adam",
                           lr=0.1 if real else t.lr, weight_decay=t.weight_decay, cosine=t.cosine,
                           pad_crop=t.pad_crop, flip=t.flip, cutout=t.cutout, mixup=t.mixup,
                           downsample=self.data.downsample, dtype=self.dtype, recalibrate_bn=t.recalibrate_bn,
                           finetune_epochs=t.finetune_epochs)

    def datasets(self, data_dir: Optional[str] = None) -> tuple[D.Dataset, D.Dataset, D.Dataset]:
        """(search data, evaluation train split, evaluation test split)."""
        d = self.data
        if d.preset == "toy":
            full = (D.toy_preset(data_dir, d.n_images, d.seed) if data_dir
                    else D.oriented_gratings(d.n_images, d.seed, noise=d.noise))
        else:
            if data_dir is None:
                raise ConfigError("data.preset: cifar10 needs --data-dir (or use --synthetic)")
            full = D.load_cifar(data_dir)
        train, test = D.split(full, 1.0 - d.test_fraction, d.seed)
        search = train if not d.search_images or d.search_images >= len(train) else train.subset(
            np.arange(d.search_images))
        return search, train, test


def _coerce(key: str, current, value):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, (list, tuple)):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value
