"""Run configuration, presets and the INI-style config file format.

The file format is ``configparser`` INI with dotted section names::

    [model]
    moe_position = 4
    [model.gate]
    kind = gap_fc
    [model.constraint]
    kind = importance_loss
    [data]
    kind = synthetic
    [optimizer]
    lr = 0.001
    [train]
    epochs = 20

Values are JSON literals where they parse as JSON (numbers, lists, null,
true/false) and plain strings otherwise.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import os
from dataclasses import dataclass, field

from .constraints import ConstraintConfig
from .models import ModelConfig
from .moe import GateConfig

FORMAT_VERSION = 1
DETERMINISTIC_ENV = "MOECNN_DETERMINISTIC"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "synthetic"  # "synthetic" or "cifar100"
    path: str | None = None  # directory holding train.bin / test.bin
    classes: tuple[int, ...] | None = None  # CIFAR-100 fine-class subset
    num_domains: int = 4
    classes_per_domain: int = 3
    samples_per_class: int = 40
    test_samples_per_class: int = 20
    resolution: int = 16
    noise: float = 0.05
    data_seed: int = 1234
    normalize: bool = False
    augment: bool = False

    def __post_init__(self):
        if self.classes is not None:
            self.classes = tuple(int(c) for c in self.classes)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 150
    batch_size: int = 128
    seed: int = 0
    out_dir: str = "runs/default"
    eval_every: int = 1
    precision: str = "float32"

    def validate(self, check_paths: bool = True) -> None:
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs must be >= 0, batch_size and eval_every >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.data.kind not in ("synthetic", "cifar100"):
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        if self.data.kind == "cifar100":
            if not self.data.path:
                raise ConfigError("cifar100 data needs data.path")
            if check_paths:
                for name in ("train.bin", "test.bin"):
                    p = os.path.join(self.data.path, name)
                    if not os.path.exists(p):
                        raise ConfigError(f"missing data file {p}")
            n = len(self.data.classes) if self.data.classes else 100
        else:
            if min(self.data.num_domains, self.data.classes_per_domain, self.data.samples_per_class,
                   self.data.test_samples_per_class, self.data.resolution) < 1:
                raise ConfigError("synthetic data parameters must be >= 1")
            n = self.data.num_domains * self.data.classes_per_domain
        if n != self.model.num_classes:
            raise ConfigError(f"dataset has {n} classes but model.num_classes={self.model.num_classes}")

    def effective_precision(self) -> str:
        return "float64" if os.environ.get(DETERMINISTIC_ENV, "") not in ("", "0") else self.precision


def desk_preset() -> RunConfig:
    """Width 1/4, 16x16 synthetic clustered data, MoE at position 1, 20 epochs.

    The gate adds unit Gaussian noise to its training logits. Without it the
    initial top-k choice is nearly input independent and, because unselected
    experts receive no gradient, the gate never revisits it.
    """
    data = DataConfig()
    model = ModelConfig(num_classes=data.num_domains * data.classes_per_domain, moe_position=1,
                        num_experts=4, k=2, gate=GateConfig(noise_std=1.0), width_multiplier=0.25,
                        input_resolution=(data.resolution, data.resolution))
    return RunConfig(model=model, data=data, epochs=20, batch_size=64, out_dir="runs/desk")


def full_preset() -> RunConfig:
    """Full-width ResNet-18 on CIFAR-100, MoE at position 4, 150 epochs."""
    return RunConfig(model=ModelConfig(num_classes=100, moe_position=4),
                     data=DataConfig(kind="cifar100", path="data/cifar-100-binary",
                                     normalize=True, resolution=32),
                     epochs=150, batch_size=128, out_dir="runs/full")


PRESETS = {"desk": desk_preset, "full": full_preset}


# -- dict / file round trip ---------------------------------------------------------


def to_dict(config: RunConfig) -> dict:
    def conv(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: conv(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [conv(v) for v in obj]
        if hasattr(obj, "value") and isinstance(obj, str):
            return obj.value
        return obj
    return conv(config)


def from_dict(d: dict) -> RunConfig:
    d = json.loads(json.dumps(d))
    model = dict(d.get("model", {}))
    gate = GateConfig(**model.pop("gate", {}))
    constraint = ConstraintConfig(**model.pop("constraint", {}))
    try:
        cfg = RunConfig(
            model=ModelConfig(gate=gate, constraint=constraint, **model),
            data=DataConfig(**d.get("data", {})),
            optimizer=OptimizerConfig(**d.get("optimizer", {})),
            **(d["train"] if "train" in d else _train_section(d)),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _train_section(d: dict) -> dict:
    return {k: v for k, v in d.items() if k not in ("model", "data", "optimizer")}


def config_hash(config: RunConfig) -> str:
    """Hash of everything that changes training behaviour (not out_dir or epochs)."""
    d = to_dict(config)
    d.pop("out_dir", None)
    d.pop("epochs", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _format_value(v) -> str:
    if isinstance(v, str):
        return v
    return json.dumps(v)


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("none", "null"):
        return None
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def dumps(config: RunConfig) -> str:
    d = to_dict(config)
    sections = {
        "model": {k: v for k, v in d["model"].items() if k not in ("gate", "constraint")},
        "model.gate": d["model"]["gate"],
        "model.constraint": d["model"]["constraint"],
        "data": d["data"],
        "optimizer": d["optimizer"],
        "train": _train_section(d),
    }
    out = io.StringIO()
    out.write(f"# moecnn run config, format {FORMAT_VERSION}\n")
    for name, values in sections.items():
        out.write(f"\n[{name}]\n")
        for key, value in values.items():
            out.write(f"{key} = {_format_value(value)}\n")
    return out.getvalue()


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse a config file; keys not present keep the values of ``base``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    d = to_dict(base or RunConfig())
    known = {"model", "model.gate", "model.constraint", "data", "optimizer", "train"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown config section [{section}]")
        if section == "train":
            target = d
        else:
            target = d
            for part in section.split("."):
                target = target[part]
        for key, raw in parser.items(section):
            if key not in target or (section == "train" and key in ("model", "data", "optimizer")):
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            target[key] = _parse_value(raw)
    train = _train_section(d)
    try:
        return from_dict({"model": d["model"], "data": d["data"], "optimizer": d["optimizer"],
                          "train": train})
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path: str, base: RunConfig | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            return loads(fh.read(), base)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
