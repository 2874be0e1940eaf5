"""YAML run configuration with fail-fast key validation.

Schema (every key optional; defaults shown by ``faqd <command> --help`` and
in the README)::

    net:
      teacher: resnet-tiny-20       # teacher architecture
      student: resnet-tiny-8        # student architecture
      group_channels: [16, 32, 64]
      classes: 10
      weight_bits: 32               # student weight bits (--bits)
      act_bits: 32                  # student activation bits (--act-bits)
    train:
      mode: end_to_end              # end_to_end | fine_tune (--mode end2end|finetune)
      quant_mode: qat               # qat | binary_relax
      kd_kind: null                 # mse | kl; null = mode default
      optimizer: null               # sgd | adam; null = mode default
      lr: null
      momentum: 0.9
      weight_decay: 0.0005
      epochs: 2
      batch_size: 64
      seed: 0
      lambda0: 1.0
      eta: 1.02
    loss:
      kind: faqd                    # faqd | qd | label-free (--loss)
      alpha: 1.0
      beta: 1.0
      gamma: 0.5
      qd_alpha: 0.5                 # KD weight of the qd objective
      fa_mode: auto                 # auto | exact | fast
      ffa_k: 10                     # (--ffa-k)
      fa_exact_max_side: 32
    data:
      source: synthetic             # synthetic | cifar
      path: null                    # CIFAR-10 binary directory
      n: 512                        # synthetic train size
      test_n: 256                   # synthetic test size
      classes: 10
      shape: [3, 16, 16]
      margin: 4.0
      per_class: null               # CIFAR first-n-per-class subset of the training split
      test_per_class: null
      augment: false
      mean: [0.4914, 0.4822, 0.4465]
      std: [0.2470, 0.2435, 0.2616]
      seed: 0
    output_dir: runs/default
    teacher_checkpoint: null
    student_checkpoint: null        # float student for fine-tuning
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data import CIFAR_MEAN, CIFAR_STD
from .errors import ConfigurationError


@dataclass
class NetSection:
    teacher: str = "resnet-tiny-20"
    student: str = "resnet-tiny-8"
    group_channels: list = field(default_factory=lambda: [16, 32, 64])
    classes: int = 10
    weight_bits: int = 32
    act_bits: int = 32


@dataclass
class TrainSection:
    mode: str = "end_to_end"
    quant_mode: str = "qat"
    kd_kind: str | None = None
    optimizer: str | None = None
    lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 2
    batch_size: int = 64
    seed: int = 0
    lambda0: float = 1.0
    eta: float = 1.02


@dataclass
class LossSection:
    kind: str = "faqd"
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    qd_alpha: float = 0.5
    fa_mode: str = "auto"
    ffa_k: int = 10
    fa_exact_max_side: int = 32


@dataclass
class DataSection:
    source: str = "synthetic"
    path: str | None = None
    n: int = 512
    test_n: int = 256
    classes: int = 10
    shape: list = field(default_factory=lambda: [3, 16, 16])
    margin: float = 4.0
    per_class: int | None = None
    test_per_class: int | None = None
    augment: bool = False
    mean: list = field(default_factory=lambda: list(CIFAR_MEAN))
    std: list = field(default_factory=lambda: list(CIFAR_STD))
    seed: int = 0


@dataclass
class RunConfig:
    net: NetSection = field(default_factory=NetSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    data: DataSection = field(default_factory=DataSection)
    output_dir: str = "runs/default"
    teacher_checkpoint: str | None = None
    student_checkpoint: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


SECTIONS = {"net": NetSection, "train": TrainSection, "loss": LossSection, "data": DataSection}
LOSS_KINDS = ("faqd", "qd", "label-free")


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config section '{where}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in '{where}': {', '.join(unknown)}; allowed: {', '.join(sorted(known))}")
    return cls(**raw)


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    kw = {}
    for name, cls in SECTIONS.items():
        kw[name] = _build(cls, raw.pop(name, {}) or {}, name)
    top = _build(RunConfig, raw, "top level")
    cfg = replace(top, **kw)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse {path}: {exc}") from None
    return config_from_dict(raw)


def validate(cfg: RunConfig) -> None:
    if cfg.loss.kind not in LOSS_KINDS:
        raise ConfigurationError(f"loss.kind must be one of {LOSS_KINDS}, got '{cfg.loss.kind}'")
    if cfg.data.source not in ("synthetic", "cifar"):
        raise ConfigurationError(f"data.source must be 'synthetic' or 'cifar', got '{cfg.data.source}'")
    if cfg.data.source == "cifar" and not cfg.data.path:
        raise ConfigurationError("data.path is required for the cifar source")
    if len(cfg.data.shape) != 3:
        raise ConfigurationError("data.shape must be [C, H, W]")
    if cfg.data.source == "cifar" and (len(cfg.data.mean) != 3 or len(cfg.data.std) != 3):
        raise ConfigurationError("data.mean/std need one value per CIFAR channel")
