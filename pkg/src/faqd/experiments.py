"""Desk-scale distillation trend on a CIFAR-10 subset.

Trains a float ``resnet-tiny-20`` teacher on the first 1000 training images
of each class, then distills 4-bit ``resnet-tiny-8`` students end to end with
three objectives (FAQD, QD and label-free FAQD) over several seeds and
compares mean test accuracies.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import cifar_split, first_n_per_class
from .losses import LossConfig, qd_config
from .models import NetSpec, build_network, save_checkpoint
from .trainer import TrainConfig, distill_train, evaluate, train_supervised

log = logging.getLogger(__name__)

VARIANTS = ("faqd", "qd", "label-free")


@dataclass
class TrendConfig:
    cifar_dir: str
    per_class: int = 1000
    seeds: tuple[int, ...] = (0, 1, 2)
    teacher_epochs: int = 40
    student_epochs: int = 30
    weight_bits: int = 4
    batch_size: int = 128
    teacher_min_acc: float = 0.85
    faqd_margin: float = 0.002  # 0.2 accuracy points
    label_free_margin: float = 0.01  # 1.0 point
    out_dir: str = "runs/desk_trend"


@dataclass
class TrendResult:
    teacher_acc: float
    accs: dict[str, list[float]] = field(default_factory=dict)

    def mean(self, variant: str) -> float:
        return float(np.mean(self.accs[variant]))

    def checks(self, cfg: TrendConfig) -> dict[str, bool]:
        return {
            "teacher": self.teacher_acc >= cfg.teacher_min_acc,
            "faqd_vs_qd": self.mean("faqd") >= self.mean("qd") - cfg.faqd_margin,
            "label_free_vs_qd": self.mean("label-free") >= self.mean("qd") - cfg.label_free_margin,
        }

    def passed(self, cfg: TrendConfig) -> bool:
        return all(self.checks(cfg).values())


def variant_loss(variant: str) -> LossConfig:
    if variant == "faqd":
        return LossConfig()
    if variant == "qd":
        return qd_config(0.5, kd_kind="kl")
    return LossConfig(label_free=True)


def run_desk_trend(cfg: TrendConfig) -> TrendResult:
    """Run the full experiment; raises FileNotFoundError when the CIFAR binaries are absent."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = first_n_per_class(cifar_split(cfg.cifar_dir, train=True), cfg.per_class).with_augment(True)
    test = cifar_split(cfg.cifar_dir, train=False)

    teacher = build_network(NetSpec.named("resnet-tiny-20"), seed=0)
    tcfg = TrainConfig(epochs=cfg.teacher_epochs, batch_size=cfg.batch_size, seed=0)
    train_supervised(teacher, train, tcfg, test_data=test, csv_path=out / "teacher_metrics.csv")
    save_checkpoint(teacher, out / "teacher.ckpt")
    result = TrendResult(teacher_acc=evaluate(teacher, test))
    log.info("teacher accuracy %.4f", result.teacher_acc)

    for variant in VARIANTS:
        result.accs[variant] = []
        for seed in cfg.seeds:
            student = build_network(NetSpec.named("resnet-tiny-8", weight_bits=cfg.weight_bits), seed=seed + 1)
            scfg = TrainConfig(epochs=cfg.student_epochs, batch_size=cfg.batch_size, seed=seed,
                               loss=variant_loss(variant), kd_kind=variant_loss(variant).kd_kind)
            data = train.without_labels() if variant == "label-free" else train
            distill_train(teacher, student, data, scfg, test_data=test,
                          csv_path=out / f"student_{variant}_seed{seed}.csv")
            acc = evaluate(student, test)
            result.accs[variant].append(acc)
            log.info("%s seed %d: accuracy %.4f", variant, seed, acc)

    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "test_acc"])
        w.writerow(["teacher", 0, f"{result.teacher_acc:.6f}"])
        for variant, accs in result.accs.items():
            for seed, a in zip(cfg.seeds, accs):
                w.writerow([variant, seed, f"{a:.6f}"])
    return result
