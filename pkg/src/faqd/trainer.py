"""Distillation and supervised training loops, optimizers and evaluation.

Quantized conv layers keep float shadow weights ``w`` (the trainable
parameter) and forward weights ``u``. The loss gradient taken at ``u`` is
routed straight to ``w``; after every optimizer step ``u`` is recomputed
from the new ``w`` (``Quant(w)`` in QAT mode, the lambda blend in
BinaryRelax mode). In BinaryRelax mode lambda grows by ``eta`` once per
epoch.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import DatasetHandle, batches
from .errors import ConfigurationError, InputError, TrainingError
from .ffa import derive_seed
from .losses import LossConfig, faqd_loss, nll_loss
from .models import Network
from .quantizers import QuantizedLayerState, project

log = logging.getLogger(__name__)

MODES = ("end_to_end", "fine_tune")
QUANT_MODES = ("qat", "binary_relax")
OPTIMIZERS = ("sgd", "adam")
MODE_DEFAULTS = {"end_to_end": ("mse", "sgd"), "fine_tune": ("kl", "adam")}
ALPHA_FLOOR = 1e-4


@dataclass
class TrainConfig:
    """Training hyper-parameters.

    ``kd_kind`` and ``optimizer`` left as None take the mode's defaults
    (end-to-end: MSE + SGD, fine-tuning: KL + Adam). ``lr`` None means
    0.1 for SGD and 1e-3 for Adam.
    """

    mode: str = "end_to_end"
    quant_mode: str = "qat"
    loss: LossConfig = field(default_factory=LossConfig)
    kd_kind: str | None = None
    optimizer: str | None = None
    lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 64
    seed: int = 0
    lambda0: float = 1.0
    eta: float = 1.02

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got '{self.mode}'")
        if self.quant_mode not in QUANT_MODES:
            raise ConfigurationError(f"quant_mode must be one of {QUANT_MODES}, got '{self.quant_mode}'")
        if self.optimizer is not None and self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.lr is not None and self.lr < 0:
            raise ConfigurationError("lr must be >= 0")
        if not self.eta > 1:
            raise ConfigurationError(f"eta must exceed 1, got {self.eta}")

    def resolved(self) -> "TrainConfig":
        """Fill mode defaults, warning when an explicit choice overrides them."""
        kd_default, opt_default = MODE_DEFAULTS[self.mode]
        kd = self.kd_kind or kd_default
        opt = self.optimizer or opt_default
        if kd != kd_default:
            log.warning("mode %s normally uses %s distillation; using %s as configured", self.mode, kd_default, kd)
        if opt != opt_default:
            log.warning("mode %s normally uses %s; using %s as configured", self.mode, opt_default, opt)
        lr = self.lr if self.lr is not None else (0.1 if opt == "sgd" else 1e-3)
        return replace(self, kd_kind=kd, optimizer=opt, lr=lr, loss=replace(self.loss, kd_kind=kd))


# ---------------------------------------------------------------------------
# metrics

CSV_FIELDS = ("epoch", "kd", "fa", "gt", "total", "lambda", "alpha_mean", "alphas", "test_acc")


@dataclass
class EpochRecord:
    epoch: int
    kd: float
    fa: float
    gt: float
    total: float
    lam: float
    alphas: tuple[float, ...]
    test_acc: float
    seconds: float

    def row(self) -> list[str]:
        am = "" if not self.alphas else f"{np.mean(self.alphas):.9g}"
        acc = "" if math.isnan(self.test_acc) else f"{self.test_acc:.6f}"
        return [
            str(self.epoch),
            f"{self.kd:.9g}",
            f"{self.fa:.9g}",
            f"{self.gt:.9g}",
            f"{self.total:.9g}",
            "" if math.isnan(self.lam) else f"{self.lam:.9g}",
            am,
            ";".join(f"{a:.9g}" for a in self.alphas),
            acc,
        ]


@dataclass
class Metrics:
    """One record per finished epoch.

    The CSV columns are ``epoch, kd, fa, gt, total, lambda, alpha_mean,
    alphas, test_acc``. Loss columns are epoch means of the unweighted
    terms; ``lambda`` is the BinaryRelax weight in force during the epoch
    (empty-valued columns mean "not applicable"). Wall-clock seconds are
    kept in memory only so that the CSV is reproducible byte for byte.
    """

    records: list[EpochRecord] = field(default_factory=list)

    def add(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise TrainingError(f"epoch {rec.epoch} recorded after epoch {self.records[-1].epoch}")
        self.records.append(rec)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())

    def same_values(self, other: "Metrics") -> bool:
        return self.to_csv() == other.to_csv()


# ---------------------------------------------------------------------------
# optimizers


def _decays(name: str) -> bool:
    # weight decay on conv and linear weights only
    return name.endswith(".w")


class SGD:
    def __init__(self, params: dict, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and _decays(k):
                g = g + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype, copy=False)


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and _decays(k):
                g = g + self.weight_decay * p.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= upd.astype(p.data.dtype, copy=False)


def make_optimizer(cfg: TrainConfig, params: dict):
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.lr, cfg.momentum, cfg.weight_decay)
    return Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine decay from ``base`` towards zero over ``total`` steps."""
    return 0.5 * base * (1.0 + math.cos(math.pi * step / max(total, 1)))


# ---------------------------------------------------------------------------
# weight updates


def qat_update_step(state: QuantizedLayerState, grad_at_u, lr: float) -> QuantizedLayerState:
    """Plain gradient step on the shadow weights, then re-project.

    ``w' = w - lr * grad_at_u`` and ``u' = Quant(w')`` (QAT) or the
    lambda blend (BinaryRelax).
    """
    g = grad_at_u.data if isinstance(grad_at_u, ad.Tensor) else np.asarray(grad_at_u)
    if g.shape != state.w.shape:
        raise InputError(f"qat_update_step: grad shape {g.shape} != weight shape {state.w.shape}")
    w = (state.w - lr * g).astype(state.w.dtype, copy=False)
    new = replace(state, w=w)
    new.u = project(new)
    return new


def _after_step(net: Network) -> None:
    net.requantize()
    for site in net.act_sites:
        a = net.params.get(f"{site}.alpha")
        if a is not None:
            np.maximum(a.data, ALPHA_FLOOR, out=a.data)


def _grow_lambda(net: Network) -> None:
    for st in net.quant.values():
        if st.mode == "binary_relax":
            st.lam *= st.eta
            st.u = project(st)


def _current_lambda(net: Network) -> float:
    for st in net.quant.values():
        if st.mode == "binary_relax":
            return st.lam
    return float("nan")


def _alphas(net: Network) -> tuple[float, ...]:
    return tuple(float(net.params[f"{s}.alpha"].data) for s in net.act_sites if f"{s}.alpha" in net.params)


def _set_quant_mode(net: Network, cfg: TrainConfig) -> None:
    # the config owns the schedule; a reloaded network keeps its lambda unless the mode changes
    for name, st in net.quant.items():
        if st.mode != cfg.quant_mode or net.origin != "checkpoint":
            st.lam = cfg.lambda0
        st.mode = cfg.quant_mode
        st.eta = cfg.eta
        st.u = project(st)


# ---------------------------------------------------------------------------
# evaluation


def predict(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was = net.training
    net.eval()
    out = []
    try:
        with ad.no_grad():
            for lo in range(0, images.shape[0], batch_size):
                out.append(np.argmax(net(images[lo : lo + batch_size]).data, axis=1))
    finally:
        net.training = was
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(net: Network, data: DatasetHandle, batch_size: int = 256) -> float:
    """Top-1 accuracy in inference mode."""
    if data.n == 0:
        raise InputError("evaluate: empty dataset")
    pred = predict(net, data.images, batch_size)
    return float(np.mean(pred == data.labels_at(slice(None))))


# ---------------------------------------------------------------------------
# training loops


def _check_finite(breakdown: dict, epoch: int, batch: int) -> None:
    for term in ("kd", "fa", "gt", "total"):
        if not np.isfinite(breakdown[term]):
            raise TrainingError(f"non-finite {term} loss at epoch {epoch}, batch {batch}: {breakdown}")


def _warmup_alphas(net: Network, data: DatasetHandle, cfg: TrainConfig) -> None:
    if net.spec.act_bits == 32 or len(net.calibrated) == len(net.act_sites):
        return
    x, _ = next(batches(data, cfg.batch_size, cfg.seed, drop_labels=True))
    net.calibrate_activations(x)


def distill_train(
    teacher: Network,
    student: Network,
    data: DatasetHandle,
    cfg: TrainConfig,
    test_data: DatasetHandle | None = None,
    csv_path=None,
    on_step=None,
) -> tuple[Network, Metrics]:
    """Train ``student`` against the frozen ``teacher`` with the FAQD objective.

    Args:
        data: training set; with ``cfg.loss.label_free`` its labels are never read.
        test_data: optional labeled set evaluated after every epoch.
        csv_path: where to write the metrics CSV (one row per epoch).
        on_step: optional callback ``(student, epoch, batch)`` after each update.

    Returns:
        The trained student (updated in place) and its metrics.
    """
    cfg = cfg.resolved()
    if teacher.spec.tap_count != student.spec.tap_count:
        raise ConfigurationError(
            f"teacher has {teacher.spec.tap_count} taps, student has {student.spec.tap_count}"
        )
    if cfg.loss.tap_count != student.spec.tap_count:
        cfg = replace(cfg, loss=replace(cfg.loss, tap_count=student.spec.tap_count))
    if cfg.mode == "fine_tune" and student.origin != "checkpoint":
        log.warning("fine-tuning a student that was not loaded from a float checkpoint")
    label_free = cfg.loss.label_free

    teacher.eval()
    _set_quant_mode(student, cfg)
    _warmup_alphas(student, data, cfg)
    opt = make_optimizer(cfg, student.params)
    steps_per_epoch = max(1, math.ceil(data.n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    metrics = Metrics()
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        student.train()
        sums = {"kd": 0.0, "fa": 0.0, "gt": 0.0, "total": 0.0}
        nb = 0
        lam = _current_lambda(student)
        for b, (x, y) in enumerate(batches(data, cfg.batch_size, cfg.seed, drop_labels=label_free, epoch=epoch)):
            with ad.no_grad():
                t_logits, t_taps = teacher.forward_with_taps(x)
            s_logits, s_taps = student.forward_with_taps(x)
            total, br = faqd_loss(
                t_logits, s_logits, t_taps, s_taps, y, cfg.loss, sketch_seed=derive_seed(cfg.seed, epoch, b)
            )
            _check_finite(br, epoch, b)
            student.zero_grad()
            total.backward()
            opt.step(cosine_lr(cfg.lr, step, total_steps))
            _after_step(student)
            step += 1
            for k in sums:
                sums[k] += br[k]
            nb += 1
            if on_step is not None:
                on_step(student, epoch, b)
        acc = evaluate(student, test_data) if test_data is not None else float("nan")
        metrics.add(
            EpochRecord(
                epoch=epoch,
                kd=sums["kd"] / nb,
                fa=sums["fa"] / nb,
                gt=sums["gt"] / nb,
                total=sums["total"] / nb,
                lam=lam,
                alphas=_alphas(student),
                test_acc=acc,
                seconds=time.perf_counter() - t0,
            )
        )
        log.info("epoch %d: total %.5g (kd %.5g, fa %.5g, gt %.5g) acc %s", epoch, sums["total"] / nb,
                 sums["kd"] / nb, sums["fa"] / nb, sums["gt"] / nb, f"{acc:.4f}")
        _grow_lambda(student)
    student.eval()
    if csv_path is not None:
        metrics.write_csv(csv_path)
    return student, metrics


def train_supervised(
    net: Network,
    data: DatasetHandle,
    cfg: TrainConfig,
    test_data: DatasetHandle | None = None,
    csv_path=None,
) -> tuple[Network, Metrics]:
    """Plain cross-entropy training (used for float teachers and students)."""
    cfg = cfg.resolved()
    _warmup_alphas(net, data, cfg)
    opt = make_optimizer(cfg, net.params)
    steps_per_epoch = max(1, math.ceil(data.n / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    metrics = Metrics()
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        net.train()
        loss_sum, nb = 0.0, 0
        lam = _current_lambda(net)
        for b, (x, y) in enumerate(batches(data, cfg.batch_size, cfg.seed, epoch=epoch)):
            loss = nll_loss(net(x), y)
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite gt loss at epoch {epoch}, batch {b}")
            net.zero_grad()
            loss.backward()
            opt.step(cosine_lr(cfg.lr, step, total_steps))
            _after_step(net)
            step += 1
            loss_sum += loss.item()
            nb += 1
        acc = evaluate(net, test_data) if test_data is not None else float("nan")
        metrics.add(EpochRecord(epoch, 0.0, 0.0, loss_sum / nb, loss_sum / nb, lam, _alphas(net), acc,
                                time.perf_counter() - t0))
        log.info("epoch %d: nll %.5g acc %s", epoch, loss_sum / nb, f"{acc:.4f}")
        _grow_lambda(net)
    net.eval()
    if csv_path is not None:
        metrics.write_csv(csv_path)
    return net, metrics
