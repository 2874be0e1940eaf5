"""Command-line interface: ``faqd train-teacher | distill | bench-ffa | verify``.

Exit codes: 0 success or pass, 1 usage or configuration error, 2 runtime
error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, config_from_dict, load_config, validate
from .data import (
    DatasetHandle,
    LabelAccessCounter,
    cifar_split,
    first_n_per_class,
    synthetic_dataset,
)
from .errors import ConfigurationError, FAQDError, ParameterError
from .losses import LossConfig, qd_config
from .models import NetSpec, build_network, load_checkpoint, quantize_network, save_checkpoint
from .trainer import TrainConfig, distill_train, evaluate, train_supervised
from . import verify as V

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3
log = logging.getLogger("faqd")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors share the configuration exit code
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# building blocks


def load_data(cfg: RunConfig) -> tuple[DatasetHandle, DatasetHandle]:
    d = cfg.data
    if d.source == "synthetic":
        full = synthetic_dataset(d.seed, d.n + d.test_n, d.classes, tuple(d.shape), margin=d.margin)
        train = full.subset(range(d.n))
        test = full.subset(range(d.n, d.n + d.test_n))
    else:
        train = cifar_split(d.path, train=True, mean=d.mean, std=d.std)
        test = cifar_split(d.path, train=False, mean=d.mean, std=d.std)
        if d.per_class:
            train = first_n_per_class(train, d.per_class)
        if d.test_per_class:
            test = first_n_per_class(test, d.test_per_class)
    return train.with_augment(d.augment), test


def net_spec(cfg: RunConfig, role: str, weight_bits: int = 32, act_bits: int = 32) -> NetSpec:
    name = cfg.net.teacher if role == "teacher" else cfg.net.student
    return NetSpec.named(
        name,
        group_channels=tuple(cfg.net.group_channels),
        classes=cfg.net.classes,
        in_channels=cfg.data.shape[0],
        weight_bits=weight_bits,
        act_bits=act_bits,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    t, l = cfg.train, cfg.loss
    common = dict(fa_mode=l.fa_mode, ffa_k=l.ffa_k, fa_exact_max_side=l.fa_exact_max_side,
                  tap_count=len(cfg.net.group_channels))
    if l.kind == "qd":
        # QD uses KL unless the config names a divergence explicitly
        loss = qd_config(l.qd_alpha, kd_kind=t.kd_kind or "kl", **common)
        kd_kind = t.kd_kind or "kl"
    else:
        loss = LossConfig(alpha=l.alpha, beta=l.beta, gamma=l.gamma, label_free=(l.kind == "label-free"), **common)
        kd_kind = t.kd_kind
    return TrainConfig(
        mode=t.mode, quant_mode=t.quant_mode, loss=loss, kd_kind=kd_kind, optimizer=t.optimizer, lr=t.lr,
        momentum=t.momentum, weight_decay=t.weight_decay, epochs=t.epochs, batch_size=t.batch_size,
        seed=t.seed, lambda0=t.lambda0, eta=t.eta,
    )


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    train, net, loss = cfg.train, cfg.net, cfg.loss
    top = {}
    if getattr(args, "epochs", None) is not None:
        train = replace(train, epochs=args.epochs)
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "batch_size", None) is not None:
        train = replace(train, batch_size=args.batch_size)
    if getattr(args, "lr", None) is not None:
        train = replace(train, lr=args.lr)
    if getattr(args, "mode", None) is not None:
        train = replace(train, mode={"end2end": "end_to_end", "finetune": "fine_tune"}[args.mode])
    if getattr(args, "quant_mode", None) is not None:
        train = replace(train, quant_mode=args.quant_mode)
    if getattr(args, "bits", None) is not None:
        net = replace(net, weight_bits=args.bits)
    if getattr(args, "act_bits", None) is not None:
        net = replace(net, act_bits=args.act_bits)
    if getattr(args, "loss", None) is not None:
        loss = replace(loss, kind=args.loss)
    if getattr(args, "ffa_k", None) is not None:
        loss = replace(loss, ffa_k=args.ffa_k)
    if getattr(args, "fa_mode", None) is not None:
        loss = replace(loss, fa_mode=args.fa_mode)
    if getattr(args, "out", None) is not None:
        top["output_dir"] = args.out
    if getattr(args, "teacher", None) is not None:
        top["teacher_checkpoint"] = args.teacher
    if getattr(args, "student_init", None) is not None:
        top["student_checkpoint"] = args.student_init
    out = replace(cfg, train=train, net=net, loss=loss, **top)
    validate(out)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    return _apply_overrides(cfg, args)


# ---------------------------------------------------------------------------
# commands


def cmd_train_teacher(cfg: RunConfig) -> dict:
    if cfg.net.weight_bits != 32 or cfg.net.act_bits != 32:
        raise ConfigurationError("teacher must be float: net.weight_bits and net.act_bits must be 32")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg)
    net = build_network(net_spec(cfg, "teacher"), seed=cfg.train.seed)
    tcfg = replace(train_config(cfg), loss=LossConfig())
    net, metrics = train_supervised(net, train, tcfg, test_data=test, csv_path=out / "teacher_metrics.csv")
    ckpt = out / "teacher.ckpt"
    save_checkpoint(net, ckpt)
    acc = evaluate(net, test)
    print(f"teacher {net.spec.name}: test accuracy {acc:.4f}; checkpoint {ckpt}")
    return {"accuracy": acc, "checkpoint": str(ckpt), "metrics": metrics}


def cmd_distill(cfg: RunConfig) -> dict:
    if not cfg.teacher_checkpoint:
        raise ConfigurationError("distill needs a teacher checkpoint (--teacher or teacher_checkpoint)")
    if not Path(cfg.teacher_checkpoint).exists():
        raise ConfigurationError(f"teacher checkpoint not found: {cfg.teacher_checkpoint}")
    teacher = load_checkpoint(cfg.teacher_checkpoint)
    tcfg = train_config(cfg)
    bits, abits = cfg.net.weight_bits, cfg.net.act_bits
    if tcfg.mode == "fine_tune":
        if not cfg.student_checkpoint or not Path(cfg.student_checkpoint).exists():
            raise ConfigurationError("finetune mode needs a float student checkpoint (--student-init)")
        base = load_checkpoint(cfg.student_checkpoint)
        if base.spec.weight_bits != 32:
            raise ConfigurationError("the student checkpoint for fine-tuning must be a float network")
        student = quantize_network(base, bits, abits, tcfg.quant_mode, tcfg.lambda0, tcfg.eta)
    else:
        student = build_network(net_spec(cfg, "student", bits, abits), seed=tcfg.seed + 1,
                                quant_mode=tcfg.quant_mode, lambda0=tcfg.lambda0, eta=tcfg.eta)
    if teacher.spec.tap_count != student.spec.tap_count:
        raise ConfigurationError(f"tap mismatch: teacher has {teacher.spec.tap_count}, student {student.spec.tap_count}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_data(cfg)
    counted = LabelAccessCounter(train)
    student, metrics = distill_train(teacher, student, counted, tcfg, test_data=test,
                                     csv_path=out / "student_metrics.csv")
    ckpt = out / "student.ckpt"
    save_checkpoint(student, ckpt)
    acc = evaluate(student, test)
    print(f"student {student.spec.name} W{bits}A{abits} ({cfg.loss.kind}): test accuracy {acc:.4f}; "
          f"training label reads {counted.label_reads}; checkpoint {ckpt}")
    return {"accuracy": acc, "checkpoint": str(ckpt), "metrics": metrics, "label_reads": counted.label_reads}


def _geometric(lo: int, hi: int) -> list[int]:
    if lo < 1 or hi < lo:
        raise ParameterError(f"need 1 <= hmin <= hmax, got {lo}, {hi}")
    out, h = [], lo
    while h <= hi:
        out.append(h)
        h *= 2
    return out


def _finish_report(report: V.VerifyReport, out: str | None, name: str) -> int:
    path = Path(out) if out else Path("runs") / f"{name}.csv"
    report.write_csv(path)
    print(report.verdict_line())
    print(f"report: {path}")
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_bench_ffa(args) -> int:
    r = V.run_scaling_bench(_geometric(args.hmin, args.hmax), C=args.c, k=args.k, repeats=args.repeats, seed=args.seed)
    return _finish_report(r, args.out, "bench_ffa")


def cmd_verify(args) -> int:
    suite = args.suite
    if suite not in V.SUITES:
        raise UsageError(f"unknown suite '{suite}'; valid suites: {', '.join(V.SUITES)}")
    seed = args.seed if args.seed is not None else 0
    if suite == "jl":
        r = V.run_jl_check(args.n or 64, args.d, args.epsilon, args.trials or 100, seed)
    elif suite == "unbiased":
        r = V.run_unbiasedness(args.n or 64, args.c or 8, args.samples, seed)
    elif suite == "tail":
        r = V.run_tail_decay(args.n or 64, args.c or 8, args.tail_epsilon, args.k_list, args.trials or 4000, seed)
    elif suite == "scaling":
        r = V.run_scaling_bench(_geometric(args.hmin, args.hmax), C=args.c or 16, k=1,
                                repeats=args.repeats, seed=seed)
    else:
        r = V.run_argmin_demo(args.n or 16, args.k_list, seed)
    return _finish_report(r, args.out, f"verify_{suite}")


# ---------------------------------------------------------------------------
# parser


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="faqd", description="Feature-affinity assisted distillation for quantized networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log debug details")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def run_flags(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--out", help="output directory (created if missing)")
        sp.add_argument("--epochs", type=int, help="training epochs")
        sp.add_argument("--batch-size", type=int, help="mini-batch size")
        sp.add_argument("--lr", type=float, help="base learning rate")
        sp.add_argument("--seed", type=int, help="global seed")

    t = sub.add_parser("train-teacher", help="train a float teacher network")
    run_flags(t)

    d = sub.add_parser("distill", help="distill a quantized student from a teacher")
    run_flags(d)
    d.add_argument("--teacher", help="teacher checkpoint")
    d.add_argument("--student-init", help="float student checkpoint (finetune mode)")
    d.add_argument("--bits", type=int, choices=(1, 2, 4, 32), help="student weight bits")
    d.add_argument("--act-bits", type=int, choices=(1, 2, 4, 32), help="student activation bits")
    d.add_argument("--mode", choices=("end2end", "finetune"), help="training from scratch or from a float student")
    d.add_argument("--quant-mode", choices=("qat", "binary_relax"), help="weight projection scheme")
    d.add_argument("--loss", choices=("faqd", "qd", "label-free"), help="training objective")
    d.add_argument("--ffa-k", type=int, help="sketch columns for the fast affinity loss")
    d.add_argument("--fa-mode", choices=("auto", "exact", "fast"), help="affinity loss evaluation")

    b = sub.add_parser("bench-ffa", help="time exact vs sketched affinity loss over map sizes")
    b.add_argument("--hmin", type=int, default=8, help="smallest map side (default 8)")
    b.add_argument("--hmax", type=int, default=128, help="largest map side (default 128)")
    b.add_argument("--c", type=int, default=16, help="channels (default 16)")
    b.add_argument("--k", type=int, default=1, help="sketch columns (default 1)")
    b.add_argument("--repeats", type=int, default=5, help="timed repeats per size (>= 5)")
    b.add_argument("--seed", type=int, default=0, help="seed (default 0)")
    b.add_argument("--out", help="report CSV path")

    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("suite", help=f"one of: {', '.join(V.SUITES)}")
    v.add_argument("--n", type=int, help="vectors (jl), pixels N (unbiased, tail) or matrix size (argmin)")
    v.add_argument("--d", type=int, default=512, help="ambient dimension for jl (default 512)")
    v.add_argument("--epsilon", type=float, default=0.5, help="distortion bound for jl (default 0.5)")
    v.add_argument("--tail-epsilon", type=float, help="tail threshold (default: k=1 30th percentile)")
    v.add_argument("--c", type=int, help="channels (default 8; 16 for scaling)")
    v.add_argument("--samples", type=int, default=10_000, help="draws for unbiased (default 10000)")
    v.add_argument("--trials", type=int, help="trials for jl and tail")
    v.add_argument("--k-list", type=_int_list, default=[1, 2, 4, 8, 16, 32, 64], help="comma-separated k values")
    v.add_argument("--hmin", type=int, default=8, help="smallest map side for scaling")
    v.add_argument("--hmax", type=int, default=128, help="largest map side for scaling")
    v.add_argument("--repeats", type=int, default=5, help="timed repeats for scaling")
    v.add_argument("--seed", type=int, help="seed (default 0)")
    v.add_argument("--out", help="report CSV path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        if args.command == "train-teacher":
            cmd_train_teacher(_config(args))
            return EXIT_OK
        if args.command == "distill":
            cmd_distill(_config(args))
            return EXIT_OK
        if args.command == "bench-ffa":
            return cmd_bench_ffa(args)
        return cmd_verify(args)
    except (UsageError, ConfigurationError, ParameterError) as exc:
        print(f"faqd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FAQDError, OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"faqd: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
