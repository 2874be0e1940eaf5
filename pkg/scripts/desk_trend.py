"""Run the desk-scale CIFAR-10 distillation trend (teacher, then FAQD / QD / label-free students).

Usage:
    python3 scripts/desk_trend.py --cifar-dir /data/cifar-10-batches-bin [--seeds 0 1 2] [--out runs/desk_trend]

Prints one line per variant and exits 0 when the trend holds, 3 otherwise.
"""

import argparse
import logging
import sys

from faqd.experiments import VARIANTS, TrendConfig, run_desk_trend


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cifar-dir", required=True, help="directory with data_batch_*.bin and test_batch.bin")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--per-class", type=int, default=1000)
    p.add_argument("--teacher-epochs", type=int, default=40)
    p.add_argument("--student-epochs", type=int, default=30)
    p.add_argument("--out", default="runs/desk_trend")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = TrendConfig(cifar_dir=args.cifar_dir, per_class=args.per_class, seeds=tuple(args.seeds),
                      teacher_epochs=args.teacher_epochs, student_epochs=args.student_epochs, out_dir=args.out)
    res = run_desk_trend(cfg)
    print(f"teacher: {res.teacher_acc:.4f}")
    for v in VARIANTS:
        print(f"{v}: mean {res.mean(v):.4f} over seeds {list(cfg.seeds)} ({', '.join(f'{a:.4f}' for a in res.accs[v])})")
    for name, ok in res.checks(cfg).items():
        print(f"{name}: {'PASS' if ok else 'FAIL'}")
    return 0 if res.passed(cfg) else 3


if __name__ == "__main__":
    sys.exit(main())
