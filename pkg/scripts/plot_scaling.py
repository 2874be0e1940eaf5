"""Log-log plot of exact vs sketched affinity-loss time from a bench-ffa / verify scaling CSV.

Usage:
    faqd bench-ffa --out runs/bench_ffa.csv
    python3 scripts/plot_scaling.py runs/bench_ffa.csv runs/bench_ffa.png

Needs matplotlib (``pip install -e .[plots]``).
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from faqd.verify import VerifyReport, loglog_slope, scaling_medians  # noqa: E402


def main(csv_path: str, png_path: str) -> None:
    rep = VerifyReport.from_csv(csv_path)
    fig, ax = plt.subplots(figsize=(5, 4))
    for method, label in (("exact", "exact FA"), ("ffa", f"FFA (k={rep.params['k']})")):
        med = scaling_medians(rep.trials, method)
        hs, ts = list(med), list(med.values())
        ax.loglog(hs, ts, "o-", label=f"{label}, slope {loglog_slope(hs, ts):.2f}")
    ax.set_xlabel("feature map side H (= W)")
    ax.set_ylabel("median seconds per map")
    ax.set_title(f"C = {rep.params['C']}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    print(f"wrote {png_path}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
