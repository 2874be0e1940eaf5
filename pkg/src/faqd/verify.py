"""Empirical checks of the estimator and projection theory, and the scaling benchmark.

Every suite returns a :class:`VerifyReport`: the parameters, thresholds and
raw per-trial records. The verdict and summary statistics are recomputed
from those records by a per-suite decision function, so a report loaded
back from CSV reaches the same verdict.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ParameterError
from .ffa import (
    exact_multiplies,
    fa_exact_f64,
    fa_loss_value,
    ffa_column_values,
    ffa_loss_value,
    ffa_multiplies,
    random_normalized_pair,
)

SUITES = ("jl", "unbiased", "tail", "scaling", "argmin")


@dataclass
class VerifyReport:
    suite: str
    params: dict
    thresholds: dict
    trials: list[dict]
    csv_path: str | None = None
    summary: dict = field(default_factory=dict)
    passed: bool = False
    note: str = ""

    def __post_init__(self):
        self.decide()

    def decide(self) -> bool:
        """Recompute verdict and summary from the trials and thresholds."""
        if self.suite not in DECIDERS:
            raise ParameterError(f"unknown suite '{self.suite}'; valid: {SUITES}")
        self.passed, self.summary, self.note = DECIDERS[self.suite](self.params, self.thresholds, self.trials)
        return self.passed

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    # CSV: one row per trial; suite, p_<param>..., t_<threshold>..., trial columns, verdict.
    # Cells are JSON so that types survive the round trip.

    def to_csv(self) -> str:
        pcols = [f"p_{k}" for k in self.params]
        tcols = [f"t_{k}" for k in self.thresholds]
        trial_cols: list[str] = []
        for t in self.trials:
            trial_cols += [k for k in t if k not in trial_cols]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["suite", *pcols, *tcols, *trial_cols, "verdict"])
        fixed = [self.suite] + [json.dumps(v) for v in self.params.values()] + [json.dumps(v) for v in self.thresholds.values()]
        rows = self.trials or [{}]
        for t in rows:
            w.writerow(fixed + [json.dumps(t[c]) if c in t else "" for c in trial_cols] + [self.verdict])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        self.csv_path = str(path)
        return path

    @classmethod
    def from_csv(cls, text_or_path) -> "VerifyReport":
        text = text_or_path
        if isinstance(text_or_path, Path) or (isinstance(text_or_path, str) and "\n" not in text_or_path):
            text = Path(text_or_path).read_text()
        rows = list(csv.reader(io.StringIO(text)))
        if len(rows) < 2 or rows[0][0] != "suite" or rows[0][-1] != "verdict":
            raise FormatError("not a verify report CSV")
        header = rows[0]
        first = rows[1]
        params, thresholds, trial_cols = {}, {}, []
        for i, col in enumerate(header[1:-1], start=1):
            if col.startswith("p_"):
                params[col[2:]] = json.loads(first[i])
            elif col.startswith("t_"):
                thresholds[col[2:]] = json.loads(first[i])
            else:
                trial_cols.append((i, col))
        trials = []
        for r in rows[1:]:
            t = {c: json.loads(r[i]) for i, c in trial_cols if r[i] != ""}
            if t:
                trials.append(t)
        return cls(first[0], params, thresholds, trials)

    def verdict_line(self) -> str:
        stats = ", ".join(f"{k}={_fmt(v)}" for k, v in self.summary.items())
        return f"{self.suite}: {self.verdict} ({stats}){' - ' + self.note if self.note else ''}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def loglog_slope(x, y) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    return float(np.polyfit(lx, ly, 1)[0])


# ---------------------------------------------------------------------------
# angular Johnson-Lindenstrauss check


def jl_dimension(n: int, epsilon: float) -> int:
    """Smallest integer strictly above ``16 ln(n) / eps^2``."""
    return int(math.floor(16.0 * math.log(n) / epsilon**2)) + 1


def _cosines(X: np.ndarray) -> np.ndarray:
    Xn = X / np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-300)
    return Xn @ Xn.T


def run_jl_check(
    n: int = 64,
    d: int = 512,
    epsilon: float = 0.5,
    trials: int = 100,
    seed: int = 0,
    vectors: np.ndarray | None = None,
    projection: Callable[[np.random.Generator], np.ndarray] | None = None,
) -> VerifyReport:
    """Project ``n`` random unit vectors of R^d with a scaled Gaussian map and measure cosine distortion.

    Args:
        vectors: fixed ``(n, d)`` inputs instead of fresh random unit vectors per trial.
        projection: replaces the Gaussian ``(k, d)`` map; receives the trial's generator.
    """
    k = jl_dimension(n, epsilon)
    if projection is None and k >= d:
        raise ParameterError(f"jl: target dimension k={k} must be < d={d} (increase d or epsilon)")
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, 1)
    out = []
    for t in range(trials):
        if vectors is None:
            X = rng.standard_normal((n, d))
            X /= np.linalg.norm(X, axis=1, keepdims=True)
        else:
            X = np.asarray(vectors, dtype=np.float64)
        T = projection(rng) if projection is not None else rng.standard_normal((k, d)) / math.sqrt(k)
        dist = np.abs(_cosines(X @ T.T) - _cosines(X))[iu]
        out.append(
            {
                "trial": t,
                "max_distortion": float(dist.max()) if dist.size else 0.0,
                "pairs_within": int(np.sum(dist <= epsilon)),
                "pairs": int(dist.size),
            }
        )
    return VerifyReport("jl", {"n": n, "d": d, "epsilon": epsilon, "k": k, "trials": trials, "seed": seed},
                        {"median_max": epsilon, "pair_fraction": 0.9}, out)


def _decide_jl(params, thr, trials):
    if not trials:
        return False, {}, "no trials"
    med = float(np.median([t["max_distortion"] for t in trials]))
    pairs = sum(t["pairs"] for t in trials)
    frac = sum(t["pairs_within"] for t in trials) / pairs if pairs else 1.0
    ok = med <= thr["median_max"] and frac >= thr["pair_fraction"]
    return ok, {"k": params["k"], "median_max_distortion": med, "pair_fraction_within": frac}, ""


# ---------------------------------------------------------------------------
# unbiasedness of the single-sketch estimator


def _pair(N: int, C: int, seed: int, identical: bool):
    rng = np.random.default_rng(seed)
    ft, fs = random_normalized_pair(N, C, C, rng)
    if identical:
        fs = ft.copy()
    return ft, fs, rng


def _column_draws(ft, fs, rng, count: int, chunk: int = 4096) -> np.ndarray:
    out = []
    N = ft.shape[0]
    for lo in range(0, count, chunk):
        m = min(chunk, count - lo)
        out.append(ffa_column_values(ft, fs, rng.standard_normal((N, m))))
    return np.concatenate(out)


def run_unbiasedness(N: int = 64, C: int = 8, samples: int = 10_000, seed: int = 0, identical: bool = False) -> VerifyReport:
    """Compare the mean of single-vector FFA draws with the exact FA loss on a fixed random pair."""
    if samples < 1000:
        raise ParameterError(f"unbiasedness check needs samples >= 1000, got {samples}")
    ft, fs, rng = _pair(N, C, seed, identical)
    exact = fa_exact_f64(ft, fs)
    draws = _column_draws(ft, fs, rng, samples)
    trials = [{"sample": i, "value": float(v)} for i, v in enumerate(draws)]
    return VerifyReport("unbiased", {"N": N, "C": C, "samples": samples, "seed": seed, "exact": exact},
                        {"stderr_multiple": 3.0}, trials)


def _decide_unbiased(params, thr, trials):
    v = np.array([t["value"] for t in trials], dtype=np.float64)
    if v.size < 2:
        return False, {}, "too few samples"
    mean = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size))
    gap = abs(mean - params["exact"])
    ok = gap <= thr["stderr_multiple"] * se
    return ok, {"exact": params["exact"], "mean": mean, "stderr": se, "gap_in_stderr": gap / se if se else 0.0}, ""


# ---------------------------------------------------------------------------
# variance and tail decay in k


def run_tail_decay(
    N: int = 64,
    C: int = 8,
    epsilon: float | None = None,
    k_list=(1, 2, 4, 8, 16, 32, 64),
    trials: int = 4000,
    seed: int = 0,
) -> VerifyReport:
    """Deviation ``|L_k - L|`` of the k-column estimator over repeated fresh sketches.

    With ``epsilon`` None the tail threshold is the 30th percentile of the
    k = 1 deviations.
    """
    k_list = [int(k) for k in k_list]
    if len(k_list) < 4 or any(b <= a for a, b in zip(k_list, k_list[1:])) or k_list[0] < 1:
        raise ParameterError(f"k_list must be strictly increasing positive ints with >= 4 entries, got {k_list}")
    ft, fs, rng = _pair(N, C, seed, False)
    exact = fa_exact_f64(ft, fs)
    estimates = {}
    for k in k_list:
        cols = _column_draws(ft, fs, rng, k * trials)
        estimates[k] = cols.reshape(trials, k).mean(axis=1)
    if epsilon is None:
        epsilon = float(np.percentile(np.abs(estimates[k_list[0]] - exact), 30))
    rows = [{"k": k, "trial": i, "estimate": float(e)} for k in k_list for i, e in enumerate(estimates[k])]
    return VerifyReport(
        "tail",
        {"N": N, "C": C, "epsilon": epsilon, "k_list": k_list, "trials": trials, "seed": seed, "exact": exact},
        {"slope_min": -1.2, "slope_max": -0.8},
        rows,
    )


def _decide_tail(params, thr, trials):
    ks = params["k_list"]
    by_k = {k: [] for k in ks}
    for t in trials:
        by_k[t["k"]].append(t["estimate"])
    est = {k: np.asarray(v, dtype=np.float64) for k, v in by_k.items()}
    dev = {k: np.abs(v - params["exact"]) for k, v in est.items()}
    tails = [float(np.mean(dev[k] > params["epsilon"])) for k in ks]
    variances = [float(np.var(est[k], ddof=1)) for k in ks]
    summary = {"tails": tails, "variances": variances}
    if all(t == 0 for t in tails):
        return False, summary, "vacuous epsilon, retune"
    if any(v <= 0 for v in variances):
        summary["variance_slope"] = float("nan")
        return False, summary, "zero estimator variance"
    slope = loglog_slope(ks, variances)
    positive = [(k, t) for k, t in zip(ks, tails) if t > 0]
    summary["variance_slope"] = slope
    summary["tail_slope"] = loglog_slope(*zip(*positive)) if len(positive) >= 2 else float("nan")
    monotone = all(b <= a for a, b in zip(tails, tails[1:]))
    summary["tails_nonincreasing"] = monotone
    ok = thr["slope_min"] <= slope <= thr["slope_max"] and monotone
    return ok, summary, ""


# ---------------------------------------------------------------------------
# timing and multiply counts versus map size


def _median_time(fn, repeats: int) -> tuple[float, list[float]]:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), times


def run_scaling_bench(
    H_list=(8, 16, 32, 64, 128),
    C: int = 16,
    k: int = 1,
    repeats: int = 5,
    seed: int = 0,
    exact_batch: int = 2,
    ffa_batch: int = 128,
) -> VerifyReport:
    """Per-map wall-clock and multiply counts of exact and sketched FA versus side length H.

    Each timed call processes a batch of maps (``exact_batch`` / ``ffa_batch``)
    and the time is divided by the batch size, which keeps interpreter
    overhead from flattening the small-H end of the curves.
    """
    if repeats < 5:
        raise ParameterError(f"scaling bench needs repeats >= 5 for stable medians, got {repeats}")
    H_list = [int(h) for h in H_list]
    if len(H_list) < 2:
        raise ParameterError("scaling bench needs at least two sizes")
    rng = np.random.default_rng(seed)
    rows = []
    for H in H_list:
        N = H * H
        pairs = [random_normalized_pair(N, C, C, rng) for _ in range(max(exact_batch, 1))]
        ft_e = np.stack([p[0] for p in pairs[:exact_batch]])
        fs_e = np.stack([p[1] for p in pairs[:exact_batch]])
        ft_f = np.stack([pairs[i % len(pairs)][0] for i in range(ffa_batch)])
        fs_f = np.stack([pairs[i % len(pairs)][1] for i in range(ffa_batch)])
        Z = rng.standard_normal((N, k)).astype(np.float32)
        with ad.count_multiplies() as ce:
            fa_loss_value(ft_e[:1], fs_e[:1])
        with ad.count_multiplies() as cf:
            ffa_loss_value(ft_f[:1], fs_f[:1], Z)
        fa_loss_value(ft_e, fs_e)  # warm-up
        ffa_loss_value(ft_f, fs_f, Z)
        _, te = _median_time(lambda: fa_loss_value(ft_e, fs_e), repeats)
        _, tf = _median_time(lambda: ffa_loss_value(ft_f, fs_f, Z), repeats)
        for r in range(repeats):
            rows.append({"method": "exact", "H": H, "repeat": r, "seconds": te[r] / exact_batch,
                         "multiplies": ce.count, "expected_multiplies": exact_multiplies(N, C, C)})
            rows.append({"method": "ffa", "H": H, "repeat": r, "seconds": tf[r] / ffa_batch,
                         "multiplies": cf.count, "expected_multiplies": ffa_multiplies(N, C, C, k)})
    return VerifyReport(
        "scaling",
        {"H_list": H_list, "C": C, "k": k, "repeats": repeats, "seed": seed,
         "exact_batch": exact_batch, "ffa_batch": ffa_batch},
        {"exact_min": 3.5, "exact_max": 4.5, "ffa_min": 1.5, "ffa_max": 2.5},
        rows,
    )


def scaling_medians(trials: list[dict], method: str) -> dict[int, float]:
    per: dict[int, list[float]] = {}
    for t in trials:
        if t["method"] == method:
            per.setdefault(t["H"], []).append(t["seconds"])
    return {h: float(np.median(v)) for h, v in sorted(per.items())}


def _decide_scaling(params, thr, trials):
    me, mf = scaling_medians(trials, "exact"), scaling_medians(trials, "ffa")
    se = loglog_slope(list(me), list(me.values()))
    sf = loglog_slope(list(mf), list(mf.values()))
    counts_ok = all(t["multiplies"] == t["expected_multiplies"] for t in trials)
    ok = thr["exact_min"] <= se <= thr["exact_max"] and thr["ffa_min"] <= sf <= thr["ffa_max"] and counts_ok
    return ok, {"exact_slope": se, "ffa_slope": sf, "counts_exact": counts_ok}, ""


# ---------------------------------------------------------------------------
# convex argmin demo


def run_argmin_demo(
    n: int = 16,
    k_list=(1, 2, 4, 8, 16, 32, 64),
    seed: int = 0,
    C: int = 4,
    grad_tol: float = 1e-9,
    max_iter: int = 200_000,
    theta0: np.ndarray | None = None,
) -> VerifyReport:
    """Minimize ``(1/k)||(S1 - Theta) Z_k||_F^2`` over symmetric Theta by gradient descent.

    ``S1`` is the affinity matrix of a random ``n x C`` normalized feature
    matrix; the exact minimizer of the unsketched problem is ``S1``. The
    step is ``1/L`` with ``L = 2 lambda_max(Z Z^T)/k``; descent stops when
    the gradient norm drops below ``grad_tol``.
    """
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((n, C))
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    S1 = F @ F.T
    T0 = np.zeros((n, n)) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    rows = []
    for k in k_list:
        Z = rng.standard_normal((n, k))
        M = Z @ Z.T / k
        L = 2.0 * float(np.linalg.eigvalsh(M)[-1])
        step = 1.0 / L
        T = T0.copy()
        f0 = float(np.sum(((S1 - T) @ Z) ** 2) / k)
        status, it = "max_iter", 0
        for it in range(1, max_iter + 1):
            G = -2.0 * (S1 - T) @ M
            G = 0.5 * (G + G.T)
            gn = float(np.linalg.norm(G))
            if not np.isfinite(gn) or gn > 1e12 * (1.0 + f0):
                status = "diverged"
                break
            if gn < grad_tol:
                status = "converged"
                break
            T -= step * G
        f = float(np.sum(((S1 - T) @ Z) ** 2) / k)
        rows.append({"k": int(k), "distance": float(np.linalg.norm(T - S1)), "final_loss": f,
                     "iterations": it, "step": step, "status": status})
    return VerifyReport("argmin", {"n": n, "k_list": list(k_list), "seed": seed, "C": C, "grad_tol": grad_tol,
                                   "max_iter": max_iter}, {"distance_max": 1e-3, "noise": 0.10}, rows)


def _decide_argmin(params, thr, trials):
    n = params["n"]
    diverged = [t["k"] for t in trials if t["status"] == "diverged"]
    big = [t for t in trials if t["k"] >= n]
    summary = {"distances": [t["distance"] for t in trials]}
    if diverged:
        step = {t["k"]: t["step"] for t in trials}
        return False, summary, f"descent diverged for k={diverged}; steps {[step[k] for k in diverged]}"
    if not big:
        return False, summary, "no k >= n in k_list"
    d = [t["distance"] for t in big]
    small = all(x < thr["distance_max"] for x in d)
    # nonincreasing up to the relative noise allowance (and the absolute floor)
    mono = all(b <= a * (1 + thr["noise"]) or b < 1e-12 for a, b in zip(d, d[1:]))
    summary["nonincreasing"] = mono
    return small and mono, summary, ""


DECIDERS = {
    "jl": _decide_jl,
    "unbiased": _decide_unbiased,
    "tail": _decide_tail,
    "scaling": _decide_scaling,
    "argmin": _decide_argmin,
}
