import time

import numpy as np
import pytest

from faqd.errors import FormatError, ParameterError
from faqd.ffa import ffa_loss_value, random_normalized_pair
from faqd.verify import (
    VerifyReport,
    jl_dimension,
    loglog_slope,
    run_argmin_demo,
    run_jl_check,
    run_scaling_bench,
    run_tail_decay,
    run_unbiasedness,
    scaling_medians,
)


def test_loglog_slope_exact_power():
    x = [1, 2, 4, 8]
    assert loglog_slope(x, [3 * v**-1 for v in x]) == pytest.approx(-1.0)
    assert loglog_slope(x, [v**4 for v in x]) == pytest.approx(4.0)


def test_jl_dimension_example():
    assert jl_dimension(64, 0.5) == 267


# --- JL -----------------------------------------------------------------------------------


def test_jl_identical_vectors_no_distortion():
    v = np.random.default_rng(0).standard_normal(512)
    rep = run_jl_check(n=2, d=512, epsilon=0.5, trials=5, vectors=np.stack([v, v]))
    assert all(t["max_distortion"] < 1e-12 for t in rep.trials)
    assert rep.passed


def test_jl_orthogonal_injection_is_isometry():
    d = 64

    def orthogonal(rng):
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        return Q

    rep = run_jl_check(n=8, d=d, epsilon=0.5, trials=3, projection=orthogonal)
    assert max(t["max_distortion"] for t in rep.trials) < 1e-12


def test_jl_k_at_least_d_rejected():
    with pytest.raises(ParameterError):
        run_jl_check(n=64, d=200, epsilon=0.5, trials=1)


def test_jl_small_run_records_every_pair():
    rep = run_jl_check(n=10, d=512, epsilon=0.9, trials=4, seed=1)
    assert [t["pairs"] for t in rep.trials] == [45] * 4
    assert rep.params["k"] == jl_dimension(10, 0.9)


# --- unbiasedness ---------------------------------------------------------------------------


def test_unbiased_identical_pair_trivially_passes():
    rep = run_unbiasedness(N=16, C=4, samples=1000, identical=True)
    assert rep.params["exact"] == 0.0
    assert all(t["value"] == 0.0 for t in rep.trials)
    assert rep.passed


def test_unbiased_requires_samples():
    with pytest.raises(ParameterError):
        run_unbiasedness(samples=999)


def test_unbiased_stderr_shrinks_by_root_two():
    a = run_unbiasedness(N=16, C=4, samples=4000, seed=3)
    b = run_unbiasedness(N=16, C=4, samples=8000, seed=3)
    ratio = b.summary["stderr"] / a.summary["stderr"]
    assert abs(ratio - 1 / np.sqrt(2)) <= 0.2 / np.sqrt(2)


# --- tails -----------------------------------------------------------------------------------


def test_tail_huge_epsilon_is_vacuous():
    rep = run_tail_decay(N=16, C=4, epsilon=1e6, k_list=(1, 2, 4, 8), trials=200)
    assert not rep.passed and "vacuous" in rep.note


def test_tail_zero_epsilon_always_exceeded():
    rep = run_tail_decay(N=16, C=4, epsilon=0.0, k_list=(1, 2, 4, 8), trials=200)
    assert rep.summary["tails"] == [1.0] * 4


def test_tail_k_list_validation():
    with pytest.raises(ParameterError):
        run_tail_decay(k_list=(1, 2, 4))
    with pytest.raises(ParameterError):
        run_tail_decay(k_list=(1, 4, 2, 8))


def test_tail_decreasing_at_default_epsilon():
    rep = run_tail_decay(N=32, C=8, k_list=(1, 2, 4, 8, 16), trials=1000, seed=2)
    assert rep.summary["tails_nonincreasing"]
    assert -1.2 <= rep.summary["variance_slope"] <= -0.8


# --- scaling ---------------------------------------------------------------------------------


def test_scaling_repeats_guard():
    with pytest.raises(ParameterError):
        run_scaling_bench(repeats=4)


def test_scaling_counts_exact_on_small_sizes():
    rep = run_scaling_bench(H_list=(4, 8), C=4, k=2, repeats=5, ffa_batch=4)
    assert rep.summary["counts_exact"]
    assert set(scaling_medians(rep.trials, "ffa")) == {4, 8}
    assert all(t["multiplies"] == t["expected_multiplies"] for t in rep.trials)


@pytest.mark.slow
def test_ffa_time_linear_in_k():
    H, C = 64, 16
    ft, fs = random_normalized_pair(H * H, C, C, np.random.default_rng(0))
    ft, fs = np.stack([ft] * 8), np.stack([fs] * 8)
    rng = np.random.default_rng(1)

    def median_time(k):
        Z = rng.standard_normal((H * H, k)).astype(np.float32)
        ffa_loss_value(ft, fs, Z)
        ts = []
        for _ in range(7):
            t0 = time.perf_counter()
            ffa_loss_value(ft, fs, Z)
            ts.append(time.perf_counter() - t0)
        return float(np.median(ts))

    ratio = median_time(128) / median_time(64)
    assert 1.0 <= ratio <= 3.0


# --- argmin -------------------------------------------------------------------------------------


def test_argmin_start_at_optimum():
    rng = np.random.default_rng(0)
    F = rng.standard_normal((16, 4))
    F /= np.linalg.norm(F, axis=1, keepdims=True)
    rep = run_argmin_demo(n=16, k_list=(1, 16, 32), seed=0, theta0=F @ F.T)
    assert all(t["distance"] == 0.0 for t in rep.trials)
    assert rep.passed


def test_argmin_default_passes_and_k1_is_recorded():
    rep = run_argmin_demo(n=16, k_list=(1, 16, 64), seed=0)
    d = {t["k"]: t["distance"] for t in rep.trials}
    assert d[1] > 1e-2
    assert d[16] < 1e-3 and d[64] < 1e-3
    assert rep.passed


def test_argmin_without_large_k_fails():
    rep = run_argmin_demo(n=16, k_list=(1, 2), seed=0, max_iter=2000)
    assert not rep.passed


# --- reports -------------------------------------------------------------------------------------


def test_report_csv_round_trip(tmp_path):
    rep = run_tail_decay(N=16, C=4, k_list=(1, 2, 4, 8), trials=300, seed=5)
    path = rep.write_csv(tmp_path / "tail.csv")
    back = VerifyReport.from_csv(path)
    assert back.passed == rep.passed
    assert back.summary == rep.summary
    assert back.to_csv() == rep.to_csv()


def test_verdict_is_a_function_of_trials():
    rep = run_unbiasedness(N=16, C=4, samples=1000, seed=0)
    rep.thresholds["stderr_multiple"] = 0.0
    assert rep.decide() is False


def test_suites_are_deterministic():
    a = run_jl_check(n=8, d=512, epsilon=0.9, trials=3, seed=4)
    b = run_jl_check(n=8, d=512, epsilon=0.9, trials=3, seed=4)
    assert a.to_csv() == b.to_csv()


def test_bad_report_inputs(tmp_path):
    with pytest.raises(FormatError):
        VerifyReport.from_csv("a,b\n1,2\n")
    with pytest.raises(ParameterError):
        VerifyReport("nope", {}, {}, [])
