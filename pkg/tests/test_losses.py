import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_grads_match
from faqd import autodiff as ad
from faqd.autodiff import Tensor
from faqd.errors import ConfigurationError, InputError
from faqd.losses import (
    LossConfig,
    affinity_matrix,
    fa_loss,
    faqd_loss,
    kl_loss,
    mse_logit_loss,
    nll_loss,
    normalize_pixels,
    qd_config,
)


def fa_double_loop(FS, FT):
    """Elementwise evaluation of the affinity distance over all pixel pairs."""
    C1, H, W = FS.shape
    N = H * W
    s = FS.reshape(C1, N).T.astype(np.float64)
    t = FT.reshape(FT.shape[0], N).T.astype(np.float64)
    total = 0.0
    for i in range(N):
        for j in range(N):
            cs = s[i] @ s[j] / (np.linalg.norm(s[i]) * np.linalg.norm(s[j]))
            ct = t[i] @ t[j] / (np.linalg.norm(t[i]) * np.linalg.norm(t[j]))
            total += (ct - cs) ** 2
    return total / N**2


# --- normalization and affinity ------------------------------------------------


def test_normalize_pixel_example():
    F = np.array([3.0, 4.0]).reshape(2, 1, 1)
    np.testing.assert_allclose(normalize_pixels(F).data.ravel(), [0.6, 0.8], rtol=1e-7)


def test_normalize_zero_pixel():
    assert np.all(normalize_pixels(np.zeros((3, 2, 2))).data == 0)


def test_normalize_idempotent_on_unit_rows(rng):
    F = rng.standard_normal((4, 3, 3))
    F /= np.linalg.norm(F, axis=0, keepdims=True)
    np.testing.assert_allclose(normalize_pixels(F).data, F, atol=1e-7)


def test_affinity_orthogonal_pixels():
    F = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(2, 1, 2)
    np.testing.assert_allclose(affinity_matrix(F).data, np.eye(2), atol=1e-7)


def test_affinity_identical_pixels():
    F = np.tile(np.array([1.0, -2.0, 0.5]).reshape(3, 1, 1), (1, 2, 2))
    np.testing.assert_allclose(affinity_matrix(F).data, np.ones((4, 4)), atol=1e-6)


def test_affinity_matches_cosine_oracle(rng):
    F = rng.standard_normal((3, 2, 2))
    P = F.reshape(3, 4).T
    oracle = np.array([[P[i] @ P[j] / np.linalg.norm(P[i]) / np.linalg.norm(P[j]) for j in range(4)] for i in range(4)])
    np.testing.assert_allclose(affinity_matrix(F).data, oracle, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31))
def test_affinity_invariants(h, w, c, seed):
    F = np.random.default_rng(seed).standard_normal((c, h, w))
    S = affinity_matrix(F).data
    assert np.allclose(S, S.T, atol=1e-6)
    assert np.allclose(np.diag(S), 1.0, atol=1e-6)
    assert np.all(np.abs(S) <= 1 + 1e-6)


# --- FA loss --------------------------------------------------------------------


def test_fa_identical_is_zero(rng):
    F = rng.standard_normal((4, 3, 3))
    assert fa_loss(F, F).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("c", [0.01, 1.0, 7.5])
def test_fa_scale_invariant(rng, c):
    F = rng.standard_normal((5, 3, 3))
    assert fa_loss(Tensor(c * F, dtype=np.float64), Tensor(F, dtype=np.float64)).item() < 1e-10


def test_fa_sign_flip_invariant(rng):
    F = rng.standard_normal((5, 3, 3))
    assert fa_loss(Tensor(-F, dtype=np.float64), Tensor(F, dtype=np.float64)).item() < 1e-10


def test_fa_matches_double_loop_with_different_channels(rng):
    FS = rng.standard_normal((8, 4, 4))
    FT = rng.standard_normal((16, 4, 4))
    got = fa_loss(Tensor(FS, dtype=np.float64), Tensor(FT, dtype=np.float64)).item()
    assert got == pytest.approx(fa_double_loop(FS, FT), rel=1e-6)


def test_fa_batched_is_mean_of_items(rng):
    FS = rng.standard_normal((3, 4, 2, 2))
    FT = rng.standard_normal((3, 6, 2, 2))
    per = [fa_loss(Tensor(FS[b], dtype=np.float64), Tensor(FT[b], dtype=np.float64)).item() for b in range(3)]
    assert fa_loss(Tensor(FS, dtype=np.float64), Tensor(FT, dtype=np.float64)).item() == pytest.approx(np.mean(per))


def test_fa_resizes_student_to_teacher(rng):
    FS = Tensor(rng.standard_normal((2, 4, 2, 2)), requires_grad=True)
    FT = rng.standard_normal((2, 4, 4, 4))
    loss = fa_loss(FS, FT)
    loss.backward()
    assert FS.grad.shape == FS.shape


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_fa_per_pixel_rescaling_invariance(seed):
    r = np.random.default_rng(seed)
    FS = r.standard_normal((4, 3, 3))
    FT = r.standard_normal((6, 3, 3))
    scale = np.exp(r.uniform(-3, 3, (1, 3, 3)))
    a = fa_loss(Tensor(FS, dtype=np.float64), Tensor(FT, dtype=np.float64)).item()
    b = fa_loss(Tensor(FS * scale, dtype=np.float64), Tensor(FT, dtype=np.float64)).item()
    assert abs(a - b) < 1e-8
    assert a >= 0


def test_fa_gradient_matches_finite_differences(rng):
    for _ in range(5):
        FS = rng.standard_normal((4, 3, 3))
        FT = Tensor(rng.standard_normal((4, 3, 3)), dtype=np.float64)
        assert_grads_match(lambda fs: fa_loss(fs, FT), [FS], rtol=1e-3)


def test_fa_teacher_gets_no_gradient(rng):
    FT = Tensor(rng.standard_normal((3, 2, 2)), requires_grad=True)
    FS = Tensor(rng.standard_normal((3, 2, 2)), requires_grad=True)
    fa_loss(FS, FT).backward()
    assert FT.grad is None and FS.grad is not None


# --- logit losses ----------------------------------------------------------------


def test_kl_identical_zero(rng):
    z = rng.standard_normal((4, 10))
    assert kl_loss(Tensor(z, dtype=np.float64), Tensor(z, dtype=np.float64)).item() == pytest.approx(0.0, abs=1e-9)


def test_kl_hand_value_and_asymmetry():
    P = np.log([[0.5, 0.5]])
    Q = np.log([[0.25, 0.75]])
    pq = kl_loss(Tensor(P, dtype=np.float64), Tensor(Q, dtype=np.float64)).item()
    qp = kl_loss(Tensor(Q, dtype=np.float64), Tensor(P, dtype=np.float64)).item()
    assert pq == pytest.approx(0.5 * math.log(2) + 0.5 * math.log(2 / 3), abs=1e-5)
    assert pq == pytest.approx(0.14384, abs=1e-5)
    assert abs(pq - qp) > 1e-3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_kl_nonnegative(seed):
    r = np.random.default_rng(seed)
    assert kl_loss(Tensor(r.standard_normal((3, 5)), dtype=np.float64),
                   Tensor(r.standard_normal((3, 5)), dtype=np.float64)).item() >= -1e-12


def test_kl_teacher_side_detached(rng):
    t = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    s = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    kl_loss(t, s).backward()
    assert t.grad is None and s.grad is not None


def test_mse_examples(rng):
    assert mse_logit_loss(np.array([[1.0, 2.0]]), np.array([[1.0, 4.0]])).item() == 2.0
    t, s = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    oracle = sum((s[i, j] - t[i, j]) ** 2 for i in range(5) for j in range(3)) / 15
    got = mse_logit_loss(Tensor(t, dtype=np.float64), Tensor(s, dtype=np.float64)).item()
    assert got == pytest.approx(oracle, abs=1e-7)
    with pytest.raises(InputError):
        mse_logit_loss(np.ones((2, 3)), np.ones((2, 4)))


def test_nll_examples(rng):
    assert nll_loss(np.array([[10.0, -10.0]]), [0]).item() < 1e-4
    assert nll_loss(np.zeros((1, 10)), [3]).item() == pytest.approx(math.log(10), abs=1e-6)
    z = rng.standard_normal((4, 6))
    y = np.array([0, 5, 2, 2])
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    assert nll_loss(Tensor(z, dtype=np.float64), y).item() == pytest.approx(-logp[np.arange(4), y].mean(), abs=1e-6)
    with pytest.raises(InputError):
        nll_loss(np.zeros((1, 3)), [3])


# --- composite objectives ----------------------------------------------------------


def _batch(rng, B=2):
    taps_t = [rng.standard_normal((B, 6, 4, 4)), rng.standard_normal((B, 8, 2, 2))]
    taps_s = [rng.standard_normal((B, 3, 4, 4)), rng.standard_normal((B, 4, 2, 2))]
    f64 = lambda xs: [Tensor(x, dtype=np.float64) for x in xs]  # noqa: E731
    return (Tensor(rng.standard_normal((B, 5)), dtype=np.float64), Tensor(rng.standard_normal((B, 5)), dtype=np.float64),
            f64(taps_t), f64(taps_s), np.array([1, 4]))


def test_label_free_equals_kd_plus_fa(rng):
    t, s, tt, ts, y = _batch(rng)
    cfg = LossConfig(alpha=0.7, beta=2.0, gamma=0.0)
    total, br = faqd_loss(t, s, tt, ts, y, cfg)
    expected = 0.7 * mse_logit_loss(t, s).item() + 2.0 * sum(fa_loss(b, a).item() for a, b in zip(tt, ts))
    assert total.item() == pytest.approx(expected, rel=1e-12)


def test_label_free_flag_never_needs_labels(rng):
    t, s, tt, ts, _ = _batch(rng)
    total, br = faqd_loss(t, s, tt, ts, None, LossConfig(label_free=True, gamma=0.9))
    assert br["gt"] == 0.0


def test_missing_labels_rejected(rng):
    t, s, tt, ts, _ = _batch(rng)
    with pytest.raises(InputError):
        faqd_loss(t, s, tt, ts, None, LossConfig())


def test_tap_length_mismatch(rng):
    t, s, tt, ts, y = _batch(rng)
    with pytest.raises(InputError):
        faqd_loss(t, s, tt, ts[:1], y, LossConfig())


def test_qd_objective(rng):
    t, s, tt, ts, y = _batch(rng)
    cfg = qd_config(0.3)
    assert cfg.beta == 0 and cfg.kd_kind == "kl" and cfg.gamma == pytest.approx(0.7)
    total, br = faqd_loss(t, s, tt, ts, y, cfg)
    expected = 0.3 * kl_loss(t, s).item() + 0.7 * nll_loss(s, y).item()
    assert total.item() == pytest.approx(expected, rel=1e-12)
    assert br["fa"] == 0.0


def test_self_distillation_leaves_only_gt(rng):
    t, _, tt, _, y = _batch(rng)
    cfg = LossConfig(alpha=1.0, beta=1.0, gamma=0.5)
    total, br = faqd_loss(t, t, tt, tt, y, cfg)
    assert br["kd"] == 0.0
    assert br["fa"] == pytest.approx(0.0, abs=1e-12)
    assert total.item() == pytest.approx(0.5 * br["gt"], rel=1e-12)


@pytest.mark.parametrize("which", ["alpha", "beta", "gamma"])
def test_linear_in_weights(rng, which):
    t, s, tt, ts, y = _batch(rng)
    base = dict(alpha=1.0, beta=1.0, gamma=0.5)
    _, br = faqd_loss(t, s, tt, ts, y, LossConfig(**base))
    doubled = dict(base, **{which: 2 * base[which]})
    total2, _ = faqd_loss(t, s, tt, ts, y, LossConfig(**doubled))
    term = {"alpha": br["kd"], "beta": br["fa"], "gamma": br["gt"]}[which]
    assert total2.item() - br["total"] == pytest.approx(base[which] * term, rel=1e-9)


def test_fast_mode_is_reproducible_per_seed(rng):
    t, s, tt, ts, y = _batch(rng)
    cfg = LossConfig(fa_mode="fast", ffa_k=4)
    a, _ = faqd_loss(t, s, tt, ts, y, cfg, sketch_seed=5)
    b, _ = faqd_loss(t, s, tt, ts, y, cfg, sketch_seed=5)
    c, _ = faqd_loss(t, s, tt, ts, y, cfg, sketch_seed=6)
    assert a.item() == b.item() and a.item() != c.item()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        LossConfig(alpha=-1)
    with pytest.raises(ConfigurationError):
        LossConfig(kd_kind="ce")
    with pytest.raises(ConfigurationError):
        qd_config(1.0)
    assert LossConfig(label_free=True, gamma=3.0).effective_gamma == 0.0
