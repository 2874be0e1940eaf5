import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from faqd import autodiff as ad
from faqd.autodiff import Tensor
from faqd.errors import ConfigurationError, InputError
from faqd.quantizers import (
    QReLUParams,
    QuantizedLayerState,
    QuantScheme,
    binary_relax_blend,
    clipped_relu,
    layer_scale,
    qrelu,
    qrelu_backward_ste,
    qrelu_forward,
    quantize_weights,
    relax_schedule_step,
    ste_weights,
)

weights = arrays(np.float32, st.integers(1, 40), elements=st.floats(-10, 10, width=32))


# --- quantize_weights ----------------------------------------------------------


def test_one_bit_example():
    out = quantize_weights(np.array([0.3, -0.5, 0.2]), 1)
    np.testing.assert_allclose(out, [1 / 3, -1 / 3, 1 / 3], rtol=1e-6)


def test_four_bit_grid_is_fixed_point():
    delta = 0.1
    w = (delta * np.array([-7, -3, 0, 2, 7])).astype(np.float32)
    out = quantize_weights(w, 4)
    assert np.array_equal(quantize_weights(out, 4), out)
    np.testing.assert_allclose(out, w, rtol=1e-6)


@pytest.mark.parametrize("bits", [1, 2, 4, 32])
def test_zero_weights_stay_zero(bits):
    assert np.array_equal(quantize_weights(np.zeros(3), bits), np.zeros(3))


def test_nan_rejected():
    with pytest.raises(InputError):
        quantize_weights(np.array([1.0, np.nan]), 4)


def test_bad_bit_width():
    with pytest.raises(ConfigurationError):
        QuantScheme(3)


def test_tensor_in_tensor_out():
    out = quantize_weights(Tensor([0.6, -1.0]), 2)
    assert isinstance(out, Tensor)
    assert out.data.tolist() == [1.0, -1.0]


@settings(max_examples=200, deadline=None)
@given(weights, st.sampled_from([1, 2, 4, 32]))
def test_projection_idempotent(w, bits):
    q = quantize_weights(w, bits)
    assert np.array_equal(quantize_weights(q, bits), q)


@settings(max_examples=200, deadline=None)
@given(weights, st.sampled_from([1, 2, 4]))
def test_codebook_membership(w, bits):
    q = quantize_weights(w, bits).astype(np.float64)
    if bits == 1:
        alpha = layer_scale(w, 1)
        assert set(np.unique(np.abs(q))) <= {np.float32(alpha)}
    else:
        m = 2 ** (bits - 1) - 1
        delta = layer_scale(w, bits)
        levels = q / delta
        assert np.all(np.abs(levels - np.rint(levels)) < 1e-4)
        assert np.all(np.abs(np.rint(levels)) <= m)


# --- BinaryRelax -----------------------------------------------------------------


def test_relax_lambda_zero_is_identity():
    w = np.array([0.2, -0.7, 1.3], dtype=np.float32)
    assert np.array_equal(binary_relax_blend(w, 0.0, 1), w)


def test_relax_large_lambda_approaches_quant():
    w = np.random.default_rng(0).standard_normal(20).astype(np.float32)
    np.testing.assert_allclose(binary_relax_blend(w, 1e9, 2), quantize_weights(w, 2), atol=1e-6)


def test_relax_examples():
    np.testing.assert_allclose(binary_relax_blend(np.array([1.0]), 1.0, 1), [1.0])
    np.testing.assert_allclose(binary_relax_blend(np.array([0.5]), 1.0, 1), [0.5])
    np.testing.assert_allclose(binary_relax_blend(np.array([0.2, 0.6]), 1.0, 1), [0.3, 0.5], rtol=1e-6)


def test_relax_negative_lambda():
    with pytest.raises(InputError):
        binary_relax_blend(np.ones(2), -0.1, 1)


@settings(max_examples=150, deadline=None)
@given(weights, st.floats(0, 1e6), st.sampled_from([1, 2, 4]))
def test_relax_is_convex_combination(w, lam, bits):
    u = binary_relax_blend(w, lam, bits).astype(np.float64)
    q = quantize_weights(w, bits).astype(np.float64)
    lo, hi = np.minimum(w, q), np.maximum(w, q)
    slack = 1e-6 * (1 + np.abs(w))
    assert np.all(u >= lo - slack) and np.all(u <= hi + slack)


def test_schedule_doubling():
    st_ = QuantizedLayerState.create(np.array([0.2, 0.6], np.float32), 1, mode="binary_relax", lam=1.0, eta=2.0)
    for _ in range(3):
        st_ = relax_schedule_step(st_)
    assert st_.lam == 8.0


def test_schedule_compound_growth():
    st_ = QuantizedLayerState.create(np.ones(2, np.float32), 1, mode="binary_relax", lam=1.0, eta=1.02)
    for _ in range(100):
        st_ = relax_schedule_step(st_)
    assert st_.lam == pytest.approx(7.2446, abs=1e-4)


def test_schedule_limit_reaches_quant():
    w = np.random.default_rng(3).standard_normal(16).astype(np.float32)
    st_ = QuantizedLayerState.create(w, 4, mode="binary_relax", lam=1.0, eta=10.0)
    while st_.lam <= 1e7:
        st_ = relax_schedule_step(st_)
    np.testing.assert_allclose(st_.u, quantize_weights(w, 4), atol=1e-6)


def test_schedule_rejects_eta_at_most_one():
    st_ = QuantizedLayerState.create(np.ones(2, np.float32), 1, mode="binary_relax", eta=1.0)
    with pytest.raises(ConfigurationError):
        relax_schedule_step(st_)


def test_state_shape_invariant():
    with pytest.raises(InputError):
        QuantizedLayerState(w=np.ones(3), u=np.ones(2))


# --- quantized ReLU ------------------------------------------------------------------


@pytest.mark.parametrize("x, expected", [(-1.0, 0.0), (0.7, 1.0), (10.0, 1.5), (0.0, 0.5), (0.49, 0.5)])
def test_qrelu_two_bit_values(x, expected):
    assert qrelu_forward(np.array([x]), QReLUParams(0.5, 2))[0] == pytest.approx(expected)


def test_qrelu_32_bit_is_relu():
    x = np.array([-2.0, 0.0, 3.5], np.float32)
    assert qrelu_forward(x, QReLUParams(1.0, 32)).tolist() == [0.0, 0.0, 3.5]


def test_qrelu_rejects_nonpositive_alpha():
    with pytest.raises(InputError):
        QReLUParams(0.0, 2)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 30, elements=st.floats(-5, 5)), st.floats(0.05, 2), st.sampled_from([1, 2, 4]))
def test_qrelu_monotone_and_on_levels(x, alpha, bits):
    p = QReLUParams(alpha, bits)
    xs = np.sort(x)
    y = qrelu_forward(xs, p)
    assert np.all(np.diff(y) >= 0)
    k = y / alpha
    assert np.all(np.abs(k - np.rint(k)) < 1e-5)
    assert np.all((np.rint(k) >= 0) & (np.rint(k) <= 2**bits - 1))


@pytest.mark.parametrize("x, dx, dalpha", [(0.3, 1.0, 2.0), (-0.2, 0.0, 0.0), (2.0, 0.0, 3.0)])
def test_ste_examples(x, dx, dalpha):
    gx, ga = qrelu_backward_ste(np.array([x]), QReLUParams(0.5, 2), np.array([1.0]))
    assert gx[0] == dx
    assert ga == dalpha


def test_ste_shape_mismatch():
    with pytest.raises(InputError):
        qrelu_backward_ste(np.ones(3), QReLUParams(0.5, 2), np.ones(2))


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 1.0), st.sampled_from([1, 2, 4]))
def test_ste_dx_matches_clipped_relu_derivative(x, alpha, bits):
    p = QReLUParams(alpha, bits)
    top = (2**bits - 1) * alpha
    if min(abs(x), abs(x - top)) < 1e-3:
        return
    h = 1e-6
    fd = (clipped_relu(np.array([x + h]), p) - clipped_relu(np.array([x - h]), p))[0] / (2 * h)
    dx, _ = qrelu_backward_ste(np.array([x]), p, np.array([1.0]))
    assert abs(dx[0] - fd) < 1e-5


def test_qrelu_primitive_routes_ste_gradients():
    x = Tensor([-0.2, 0.3, 2.0], requires_grad=True)
    alpha = Tensor(0.5, requires_grad=True)
    y = qrelu(x, alpha, 2)
    assert y.data.tolist() == [0.0, 0.5, 1.5]
    ad.sum_(y).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]
    assert alpha.grad.shape == ()
    assert alpha.grad.item() == 5.0


def test_ste_weights_forward_u_backward_w():
    w = Tensor([0.3, -0.8], requires_grad=True)
    u = quantize_weights(w.data, 1)
    out = ste_weights(w, u)
    assert np.array_equal(out.data, u)
    ad.sum_(out * Tensor([2.0, 3.0])).backward()
    assert w.grad.tolist() == [2.0, 3.0]
