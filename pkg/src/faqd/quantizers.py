"""Weight projections, BinaryRelax blending and the quantized ReLU.

Weights are fake-quantized: quantized values are stored as float32.

Codebooks (per layer):

* 1 bit: ``alpha * sign(w)`` with ``alpha = mean(|w|)`` (zeros map to ``+alpha``).
* 2 / 4 bits: symmetric uniform grid ``delta * m`` with integer
  ``|m| <= 2**(b-1) - 1`` and ``delta = max(|w|) / (2**(b-1) - 1)``.
* 32 bits: identity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, InputError

SUPPORTED_BITS = (1, 2, 4, 32)


@dataclass(frozen=True)
class QuantScheme:
    """Per-layer weight quantization scheme.

    ``scale`` pins the codebook scale (alpha for 1 bit, delta otherwise);
    None derives it from the weights on every projection.
    """

    bits: int = 32
    granularity: str = "per-layer"
    scale: float | None = None

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ConfigurationError(f"unsupported weight bit-width {self.bits}; choose from {SUPPORTED_BITS}")
        if self.granularity != "per-layer":
            raise ConfigurationError("only per-layer quantization is supported")
        if self.scale is not None and not self.scale > 0:
            raise ConfigurationError(f"fixed codebook scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class QReLUParams:
    alpha: float
    act_bits: int = 32

    def __post_init__(self):
        if self.act_bits not in SUPPORTED_BITS:
            raise ConfigurationError(f"unsupported activation bit-width {self.act_bits}")
        if not self.alpha > 0:
            raise InputError(f"quantized ReLU resolution must be positive, got {self.alpha}")

    @property
    def levels(self) -> int:
        return 2**self.act_bits - 1


def _scheme(scheme) -> QuantScheme:
    return scheme if isinstance(scheme, QuantScheme) else QuantScheme(int(scheme))


def _unwrap(w):
    return (w.data, True) if isinstance(w, Tensor) else (np.asarray(w, dtype=np.float32), False)


def quantize_weights(w, scheme) -> np.ndarray | Tensor:
    """Project ``w`` onto the layer codebook of ``scheme``.

    Exactly idempotent: feeding the output back in returns it bit-for-bit.

    Args:
        w: weights (ndarray or Tensor; a Tensor comes back as a constant Tensor).
        scheme: a :class:`QuantScheme` or a bit-width.
    """
    scheme = _scheme(scheme)
    arr, was_tensor = _unwrap(w)
    if np.isnan(arr).any():
        raise InputError("quantize_weights: NaN in weights")
    if scheme.bits == 32:
        out = arr.copy()
    elif scheme.bits == 1:
        # float64 mean of |w| reproduces alpha exactly when w is already +-alpha
        if scheme.scale is not None:
            alpha = np.float32(scheme.scale)
        else:
            alpha = np.float32(np.mean(np.abs(arr), dtype=np.float64))
        out = np.where(arr >= 0, alpha, -alpha).astype(np.float32)
    else:
        m = 2 ** (scheme.bits - 1) - 1
        if scheme.scale is not None:
            top = m * float(scheme.scale)
        else:
            top = float(np.max(np.abs(arr))) if arr.size else 0.0
        if top == 0.0:
            top = float(m)  # delta guarded to 1
        r = np.clip(np.rint(arr.astype(np.float64) * m / top), -m, m)
        # grid points are top*r/m so the extreme level reproduces top exactly
        out = (top * r / m).astype(np.float32)
    return Tensor(out) if was_tensor else out


def layer_scale(w, scheme) -> float:
    """The per-layer scale of the codebook (alpha for 1 bit, delta otherwise)."""
    scheme = _scheme(scheme)
    arr, _ = _unwrap(w)
    if scheme.bits != 32 and scheme.scale is not None:
        return float(scheme.scale)
    if scheme.bits == 1:
        return float(np.float32(np.mean(np.abs(arr), dtype=np.float64)))
    if scheme.bits == 32:
        return 0.0
    m = 2 ** (scheme.bits - 1) - 1
    top = float(np.max(np.abs(arr))) if arr.size else 0.0
    return top / m if top else 1.0


def binary_relax_blend(w, lam: float, scheme) -> np.ndarray | Tensor:
    """Return ``(w + lam * Quant(w)) / (1 + lam)``."""
    if lam < 0 or not np.isfinite(lam):
        raise InputError(f"binary_relax_blend: lambda must be finite and >= 0, got {lam}")
    arr, was_tensor = _unwrap(w)
    q = quantize_weights(arr, scheme)
    if lam == 0:
        out = arr.copy()
    else:
        out = ((arr.astype(np.float64) + lam * q.astype(np.float64)) / (1.0 + lam)).astype(np.float32)
    return Tensor(out) if was_tensor else out


@dataclass
class QuantizedLayerState:
    """Shadow weights ``w``, forward weights ``u`` and the relaxation schedule.

    ``mode`` is ``"qat"`` (u = Quant(w)) or ``"binary_relax"`` (u is the
    lambda-weighted blend).
    """

    w: np.ndarray
    u: np.ndarray
    lam: float = 1.0
    eta: float = 1.02
    bits: int = 4
    mode: str = "qat"
    scale: float | None = None

    @property
    def scheme(self) -> QuantScheme:
        return QuantScheme(self.bits, scale=self.scale)

    def __post_init__(self):
        if self.u.shape != self.w.shape:
            raise InputError(f"quantized state: u shape {self.u.shape} != w shape {self.w.shape}")
        if self.mode not in ("qat", "binary_relax"):
            raise ConfigurationError(f"unknown quantization mode '{self.mode}'")

    @classmethod
    def create(
        cls, w: np.ndarray, bits: int, mode: str = "qat", lam: float = 1.0, eta: float = 1.02, scale: float | None = None
    ):
        st = cls(w=w, u=np.empty_like(w), lam=lam, eta=eta, bits=bits, mode=mode, scale=scale)
        st.u = project(st)
        return st


def project(state: QuantizedLayerState, w: np.ndarray | None = None) -> np.ndarray:
    """Forward weights for ``w`` (default: the state's own shadow weights)."""
    w = state.w if w is None else w
    if state.mode == "qat":
        return quantize_weights(w, state.scheme)
    return binary_relax_blend(w, state.lam, state.scheme)


def relax_schedule_step(state: QuantizedLayerState) -> QuantizedLayerState:
    """Multiply lambda by eta and re-blend u."""
    if not state.eta > 1:
        raise ConfigurationError(f"relaxation growth factor eta must exceed 1, got {state.eta}")
    new = replace(state, lam=state.lam * state.eta)
    new.u = project(new)
    return new


# ---------------------------------------------------------------------------
# quantized ReLU


def qrelu_forward(x, p: QReLUParams) -> np.ndarray:
    """Staircase activation: 0 below zero, ``k*alpha`` on ``[(k-1)alpha, k*alpha)``, saturating."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    if p.act_bits == 32:
        return np.maximum(arr, 0).astype(arr.dtype, copy=False)
    return _qrelu_values(arr, np.float64(p.alpha), p.levels)


def _qrelu_values(x: np.ndarray, alpha, levels: int) -> np.ndarray:
    k = np.minimum(np.floor(x / alpha) + 1, levels)
    return np.where(x < 0, 0, k * alpha).astype(x.dtype, copy=False)


def _alpha_proxy(x: np.ndarray, alpha, act_bits: int) -> np.ndarray:
    top = (2**act_bits - 1) * alpha
    return np.where(x <= 0, 0.0, np.where(x < top, 2.0 ** (act_bits - 1), 2.0**act_bits - 1))


def qrelu_backward_ste(x, p: QReLUParams, upstream) -> tuple[np.ndarray, float]:
    """Clipped-ReLU derivative for x and the three-valued proxy for alpha.

    Returns:
        ``(dx, dalpha)`` where ``dx = upstream`` on ``0 < x < (2^b-1)alpha``
        and 0 elsewhere, and ``dalpha = sum(upstream * g(x))``.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    g = upstream.data if isinstance(upstream, Tensor) else np.asarray(upstream, dtype=arr.dtype)
    if g.shape != arr.shape:
        raise InputError(f"qrelu_backward_ste: upstream shape {g.shape} != input shape {arr.shape}")
    top = (2**p.act_bits - 1) * p.alpha
    inside = (arr > 0) & (arr < top)
    dx = np.where(inside, g, 0).astype(arr.dtype, copy=False)
    dalpha = float(np.sum(g.astype(np.float64) * _alpha_proxy(arr, p.alpha, p.act_bits)))
    return dx, dalpha


def clipped_relu(x: np.ndarray, p: QReLUParams) -> np.ndarray:
    """The surrogate ``min(max(x, 0), (2^b-1)alpha)`` whose x-derivative the STE uses."""
    return np.minimum(np.maximum(x, 0), (2**p.act_bits - 1) * p.alpha)


def _qrelu_fwd(x, alpha, act_bits):
    return _qrelu_values(x, alpha.reshape(()), 2**act_bits - 1)


def _qrelu_bwd(saved, g, act_bits):
    x, alpha = saved
    dx, dalpha = qrelu_backward_ste(x, QReLUParams(float(alpha.reshape(())), act_bits), g)
    return dx, np.full(alpha.shape, dalpha)


QRELU = ad.custom_grad(_qrelu_fwd, _qrelu_bwd, name="qrelu")


def qrelu(x: Tensor, alpha: Tensor, act_bits: int) -> Tensor:
    """Differentiable quantized ReLU with a learnable resolution tensor ``alpha``."""
    if act_bits == 32:
        return ad.relu(x)
    return ad.apply(QRELU, x, alpha, act_bits=act_bits)


# identity straight-through estimator for the weight projection
QUANT_STE = ad.custom_grad(lambda w, u: u, lambda saved, g: (g, None), name="quant_ste")


def ste_weights(w: Tensor, u: np.ndarray) -> Tensor:
    """Use ``u`` in the forward pass while routing the gradient at ``u`` to ``w``."""
    return ad.apply(QUANT_STE, w, Tensor(u, dtype=w.dtype))
