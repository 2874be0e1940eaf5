"""Training criteria: logit distillation terms, NLL, feature affinity, and the composites.

Feature maps are ``(C, H, W)`` or batched ``(B, C, H, W)`` tensors. The
affinity of a map is the ``HW x HW`` matrix of cosines between its
channel vectors, flattened row-major over (H, W). The FA loss is the squared
Frobenius distance between teacher and student affinities scaled by
``1/(HW)^2`` and averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, InputError
from .ffa import derive_seed, ffa_loss_k, sample_sketch

PIXEL_NORM_EPS = 1e-8
KD_KINDS = ("mse", "kl")
FA_MODES = ("auto", "exact", "fast")


@dataclass
class LossConfig:
    """Weights and selectors of the distillation objective.

    ``total = alpha * KD + beta * sum_l FA_l + gamma * NLL``; with
    ``label_free`` the NLL term is dropped whatever ``gamma`` says.
    ``fa_mode`` picks exact FA, the sketched estimator, or ``auto``
    (exact while the teacher map side is at most ``fa_exact_max_side``).
    """

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.5
    kd_kind: str = "mse"
    label_free: bool = False
    tap_count: int = 3
    fa_mode: str = "auto"
    ffa_k: int = 10
    fa_exact_max_side: int = 32

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"loss weight {name} must be >= 0")
        if self.kd_kind not in KD_KINDS:
            raise ConfigurationError(f"kd_kind must be one of {KD_KINDS}, got '{self.kd_kind}'")
        if self.fa_mode not in FA_MODES:
            raise ConfigurationError(f"fa_mode must be one of {FA_MODES}, got '{self.fa_mode}'")
        if self.ffa_k < 1:
            raise ConfigurationError("ffa_k must be >= 1")

    @property
    def effective_gamma(self) -> float:
        return 0.0 if self.label_free else self.gamma


# ---------------------------------------------------------------------------
# feature affinity


def normalize_pixels(F) -> Tensor:
    """Scale every pixel's channel vector to unit length (norm floored at 1e-8)."""
    F = ad.as_tensor(F)
    return ad.pixel_normalize(F, axis=F.ndim - 3, eps=PIXEL_NORM_EPS)


def pixel_matrix(F) -> Tensor:
    """View a ``(C,H,W)`` map as ``(HW, C)`` (or ``(B,C,H,W)`` as ``(B, HW, C)``)."""
    F = ad.as_tensor(F)
    if F.ndim == 3:
        C, H, W = F.shape
        return ad.transpose(ad.reshape(F, (C, H * W)), (1, 0))
    if F.ndim == 4:
        B, C, H, W = F.shape
        return ad.transpose(ad.reshape(F, (B, C, H * W)), (0, 2, 1))
    raise InputError(f"feature map must be 3-d or 4-d, got shape {F.shape}")


def affinity_matrix(F) -> Tensor:
    """Pairwise cosine matrix of the pixel vectors of ``F``."""
    P = pixel_matrix(normalize_pixels(F))
    return ad.matmul(P, ad.swap_last(P))


def fa_loss_normalized(FT_norm, FS_norm) -> Tensor:
    """Matrix-form FA loss on pixel-normalized ``(N, C)`` or ``(B, N, C)`` inputs."""
    FT = ad.as_tensor(FT_norm)
    FS = ad.as_tensor(FS_norm)
    if FT.shape[:-1] != FS.shape[:-1]:
        raise InputError(f"fa loss: pixel counts differ, {FT.shape} vs {FS.shape}")
    N = FT.shape[-2]
    B = FT.shape[0] if FT.ndim == 3 else 1
    d = ad.matmul(FT, ad.swap_last(FT)) - ad.matmul(FS, ad.swap_last(FS))
    return ad.sum_(d * d) * (1.0 / (N * N * B))


def match_spatial(FS, size: tuple[int, int]) -> Tensor:
    """Bilinearly resize a student map to the teacher's (H, W) when they differ."""
    FS = ad.as_tensor(FS)
    if tuple(FS.shape[-2:]) == tuple(size):
        return FS
    if FS.ndim == 3:
        return ad.reshape(ad.resize_bilinear(ad.reshape(FS, (1,) + FS.shape), size), (FS.shape[0],) + tuple(size))
    return ad.resize_bilinear(FS, size)


def _prepare_pair(FS, FT) -> tuple[Tensor, Tensor]:
    FS = ad.as_tensor(FS)
    FT = ad.as_tensor(FT).detach()
    if FS.ndim != FT.ndim:
        raise InputError(f"fa loss: student map {FS.shape} and teacher map {FT.shape} differ in rank")
    if FS.ndim == 4 and FS.shape[0] != FT.shape[0]:
        raise InputError(f"fa loss: batch sizes differ, {FS.shape[0]} vs {FT.shape[0]}")
    FS = match_spatial(FS, FT.shape[-2:])
    return pixel_matrix(normalize_pixels(FT)), pixel_matrix(normalize_pixels(FS))


def fa_loss(FS, FT) -> Tensor:
    """Feature affinity loss between a student map ``FS`` and a teacher map ``FT``.

    Channel counts may differ; the student is resized to the teacher's spatial
    size if needed. Gradients flow to ``FS`` only.
    """
    PT, PS = _prepare_pair(FS, FT)
    return fa_loss_normalized(PT, PS)


def fast_fa_loss(FS, FT, k: int, seed: int) -> Tensor:
    """FA loss estimated with a fresh ``k``-column Gaussian sketch drawn from ``seed``."""
    PT, PS = _prepare_pair(FS, FT)
    return ffa_loss_k(PT, PS, sample_sketch(PT.shape[-2], k, seed))


# ---------------------------------------------------------------------------
# logit terms


def kl_loss(P_logits, Q_logits) -> Tensor:
    """``KL(P || Q)`` with P = softmax(teacher logits), Q = softmax(student logits).

    Averaged over the batch when 2-d. The teacher side carries no gradient.
    """
    P_logits = ad.as_tensor(P_logits).detach()
    Q_logits = ad.as_tensor(Q_logits)
    if P_logits.shape != Q_logits.shape:
        raise InputError(f"kl_loss: shape mismatch {P_logits.shape} vs {Q_logits.shape}")
    logp = ad.log_softmax(P_logits, axis=-1).data
    p = np.exp(logp)
    logq = ad.log_softmax(Q_logits, axis=-1)
    per_item = ad.sum_(ad.as_tensor(p, like=logq) * (ad.as_tensor(logp, like=logq) - logq), axis=-1)
    return ad.mean(per_item)


def mse_logit_loss(t_logits, s_logits) -> Tensor:
    """Mean over batch and classes of squared logit differences."""
    t = ad.as_tensor(t_logits).detach()
    s = ad.as_tensor(s_logits)
    if t.shape != s.shape:
        raise InputError(f"mse_logit_loss: shape mismatch {t.shape} vs {s.shape}")
    d = s - t
    return ad.mean(d * d)


def nll_loss(s_logits, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    s = ad.as_tensor(s_logits)
    if s.ndim == 1:
        s = ad.reshape(s, (1, -1))
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != s.shape[0]:
        raise InputError(f"nll_loss: {y.shape[0]} labels for {s.shape[0]} rows")
    if y.size and (y.min() < 0 or y.max() >= s.shape[1]):
        raise InputError(f"nll_loss: labels must lie in [0, {s.shape[1]}), got range [{y.min()}, {y.max()}]")
    return -ad.mean(ad.pick(ad.log_softmax(s, axis=-1), y))


# ---------------------------------------------------------------------------
# composite objectives


def faqd_loss(
    t_logits,
    s_logits,
    taps_T: Sequence,
    taps_S: Sequence,
    labels,
    cfg: LossConfig,
    sketch_seed: int | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """``alpha * KD + beta * sum_l FA(F_l^T, F_l^S) + gamma * NLL``.

    Args:
        labels: class indices; ignored (never read) when ``cfg.label_free``.
        sketch_seed: base seed for the FFA sketches; tap ``l`` uses a seed
            derived from ``(sketch_seed, l)``.

    Returns:
        The total as a differentiable scalar and the unweighted terms
        ``{"kd", "fa", "gt", "total"}``. A term whose weight is zero is not
        evaluated and reported as 0.
    """
    if len(taps_T) != len(taps_S):
        raise InputError(f"faqd_loss: {len(taps_T)} teacher taps vs {len(taps_S)} student taps")
    if not cfg.label_free and labels is None:
        raise InputError("faqd_loss: labels are required unless label_free is set")

    kd = mse_logit_loss(t_logits, s_logits) if cfg.kd_kind == "mse" else kl_loss(t_logits, s_logits)
    total = kd * cfg.alpha
    breakdown = {"kd": kd.item(), "fa": 0.0, "gt": 0.0}

    if cfg.beta > 0 and taps_T:
        fa_terms = []
        for l, (ft, fs) in enumerate(zip(taps_T, taps_S)):
            fast = cfg.fa_mode == "fast" or (cfg.fa_mode == "auto" and ft.shape[-2] > cfg.fa_exact_max_side)
            if fast:
                seed = derive_seed(0 if sketch_seed is None else sketch_seed, l)
                fa_terms.append(fast_fa_loss(fs, ft, cfg.ffa_k, seed))
            else:
                fa_terms.append(fa_loss(fs, ft))
        fa = fa_terms[0]
        for term in fa_terms[1:]:
            fa = fa + term
        breakdown["fa"] = fa.item()
        total = total + fa * cfg.beta

    if not cfg.label_free:
        gt = nll_loss(s_logits, labels)
        breakdown["gt"] = gt.item()
        if cfg.gamma > 0:
            total = total + gt * cfg.gamma
    breakdown["total"] = total.item()
    return total, breakdown


def qd_config(alpha: float = 0.5, kd_kind: str = "kl", **kw) -> LossConfig:
    """Quantized-distillation baseline: ``alpha * KD + (1 - alpha) * NLL`` with no FA term."""
    if not 0 < alpha < 1:
        raise ConfigurationError(f"QD weighting needs alpha in (0, 1), got {alpha}")
    return LossConfig(alpha=alpha, beta=0.0, gamma=1.0 - alpha, kd_kind=kd_kind, **kw)
