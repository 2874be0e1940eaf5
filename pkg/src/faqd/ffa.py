"""Sketched (fast) feature affinity loss.

For pixel-normalized maps ``F1`` (teacher) and ``F2`` (student) with
``N = HW`` rows, the FA loss is ``||F1 F1^T - F2 F2^T||_F^2 / N^2``. With a
Gaussian sketch ``Z`` (``N x k``) the estimator

    ||(F1 F1^T - F2 F2^T) Z||_F^2 / (k N^2)

is unbiased and needs only products of the form ``F (F^T Z)``, i.e.
``O(k N C)`` work instead of ``O(N^2 C)``.

Besides the differentiable versions used in training, this module carries
plain numpy kernels (``*_value``) for timing and Monte Carlo studies; they
report their multiply counts to :func:`faqd.autodiff.count_multiplies`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InputError


@dataclass(frozen=True)
class SketchMatrix:
    values: np.ndarray
    seed: int | None = None

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def derive_seed(*keys: int) -> int:
    """Deterministic 64-bit seed from a tuple of integers (global seed, epoch, batch, tap, ...)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


def sample_sketch(N: int, k: int, seed: int) -> SketchMatrix:
    """An ``N x k`` matrix of i.i.d. standard normals, reproducible from ``seed``."""
    if N < 1 or k < 1:
        raise InputError(f"sample_sketch: need N, k >= 1, got N={N}, k={k}")
    rng = np.random.default_rng(seed)
    return SketchMatrix(rng.standard_normal((N, k), dtype=np.float32), seed)


def _sketch_array(Z) -> np.ndarray:
    arr = Z.values if isinstance(Z, SketchMatrix) else np.asarray(Z.data if isinstance(Z, Tensor) else Z)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InputError(f"sketch must be a vector or N x k matrix, got shape {arr.shape}")
    if arr.shape[1] == 0:
        raise InputError("sketch has k = 0 columns")
    return arr


def ffa_loss_k(FT_norm, FS_norm, Z) -> Tensor:
    """Mean of ``||(S1 - S2) z_l||^2 / N^2`` over the columns ``z_l`` of ``Z``.

    Inputs are ``(N, C)`` or ``(B, N, C)`` pixel-normalized matrices; the
    result is averaged over the batch. Never forms an ``N x N`` matrix.
    """
    FT = ad.as_tensor(FT_norm)
    FS = ad.as_tensor(FS_norm)
    z = _sketch_array(Z)
    N = FS.shape[-2]
    if FT.shape[-2] != N or z.shape[0] != N:
        raise InputError(f"ffa: row counts differ (teacher {FT.shape[-2]}, student {N}, sketch {z.shape[0]})")
    k = z.shape[1]
    B = FS.shape[0] if FS.ndim == 3 else 1
    zt = ad.as_tensor(z.astype(FS.dtype, copy=False), like=FS)
    r = ad.matmul(FT, ad.matmul(ad.swap_last(FT), zt)) - ad.matmul(FS, ad.matmul(ad.swap_last(FS), zt))
    return ad.sum_(r * r) * (1.0 / (k * N * N * B))


def ffa_single(FT_norm, FS_norm, z) -> Tensor:
    """Single-vector estimate ``||(S1 - S2) z||^2 / N^2``."""
    z = np.asarray(z.data if isinstance(z, Tensor) else z)
    if z.ndim != 1:
        raise InputError(f"ffa_single expects a length-N vector, got shape {z.shape}")
    return ffa_loss_k(FT_norm, FS_norm, z[:, None])


# ---------------------------------------------------------------------------
# pairwise squared distances


@dataclass(frozen=True)
class SketchedSqDist:
    """Row norms ``v`` and ``A (A^T Z)``; enough to apply the distance matrix to ``Z``."""

    v: np.ndarray
    aatz: np.ndarray
    Z: np.ndarray

    def apply(self) -> np.ndarray:
        """``S @ Z`` in ``O(n c k)`` without forming ``S``."""
        return self.v[:, None] * self.Z.sum(axis=0)[None, :] + (self.v @ self.Z)[None, :] - 2.0 * self.aatz


def pairwise_sqdist(A, sketch: SketchMatrix | np.ndarray | None = None):
    """Squared Euclidean distances between the rows of ``A``.

    Exact mode broadcasts the row-norm vector ``v``: ``S = v 1^T - 2 A A^T + 1 v^T``.
    Sketched mode returns a :class:`SketchedSqDist` carrying ``v`` and ``A (A^T Z)``.
    """
    A = np.asarray(A, dtype=np.float64)
    v = np.einsum("ij,ij->i", A, A)
    if sketch is None:
        S = v[:, None] - 2.0 * (A @ A.T) + v[None, :]
        np.fill_diagonal(S, 0.0)
        return np.maximum(S, 0.0)
    Z = _sketch_array(sketch).astype(np.float64)
    if Z.shape[0] != A.shape[0]:
        raise InputError(f"pairwise_sqdist: sketch has {Z.shape[0]} rows for {A.shape[0]} points")
    return SketchedSqDist(v, A @ (A.T @ Z), Z)


# ---------------------------------------------------------------------------
# numpy kernels (no autodiff) for timing and Monte Carlo


def exact_multiplies(N: int, C1: int, C2: int, batch: int = 1) -> int:
    """Multiplies performed by the matrix-form FA loss on normalized inputs."""
    return batch * N * N * (C1 + C2 + 1) + 1


def ffa_multiplies(N: int, C1: int, C2: int, k: int, batch: int = 1) -> int:
    """Multiplies performed by the k-column sketched FA loss on normalized inputs."""
    return batch * k * N * (2 * C1 + 2 * C2 + 1) + 1


def _batched(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 2 else x


def fa_loss_value(ft: np.ndarray, fs: np.ndarray, block_rows: int = 1024) -> float:
    """Exact FA loss of normalized maps, computed in row blocks of the affinity matrices."""
    ft, fs = _batched(np.asarray(ft)), _batched(np.asarray(fs))
    B, N, C1 = fs.shape
    C2 = ft.shape[2]
    total = 0.0
    for b in range(B):
        t, s = ft[b], fs[b]
        for lo in range(0, N, block_rows):
            d = t[lo : lo + block_rows] @ t.T
            d -= s[lo : lo + block_rows] @ s.T
            total += float(np.vdot(d, d))
    ad.add_multiplies(exact_multiplies(N, C1, C2, B))
    return total * (1.0 / (N * N * B))


def ffa_loss_value(ft: np.ndarray, fs: np.ndarray, Z) -> float:
    """Sketched FA loss of normalized maps with the columns of ``Z``."""
    ft, fs = _batched(np.asarray(ft)), _batched(np.asarray(fs))
    z = _sketch_array(Z).astype(fs.dtype, copy=False)
    B, N, C1 = fs.shape
    C2 = ft.shape[2]
    k = z.shape[1]
    r = ft @ (ft.transpose(0, 2, 1) @ z)
    r -= fs @ (fs.transpose(0, 2, 1) @ z)
    ad.add_multiplies(ffa_multiplies(N, C1, C2, k, B))
    return float(np.vdot(r, r)) * (1.0 / (k * N * N * B))


def ffa_column_values(ft: np.ndarray, fs: np.ndarray, Z) -> np.ndarray:
    """Per-column single-vector estimates for 2-d normalized maps, in float64."""
    ft = np.asarray(ft, dtype=np.float64)
    fs = np.asarray(fs, dtype=np.float64)
    z = _sketch_array(Z).astype(np.float64)
    N = ft.shape[0]
    r = ft @ (ft.T @ z) - fs @ (fs.T @ z)
    return np.einsum("ij,ij->j", r, r) / (N * N)


def fa_exact_f64(ft: np.ndarray, fs: np.ndarray) -> float:
    """Exact FA loss of 2-d normalized maps in float64 (reference for Monte Carlo)."""
    ft = np.asarray(ft, dtype=np.float64)
    fs = np.asarray(fs, dtype=np.float64)
    d = ft @ ft.T - fs @ fs.T
    return float(np.vdot(d, d)) / ft.shape[0] ** 2


def random_normalized_pair(N: int, C1: int, C2: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """A teacher/student pair of random pixel-normalized ``(N, C)`` matrices (float32)."""
    ft = rng.standard_normal((N, C2)).astype(np.float32)
    fs = rng.standard_normal((N, C1)).astype(np.float32)
    ft /= np.linalg.norm(ft, axis=1, keepdims=True)
    fs /= np.linalg.norm(fs, axis=1, keepdims=True)
    return ft, fs
