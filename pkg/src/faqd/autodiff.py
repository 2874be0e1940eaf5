"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive takes :class:`Tensor` operands, computes its value with numpy
and, when any operand takes part in differentiation, records a node holding
the inputs and a closure mapping the upstream gradient to input gradients.
``Tensor.backward`` walks the recorded nodes in reverse topological order.

Values are float32 unless float64 operands are passed in explicitly (used by
the finite-difference gradient checks).

A static front end is available through :class:`GradGraph`, :func:`forward`
and :func:`backward`; it evaluates a list of named primitive applications and
is what the configuration-level contracts (unknown primitive ids, backward
before forward) are checked against.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ShapeError, StateError

DEFAULT_DTYPE = np.float32

_grad_enabled = True
_mult_counter: list[int] | None = None


# ---------------------------------------------------------------------------
# grad mode and multiply counting


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class MultiplyCounter:
    """Accumulates scalar multiplications performed while active."""

    def __init__(self):
        self.count = 0


@contextlib.contextmanager
def count_multiplies():
    """Count scalar multiplies in matmul/mul primitives and instrumented kernels.

    >>> with count_multiplies() as c:
    ...     _ = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    >>> c.count
    2
    """
    global _mult_counter
    prev = _mult_counter
    counter = MultiplyCounter()
    _mult_counter = [0]
    try:
        yield counter
    finally:
        counter.count = _mult_counter[0]
        _mult_counter = prev
        if prev is not None:
            prev[0] += counter.count


def add_multiplies(n: int) -> None:
    """Report ``n`` multiplies to the active counter, if any."""
    if _mult_counter is not None:
        _mult_counter[0] += int(n)


# ---------------------------------------------------------------------------
# Tensor


class _Node:
    __slots__ = ("prim", "inputs", "backward_fn")

    def __init__(self, prim: str, inputs: tuple, backward_fn: Callable):
        self.prim = prim
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """A dense array with an optional gradient slot.

    Args:
        data: anything ``np.asarray`` accepts.
        requires_grad: mark as a differentiable leaf.
        dtype: storage dtype; float32 by default.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            dtype = dtype or data.dtype
            data = data.data
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    # basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operators ------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    # backward -------------------------------------------------------------

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf), contracted with ``seed``, into leaf grads."""
        if self._node is None and not self.requires_grad:
            raise StateError("backward called on a tensor that is not part of a recorded graph")
        if seed is None:
            if self.size != 1:
                raise ShapeError(f"backward: seed required for non-scalar output of shape {self.shape}")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=self.dtype)
            if seed.shape != self.shape:
                if seed.size == self.size == 1:
                    seed = seed.reshape(self.shape)
                else:
                    raise ShapeError(f"backward: seed shape {seed.shape} != output shape {self.shape}")
        _run_backward(self, seed)


def _raise_item(shape):
    raise ShapeError(f"item() requires a single-element tensor, got shape {shape}")


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for inp in t._node.inputs:
                if id(inp) not in seen and _tracks(inp):
                    stack.append((inp, False))
    return order


def _run_backward(root: Tensor, seed: np.ndarray) -> None:
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): seed}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            if t.requires_grad:
                g = np.asarray(g, dtype=t.dtype)
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        in_grads = node.backward_fn(g)
        if not isinstance(in_grads, (tuple, list)) or len(in_grads) != len(node.inputs):
            got = len(in_grads) if isinstance(in_grads, (tuple, list)) else 1
            raise ConfigurationError(
                f"backward of primitive '{node.prim}' returned {got} gradients for {len(node.inputs)} inputs"
            )
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not _tracks(inp):
                continue
            gi = np.asarray(gi)
            if gi.shape != inp.shape:
                raise ShapeError(
                    f"backward of primitive '{node.prim}' produced grad of shape {gi.shape} "
                    f"for input of shape {inp.shape}"
                )
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap ``x`` as a constant tensor (scalars adopt ``like``'s dtype)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype if like is not None else DEFAULT_DTYPE)


def _make(prim: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    out.requires_grad = False
    if _grad_enabled and any(_tracks(t) for t in inputs):
        out._node = _Node(prim, tuple(inputs), backward_fn)
        out.requires_grad = True
    return out


def _result_dtype(*ts: Tensor):
    return np.float64 if any(t.dtype == np.float64 for t in ts) else DEFAULT_DTYPE


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        a = as_tensor(a)
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(prim: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{prim}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("add", a, b)
    out = (a.data + b.data).astype(_result_dtype(a, b), copy=False)
    sa, sb = a.shape, b.shape
    return _make("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("sub", a, b)
    out = (a.data - b.data).astype(_result_dtype(a, b), copy=False)
    sa, sb = a.shape, b.shape
    return _make("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    shape = _check_broadcast("mul", a, b)
    add_multiplies(int(np.prod(shape)))
    out = (a.data * b.data).astype(_result_dtype(a, b), copy=False)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("div", a, b)
    out = (a.data / b.data).astype(_result_dtype(a, b), copy=False)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _make("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    ad = a.data
    out = (ad**p).astype(a.dtype, copy=False)
    return _make("power", out, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.dtype, copy=False)
    return _make("relu", out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# shape primitives and reductions


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    src = a.shape
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for {a.ndim}-d input")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make("transpose", out, (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    """Swap the two trailing axes."""
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)

    return _make("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.dtype)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).astype(g.dtype, copy=True),)

    return _make("mean", out, (a,), bw)


def pick(a, index) -> Tensor:
    """Select ``a[i, index[i]]`` along the last axis of a 2-D tensor."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: expected 2-d input and one index per row, got {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, idx].copy()
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, idx] = g
        return (full,)

    return _make("pick", out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    m, k = a.shape[-2:]
    n = b.shape[-1]
    add_multiplies(int(np.prod(batch, dtype=np.int64)) * m * k * n)
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd).astype(_result_dtype(a, b), copy=False)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def bias_add(x, b) -> Tensor:
    """Add a per-channel bias to an (N, C) or (N, C, H, W) tensor."""
    x, b = _binary_operands(x, b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match channel dim of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    out = (x.data + b.data.reshape(view)).astype(_result_dtype(x, b), copy=False)
    red = (0,) + tuple(range(2, x.ndim))
    return _make("bias_add", out, (x, b), lambda g: (g, g.sum(axis=red)))


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW weights, via im2col."""
    x, w = _binary_operands(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cw}")
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, -1)
    add_multiplies(cols.shape[0] * cols.shape[1] * O)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out, dtype=_result_dtype(x, w))
    xp_shape = xp.shape

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (gm.T @ cols).reshape(w.shape)
        dcols = (gm @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        gxp = np.zeros(xp_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + H, padding : padding + W] if padding else gxp
        return np.ascontiguousarray(gx), gw

    return _make("conv2d", out, (x, w), bw)


def avg_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping mean pooling with a square window."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    if H % kernel or W % kernel:
        raise ShapeError(f"avg_pool2d: spatial size {H}x{W} not divisible by kernel {kernel}")
    out = x.data.reshape(B, C, H // kernel, kernel, W // kernel, kernel).mean(axis=(3, 5))
    scale = 1.0 / (kernel * kernel)

    def bw(g):
        gx = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) * scale
        return (gx.astype(g.dtype, copy=False),)

    return _make("avg_pool2d", out.astype(x.dtype, copy=False), (x,), bw)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3)).astype(x.dtype, copy=False)

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).astype(g.dtype, copy=True),)

    return _make("global_avg_pool", out, (x,), bw)


def batch_norm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over all axes except the channel axis 1.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place as ``running = momentum*running + (1-momentum)*batch``.
    """
    x, gamma = _binary_operands(x, gamma)
    beta = as_tensor(beta, like=x)
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} incompatible with scale {gamma.shape}/shift {beta.shape}")
    red = (0,) if x.ndim == 2 else (0, 2, 3)
    view = (1, -1) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        m = int(np.prod([x.shape[i] for i in red]))
        mu = xd.mean(axis=red)
        var = xd.var(axis=red)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        m = 0
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(view)) * inv.reshape(view)
    gd = gamma.data
    out = (xhat * gd.reshape(view) + beta.data.reshape(view)).astype(x.dtype, copy=False)

    def bw(g):
        gbeta = g.sum(axis=red)
        ggamma = (g * xhat).sum(axis=red)
        gxhat = g * gd.reshape(view)
        if training:
            gx = (
                inv.reshape(view)
                / m
                * (m * gxhat - gxhat.sum(axis=red).reshape(view) - xhat * (gxhat * xhat).sum(axis=red).reshape(view))
            )
        else:
            gx = gxhat * inv.reshape(view)
        return gx.astype(g.dtype, copy=False), ggamma, gbeta

    return _make("batch_norm", out, (x, gamma, beta), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return ((g - (g * out).sum(axis=axis, keepdims=True)) * out,)

    return _make("softmax", out, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), bw)


def pixel_normalize(x, axis: int = 1, eps: float = 1e-8) -> Tensor:
    """Divide each vector along ``axis`` by ``max(||v||_2, eps)``."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = (xd / denom).astype(x.dtype, copy=False)

    def bw(g):
        radial = (out * g).sum(axis=axis, keepdims=True)
        gx = np.where(big, (g - out * radial) / denom, g / eps)
        return (gx.astype(g.dtype, copy=False),)

    return _make("pixel_normalize", out, (x,), bw)


def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, edge clamped
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m.astype(dtype)


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of an NCHW tensor to ``size`` (H, W)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"resize_bilinear: expected 4-d input, got {x.shape}")
    Ho, Wo = size
    ah = _bilinear_matrix(x.shape[2], Ho, x.dtype)
    aw = _bilinear_matrix(x.shape[3], Wo, x.dtype)
    out = np.einsum("ph,bchw,qw->bcpq", ah, x.data, aw, optimize=True).astype(x.dtype, copy=False)

    def bw(g):
        return (np.einsum("ph,bcpq,qw->bchw", ah, g, aw, optimize=True).astype(g.dtype, copy=False),)

    return _make("resize_bilinear", out, (x,), bw)


# ---------------------------------------------------------------------------
# custom gradients and the primitive registry


@dataclass(frozen=True)
class CustomPrimitive:
    name: str
    forward_fn: Callable[..., np.ndarray]
    backward_fn: Callable[..., Sequence[np.ndarray | None]]

    def __call__(self, *inputs, **attrs) -> Tensor:
        ts = [as_tensor(t) for t in inputs]
        arrays = tuple(t.data for t in ts)
        out = np.asarray(self.forward_fn(*arrays, **attrs))
        out = out.astype(_result_dtype(*ts), copy=False)

        def bw(g):
            grads = self.backward_fn(arrays, g, **attrs)
            if not isinstance(grads, (tuple, list)):
                grads = (grads,)
            if len(grads) != len(arrays):
                raise ConfigurationError(
                    f"custom primitive '{self.name}': backward returned {len(grads)} grads for {len(arrays)} inputs"
                )
            return tuple(
                None if gi is None else np.asarray(gi, dtype=t.dtype).reshape(t.shape) for gi, t in zip(grads, ts)
            )

        return _make(self.name, out, ts, bw)


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "power": power,
    "exp": exp,
    "log": log,
    "relu": relu,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum_,
    "mean": mean,
    "pick": pick,
    "matmul": matmul,
    "bias_add": bias_add,
    "conv2d": conv2d,
    "avg_pool2d": avg_pool2d,
    "global_avg_pool": global_avg_pool,
    "batch_norm": batch_norm,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "pixel_normalize": pixel_normalize,
    "resize_bilinear": resize_bilinear,
}

_custom_ids = itertools.count()


def custom_grad(forward_fn: Callable, backward_fn: Callable, name: str | None = None) -> str:
    """Register a primitive whose backward pass is ``backward_fn`` verbatim.

    ``forward_fn(*arrays, **attrs)`` computes the value; ``backward_fn(arrays,
    upstream, **attrs)`` returns one gradient (or None) per input array. The
    true derivative of ``forward_fn`` is never consulted.

    Returns:
        The primitive id, usable with :func:`apply` and in :class:`GradGraph`.
    """
    prim_id = name or f"custom_{next(_custom_ids)}"
    if prim_id in PRIMITIVES and not isinstance(PRIMITIVES[prim_id], CustomPrimitive):
        raise ConfigurationError(f"primitive id '{prim_id}' is already taken by a built-in")
    PRIMITIVES[prim_id] = CustomPrimitive(prim_id, forward_fn, backward_fn)
    return prim_id


def apply(prim_id: str, *inputs, **attrs) -> Tensor:
    """Apply a registered primitive by id."""
    try:
        fn = PRIMITIVES[prim_id]
    except KeyError:
        raise ConfigurationError(f"unsupported primitive id '{prim_id}'") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------------------
# static graph front end


@dataclass
class GraphNode:
    name: str
    prim: str
    inputs: tuple[str, ...]
    attrs: dict[str, Any] = field(default_factory=dict)


class GradGraph:
    """An ordered list of primitive applications over named values.

    Node inputs must name graph inputs or earlier nodes, which keeps the graph
    acyclic and topologically ordered by construction.
    """

    def __init__(self, nodes: Iterable[GraphNode | tuple], outputs: Sequence[str], inputs: Sequence[str]):
        self.inputs = tuple(inputs)
        self.nodes: list[GraphNode] = [n if isinstance(n, GraphNode) else GraphNode(*n) for n in nodes]
        self.outputs = tuple(outputs)
        known = set(self.inputs)
        for node in self.nodes:
            if node.prim not in PRIMITIVES:
                raise ConfigurationError(f"node '{node.name}': unsupported primitive id '{node.prim}'")
            for src in node.inputs:
                if src not in known:
                    raise ConfigurationError(f"node '{node.name}' reads '{src}' before it is defined")
            if node.name in known:
                raise ConfigurationError(f"duplicate value name '{node.name}'")
            known.add(node.name)
        for out in self.outputs:
            if out not in known:
                raise ConfigurationError(f"unknown output '{out}'")
        self.values: dict[str, Tensor] | None = None


def forward(graph: GradGraph, inputs: dict[str, Tensor]) -> dict[str, Tensor]:
    """Evaluate ``graph`` on ``inputs`` and return the requested outputs."""
    missing = set(graph.inputs) - set(inputs)
    if missing:
        raise ConfigurationError(f"missing graph inputs: {sorted(missing)}")
    values: dict[str, Tensor] = {k: as_tensor(v) for k, v in inputs.items()}
    for node in graph.nodes:
        values[node.name] = apply(node.prim, *(values[s] for s in node.inputs), **node.attrs)
    graph.values = values
    return {name: values[name] for name in graph.outputs}


def backward(graph: GradGraph, seed, output: str | None = None) -> None:
    """Back-propagate ``seed`` from ``output`` (default: the sole output)."""
    if graph.values is None:
        raise StateError("backward called before forward on this graph")
    if output is None:
        if len(graph.outputs) != 1:
            raise ConfigurationError("graph has several outputs; name the one to differentiate")
        output = graph.outputs[0]
    graph.values[output].backward(seed)
