"""Dense NCHW tensors and the primitive kernels every layer is built from.

Tensors are plain row-major ``numpy.ndarray`` objects. Kernels keep the dtype
of their input (float32 unless a float64 array is passed explicitly, which
the gradient checker relies on). Ops that offer ``inplace=True`` write into
the first argument's buffer and return it; the out-of-place variant copies
first and then runs the same kernel, so both produce bitwise-identical
results.

Two kernel paths exist. The default one is vectorised (im2col + GEMM,
shift-and-accumulate for depthwise). The reference path is a direct loop
over output positions and is selected with :func:`reference_kernels`.
"""
from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, PaddingError

Tensor = np.ndarray

#: Raise ``FloatingPointError`` when an op produces NaN/Inf. Enabled by the test suite.
CHECK_FINITE = os.environ.get("TRESNET_CHECK_FINITE", "") not in ("", "0")

_USE_REFERENCE = False


@contextlib.contextmanager
def reference_kernels(enabled: bool = True):
    """Route conv2d and the pools through the naive loop implementation."""
    global _USE_REFERENCE
    previous = _USE_REFERENCE
    _USE_REFERENCE = enabled
    try:
        yield
    finally:
        _USE_REFERENCE = previous


def as_tensor(x, dtype=None) -> Tensor:
    """Return ``x`` as a C-contiguous float array of rank 1 to 4.

    float64 input is preserved; everything else becomes float32.
    """
    arr = np.asarray(x)
    if dtype is None:
        dtype = np.float64 if arr.dtype == np.float64 else np.float32
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if not 1 <= arr.ndim <= 4:
        raise DimensionError(f"tensor rank must be 1..4, got {arr.ndim}")
    if 0 in arr.shape:
        raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
    return arr


def _finite(out: Tensor) -> Tensor:
    if CHECK_FINITE and not np.isfinite(out).all():
        raise FloatingPointError("non-finite value produced")
    return out


def _require_rank(x: Tensor, rank: int, what: str = "input") -> None:
    if x.ndim != rank:
        raise DimensionError(f"{what} must be rank-{rank}, got shape {x.shape}")


def _same_shape(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        for axis, (a, b) in enumerate(zip(x.shape, y.shape)):
            if a != b:
                raise DimensionError(f"shape mismatch on axis {axis}: {x.shape} vs {y.shape}")
        raise DimensionError(f"rank mismatch: {x.shape} vs {y.shape}")


@dataclass(frozen=True, eq=False)
class ConvParams:
    """Weights and geometry of one 2-D convolution.

    ``weight`` has shape ``(out_ch, in_ch // groups, kh, kw)``. ``padding`` is
    the pixel count added on every side, filled with zeros or mirrored
    (``padding_mode="reflect"``).
    """

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    padding_mode: str = "zeros"
    groups: int = 1

    def __post_init__(self):
        w = self.weight
        if w.ndim != 4:
            raise DimensionError(f"conv weight must be rank-4, got {w.shape}")
        if self.stride < 1 or self.groups < 1 or self.padding < 0:
            raise ValueError("stride and groups must be positive, padding non-negative")
        if self.padding_mode not in ("zeros", "reflect"):
            raise ValueError(f"unknown padding_mode {self.padding_mode!r}")
        if w.shape[0] % self.groups:
            raise DimensionError(f"out_ch {w.shape[0]} not divisible by groups {self.groups}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} != ({w.shape[0]},)")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]


def pad_reflect(x: Tensor, pad: int) -> Tensor:
    """Mirror ``pad`` pixels onto each spatial border, excluding the edge pixel itself."""
    x = as_tensor(x)
    n_spatial = 1 if x.ndim == 1 else 2
    spatial = x.shape[-n_spatial:]
    if any(pad >= s for s in spatial) and pad > 0:
        raise PaddingError(f"reflect pad {pad} must be smaller than spatial extents {spatial}")
    if pad == 0:
        return x.copy()
    widths = [(0, 0)] * (x.ndim - n_spatial) + [(pad, pad)] * n_spatial
    return np.pad(x, widths, mode="reflect")


def _pad_zeros(x: Tensor, pad: int, value: float = 0.0) -> Tensor:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="constant", constant_values=value)


def _out_extent(size: int, k: int, stride: int, axis: str) -> int:
    if size < k:
        raise DimensionError(f"padded {axis} extent {size} smaller than kernel {k}")
    return (size - k) // stride + 1


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlate ``x`` (N, C, H, W) with ``p.weight`` and add the bias."""
    x = as_tensor(x)
    _require_rank(x, 4)
    if x.shape[1] != p.in_channels:
        raise DimensionError(
            f"channel axis (1) mismatch: input has {x.shape[1]}, conv expects {p.in_channels}"
        )
    if p.padding_mode == "reflect":
        xp = pad_reflect(x, p.padding)
    else:
        xp = _pad_zeros(x, p.padding)
    kh, kw = p.kernel_size
    ho = _out_extent(xp.shape[2], kh, p.stride, "height (axis 2)")
    wo = _out_extent(xp.shape[3], kw, p.stride, "width (axis 3)")
    w = p.weight.astype(x.dtype, copy=False)
    if _USE_REFERENCE:
        out = _conv_reference(xp, w, p.stride, p.groups, ho, wo)
    else:
        out = _conv_fast(xp, w, p.stride, p.groups, ho, wo)
    if p.bias is not None:
        out += p.bias.astype(x.dtype, copy=False)[None, :, None, None]
    return _finite(out)


def _conv_reference(xp, w, stride, groups, ho, wo):
    n = xp.shape[0]
    o_total, cg, kh, kw = w.shape
    og = o_total // groups
    out = np.zeros((n, o_total, ho, wo), dtype=xp.dtype)
    for b in range(n):
        for o in range(o_total):
            g = o // og
            chans = xp[b, g * cg:(g + 1) * cg]
            for i in range(ho):
                for j in range(wo):
                    win = chans[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(win * w[o])
    return out


def _conv_fast(xp, w, stride, groups, ho, wo):
    n, c = xp.shape[:2]
    o_total, cg, kh, kw = w.shape
    if groups == 1:
        return _gemm_conv(xp, w, stride, ho, wo)
    if cg == 1 and o_total == c:
        # depthwise: one tap at a time, fixed summation order
        out = np.zeros((n, c, ho, wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                tap = w[:, 0, i, j][None, :, None, None]
                out += tap * xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
        return out
    og = o_total // groups
    return np.concatenate(
        [_gemm_conv(xp[:, g * cg:(g + 1) * cg], w[g * og:(g + 1) * og], stride, ho, wo) for g in range(groups)],
        axis=1,
    )


def _gemm_conv(xp, w, stride, ho, wo):
    # accumulate in float64 so float32 outputs are (near) correctly rounded
    dtype = xp.dtype
    xp, w = xp.astype(np.float64, copy=False), w.astype(np.float64, copy=False)
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    if kh == 1 and kw == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho * wo)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(n, o, ho, wo).astype(dtype, copy=False)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape (N, in_features)."""
    x = as_tensor(x)
    _require_rank(x, 2)
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(
            f"inner dimension mismatch: input has {x.shape[1]} features, weight is {weight.shape}"
        )
    out = (x.astype(np.float64) @ weight.astype(np.float64).T).astype(x.dtype)
    if bias is not None:
        out += bias.astype(x.dtype, copy=False)
    return _finite(out)


def _window_reduce(x, kernel, stride, reduce, init):
    n, c, h, w = x.shape
    ho = _out_extent(h, kernel, stride, "height (axis 2)")
    wo = _out_extent(w, kernel, stride, "width (axis 3)")
    if _USE_REFERENCE:
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        for i in range(ho):
            for j in range(wo):
                win = x[:, :, i * stride:i * stride + kernel, j * stride:j * stride + kernel]
                out[:, :, i, j] = np.max(win, axis=(2, 3)) if reduce is np.maximum else np.sum(win, axis=(2, 3))
        return out
    out = np.full((n, c, ho, wo), init, dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            reduce(out, x[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride], out=out)
    return out


def max_pool2d(x: Tensor, kernel: int, stride: int, pad: int = 0) -> Tensor:
    """Windowed maximum; padded cells count as -inf and never win."""
    x = as_tensor(x)
    _require_rank(x, 4)
    xp = _pad_zeros(x, pad, value=-np.inf)
    return _finite(_window_reduce(xp, kernel, stride, np.maximum, -np.inf))


def avg_pool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Windowed arithmetic mean (generic sliding-window path, no padding)."""
    x = as_tensor(x)
    _require_rank(x, 4)
    out = _window_reduce(x, kernel, stride, np.add, 0.0)
    out /= kernel * kernel
    return _finite(out)


def add(x: Tensor, y: Tensor, inplace: bool = False) -> Tensor:
    """Elementwise sum. With ``inplace`` the result is written into ``x``."""
    _same_shape(x, y)
    out = x if inplace else x.copy()
    np.add(out, y, out=out)
    return _finite(out)


def leaky_relu(x: Tensor, slope: float = 0.01, inplace: bool = False) -> Tensor:
    """``x`` where ``x >= 0`` else ``slope * x``. NaN propagates."""
    if slope < 0:
        raise ValueError(f"slope must be >= 0, got {slope}")
    out = x if inplace else x.copy()
    if slope != 1.0:
        np.multiply(out, out.dtype.type(slope), out=out, where=out < 0)
    return _finite(out)


def relu(x: Tensor, inplace: bool = False) -> Tensor:
    return leaky_relu(x, 0.0, inplace=inplace)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow for large |x|."""
    x = np.asarray(x)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _finite(out)


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax, evaluated in float64."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def mul_broadcast_channel(x: Tensor, gate: Tensor, inplace: bool = False) -> Tensor:
    """Scale every (n, c) spatial map of ``x`` by ``gate[n, c, 0, 0]``."""
    _require_rank(x, 4)
    if gate.ndim == 2:
        gate = gate[:, :, None, None]
    if gate.shape != (x.shape[0], x.shape[1], 1, 1):
        raise DimensionError(f"gate shape {gate.shape} does not match (N, C) of {x.shape}")
    out = x if inplace else x.copy()
    np.multiply(out, gate.astype(out.dtype, copy=False), out=out)
    return _finite(out)
