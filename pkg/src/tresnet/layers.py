"""TResNet building blocks: SpaceToDepth stem, anti-aliased downsampling,
Inplace-ABN, squeeze-and-excitation, fast global average pooling, the two
residual block types and the asymmetric focal loss."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionError, ParameterError, ValidationError
from .tensor import (
    ConvParams,
    Tensor,
    _finite,
    add,
    as_tensor,
    conv2d,
    leaky_relu,
    linear,
    mul_broadcast_channel,
    relu,
    sigmoid,
)

BASIC = "basic"
BOTTLENECK = "bottleneck"
EXPANSION = 4

# binomial taps of the fixed low-pass filter; the outer product is normalised to sum 1
_BLUR_TAPS = (1.0, 2.0, 1.0)


def space_to_depth(x: Tensor, block: int = 4) -> Tensor:
    """Move each ``block x block`` spatial patch into the channel axis.

    Output channel ``(h_off * block + w_off) * C + c`` holds input channel ``c``
    at intra-block offset ``(h_off, w_off)``. Pure data movement.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"space_to_depth expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % block or w % block:
        raise DimensionError(f"spatial extents {h}x{w} not divisible by block {block}")
    y = x.reshape(n, c, h // block, block, w // block, block)
    y = y.transpose(0, 3, 5, 1, 2, 4)
    return np.ascontiguousarray(y).reshape(n, c * block * block, h // block, w // block)


def depth_to_space(x: Tensor, block: int = 4) -> Tensor:
    """Exact inverse of :func:`space_to_depth`."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"depth_to_space expects NCHW, got {x.shape}")
    n, cb, h, w = x.shape
    if cb % (block * block):
        raise DimensionError(f"channel extent {cb} not divisible by {block * block}")
    c = cb // (block * block)
    y = x.reshape(n, block, block, c, h, w).transpose(0, 3, 4, 1, 5, 2)
    return np.ascontiguousarray(y).reshape(n, c, h * block, w * block)


def blur_filter(channels: int) -> ConvParams:
    """Fixed depthwise 3x3 binomial blur, stride 2, reflect padding 1."""
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    taps = np.asarray(_BLUR_TAPS, dtype=np.float32)
    kernel = np.outer(taps, taps)
    kernel = kernel / kernel.sum()
    weight = np.ascontiguousarray(np.broadcast_to(kernel, (channels, 1, 3, 3)))
    weight.setflags(write=False)
    return ConvParams(weight=weight, stride=2, padding=1, padding_mode="reflect", groups=channels)


def aa_downsample(x: Tensor, channels: Optional[int] = None) -> Tensor:
    """Blur with :func:`blur_filter` and subsample by 2."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"aa_downsample expects NCHW, got {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise DimensionError(f"channel axis (1) has {x.shape[1]}, expected {channels}")
    if min(x.shape[2:]) < 2:
        raise DimensionError(f"spatial extents {x.shape[2:]} too small for reflect padding")
    return conv2d(x, blur_filter(x.shape[1]))


@dataclass(frozen=True, eq=False)
class IabnParams:
    """Inference-mode batch norm fused with a leaky ReLU.

    ``slope=None`` selects the identity activation (normalisation only).
    """

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    slope: Optional[float] = 0.01

    def __post_init__(self):
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != c:
                raise ParameterError(f"{name} shape {getattr(self, name).shape} != gamma shape {c}")
        if self.eps <= 0:
            raise ParameterError(f"eps must be > 0, got {self.eps}")
        if np.any(self.running_var < 0):
            raise ParameterError("running_var must be non-negative")
        if self.slope is not None and self.slope < 0:
            raise ParameterError(f"slope must be >= 0, got {self.slope}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def scale_shift(self, dtype=np.float32):
        """Per-channel affine coefficients equivalent to the normalisation."""
        dtype = np.dtype(dtype)
        scale = self.gamma.astype(dtype) / np.sqrt(self.running_var.astype(dtype) + dtype.type(self.eps))
        shift = self.beta.astype(dtype) - self.running_mean.astype(dtype) * scale
        return scale, shift

    @classmethod
    def identity(cls, channels: int, slope: Optional[float] = 0.01, gamma: float = 1.0):
        return cls(
            gamma=np.full(channels, gamma, np.float32),
            beta=np.zeros(channels, np.float32),
            running_mean=np.zeros(channels, np.float32),
            running_var=np.ones(channels, np.float32),
            slope=slope,
        )


def iabn(x: Tensor, p: IabnParams, inplace: bool = False) -> Tensor:
    """Normalise with running statistics, apply the affine map and the activation."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"iabn over {p.channels} channels got input {x.shape}")
    if np.any(p.running_var < 0):
        raise ParameterError("running_var must be non-negative")
    scale, shift = p.scale_shift(x.dtype)
    out = x if inplace else x.copy()
    np.multiply(out, scale[None, :, None, None], out=out)
    np.add(out, shift[None, :, None, None], out=out)
    if p.slope is not None:
        leaky_relu(out, p.slope, inplace=True)
    return _finite(out)


def fast_gap(x: Tensor, flatten: bool = False) -> Tensor:
    """Global average pool as one flat reduction over H*W per (n, c)."""
    if x.ndim != 4:
        raise DimensionError(f"fast_gap expects NCHW, got {x.shape}")
    n, c = x.shape[:2]
    out = x.reshape(n, c, -1).mean(axis=-1)
    return out if flatten else out.reshape(n, c, 1, 1)


def se_reduced_width(channels: int, reduction: int) -> int:
    """``max(1, round(channels / reduction))`` with halves rounded up."""
    return max(1, int(np.floor(channels / reduction + 0.5)))


@dataclass(frozen=True, eq=False)
class SeParams:
    w_reduce: Tensor
    b_reduce: Tensor
    w_expand: Tensor
    b_expand: Tensor
    reduction: int

    def __post_init__(self):
        c_red, c = self.w_reduce.shape
        if c_red != se_reduced_width(c, self.reduction):
            raise ParameterError(
                f"reduced width {c_red} != max(1, round({c}/{self.reduction}))"
            )
        if self.b_reduce.shape != (c_red,) or self.w_expand.shape != (c, c_red) or self.b_expand.shape != (c,):
            raise ParameterError("inconsistent SE parameter shapes")

    @property
    def channels(self) -> int:
        return self.w_reduce.shape[1]


def se_gate(x: Tensor, p: SeParams) -> Tensor:
    """Per-sample channel gate in (0, 1), shape (N, C)."""
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise DimensionError(f"SE over {p.channels} channels got input {x.shape}")
    squeezed = fast_gap(x, flatten=True)
    hidden = relu(linear(squeezed, p.w_reduce, p.b_reduce), inplace=True)
    return sigmoid(linear(hidden, p.w_expand, p.b_expand))


def se_block(x: Tensor, p: SeParams, inplace: bool = False) -> Tensor:
    return mul_broadcast_channel(x, se_gate(x, p), inplace=inplace)


@dataclass(frozen=True, eq=False)
class Downsample:
    """Shortcut projection: 1x1 conv, optional blur, identity-activation IABN."""

    conv: ConvParams
    iabn: IabnParams


@dataclass(frozen=True, eq=False)
class BlockParams:
    """Parameters of one residual block.

    ``convs``/``iabns`` hold two entries for a basic block and three for a
    bottleneck. With ``anti_alias`` the convolutions run at stride 1 and a
    blur downsample follows when ``stride == 2``; otherwise the stride lives
    in the convolution itself (ResNet50 style).
    """

    kind: str
    stride: int
    convs: tuple
    iabns: tuple
    se: Optional[SeParams] = None
    downsample: Optional[Downsample] = None
    anti_alias: bool = True
    slope: float = 0.01
    in_channels: int = field(init=False)
    out_channels: int = field(init=False)

    def __post_init__(self):
        n_convs = {BASIC: 2, BOTTLENECK: 3}.get(self.kind)
        if n_convs is None:
            raise ParameterError(f"unknown block kind {self.kind!r}")
        if len(self.convs) != n_convs or len(self.iabns) != n_convs:
            raise ParameterError(f"{self.kind} block needs {n_convs} convs and IABNs")
        if self.stride not in (1, 2):
            raise ParameterError(f"stride must be 1 or 2, got {self.stride}")
        object.__setattr__(self, "in_channels", self.convs[0].in_channels)
        object.__setattr__(self, "out_channels", self.convs[-1].out_channels)
        if self.kind == BOTTLENECK and self.convs[0].out_channels * EXPANSION != self.out_channels:
            raise ParameterError("bottleneck expansion must be 4")
        needs_projection = self.stride == 2 or self.in_channels != self.out_channels
        if needs_projection != (self.downsample is not None):
            raise ParameterError("downsample branch must be present iff stride 2 or channel change")


def _strided(x: Tensor, conv: ConvParams, stride: int, anti_alias: bool) -> Tensor:
    out = conv2d(x, conv)
    if stride == 2 and anti_alias:
        out = aa_downsample(out)
    return out


def shortcut(x: Tensor, p: BlockParams) -> Tensor:
    """Identity, or the projection branch.

    With anti-aliasing the blur runs before the 1x1 projection. A 1x1 conv
    commutes with a channel-uniform blur (padding and subsampling included),
    so this equals conv-then-blur at a quarter of the projection cost.
    """
    if p.downsample is None:
        return x
    if p.stride == 2 and p.anti_alias:
        out = conv2d(aa_downsample(x), p.downsample.conv)
    else:
        out = conv2d(x, p.downsample.conv)
    return iabn(out, p.downsample.iabn, inplace=True)


def basic_block(x: Tensor, p: BlockParams, inplace: bool = True) -> Tensor:
    """conv3x3 -> IABN(leaky) -> conv3x3 -> IABN(identity) -> [SE] -> + shortcut -> leaky."""
    if p.kind != BASIC:
        raise ParameterError(f"basic_block given a {p.kind} block")
    x = as_tensor(x)
    out = _strided(x, p.convs[0], p.stride, p.anti_alias)
    out = iabn(out, p.iabns[0], inplace=inplace)
    out = conv2d(out, p.convs[1])
    out = iabn(out, p.iabns[1], inplace=inplace)
    if p.se is not None:
        out = se_block(out, p.se, inplace=inplace)
    out = add(out, shortcut(x, p), inplace=inplace)
    return leaky_relu(out, p.slope, inplace=inplace)


def bottleneck_block(x: Tensor, p: BlockParams, inplace: bool = True) -> Tensor:
    """1x1 reduce -> 3x3 -> [SE] -> 1x1 expand, residual sum, leaky."""
    if p.kind != BOTTLENECK:
        raise ParameterError(f"bottleneck_block given a {p.kind} block")
    x = as_tensor(x)
    out = conv2d(x, p.convs[0])
    out = iabn(out, p.iabns[0], inplace=inplace)
    out = _strided(out, p.convs[1], p.stride, p.anti_alias)
    out = iabn(out, p.iabns[1], inplace=inplace)
    if p.se is not None:
        out = se_block(out, p.se, inplace=inplace)
    out = conv2d(out, p.convs[2])
    out = iabn(out, p.iabns[2], inplace=inplace)
    out = add(out, shortcut(x, p), inplace=inplace)
    return leaky_relu(out, p.slope, inplace=inplace)


def run_block(x: Tensor, p: BlockParams, inplace: bool = True) -> Tensor:
    fn = basic_block if p.kind == BASIC else bottleneck_block
    return fn(x, p, inplace=inplace)


PROB_CLAMP = 1e-7


def asymmetric_focal_loss(pred_logits, targets, gamma_pos: float = 0.0, gamma_neg: float = 4.0) -> float:
    """Multi-label focal loss with separate focusing exponents for positives and negatives.

    Mean over all (n, k) of
    ``-[y (1-p)^gamma_pos log p + (1-y) p^gamma_neg log(1-p)]`` with
    ``p = sigmoid(logit)`` clamped to ``[1e-7, 1 - 1e-7]``. Evaluated in float64.
    """
    if gamma_pos < 0 or gamma_neg < 0:
        raise ValidationError("focusing exponents must be non-negative")
    logits = np.asarray(pred_logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if logits.shape != y.shape:
        raise DimensionError(f"logits {logits.shape} and targets {y.shape} differ")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("targets must be binary (0 or 1)")
    p = np.clip(sigmoid(logits), PROB_CLAMP, 1 - PROB_CLAMP)
    pos = y * (1 - p) ** gamma_pos * np.log(p)
    neg = (1 - y) * p ** gamma_neg * np.log1p(-p)
    return float(-np.mean(pos + neg))
