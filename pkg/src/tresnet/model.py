"""TResNet-M/L/XL and the ResNet50 baseline, built from declarative stage specs."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import (
    BASIC,
    BOTTLENECK,
    EXPANSION,
    BlockParams,
    Downsample,
    IabnParams,
    SeParams,
    fast_gap,
    iabn,
    run_block,
    se_reduced_width,
    space_to_depth,
)
from .tensor import ConvParams, Tensor, as_tensor, conv2d, linear, max_pool2d

STEM_S2D = "s2d"
STEM_CONV7 = "conv7x7"
S2D_BLOCK = 4
SE_REDUCTION = {BASIC: 4, BOTTLENECK: 8}
INPUT_DIVISOR = 32

# names ending in these suffixes are running statistics, not learnable
BUFFER_SUFFIXES = (".mean", ".var")


@dataclass(frozen=True)
class StageSpec:
    block_kind: str
    repeats: int
    out_channels: int
    stride: int
    use_se: bool

    @property
    def width(self) -> int:
        """Channel count of the 3x3 convolutions."""
        return self.out_channels // EXPANSION if self.block_kind == BOTTLENECK else self.out_channels


@dataclass(frozen=True)
class ModelConfig:
    variant_name: str
    stem_conv_channels: int
    stages: Tuple[StageSpec, ...]
    num_classes: int = 1000
    leaky_slope: float = 0.01
    stem: str = STEM_S2D
    anti_alias: bool = True

    def violations(self) -> List[str]:
        problems = []
        if self.stem_conv_channels < 1:
            problems.append("stem_conv_channels must be >= 1")
        if self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if self.leaky_slope < 0:
            problems.append("leaky_slope must be >= 0")
        if self.stem not in (STEM_S2D, STEM_CONV7):
            problems.append(f"unknown stem {self.stem!r}")
        if len(self.stages) != 4:
            problems.append(f"expected 4 stages, got {len(self.stages)}")
        for i, s in enumerate(self.stages, 1):
            if s.block_kind not in (BASIC, BOTTLENECK):
                problems.append(f"stage{i}: unknown block kind {s.block_kind!r}")
            if s.repeats < 1:
                problems.append(f"stage{i}: repeats must be >= 1")
            if s.out_channels < 1:
                problems.append(f"stage{i}: out_channels must be >= 1")
            if s.block_kind == BOTTLENECK and s.out_channels % EXPANSION:
                problems.append(f"stage{i}: bottleneck out_channels must be divisible by {EXPANSION}")
            if s.stride not in (1, 2):
                problems.append(f"stage{i}: stride must be 1 or 2")
        return problems

    def validate(self) -> "ModelConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return {
            "variant_name": self.variant_name,
            "stem_conv_channels": self.stem_conv_channels,
            "stages": [vars(s).copy() for s in self.stages],
            "num_classes": self.num_classes,
            "leaky_slope": self.leaky_slope,
            "stem": self.stem,
            "anti_alias": self.anti_alias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        return cls(**d).validate()


def _tresnet(name, stem, repeats, channels):
    kinds = (BASIC, BASIC, BOTTLENECK, BOTTLENECK)
    strides = (1, 2, 2, 2)
    se = (True, True, True, False)
    stages = tuple(StageSpec(*args) for args in zip(kinds, repeats, channels, strides, se))
    return ModelConfig(variant_name=name, stem_conv_channels=stem, stages=stages)


TRESNET_M = _tresnet("tresnet_m", 64, (3, 4, 11, 3), (64, 128, 1024, 2048))
TRESNET_L = _tresnet("tresnet_l", 76, (4, 5, 18, 3), (76, 152, 1216, 2432))
TRESNET_XL = _tresnet("tresnet_xl", 84, (4, 5, 24, 3), (84, 168, 1344, 2688))
RESNET50 = ModelConfig(
    variant_name="resnet50",
    stem_conv_channels=64,
    stages=tuple(
        StageSpec(BOTTLENECK, r, c, s, False)
        for r, c, s in ((3, 256, 1), (4, 512, 2), (6, 1024, 2), (3, 2048, 2))
    ),
    leaky_slope=0.0,
    stem=STEM_CONV7,
    anti_alias=False,
)

VARIANTS: Dict[str, ModelConfig] = {
    "m": TRESNET_M,
    "l": TRESNET_L,
    "xl": TRESNET_XL,
    "resnet50": RESNET50,
}


def get_config(variant: str, num_classes: Optional[int] = None) -> ModelConfig:
    key = variant.lower().replace("tresnet_", "").replace("tresnet-", "")
    if key not in VARIANTS:
        raise KeyError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    cfg = VARIANTS[key]
    return cfg if num_classes is None else replace(cfg, num_classes=num_classes)


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: Tuple[int, ...]
    init: str  # conv | zeros | ones | gamma0

    @property
    def learnable(self) -> bool:
        return not self.name.endswith(BUFFER_SUFFIXES)


def _iabn_specs(prefix, channels, zero_gamma=False):
    yield TensorSpec(f"{prefix}.gamma", (channels,), "gamma0" if zero_gamma else "ones")
    yield TensorSpec(f"{prefix}.beta", (channels,), "zeros")
    yield TensorSpec(f"{prefix}.mean", (channels,), "zeros")
    yield TensorSpec(f"{prefix}.var", (channels,), "ones")


def _conv_spec(name, out_ch, in_ch, k):
    return TensorSpec(name, (out_ch, in_ch, k, k), "conv")


def block_layout(config: ModelConfig) -> Iterator[Tuple[str, StageSpec, int, int, int]]:
    """Yield ``(prefix, stage, stride, in_channels, out_channels)`` per block."""
    cin = config.stem_conv_channels
    for si, stage in enumerate(config.stages, 1):
        for bi in range(stage.repeats):
            stride = stage.stride if bi == 0 else 1
            yield f"stage{si}.block{bi + 1}", stage, stride, cin, stage.out_channels
            cin = stage.out_channels


def tensor_specs(config: ModelConfig) -> List[TensorSpec]:
    """Every named tensor of the model, in canonical (manifest) order."""
    specs: List[TensorSpec] = []
    c0 = config.stem_conv_channels
    if config.stem == STEM_S2D:
        specs.append(_conv_spec("stem.conv.weight", c0, 3 * S2D_BLOCK * S2D_BLOCK, 1))
    else:
        specs.append(_conv_spec("stem.conv.weight", c0, 3, 7))
    specs.extend(_iabn_specs("stem.iabn", c0))
    for prefix, stage, stride, cin, cout in block_layout(config):
        w = stage.width
        if stage.block_kind == BASIC:
            specs.append(_conv_spec(f"{prefix}.conv1.weight", w, cin, 3))
            specs.extend(_iabn_specs(f"{prefix}.iabn1", w))
            specs.append(_conv_spec(f"{prefix}.conv2.weight", cout, w, 3))
            specs.extend(_iabn_specs(f"{prefix}.iabn2", cout, zero_gamma=True))
        else:
            specs.append(_conv_spec(f"{prefix}.conv1.weight", w, cin, 1))
            specs.extend(_iabn_specs(f"{prefix}.iabn1", w))
            specs.append(_conv_spec(f"{prefix}.conv2.weight", w, w, 3))
            specs.extend(_iabn_specs(f"{prefix}.iabn2", w))
            specs.append(_conv_spec(f"{prefix}.conv3.weight", cout, w, 1))
            specs.extend(_iabn_specs(f"{prefix}.iabn3", cout, zero_gamma=True))
        if stage.use_se:
            se_ch = w
            red = se_reduced_width(se_ch, SE_REDUCTION[stage.block_kind])
            specs.append(TensorSpec(f"{prefix}.se.w_reduce", (red, se_ch), "conv"))
            specs.append(TensorSpec(f"{prefix}.se.b_reduce", (red,), "zeros"))
            specs.append(TensorSpec(f"{prefix}.se.w_expand", (se_ch, red), "conv"))
            specs.append(TensorSpec(f"{prefix}.se.b_expand", (se_ch,), "zeros"))
        if stride == 2 or cin != cout:
            specs.append(_conv_spec(f"{prefix}.downsample.conv.weight", cout, cin, 1))
            specs.extend(_iabn_specs(f"{prefix}.downsample.iabn", cout))
    last = config.stages[-1].out_channels
    specs.append(TensorSpec("head.fc.weight", (config.num_classes, last), "zeros"))
    specs.append(TensorSpec("head.fc.bias", (config.num_classes,), "zeros"))
    return specs


def _init_tensor(spec: TensorSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init == "conv":
        fan_out = spec.shape[0] * int(np.prod(spec.shape[2:], dtype=np.int64))
        std = np.float32(np.sqrt(2.0 / fan_out))
        return rng.standard_normal(spec.shape, dtype=np.float32) * std
    if spec.init == "ones":
        return np.ones(spec.shape, np.float32)
    return np.zeros(spec.shape, np.float32)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Model:
    config: ModelConfig
    stem_conv: ConvParams
    stem_iabn: IabnParams
    blocks: List[Tuple[str, BlockParams]]
    fc_weight: Tensor
    fc_bias: Tensor
    tensors: "OrderedDict[str, np.ndarray]" = field(repr=False, default_factory=OrderedDict)

    def named_tensors(self) -> "OrderedDict[str, np.ndarray]":
        return self.tensors

    @property
    def parameter_count(self) -> int:
        """Learnable elements (running statistics and blur filters excluded)."""
        return sum(int(t.size) for n, t in self.tensors.items() if not n.endswith(BUFFER_SUFFIXES))

    def stage_of(self, prefix: str) -> int:
        return int(prefix.split(".")[0][len("stage"):])


def assemble(config: ModelConfig, tensors: "OrderedDict[str, np.ndarray]") -> Model:
    """Wire named tensors into layer parameter bundles (shapes must already match)."""
    config.validate()
    slope = config.leaky_slope
    aa = config.anti_alias

    def t(name):
        return tensors[name]

    def bn(prefix, act=True):
        return IabnParams(t(f"{prefix}.gamma"), t(f"{prefix}.beta"), t(f"{prefix}.mean"), t(f"{prefix}.var"),
                          slope=slope if act else None)

    def conv(name, stride=1):
        w = t(name)
        pad = w.shape[-1] // 2
        return ConvParams(weight=w, stride=stride, padding=pad)

    if config.stem == STEM_S2D:
        stem_conv = conv("stem.conv.weight")
    else:
        stem_conv = conv("stem.conv.weight", stride=2)
    stem_iabn = bn("stem.iabn")

    blocks = []
    for prefix, stage, stride, cin, cout in block_layout(config):
        conv_stride = 1 if aa else stride
        if stage.block_kind == BASIC:
            convs = (conv(f"{prefix}.conv1.weight", conv_stride), conv(f"{prefix}.conv2.weight"))
            iabns = (bn(f"{prefix}.iabn1"), bn(f"{prefix}.iabn2", act=False))
        else:
            convs = (conv(f"{prefix}.conv1.weight"), conv(f"{prefix}.conv2.weight", conv_stride),
                     conv(f"{prefix}.conv3.weight"))
            iabns = (bn(f"{prefix}.iabn1"), bn(f"{prefix}.iabn2"), bn(f"{prefix}.iabn3", act=False))
        se = None
        if stage.use_se:
            se = SeParams(t(f"{prefix}.se.w_reduce"), t(f"{prefix}.se.b_reduce"),
                          t(f"{prefix}.se.w_expand"), t(f"{prefix}.se.b_expand"),
                          reduction=SE_REDUCTION[stage.block_kind])
        ds = None
        if stride == 2 or cin != cout:
            ds = Downsample(conv(f"{prefix}.downsample.conv.weight", conv_stride),
                            bn(f"{prefix}.downsample.iabn", act=False))
        blocks.append((prefix, BlockParams(kind=stage.block_kind, stride=stride, convs=convs, iabns=iabns,
                                           se=se, downsample=ds, anti_alias=aa, slope=slope)))
    return Model(config=config, stem_conv=stem_conv, stem_iabn=stem_iabn, blocks=blocks,
                 fc_weight=t("head.fc.weight"), fc_bias=t("head.fc.bias"), tensors=tensors)


def build(config: ModelConfig, init_seed: int = 0) -> Model:
    """Build a model with deterministic parameters drawn from ``init_seed``.

    Conv and SE projection weights ~ N(0, 2/fan_out); IABN gamma=1 except the
    last IABN of each residual branch (gamma=0); beta=0, mean=0, var=1;
    classifier zero.
    """
    config.validate()
    rng = np.random.default_rng(init_seed)
    tensors = OrderedDict((s.name, _init_tensor(s, rng)) for s in tensor_specs(config))
    return assemble(config, tensors)


def build_resnet50_baseline(num_classes: int = 1000, init_seed: int = 0) -> Model:
    return build(replace(RESNET50, num_classes=num_classes), init_seed)


def check_input(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"input must be NCHW, got shape {x.shape}")
    if x.shape[1] != 3:
        raise DimensionError(f"input channel axis (1) must be 3, got {x.shape[1]}")
    h, w = x.shape[2:]
    if h % INPUT_DIVISOR or w % INPUT_DIVISOR:
        raise DimensionError(f"input height and width must each be divisible by {INPUT_DIVISOR}, got {h}x{w}")
    return x


def forward_features(m: Model, x: Tensor, inplace: bool = True, collect: bool = False):
    """Run stem and stages. Returns the last feature map, plus stage outputs if ``collect``."""
    x = check_input(x)
    if m.config.stem == STEM_S2D:
        out = space_to_depth(x, S2D_BLOCK)
        out = iabn(conv2d(out, m.stem_conv), m.stem_iabn, inplace=True)
    else:
        out = iabn(conv2d(x, m.stem_conv), m.stem_iabn, inplace=True)
        out = max_pool2d(out, 3, 2, 1)
    stages: Dict[str, Tensor] = {"stem": out} if collect else {}
    for prefix, block in m.blocks:
        out = run_block(out, block, inplace=inplace)
        if collect:
            stages[prefix.split(".")[0]] = out
    return (out, stages) if collect else out


def forward(m: Model, x: Tensor, inplace: bool = True) -> Tensor:
    """Logits of shape (N, num_classes)."""
    feats = forward_features(m, x, inplace=inplace)
    pooled = fast_gap(feats, flatten=True)
    return linear(pooled, m.fc_weight, m.fc_bias)
