"""Static cost analysis: parameters, multiply-accumulates and activation memory.

Counting convention: one multiply-accumulate (MAC) is one FLOP unit. With it,
ResNet50 at 224x224 comes to ~4.1G. Convolutions cost
``out_elems * in_ch/groups * kh * kw``, linear layers ``in * out``, and every
normalisation, activation, pool, residual add and SE multiply costs one
per output element. The fixed blur filters cost 9 per output element.

Activation memory
-----------------
Training: each op's output is a tensor kept for the backward pass. Without
in-place execution an IABN with an activation stores two tensors (normalised
and activated). With in-place execution, IABN, the residual add, the post-sum
activation and the SE multiply overwrite their input, so they store nothing
new.

Inference: ops run one at a time. An op needs its input, its output (unless
in-place), and the block input held for the residual sum.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Sequence, Union

from .errors import DimensionError
from .layers import BASIC, se_reduced_width
from .model import (
    INPUT_DIVISOR,
    S2D_BLOCK,
    SE_REDUCTION,
    STEM_S2D,
    Model,
    ModelConfig,
    block_layout,
)

MAC_CONVENTION = "1 multiply-accumulate = 1 FLOP; elementwise/norm/pool ops = 1 per output element"
DEFAULT_BYTES_PER_ELEMENT = 2

# ops whose in-place variant overwrites the input buffer
INPLACE_OPS = frozenset({"iabn", "add", "act", "se_scale"})


@dataclass
class TraceOp:
    name: str
    op: str
    out_shape: tuple  # (C, H, W) or (F,), per image
    params: int = 0
    macs: int = 0
    branch: str = "main"  # stem | main | se | shortcut | join | head
    activated: bool = False  # IABN followed by a leaky/ReLU

    @property
    def out_elems(self) -> int:
        n = 1
        for d in self.out_shape:
            n *= d
        return n


def _config_of(m: Union[Model, ModelConfig]) -> ModelConfig:
    return m.config if isinstance(m, Model) else m


def check_resolution(resolution: int) -> None:
    if resolution < INPUT_DIVISOR or resolution % INPUT_DIVISOR:
        raise DimensionError(f"resolution must be a positive multiple of {INPUT_DIVISOR}, got {resolution}")


def conv_cost(in_ch: int, out_ch: int, kernel: int, size: int, stride: int = 1, groups: int = 1,
              bias: bool = False):
    """``(params, macs, out_size)`` of one square conv with 'same' padding on a ``size``-square map."""
    out_size = (size + 2 * (kernel // 2) - kernel) // stride + 1
    weights = out_ch * (in_ch // groups) * kernel * kernel
    macs = out_size * out_size * weights
    return weights + (out_ch if bias else 0), macs, out_size


def _conv(name, cin, cout, k, h, stride=1, branch="main", groups=1):
    params, macs, ho = conv_cost(cin, cout, k, h, stride, groups)
    return TraceOp(name, "conv", (cout, ho, ho), params=params, macs=macs, branch=branch), ho


def _blur(name, c, h, branch="main"):
    ho = (h + 2 - 3) // 2 + 1
    return TraceOp(name, "blur", (c, ho, ho), macs=9 * c * ho * ho, branch=branch), ho


def _elementwise(name, op, shape, branch="main", params=0, activated=False):
    t = TraceOp(name, op, shape, params=params, branch=branch, activated=activated)
    t.macs = t.out_elems
    return t


def trace(m: Union[Model, ModelConfig], resolution: int = 224) -> List[TraceOp]:
    """Per-image op sequence of the forward pass, in execution order."""
    check_resolution(resolution)
    cfg = _config_of(m)
    ops: List[TraceOp] = []
    c0 = cfg.stem_conv_channels
    if cfg.stem == STEM_S2D:
        h = resolution // S2D_BLOCK
        ops.append(TraceOp("stem.s2d", "space_to_depth", (3 * S2D_BLOCK ** 2, h, h), branch="stem"))
        op, h = _conv("stem.conv", 3 * S2D_BLOCK ** 2, c0, 1, h, branch="stem")
        ops.append(op)
        ops.append(_elementwise("stem.iabn", "iabn", (c0, h, h), "stem", params=2 * c0, activated=True))
    else:
        op, h = _conv("stem.conv", 3, c0, 7, resolution, stride=2, branch="stem")
        ops.append(op)
        ops.append(_elementwise("stem.iabn", "iabn", (c0, h, h), "stem", params=2 * c0, activated=True))
        h = (h + 2 - 3) // 2 + 1
        ops.append(_elementwise("stem.maxpool", "maxpool", (c0, h, h), "stem"))

    aa = cfg.anti_alias
    for prefix, stage, stride, cin, cout in block_layout(cfg):
        w = stage.width
        h_in = h

        def strided_conv(name, ci, co, k, hh, branch="main"):
            if stride == 2 and aa:
                op, hh = _conv(name, ci, co, k, hh, 1, branch)
                blur, hh = _blur(name + ".blur", co, hh, branch)
                return [op, blur], hh
            op, hh = _conv(name, ci, co, k, hh, stride, branch)
            return [op], hh

        if stage.block_kind == BASIC:
            seq, h = strided_conv(f"{prefix}.conv1", cin, w, 3, h)
            ops += seq
            ops.append(_elementwise(f"{prefix}.iabn1", "iabn", (w, h, h), params=2 * w, activated=True))
            op, h = _conv(f"{prefix}.conv2", w, cout, 3, h)
            ops.append(op)
            ops.append(_elementwise(f"{prefix}.iabn2", "iabn", (cout, h, h), params=2 * cout))
        else:
            op, _ = _conv(f"{prefix}.conv1", cin, w, 1, h)
            ops.append(op)
            ops.append(_elementwise(f"{prefix}.iabn1", "iabn", (w, h, h), params=2 * w, activated=True))
            seq, h = strided_conv(f"{prefix}.conv2", w, w, 3, h)
            ops += seq
            ops.append(_elementwise(f"{prefix}.iabn2", "iabn", (w, h, h), params=2 * w, activated=True))
        if stage.use_se:
            se_c = w
            red = se_reduced_width(se_c, SE_REDUCTION[stage.block_kind])
            ops.append(_elementwise(f"{prefix}.se.pool", "gap", (se_c,), "se"))
            ops.append(TraceOp(f"{prefix}.se.fc1", "linear", (red,), params=red * se_c + red,
                               macs=red * se_c, branch="se"))
            ops.append(_elementwise(f"{prefix}.se.relu", "relu", (red,), "se"))
            ops.append(TraceOp(f"{prefix}.se.fc2", "linear", (se_c,), params=se_c * red + se_c,
                               macs=se_c * red, branch="se"))
            ops.append(_elementwise(f"{prefix}.se.sigmoid", "sigmoid", (se_c,), "se"))
            ops.append(_elementwise(f"{prefix}.se.scale", "se_scale", (se_c, h, h)))
        if stage.block_kind != BASIC:
            op, _ = _conv(f"{prefix}.conv3", w, cout, 1, h)
            ops.append(op)
            ops.append(_elementwise(f"{prefix}.iabn3", "iabn", (cout, h, h), params=2 * cout))
        if stride == 2 or cin != cout:
            if stride == 2 and aa:
                blur, hs = _blur(f"{prefix}.downsample.blur", cin, h_in, "shortcut")
                op, hs = _conv(f"{prefix}.downsample.conv", cin, cout, 1, hs, 1, "shortcut")
                ops += [blur, op]
            else:
                op, hs = _conv(f"{prefix}.downsample.conv", cin, cout, 1, h_in, stride, "shortcut")
                ops.append(op)
            ops.append(_elementwise(f"{prefix}.downsample.iabn", "iabn", (cout, hs, hs), "shortcut",
                                    params=2 * cout))
        ops.append(_elementwise(f"{prefix}.add", "add", (cout, h, h), "join"))
        ops.append(_elementwise(f"{prefix}.act", "act", (cout, h, h), "join"))

    c_last = cfg.stages[-1].out_channels
    ops.append(_elementwise("head.gap", "gap", (c_last,), "head"))
    k = cfg.num_classes
    ops.append(TraceOp("head.fc", "linear", (k,), params=k * c_last + k, macs=k * c_last, branch="head"))
    return ops


def count_params(m: Union[Model, ModelConfig]) -> int:
    """Learnable elements. Running statistics and blur filters are not counted."""
    if isinstance(m, Model):
        return m.parameter_count
    return sum(op.params for op in trace(m, INPUT_DIVISOR * 7))


def count_macs(m: Union[Model, ModelConfig], resolution: int = 224) -> int:
    return sum(op.macs for op in trace(m, resolution))


def _train_elems(op: TraceOp, inplace_enabled: bool) -> int:
    if inplace_enabled and op.op in INPLACE_OPS:
        return 0
    if op.op == "iabn" and op.activated:
        return 2 * op.out_elems
    return op.out_elems


def _inference_live(ops: Sequence[TraceOp], inplace_enabled: bool, input_elems: int) -> List[int]:
    """Live elements while each op runs (single stream, sequential)."""
    live = []
    cur = input_elems   # main-path tensor
    held = 0            # block input retained for the residual sum
    sc = 0              # shortcut-branch tensor
    gate = 0            # SE side vector
    for op in ops:
        new = 0 if (inplace_enabled and op.op in INPLACE_OPS) else op.out_elems
        if op.branch in ("stem", "head"):
            live.append(cur + new)
            cur = op.out_elems
        elif op.branch == "main":
            if held == 0:
                held = cur  # first op of a block: its input becomes the shortcut
            live.append(held + cur + gate + new)
            cur = op.out_elems
            gate = 0
        elif op.branch == "se":
            live.append(held + cur + gate + op.out_elems)
            gate = op.out_elems
        elif op.branch == "shortcut":
            live.append(held + cur + sc + new)
            if sc == 0:
                held = 0  # block input consumed by the projection
            sc = op.out_elems
        else:  # join
            shortcut = sc if sc else held
            if op.op == "add":
                live.append(cur + shortcut + new)
                held = sc = 0
            else:
                live.append(cur + new)
            cur = op.out_elems
    return live


@dataclass
class CostRow:
    name: str
    op: str
    output_shape: tuple
    params: int
    macs: int
    act_bytes_train: int
    act_bytes_infer: int


@dataclass
class CostReport:
    variant_name: str
    input_resolution: int
    batch: int
    bytes_per_element: int
    inplace_enabled: bool
    rows: List[CostRow] = field(default_factory=list)
    peak_act_bytes_infer: int = 0

    @property
    def totals(self) -> dict:
        return {
            "params": sum(r.params for r in self.rows),
            "macs": sum(r.macs for r in self.rows),
            "act_bytes_train": sum(r.act_bytes_train for r in self.rows),
            "act_bytes_infer": sum(r.act_bytes_infer for r in self.rows),
        }

    def to_dict(self) -> dict:
        return {
            "variant_name": self.variant_name,
            "input_resolution": self.input_resolution,
            "batch": self.batch,
            "assumptions": {
                "bytes_per_element": self.bytes_per_element,
                "inplace_enabled": self.inplace_enabled,
                "mac_convention": MAC_CONVENTION,
            },
            "totals": self.totals,
            "peak_act_bytes_infer": self.peak_act_bytes_infer,
            "rows": [dict(asdict(r), output_shape=list(r.output_shape)) for r in self.rows],
        }


def cost_report(m: Union[Model, ModelConfig], resolution: int = 224, batch: int = 1,
                inplace_enabled: bool = True, bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> CostReport:
    """Per-layer table. ``act_bytes_infer`` is the new buffer each op allocates at inference."""
    cfg = _config_of(m)
    ops = trace(cfg, resolution)
    live = _inference_live(ops, inplace_enabled, 3 * resolution * resolution)
    report = CostReport(cfg.variant_name, resolution, batch, bytes_per_element, inplace_enabled)
    for op in ops:
        alloc = 0 if (inplace_enabled and op.op in INPLACE_OPS) else op.out_elems
        report.rows.append(CostRow(
            name=op.name, op=op.op, output_shape=(batch,) + tuple(op.out_shape),
            params=op.params, macs=op.macs * batch,
            act_bytes_train=_train_elems(op, inplace_enabled) * batch * bytes_per_element,
            act_bytes_infer=alloc * batch * bytes_per_element,
        ))
    report.peak_act_bytes_infer = max(live) * batch * bytes_per_element
    return report


def estimate_activation_memory(m: Union[Model, ModelConfig], batch: int = 1, resolution: int = 224,
                               inplace_enabled: bool = True, training: bool = True,
                               bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> int:
    """Stored-activation bytes (training) or peak live bytes (inference)."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    report = cost_report(m, resolution, batch, inplace_enabled, bytes_per_element)
    if training:
        return report.totals["act_bytes_train"]
    return report.peak_act_bytes_infer


def max_batch(m: Union[Model, ModelConfig], budget_bytes: int, resolution: int = 224,
              inplace_enabled: bool = True, bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> int:
    """Largest training batch whose stored activations fit in ``budget_bytes``."""
    per_image = estimate_activation_memory(m, 1, resolution, inplace_enabled, True, bytes_per_element)
    return budget_bytes // per_image


def compare(models: Iterable[Union[Model, ModelConfig]], resolution: int = 224, batch: int = 1,
            inplace_enabled: bool = True, bytes_per_element: int = DEFAULT_BYTES_PER_ELEMENT) -> List[dict]:
    """One summary row per model, in the order given."""
    rows = []
    for m in models:
        rep = cost_report(m, resolution, batch, inplace_enabled, bytes_per_element)
        rows.append({"variant_name": rep.variant_name, "resolution": resolution, "batch": batch,
                     **rep.totals, "peak_act_bytes_infer": rep.peak_act_bytes_infer})
    return rows


def _human(n: float, unit: str = "") -> str:
    for div, suffix in ((1e9, "G"), (1e6, "M"), (1e3, "K")):
        if abs(n) >= div:
            return f"{n / div:.2f}{suffix}{unit}"
    return f"{n:.0f}{unit}"


def format_report(report: CostReport, layers: bool = False) -> str:
    t = report.totals
    lines = [
        f"# {report.variant_name} @ {report.input_resolution}x{report.input_resolution}, batch {report.batch}",
        f"# MACs: {MAC_CONVENTION}",
        f"# bytes/element: {report.bytes_per_element}, in-place ops: {report.inplace_enabled}",
    ]
    if layers:
        lines.append(f"{'layer':<36} {'op':<14} {'output':<20} {'params':>10} {'macs':>14} "
                     f"{'act_train':>12} {'act_infer':>12}")
        for r in report.rows:
            lines.append(f"{r.name:<36} {r.op:<14} {'x'.join(map(str, r.output_shape)):<20} {r.params:>10} "
                         f"{r.macs:>14} {r.act_bytes_train:>12} {r.act_bytes_infer:>12}")
    lines.append(f"{'params':<22} {t['params']:>16}  ({_human(t['params'])})")
    lines.append(f"{'macs':<22} {t['macs']:>16}  ({_human(t['macs'])})")
    lines.append(f"{'act_bytes_train':<22} {t['act_bytes_train']:>16}  ({_human(t['act_bytes_train'], 'B')})")
    lines.append(f"{'act_bytes_infer':<22} {t['act_bytes_infer']:>16}  ({_human(t['act_bytes_infer'], 'B')})")
    lines.append(f"{'peak_act_bytes_infer':<22} {report.peak_act_bytes_infer:>16}  "
                 f"({_human(report.peak_act_bytes_infer, 'B')})")
    return "\n".join(lines)


def format_comparison(rows: List[dict]) -> str:
    if not rows:
        return "(no models)"
    header = f"{'model':<14} {'res':>5} {'params':>12} {'macs':>12} {'act_train':>12} {'act_infer':>12}"
    out = [header]
    for r in rows:
        out.append(f"{r['variant_name']:<14} {r['resolution']:>5} {_human(r['params']):>12} {_human(r['macs']):>12} "
                   f"{_human(r['act_bytes_train'], 'B'):>12} {_human(r['act_bytes_infer'], 'B'):>12}")
    return "\n".join(out)


def report_json(report: CostReport) -> str:
    return json.dumps(report.to_dict(), indent=2)
