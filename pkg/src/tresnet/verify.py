"""Registry of the engine's invariants, runnable as one pass/fail sweep.

Every property the modules promise is registered here under its module
name; ``tresnet verify`` runs them all (or one module's worth).
"""
from __future__ import annotations

import contextlib
import io
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional

import numpy as np

from . import analysis, gradcheck, layers
from .layers import (
    BASIC,
    BOTTLENECK,
    BlockParams,
    IabnParams,
    SeParams,
    aa_downsample,
    asymmetric_focal_loss,
    depth_to_space,
    fast_gap,
    iabn,
    run_block,
    se_block,
    space_to_depth,
)
from .model import VARIANTS, build, forward, forward_features, get_config
from .tensor import (
    ConvParams,
    add,
    avg_pool2d,
    conv2d,
    leaky_relu,
    linear,
    max_pool2d,
    mul_broadcast_channel,
    pad_reflect,
    reference_kernels,
)
from .weights import read_container, save_weights

MODULES = ("tensor", "layers", "model", "gradcheck", "analysis", "cli")

# Table 2 parameter counts
TABLE2_PARAMS = {"m": 29.4e6, "l": 54.7e6, "xl": 77.1e6}
PARAM_TOLERANCE = 0.02


@dataclass(frozen=True)
class Check:
    module: str
    name: str
    fn: Callable[[], str]


@dataclass
class Outcome:
    check: Check
    passed: bool
    detail: str
    seconds: float


REGISTRY: List[Check] = []


def invariant(module: str, name: str):
    if module not in MODULES:
        raise ValueError(f"unknown module {module!r}")

    def deco(fn):
        REGISTRY.append(Check(module, name, fn))
        return fn
    return deco


def _expect(cond, msg):
    if not cond:
        raise AssertionError(msg)


def _rng(seed=0):
    return np.random.default_rng(seed)


def _randn(rng, shape):
    return rng.standard_normal(shape, dtype=np.float32)


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------

@invariant("tensor", "in-place variants are bitwise identical to out-of-place")
def _inplace_bitwise():
    rng = _rng(1)
    for trial in range(20):
        x = _randn(rng, (2, 3, 5, 5))
        y = _randn(rng, (2, 3, 5, 5))
        g = rng.random((2, 3, 1, 1), dtype=np.float32)
        bn = IabnParams(rng.random(3, dtype=np.float32), _randn(rng, 3), _randn(rng, 3),
                        rng.random(3, dtype=np.float32) + 0.1)
        pairs = [
            (add(x, y), add(x.copy(), y, inplace=True)),
            (leaky_relu(x, 0.01), leaky_relu(x.copy(), 0.01, inplace=True)),
            (mul_broadcast_channel(x, g), mul_broadcast_channel(x.copy(), g, inplace=True)),
            (iabn(x, bn), iabn(x.copy(), bn, inplace=True)),
        ]
        for a, b in pairs:
            _expect(np.array_equal(a.view(np.uint32), b.view(np.uint32)), f"trial {trial}: bits differ")
    return "add, leaky_relu, mul_broadcast_channel, iabn x 20 trials"


@invariant("tensor", "depthwise conv equals per-channel single-channel convs")
def _depthwise():
    rng = _rng(2)
    x = _randn(rng, (2, 4, 9, 9))
    w = _randn(rng, (4, 1, 3, 3))
    dw = conv2d(x, ConvParams(w, stride=2, padding=1, groups=4))
    for c in range(4):
        single = conv2d(x[:, c:c + 1], ConvParams(w[c:c + 1], stride=2, padding=1))
        _expect(np.allclose(dw[:, c:c + 1], single, atol=1e-6), f"channel {c} differs")
    return "4 channels, stride 2"


@invariant("tensor", "conv2d, linear and pools match nested-loop oracles within 1e-5")
def _oracles():
    rng = _rng(3)
    x = _randn(rng, (2, 8, 16, 16))
    worst = 0.0
    for stride, pad, groups in ((1, 1, 1), (2, 1, 1), (2, 0, 2), (1, 1, 8)):
        p = ConvParams(_randn(rng, (8, 8 // groups, 3, 3)), _randn(rng, 8), stride, pad, groups=groups)
        fast = conv2d(x, p)
        with reference_kernels():
            ref = conv2d(x, p)
        worst = max(worst, float(np.abs(fast - ref).max()))
    xs = _randn(rng, (4, 16))
    w = _randn(rng, (8, 16))
    b = _randn(rng, 8)
    lin = linear(xs, w, b)
    loop = np.array([[sum(float(xs[n, i]) * float(w[o, i]) for i in range(16)) + float(b[o]) for o in range(8)]
                     for n in range(4)])
    worst = max(worst, float(np.abs(lin - loop).max()))
    for fn in (lambda: max_pool2d(x, 3, 2, 1), lambda: avg_pool2d(x, 2, 2)):
        fast = fn()
        with reference_kernels():
            ref = fn()
        worst = max(worst, float(np.abs(fast - ref).max()))
    _expect(worst <= 1e-5, f"max deviation {worst:.3g}")
    return f"max deviation {worst:.2e}"


@invariant("tensor", "pad_reflect then centre crop is the identity")
def _pad_crop():
    rng = _rng(4)
    for pad in (0, 1, 2, 3):
        x = _randn(rng, (2, 3, 7, 6))
        y = pad_reflect(x, pad)
        _expect(np.array_equal(y[:, :, pad:pad + 7, pad:pad + 6], x), f"pad {pad}")
    return "pads 0..3"


@invariant("tensor", "conv2d is linear (bias disabled) within 1e-4")
def _conv_linear():
    rng = _rng(5)
    p = ConvParams(_randn(rng, (6, 4, 3, 3)), stride=2, padding=1)
    x, y = _randn(rng, (2, 4, 10, 10)), _randn(rng, (2, 4, 10, 10))
    a, b = np.float32(1.7), np.float32(-0.6)
    err = float(np.abs(conv2d(a * x + b * y, p) - (a * conv2d(x, p) + b * conv2d(y, p))).max())
    _expect(err <= 1e-4, f"deviation {err:.3g}")
    return f"deviation {err:.2e}"


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@invariant("layers", "space_to_depth is an exact, arithmetic-free bijection")
def _s2d_bijection():
    rng = _rng(6)
    for shape in ((1, 3, 8, 8), (2, 5, 12, 16), (3, 1, 4, 20)):
        x = _randn(rng, shape)
        y = space_to_depth(x)
        _expect(y.size == x.size, "element count changed")
        _expect(np.array_equal(np.sort(y.view(np.uint32), axis=None), np.sort(x.view(np.uint32), axis=None)),
                "multiset of bit patterns changed")
        _expect(np.array_equal(depth_to_space(y).view(np.uint32), x.view(np.uint32)), "round trip not exact")
    return "3 shapes"


@invariant("layers", "blur kernel is non-negative, flip-symmetric and sums to 1")
def _blur_props():
    k = layers.blur_filter(5).weight
    _expect(np.all(k >= 0), "negative coefficient")
    _expect(np.array_equal(k, k[:, :, ::-1, :]) and np.array_equal(k, k[:, :, :, ::-1]), "not symmetric")
    sums = k.sum(axis=(1, 2, 3))
    _expect(np.all(sums == 1.0), f"per-channel sums {sums}")
    return "5 channels"


@invariant("layers", "aa_downsample keeps constants and stays within [min, max]")
def _aa_props():
    rng = _rng(7)
    const = np.full((1, 3, 10, 10), 3.0, np.float32)
    _expect(np.abs(aa_downsample(const) - 3.0).max() <= 1e-6, "constant not preserved")
    for _ in range(5):
        x = _randn(rng, (2, 4, 9, 12))
        y = aa_downsample(x)
        _expect(y.min() >= x.min() - 1e-6 and y.max() <= x.max() + 1e-6, "left the input range")
    return "constant + 5 random inputs"


@invariant("layers", "iabn with slope 1 is the batch-norm affine map and is monotone for gamma >= 0")
def _iabn_props():
    rng = _rng(8)
    c = 4
    gamma = rng.random(c, dtype=np.float32)
    p = IabnParams(gamma, _randn(rng, c), _randn(rng, c), rng.random(c, dtype=np.float32) + 0.2, slope=1.0)
    x = _randn(rng, (2, c, 5, 5))
    affine = (x - p.running_mean[None, :, None, None]) / np.sqrt(p.running_var + p.eps)[None, :, None, None] \
        * gamma[None, :, None, None] + p.beta[None, :, None, None]
    _expect(np.allclose(iabn(x, p), affine, atol=1e-5), "slope-1 iabn differs from affine BN")
    leaky = IabnParams(gamma, p.beta, p.running_mean, p.running_var, slope=0.01)
    xs = np.sort(_randn(rng, (1, c, 1, 64)), axis=-1)
    ys = iabn(xs, leaky)
    _expect(np.all(np.diff(ys, axis=-1) >= 0), "not monotone")
    return "affine match + monotone on sorted inputs"


@invariant("layers", "fast_gap equals full-window avg_pool2d within 1e-6")
def _gap_vs_pool():
    rng = _rng(9)
    worst = 0.0
    for shape in ((4, 8, 14, 14), (2, 3, 7, 7), (1, 16, 5, 5)):
        x = _randn(rng, shape)
        worst = max(worst, float(np.abs(fast_gap(x) - avg_pool2d(x, shape[-1], shape[-1])).max()))
    _expect(worst <= 1e-6, f"deviation {worst:.3g}")
    return f"deviation {worst:.2e}"


@invariant("layers", "se_block shrinks every non-zero element strictly")
def _se_shrinks():
    rng = _rng(10)
    c = 8
    p = SeParams(_randn(rng, (2, c)) * 0.5, _randn(rng, 2) * 0.5, _randn(rng, (c, 2)) * 0.5,
                 _randn(rng, c) * 0.5, reduction=4)
    x = _randn(rng, (3, c, 6, 6))
    y = se_block(x, p)
    nz = x != 0
    _expect(np.all(np.abs(y[nz]) < np.abs(x[nz])), "an element did not shrink")
    return "3 samples x 8 channels"


def _zero_main_block(kind, c, slope):
    rng = _rng(11)
    w = c // 4 if kind == BOTTLENECK else c
    shapes = [(w, c, 1, 1), (w, w, 3, 3), (c, w, 1, 1)] if kind == BOTTLENECK else [(c, c, 3, 3), (c, c, 3, 3)]
    convs = tuple(ConvParams(np.zeros(s, np.float32), padding=s[-1] // 2) for s in shapes)
    iabns = [IabnParams.identity(s[0], slope=slope) for s in shapes]
    iabns[-1] = IabnParams.identity(shapes[-1][0], slope=None)
    del rng
    return BlockParams(kind=kind, stride=1, convs=convs, iabns=tuple(iabns), slope=slope)


@invariant("layers", "blocks with a zeroed main branch reduce to leaky_relu")
def _zero_main():
    rng = _rng(12)
    for kind in (BASIC, BOTTLENECK):
        p = _zero_main_block(kind, 8, 0.01)
        x = _randn(rng, (2, 8, 6, 6))
        _expect(np.array_equal(run_block(x, p, inplace=False), leaky_relu(x, 0.01)), f"{kind} differs")
        xp = np.abs(x)
        _expect(np.argmax(run_block(xp, p)) == np.argmax(xp), f"{kind} argmax moved")
    return "basic + bottleneck"


@invariant("layers", "focal loss is non-negative and vanishes only with perfect confidence")
def _focal_nonneg():
    rng = _rng(13)
    for gp, gn in ((0, 0), (0, 4), (1, 2)):
        z = _randn(rng, (6, 5)) * 3
        y = (rng.random((6, 5)) < 0.4).astype(np.float32)
        _expect(asymmetric_focal_loss(z, y, gp, gn) > 0, "non-positive loss")
    y = np.array([[1.0, 0.0]])
    losses = [asymmetric_focal_loss(np.array([[t, -t]]), y, 0, 4) for t in (2.0, 8.0, 30.0)]
    _expect(losses[0] > losses[1] > losses[2] >= 0 and losses[2] < 1e-6, f"limit not approached: {losses}")
    return "random batches > 0; confident limit -> 0"


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

SHAPE_RESOLUTIONS = tuple(32 * k for k in range(2, 15))


@invariant("model", "every variant runs at 32k (k=2..14) and each stage halves the map")
def _shape_invariance():
    checked = 0
    for name in ("m", "l", "xl"):
        m = build(get_config(name), 0)
        for res in SHAPE_RESOLUTIONS:
            x = np.zeros((1, 3, res, res), np.float32)
            _, stages = forward_features(m, x, collect=True)
            got = [stages[f"stage{i}"].shape[-1] for i in range(1, 5)]
            want = [res // 4, res // 8, res // 16, res // 32]
            _expect(got == want, f"{name}@{res}: stage extents {got} != {want}")
            checked += 1
    return f"{checked} forward passes"


@invariant("model", "built-in parameter counts within 2% of Table 2")
def _param_counts():
    parts, bad = [], []
    for name, target in TABLE2_PARAMS.items():
        got = analysis.count_params(get_config(name))
        rel = got / target - 1
        parts.append(f"{name}={got / 1e6:.2f}M ({rel:+.2%})")
        if abs(rel) > PARAM_TOLERANCE:
            bad.append(name)
    _expect(not bad, "outside 2%: " + ", ".join(parts))
    return ", ".join(parts)


@invariant("model", "identical seed and input give bitwise-identical logits")
def _determinism():
    cfg = get_config("m")
    rng = _rng(14)
    x = rng.random((1, 3, 64, 64), dtype=np.float32)
    runs = []
    for _ in range(2):
        m = build(cfg, 5)
        m.fc_weight[...] = _randn(_rng(15), m.fc_weight.shape) * 0.01
        runs.append(forward(m, x))
    _expect(np.array_equal(runs[0].view(np.uint32), runs[1].view(np.uint32)), "logits differ")
    return "2 independent builds"


@invariant("model", "SE only in stages 1-3")
def _se_presence():
    for name in ("m", "l", "xl"):
        m = build(get_config(name))
        for prefix, b in m.blocks:
            stage = m.stage_of(prefix)
            _expect((b.se is not None) == (stage <= 3), f"{name} {prefix}: se={b.se is not None}")
    return "m, l, xl"


@invariant("model", "basic blocks in stages 1-2, bottlenecks in 3-4")
def _block_kinds():
    for name in ("m", "l", "xl"):
        m = build(get_config(name))
        for prefix, b in m.blocks:
            want = BASIC if m.stage_of(prefix) <= 2 else BOTTLENECK
            _expect(b.kind == want, f"{name} {prefix}: {b.kind}")
    return "m, l, xl"


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

@invariant("gradcheck", "all layer gradients within 1e-3 relative error (3 shapes x 3 seeds)")
def _grad_all():
    results = gradcheck.run_all()
    worst = max(results, key=lambda r: r.max_rel_error)
    _expect(all(r.passed() for r in results), f"worst {worst.name}: {worst.max_rel_error:.3g}")
    return f"{len(results)} checks, worst {worst.max_rel_error:.2e} ({worst.name})"


@invariant("gradcheck", "space_to_depth gradient error is exactly zero")
def _grad_perm():
    results = [gradcheck.suite_space_to_depth(s, k) for s in gradcheck.SHAPES_S2D for k in gradcheck.SEEDS]
    worst = max(r.max_abs_error for r in results)
    _expect(worst == 0.0, f"error {worst}")
    return f"{len(results)} checks, error 0"


@invariant("gradcheck", "leaky_relu backward matches finite differences away from the kink")
def _grad_leaky():
    worst = 0.0
    for seed in gradcheck.SEEDS:
        rng = _rng(seed)
        x = rng.standard_normal((2, 3, 4, 4))
        x = np.where(np.abs(x) < gradcheck.KINK_MARGIN, x + np.sign(x + 1e-12) * 0.1, x)
        for slope in (0.0, 0.01, 0.3):
            r = gradcheck.check_gradients(
                "leaky", lambda x: leaky_relu(x, slope),
                lambda grad_out, x: {"x": gradcheck.backward_leaky_relu(x, slope, grad_out)}, {"x": x}, seed)
            worst = max(worst, r.max_rel_error)
    _expect(worst < 1e-3, f"worst {worst:.3g}")
    return f"worst {worst:.2e}"


@invariant("gradcheck", "focal-loss gradient is bounded and vanishes at saturated correct predictions")
def _grad_focal():
    rng = _rng(16)
    for gp, gn in ((0, 4), (2, 2), (0, 0)):
        z = rng.standard_normal((8, 6)) * 5
        y = (rng.random((8, 6)) < 0.5).astype(np.float64)
        g = gradcheck.backward_focal(z, y, gp, gn) * z.size
        bound = 1 + max(gp, gn) / np.e + 1e-9
        _expect(np.all(np.abs(g) <= bound), f"gradient above {bound}")
    y = np.array([[1.0, 0.0, 1.0]])
    z = np.array([[40.0, -40.0, 25.0]])
    g = gradcheck.backward_focal(z, y, 0, 4)
    _expect(np.all(np.abs(g) <= 1e-6), f"saturated gradient {g}")
    return "bounded; saturated -> 0"


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------

@invariant("analysis", "count_params equals learnable manifest entries")
def _params_vs_manifest():
    for name in ("m", "resnet50"):
        m = build(get_config(name))
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "w.bin"
            save_weights(m, path)
            manifest, _ = read_container(path)
        learnable = sum(int(np.prod(e["shape"])) for e in manifest["tensors"]
                        if not e["name"].endswith((".mean", ".var")))
        _expect(learnable == analysis.count_params(m) == analysis.count_params(m.config),
                f"{name}: manifest {learnable} vs count {analysis.count_params(m)}")
    return "m, resnet50"


@invariant("analysis", "MACs scale ~quadratically: macs(448)/macs(224) in [3.9, 4.1]")
def _mac_scaling():
    parts = []
    for name in VARIANTS:
        r = analysis.count_macs(get_config(name), 448) / analysis.count_macs(get_config(name), 224)
        _expect(3.9 <= r <= 4.1, f"{name}: ratio {r:.3f}")
        parts.append(f"{name}={r:.3f}")
    return ", ".join(parts)


@invariant("analysis", "activation memory is monotone in batch, resolution and training")
def _mem_monotone():
    cfg = get_config("m")
    est = analysis.estimate_activation_memory
    for inplace in (True, False):
        for training in (True, False):
            by_batch = [est(cfg, b, 224, inplace, training) for b in (1, 2, 4, 8)]
            _expect(by_batch == sorted(by_batch), "not monotone in batch")
            by_res = [est(cfg, 2, r, inplace, training) for r in (64, 128, 224, 448)]
            _expect(by_res == sorted(by_res), "not monotone in resolution")
        _expect(est(cfg, 4, 224, inplace, True) >= est(cfg, 4, 224, inplace, False), "training < inference")
    return "batch, resolution, mode"


# ---------------------------------------------------------------------------
# cli
# ---------------------------------------------------------------------------

@invariant("cli", "printed numeric results are deterministic")
def _cli_determinism():
    from .cli import main
    outs = []
    for _ in range(2):
        buf = io.StringIO()
        with contextlib.redirect_stdout(buf):
            code = main(["inspect", "--variant", "m", "--format", "json"])
        _expect(code == 0, f"inspect exit {code}")
        outs.append(buf.getvalue())
    _expect(outs[0] == outs[1], "inspect output differs between runs")
    return "inspect --format json twice"


@invariant("cli", "preprocessing maps 255 -> 1.0 and 0 -> 0.0 exactly")
def _preprocess_exact():
    from .image import ImageInput, preprocess
    px = np.zeros((40, 30, 3), np.uint8)
    px[:, 15:] = 255
    for res in (32, 64):
        x = preprocess(ImageInput(30, 40, px), res)
        _expect(x.min() == 0.0 and x.max() == 1.0, f"range [{x.min()}, {x.max()}] at {res}")
        white = preprocess(ImageInput(30, 40, np.full_like(px, 255)), res)
        black = preprocess(ImageInput(30, 40, np.zeros_like(px)), res)
        _expect(np.all(white == 1.0) and np.all(black == 0.0), "solid colours not exact")
    return "solid and split images at 32, 64"


@invariant("cli", "verify registry covers every listed invariant")
def _registry_audit():
    counts = {m: sum(c.module == m for c in REGISTRY) for m in MODULES}
    _expect(counts == EXPECTED_COUNTS, f"registry {counts} != expected {EXPECTED_COUNTS}")
    return ", ".join(f"{m}={n}" for m, n in counts.items())


EXPECTED_COUNTS = {"tensor": 5, "layers": 8, "model": 5, "gradcheck": 4, "analysis": 3, "cli": 3}


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------

def _corrupt_blur():
    original = layers.blur_filter

    def corrupted(channels):
        p = original(channels)
        w = p.weight.copy()
        w[:, :, 1, 1] *= 1.5
        return ConvParams(weight=w, stride=p.stride, padding=p.padding, padding_mode=p.padding_mode, groups=p.groups)

    layers.blur_filter = corrupted
    return lambda: setattr(layers, "blur_filter", original)


FAULTS = {"blur-kernel": _corrupt_blur}


@contextlib.contextmanager
def injected(faults: Iterable[str] = ()):
    """Negative-control hook: temporarily break named components."""
    undo = [FAULTS[f]() for f in faults]
    try:
        yield
    finally:
        for u in reversed(undo):
            u()


def select(module: Optional[str] = None) -> List[Check]:
    if module is not None and module not in MODULES:
        raise KeyError(f"unknown filter {module!r}; choose from {MODULES}")
    return [c for c in REGISTRY if module is None or c.module == module]


def run(module: Optional[str] = None, faults: Iterable[str] = ()) -> List[Outcome]:
    checks = select(module)
    outcomes = []
    with injected(faults):
        for c in checks:
            t0 = time.perf_counter()
            try:
                detail, ok = c.fn(), True
            except Exception as exc:  # a check failing for any reason is a failure
                detail, ok = f"{type(exc).__name__}: {exc}", False
            outcomes.append(Outcome(c, ok, detail, time.perf_counter() - t0))
    return outcomes
