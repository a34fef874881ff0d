"""Acceptance criteria AC1-AC11, one test each.

Every test records a one-line verdict; the lines are printed in the pytest
terminal summary, or directly when this file is run as a script.
"""
import struct
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

sys.path.insert(0, str(Path(__file__).parent))

from oracles import blur_loops, s2d_brute  # noqa: E402

from tresnet import analysis, bench, gradcheck  # noqa: E402
from tresnet.cli import main as cli_main  # noqa: E402
from tresnet.image import ImageInput, encode_ppm  # noqa: E402
from tresnet.layers import (  # noqa: E402
    IabnParams,
    SeParams,
    aa_downsample,
    blur_filter,
    depth_to_space,
    fast_gap,
    iabn,
    run_block,
    se_block,
    space_to_depth,
)
from tresnet.model import build, forward, forward_features, get_config  # noqa: E402
from tresnet.tensor import add, avg_pool2d, leaky_relu, mul_broadcast_channel, relu  # noqa: E402
from tresnet.weights import MAGIC, load_weights, save_weights  # noqa: E402

RESULTS = {}


def record(ac, ok, detail):
    line = f"{ac:<5} {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[ac] = line
    print(line)
    assert ok, line


# AC1 ---------------------------------------------------------------------------

PARAM_TARGETS = {"m": 29.4e6, "l": 54.7e6, "xl": 77.1e6}


def test_ac1_parameter_counts():
    parts, ok = [], True
    for name, target in PARAM_TARGETS.items():
        got = analysis.count_params(get_config(name))
        rel = got / target - 1
        ok &= abs(rel) <= 0.02
        parts.append(f"{name}={got:,} ({rel:+.2%} vs {target / 1e6:.1f}M)")
    record("AC1", ok, "params within 2%: " + "; ".join(parts))


# AC2 ---------------------------------------------------------------------------

def test_ac2_mac_counts():
    parts, ok = [], True
    for name, target in (("resnet50", 4.1e9), ("m", 5.5e9)):
        got = analysis.count_macs(get_config(name), 224)
        rel = got / target - 1
        ok &= abs(rel) <= 0.05
        parts.append(f"{name}={got / 1e9:.3f}G ({rel:+.2%} vs {target / 1e9:.1f}G)")
    record("AC2", ok, "MACs@224 within 5%: " + "; ".join(parts))


# AC3 ---------------------------------------------------------------------------

def test_ac3_shape_suite():
    t0 = time.perf_counter()
    bad = []
    widths = {"m": 2048, "l": 2432, "xl": 2688}
    for name, width in widths.items():
        m = build(get_config(name), 0)
        for res in (224, 448):
            feats, stages = forward_features(m, np.zeros((1, 3, res, res), np.float32), collect=True)
            extents = [stages[f"stage{i}"].shape[-2:] for i in range(1, 5)]
            want = [(res // d, res // d) for d in (4, 8, 16, 32)]
            if extents != want:
                bad.append(f"{name}@{res}: {extents}")
            pooled = fast_gap(feats, flatten=True).shape
            if pooled != (1, width):
                bad.append(f"{name}@{res}: pooled {pooled}")
    secs = time.perf_counter() - t0
    ok = not bad and secs < 60
    record("AC3", ok, f"M/L/XL @224,448 extents /4../32, pooled 2048/2432/2688 in {secs:.1f}s"
           + (f"; mismatches {bad}" if bad else ""))


# AC4 ---------------------------------------------------------------------------

def test_ac4_space_to_depth_bijection():
    rng = np.random.default_rng(4)
    shapes = [(1, 3, 4, 4), (2, 3, 8, 8), (1, 5, 16, 12), (3, 2, 4, 20), (1, 1, 32, 32)]
    exact = 0
    for i in range(100):
        x = rng.standard_normal(shapes[i % len(shapes)], dtype=np.float32)
        exact += np.array_equal(depth_to_space(space_to_depth(x)).view(np.uint32), x.view(np.uint32))
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    enum_ok = (space_to_depth(x).ravel().tolist() == list(range(16))
               and np.array_equal(space_to_depth(x), s2d_brute(x)))
    record("AC4", exact == 100 and enum_ok,
           f"{exact}/100 bitwise round trips; (1,1,4,4) enumeration matches brute force: {enum_ok}")


# AC5 ---------------------------------------------------------------------------

def test_ac5_blur_properties():
    sums = blur_filter(16).weight.sum(axis=(1, 2, 3))
    sum_ok = bool(np.all(sums == 1.0))
    const = aa_downsample(np.full((2, 4, 12, 10), 3.0, np.float32))
    dc_err = float(np.abs(const - 3.0).max())
    rng = np.random.default_rng(5)
    oracle_err = 0.0
    for shape in ((1, 3, 8, 8), (2, 4, 7, 9), (1, 2, 2, 2)):
        x = rng.standard_normal(shape, dtype=np.float32)
        oracle_err = max(oracle_err, float(np.abs(aa_downsample(x) - blur_loops(x)).max()))
    ok = sum_ok and dc_err <= 1e-6 and oracle_err <= 1e-6
    record("AC5", ok, f"kernel sums exactly 1: {sum_ok}; DC error {dc_err:.1e}; oracle error {oracle_err:.1e}")


# AC6 ---------------------------------------------------------------------------

def test_ac6_fast_gap():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((64, 2048, 7, 7), dtype=np.float32)
    err = float(np.abs(fast_gap(x) - avg_pool2d(x, 7, 7)).max())
    res = bench.run_bench(["gap-fast", "gap-generic"], [64], threads=1, repeats=7, warmup=2)
    ratio = res[0].images_per_second / res[1].images_per_second
    record("AC6", err <= 1e-6 and ratio >= 1.5,
           f"max |fast - generic| {err:.1e}; throughput ratio on (64,2048,7,7) {ratio:.2f}x (need 1.5x)")


# AC7 ---------------------------------------------------------------------------

def test_ac7_gradient_checks():
    t0 = time.perf_counter()
    results = gradcheck.run_all()
    secs = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    per_suite = {name: len(shapes) for name, (_, shapes) in gradcheck.SUITES.items()}
    coverage = all(n >= 3 for n in per_suite.values()) and len(gradcheck.SEEDS) >= 3
    ok = coverage and worst.max_rel_error < 1e-3 and secs < 300
    record("AC7", ok, f"{len(results)} checks over {len(per_suite)} layers x 3 shapes x {len(gradcheck.SEEDS)} seeds; "
           f"worst rel error {worst.max_rel_error:.2e} ({worst.name}); {secs:.1f}s")


# AC8 ---------------------------------------------------------------------------

def _random_block(rng):
    from tresnet.layers import BASIC, BlockParams, Downsample
    from tresnet.tensor import ConvParams

    def conv(o, i, k):
        return ConvParams(rng.standard_normal((o, i, k, k), dtype=np.float32) * 0.3, padding=k // 2)

    def bn(c, slope):
        return IabnParams(rng.random(c, dtype=np.float32) + 0.5, rng.standard_normal(c, dtype=np.float32) * 0.1,
                          rng.standard_normal(c, dtype=np.float32) * 0.1, rng.random(c, dtype=np.float32) + 0.5,
                          slope=slope)
    se = SeParams(*(rng.standard_normal(s, dtype=np.float32) for s in ((2, 8), 2, (8, 2), 8)), reduction=4)
    return BlockParams(BASIC, 2, (conv(8, 4, 3), conv(8, 8, 3)), (bn(8, 0.01), bn(8, None)), se,
                       Downsample(conv(8, 4, 1), bn(8, None)))


def test_ac8_inplace_equivalence():
    rng = np.random.default_rng(8)
    ops = {
        "add": lambda x, y, g, p, s, b, ip: add(x, y, inplace=ip),
        "leaky_relu": lambda x, y, g, p, s, b, ip: leaky_relu(x, 0.01, inplace=ip),
        "relu": lambda x, y, g, p, s, b, ip: relu(x, inplace=ip),
        "mul_broadcast_channel": lambda x, y, g, p, s, b, ip: mul_broadcast_channel(x, g, inplace=ip),
        "iabn": lambda x, y, g, p, s, b, ip: iabn(x, p, inplace=ip),
        "se_block": lambda x, y, g, p, s, b, ip: se_block(x, s, inplace=ip),
        "block": lambda x, y, g, p, s, b, ip: run_block(x[:, :4], b, inplace=ip),
    }
    mismatches = {k: 0 for k in ops}
    for _ in range(100):
        x = rng.standard_normal((2, 8, 6, 6), dtype=np.float32) * 3
        y = rng.standard_normal((2, 8, 6, 6), dtype=np.float32)
        g = rng.random((2, 8, 1, 1), dtype=np.float32)
        p = IabnParams(rng.standard_normal(8, dtype=np.float32), rng.standard_normal(8, dtype=np.float32),
                       rng.standard_normal(8, dtype=np.float32), rng.random(8, dtype=np.float32) + 0.1)
        s = SeParams(*(rng.standard_normal(sh, dtype=np.float32) for sh in ((2, 8), 2, (8, 2), 8)), reduction=4)
        b = _random_block(rng)
        for name, fn in ops.items():
            ref = fn(x, y, g, p, s, b, False)
            got = fn(np.ascontiguousarray(x.copy()), y, g, p, s, b, True)
            mismatches[name] += not np.array_equal(ref.view(np.uint32), got.view(np.uint32))
    ok = not any(mismatches.values())
    record("AC8", ok, f"{len(ops)} in-place ops x 100 inputs bitwise equal; mismatches {mismatches}")


# AC9 ---------------------------------------------------------------------------

def test_ac9_memory_ablation():
    cfg = get_config("m")
    with_ip = analysis.estimate_activation_memory(cfg, 1, 224, True, True)
    without = analysis.estimate_activation_memory(cfg, 1, 224, False, True)
    budget = 16 * 2 ** 30
    b_ip, b_no = analysis.max_batch(cfg, budget, 224, True), analysis.max_batch(cfg, budget, 224, False)
    ratio = b_ip / b_no
    ok = with_ip < without and ratio >= 512 / 420
    record("AC9", ok, f"train bytes/img {with_ip:,} (in-place) < {without:,}; max batch in 16 GiB "
           f"{b_ip} vs {b_no}, ratio {ratio:.2f} (need {512 / 420:.2f})")


# AC10 --------------------------------------------------------------------------

def test_ac10_determinism():
    x = np.random.default_rng(10).random((1, 3, 224, 224), dtype=np.float32)
    outs = []
    with threadpool_limits(limits=1):
        for _ in range(5):
            m = build(get_config("m"), 7)
            m.fc_weight[...] = np.random.default_rng(11).standard_normal(m.fc_weight.shape).astype(np.float32)
            outs.append(forward(m, x))
    same = all(np.array_equal(o.view(np.uint32), outs[0].view(np.uint32)) for o in outs)
    record("AC10", same and np.any(outs[0] != 0), f"5 builds + forwards (seed 7, 1 thread) bitwise identical: {same}")


# AC11 --------------------------------------------------------------------------

def test_ac11_weight_container(tmp_path, capsys):
    m = build(get_config("m"), 3)
    rng = np.random.default_rng(12)
    for name, arr in m.named_tensors().items():
        arr += rng.standard_normal(arr.shape, dtype=np.float32)
        if name.endswith(".var"):
            np.abs(arr, out=arr)
    path = tmp_path / "m.bin"
    save_weights(m, path)
    loaded = load_weights(get_config("m"), path)
    lossless = all(np.array_equal(loaded.tensors[k].view(np.uint32), v.view(np.uint32))
                   for k, v in m.named_tensors().items())
    raw = path.read_bytes()
    (mlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    corrupt = tmp_path / "corrupt.bin"
    corrupt.write_bytes(raw[:16] + raw[16:16 + mlen].replace(b'"shape":[64,48,1,1]', b'"shape":[64,48,1,2]')
                        + raw[16 + mlen:])
    garbled = tmp_path / "garbled.bin"
    garbled.write_bytes(raw[:20] + b"\xff\xfe" + raw[22:])
    img = tmp_path / "x.ppm"
    img.write_bytes(encode_ppm(ImageInput(32, 32, np.zeros((32, 32, 3), np.uint8))))
    codes = [cli_main(["predict", "--weights", str(p), "--image", str(img), "--resolution", "32"])
             for p in (corrupt, garbled)]
    capsys.readouterr()
    ok = lossless and codes == [3, 3]
    record("AC11", ok, f"round trip bitwise lossless: {lossless}; corrupted manifests -> exit codes {codes}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
