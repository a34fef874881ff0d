"""CPU micro-benchmarks contrasting design variants.

Only relative, same-process comparisons are meaningful; absolute images/sec
on a CPU say nothing about the GPU figures the architecture was tuned for.
"""
from __future__ import annotations

import os
import platform
import time
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import analysis
from .layers import (
    BASIC,
    BlockParams,
    Downsample,
    IabnParams,
    fast_gap,
    iabn,
    run_block,
    space_to_depth,
)
from .model import build, forward, get_config
from .tensor import ConvParams, avg_pool2d, conv2d, max_pool2d

ELEMENT_BYTES = 4
MODEL_SUBJECTS = ("m", "l", "xl", "resnet50")
GAP_SHAPE = (2048, 7, 7)


@dataclass
class BenchResult:
    subject: str
    batch: int
    threads: int
    repeats: int
    warmup: int
    images_per_second: float
    p50_ms: float
    p95_ms: float
    peak_estimated_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


def _rng():
    return np.random.default_rng(0)


def _conv(rng, cout, cin, k, stride=1):
    std = np.float32(np.sqrt(2.0 / (cout * k * k)))
    return ConvParams(rng.standard_normal((cout, cin, k, k), dtype=np.float32) * std,
                      stride=stride, padding=k // 2)


def _model_subject(name, batch, resolution):
    m = build(get_config(name))
    x = _rng().random((batch, 3, resolution, resolution), dtype=np.float32)
    peak = analysis.estimate_activation_memory(m.config, batch, resolution, True, False, ELEMENT_BYTES)
    return (lambda: forward(m, x)), peak


def _gap_subject(fast, batch, resolution):
    x = _rng().standard_normal((batch,) + GAP_SHAPE, dtype=np.float32)
    k = GAP_SHAPE[-1]
    fn = (lambda: fast_gap(x)) if fast else (lambda: avg_pool2d(x, k, k))
    return fn, x.nbytes + batch * GAP_SHAPE[0] * ELEMENT_BYTES


def _stem_subject(s2d, batch, resolution):
    rng = _rng()
    x = rng.random((batch, 3, resolution, resolution), dtype=np.float32)
    bn = IabnParams.identity(64, slope=0.01 if s2d else 0.0)
    if s2d:
        conv = _conv(rng, 64, 48, 1)

        def fn():
            return iabn(conv2d(space_to_depth(x), conv), bn, inplace=True)
        out_elems = 64 * (resolution // 4) ** 2
        peak = x.nbytes * 2 + batch * out_elems * ELEMENT_BYTES
    else:
        conv = _conv(rng, 64, 3, 7, stride=2)

        def fn():
            return max_pool2d(iabn(conv2d(x, conv), bn, inplace=True), 3, 2, 1)
        mid = 64 * (resolution // 2) ** 2
        peak = x.nbytes + batch * (mid + mid // 4) * ELEMENT_BYTES
    return fn, peak


def _block(aa: bool):
    """TResNet-M stage-2 entry block: 64 -> 128 channels, stride 2."""
    rng = _rng()
    convs = (_conv(rng, 128, 64, 3, 1 if aa else 2), _conv(rng, 128, 128, 3))
    iabns = (IabnParams.identity(128), IabnParams.identity(128, slope=None))
    ds = Downsample(_conv(rng, 128, 64, 1, 1 if aa else 2), IabnParams.identity(128, slope=None))
    return BlockParams(kind=BASIC, stride=2, convs=convs, iabns=iabns, downsample=ds, anti_alias=aa)


def _block_subject(aa, inplace, batch, resolution):
    p = _block(aa)
    side = resolution // 4
    x = _rng().standard_normal((batch, 64, side, side), dtype=np.float32)
    peak = x.nbytes * 2 + batch * 128 * side * side * ELEMENT_BYTES * (1 if inplace else 2)
    return (lambda: run_block(x, p, inplace=inplace)), peak


SUBJECTS: Dict[str, Callable[[int, int], Tuple[Callable, int]]] = {
    **{name: (lambda b, r, name=name: _model_subject(name, b, r)) for name in MODEL_SUBJECTS},
    "gap-fast": lambda b, r: _gap_subject(True, b, r),
    "gap-generic": lambda b, r: _gap_subject(False, b, r),
    "stem-s2d": lambda b, r: _stem_subject(True, b, r),
    "stem-conv7x7": lambda b, r: _stem_subject(False, b, r),
    "block-aa": lambda b, r: _block_subject(True, True, b, r),
    "block-noaa": lambda b, r: _block_subject(False, True, b, r),
    "block-inplace": lambda b, r: _block_subject(True, True, b, r),
    "block-copy": lambda b, r: _block_subject(True, False, b, r),
}

# (numerator, denominator) pairs reported as speed ratios when both were run
RATIO_PAIRS = (
    ("gap-fast", "gap-generic"),
    ("stem-s2d", "stem-conv7x7"),
    ("block-noaa", "block-aa"),
    ("block-inplace", "block-copy"),
    ("resnet50", "m"),
)


def default_threads() -> int:
    env = os.environ.get("TRESNET_THREADS")
    return int(env) if env else (os.cpu_count() or 1)


def fingerprint(threads: int) -> dict:
    blas = [i.get("internal_api") for i in threadpool_info() if i.get("user_api") == "blas"]
    return {
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "threads": threads,
        "element_bytes": ELEMENT_BYTES,
        "numpy": np.__version__,
        "blas": blas[0] if blas else None,
    }


def time_callable(fn: Callable, repeats: int, warmup: int) -> List[float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def run_bench(subjects: Sequence[str], batch_list: Sequence[int] = (1,), threads: int = None,
              repeats: int = 5, warmup: int = 1, resolution: int = 224) -> List[BenchResult]:
    """Time every (subject, batch) pair, one subject at a time."""
    unknown = [s for s in subjects if s not in SUBJECTS]
    if unknown:
        raise KeyError(f"unknown subject(s) {unknown}; choose from {sorted(SUBJECTS)}")
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    analysis.check_resolution(resolution)
    threads = threads or default_threads()
    results = []
    with threadpool_limits(limits=threads):
        for subject in subjects:
            for batch in batch_list:
                fn, peak = SUBJECTS[subject](batch, resolution)
                times = time_callable(fn, repeats, warmup)
                total = sum(times)
                ms = np.asarray(times) * 1e3
                results.append(BenchResult(
                    subject=subject, batch=batch, threads=threads, repeats=repeats, warmup=warmup,
                    images_per_second=batch * repeats / total,
                    p50_ms=float(np.percentile(ms, 50)), p95_ms=float(np.percentile(ms, 95)),
                    peak_estimated_bytes=int(peak),
                ))
    return results


def ratios(results: Sequence[BenchResult]) -> List[dict]:
    """Throughput ratios for every known pair measured at the same batch."""
    by_key = {(r.subject, r.batch): r for r in results}
    out = []
    for num, den in RATIO_PAIRS:
        for (subject, batch), r in by_key.items():
            if subject == num and (den, batch) in by_key:
                out.append({"faster": num, "slower": den, "batch": batch,
                            "ratio": r.images_per_second / by_key[(den, batch)].images_per_second})
    return out


def format_results(results: Sequence[BenchResult]) -> str:
    lines = [f"{'subject':<15} {'batch':>5} {'thr':>4} {'img/s':>10} {'p50 ms':>9} {'p95 ms':>9} {'peak est':>12}"]
    for r in results:
        lines.append(f"{r.subject:<15} {r.batch:>5} {r.threads:>4} {r.images_per_second:>10.2f} "
                     f"{r.p50_ms:>9.3f} {r.p95_ms:>9.3f} {r.peak_estimated_bytes:>12}")
    for q in ratios(results):
        lines.append(f"ratio {q['faster']}/{q['slower']} @ batch {q['batch']}: {q['ratio']:.2f}x")
    return "\n".join(lines)
