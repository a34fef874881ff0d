"""``tresnet`` command line: inspect, predict, verify, bench.

Exit codes: 0 ok, 1 verification failure, 2 usage, 3 weight error, 4 input error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, bench
from .errors import ConfigError, ImageError, WeightFormatError, WeightLoadError
from .image import load_image, preprocess
from .model import VARIANTS, ModelConfig, forward, get_config
from .tensor import softmax
from .weights import load_weights

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_WEIGHTS, EXIT_INPUT = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _emit(obj, fmt: str, table: str) -> None:
    print(json.dumps(obj, indent=2) if fmt == "json" else table)


def _threads(n: Optional[int]) -> int:
    n = n or bench.default_threads()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _resolution(res: int) -> int:
    try:
        analysis.check_resolution(res)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return res


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    if args.config:
        try:
            cfg = ModelConfig.from_dict(json.loads(Path(args.config).read_text())).validate()
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"bad config file {args.config}: {exc}") from None
    else:
        cfg = get_config(args.variant)
    res = _resolution(args.resolution)
    report = analysis.cost_report(cfg, res, args.batch, not args.no_inplace, args.bytes_per_element)
    if args.format == "json":
        print(analysis.report_json(report))
    else:
        print(analysis.format_report(report, layers=args.layers))
    return EXIT_OK


def cmd_predict(args) -> int:
    res = _resolution(args.resolution)
    if args.topk < 1:
        raise UsageError("--topk must be >= 1")
    cfg = get_config(args.variant) if args.variant else None
    try:
        model = load_weights(cfg, args.weights)
    except (WeightFormatError, WeightLoadError, ConfigError) as exc:
        print(f"tresnet: weight error: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS
    except OSError as exc:
        print(f"tresnet: cannot read weights: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS
    try:
        img = load_image(args.image)
    except ImageError as exc:
        print(f"tresnet: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    x = preprocess(img, res)
    with threadpool_limits(limits=_threads(args.threads)):
        scores = softmax(forward(model, x))[0]
    k = min(args.topk, scores.size)
    top = np.argsort(-scores, kind="stable")[:k]
    rows = [{"class": int(i), "score": float(scores[i])} for i in top]
    table = "\n".join([f"{'rank':>4} {'class':>6} {'score':>12}"] +
                      [f"{n + 1:>4} {r['class']:>6} {r['score']:>12.8f}" for n, r in enumerate(rows)])
    _emit({"variant_name": model.config.variant_name, "resolution": res, "topk": rows}, args.format, table)
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify
    try:
        checks = verify.select(args.filter)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    unknown = [f for f in args.inject_fault if f not in verify.FAULTS]
    if unknown:
        raise UsageError(f"unknown fault {unknown}")
    outcomes = verify.run(args.filter, faults=args.inject_fault)
    failed = sum(not o.passed for o in outcomes)
    obj = {
        "checks": [{"module": o.check.module, "name": o.check.name, "passed": o.passed,
                    "detail": o.detail, "seconds": round(o.seconds, 3)} for o in outcomes],
        "passed": len(outcomes) - failed, "failed": failed,
    }
    lines = [f"{'PASS' if o.passed else 'FAIL'}  [{o.check.module}] {o.check.name}: {o.detail}" for o in outcomes]
    lines.append(f"{len(checks) - failed}/{len(checks)} passed")
    _emit(obj, args.format, "\n".join(lines))
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_bench(args) -> int:
    threads = _threads(args.threads)
    res = _resolution(args.resolution)
    if any(b < 1 for b in args.batch):
        raise UsageError("batch sizes must be >= 1")
    try:
        results = bench.run_bench(args.subjects, args.batch, threads, args.repeats, args.warmup, res)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    fp = bench.fingerprint(threads)
    obj = {"fingerprint": fp, "results": [r.__dict__ for r in results], "ratios": bench.ratios(results)}
    table = "# " + ", ".join(f"{k}={v}" for k, v in fp.items()) + "\n" + bench.format_results(results)
    _emit(obj, args.format, table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tresnet", description="TResNet CPU engine and analyzer")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentParser(add_help=False)
    fmt.add_argument("--format", choices=("table", "json"), default="table")

    s = sub.add_parser("inspect", parents=[fmt], help="parameter / MAC / memory report")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--variant", choices=sorted(VARIANTS), default="m")
    g.add_argument("--config", help="JSON model config file")
    s.add_argument("--resolution", type=int, default=224)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--bytes-per-element", type=int, default=analysis.DEFAULT_BYTES_PER_ELEMENT)
    s.add_argument("--no-inplace", action="store_true", help="model memory without in-place ops")
    s.add_argument("--layers", action="store_true", help="include the per-layer table")
    s.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("predict", parents=[fmt], help="classify one image")
    s.add_argument("--weights", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--variant", choices=sorted(VARIANTS), help="expected variant (default: from manifest)")
    s.add_argument("--resolution", type=int, default=224)
    s.add_argument("--topk", type=int, default=5)
    s.add_argument("--threads", type=int)
    s.set_defaults(fn=cmd_predict)

    s = sub.add_parser("verify", parents=[fmt], help="run the invariant registry")
    s.add_argument("--filter", help="module name: tensor, layers, model, gradcheck, analysis, cli")
    s.add_argument("--inject-fault", action="append", default=[], help=argparse.SUPPRESS)
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("bench", parents=[fmt], help="CPU micro-benchmarks")
    s.add_argument("--subjects", nargs="+", default=["gap-fast", "gap-generic"],
                   help="any of: " + ", ".join(bench.SUBJECTS))
    s.add_argument("--batch", type=int, nargs="+", default=[1])
    s.add_argument("--threads", type=int)
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--resolution", type=int, default=224)
    s.set_defaults(fn=cmd_bench)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"tresnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
