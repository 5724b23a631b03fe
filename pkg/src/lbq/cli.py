"""``lbq`` command line: init-toy, quantize, eval-toy, bench, analyze.

Exit codes: 0 success, 1 usage/config error, 2 data/format error, 3 internal
invariant violation. ``--seed`` falls back to the ``LBQ_SEED`` environment
variable, then to 0.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import resource
import sys
import time

import numpy as np

from . import analysis, pipeline
from .errors import ConfigError, InputError, InvariantError, LBQError
from .qgemm import (
    MAX_K,
    gemm_w4a8_ref,
    gemm_w8a8_opt,
    gemm_w8a8_ref,
    payload_bytes,
)
from .quant import Granularity, QuantScheme, dequantize, quantize_tensor
from .tensor import matmul_ref, rand_tensor, relative_error

KERNELS = ("f32", "w8a8_ref", "w8a8_opt", "w4a8_ref")
# FP32 BLAS is checked against the FP64 oracle; integer kernels against dequantize-then-matmul.
CHECK_TOL = {"f32": 1e-5, "w8a8_ref": 1e-6, "w8a8_opt": 1e-6, "w4a8_ref": 1e-6}
DEFAULT_OUTLIERS = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    raw = os.environ.get("LBQ_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"LBQ_SEED must be an integer, got {raw!r}") from None


def _emit(text: str, out: str | None) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _int_list(raw: str) -> list[int]:
    try:
        values = [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {raw!r}") from None
    if not values or any(v <= 0 for v in values):
        raise ConfigError(f"dims must be positive, got {raw!r}")
    return values


def _load_text(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc


def _toy_config(args) -> pipeline.ToyModelConfig:
    return pipeline.ToyModelConfig(seed=args.seed, n_outliers=args.outliers, outlier_factor=args.outlier_factor)


def cmd_init_toy(args) -> int:
    model = pipeline.init_toy_model(_toy_config(args))
    pipeline.save_checkpoint(model, args.out)
    print(f"wrote {args.out}: {len(model.linears)} FP32 linear layers")
    return 0


def _calibration(model, source: str, seed: int, n: int, length: int):
    if source == "random":
        batches = pipeline.calibration_batches(model.config, n, length, seed=seed)
    else:
        batches = pipeline.text_batches(_load_text(source), model.config, length)[:n]
        if not batches:
            raise InputError(f"calibration file {source} is empty")
    return pipeline.calibrate(model, batches)


def cmd_quantize(args) -> int:
    model = pipeline.load_checkpoint(args.input)
    if isinstance(model, pipeline.QuantizedToyModel):
        raise ConfigError(f"{args.input} is already quantized")
    stats = _calibration(model, args.calib, args.seed, args.calib_samples, args.calib_len)
    qmodel = pipeline.quantize_model(model, args.scheme, stats, smooth_alpha=args.smooth,
                                     hadamard=args.hadamard, group_size=args.group_size or None)
    pipeline.save_checkpoint(qmodel, args.output)
    rows = [("layer", "mse", "max_abs_err")]
    for name, err in pipeline.layer_errors(model, qmodel).items():
        rows.append((name, f"{err.mse:.6e}", f"{err.max_abs_err:.6e}"))
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    sys.stdout.write(buf.getvalue())
    return 0


def _mean_rel_error(model, qmodel, prompts) -> float:
    errs = []
    for p in prompts:
        ref = pipeline.forward(model, p)
        got = pipeline.forward(qmodel, p)
        errs.append(np.linalg.norm((got - ref).astype(np.float64)) / np.linalg.norm(ref.astype(np.float64)))
    return float(np.mean(errs))


def eval_toy(precision: str, *, smooth: float | None, hadamard: bool, prompts: int, seed: int,
             prompt_len: int = 32, max_new: int = 32, outliers: int = DEFAULT_OUTLIERS,
             outlier_factor: float = 100.0, group_size: int | None = None, ckpt: str | None = None,
             calib_samples: int = 16, calib_len: int = 128) -> dict[str, float]:
    """Compare a quantized toy model against its FP32 source; returns the report fields."""
    if ckpt:
        model = pipeline.load_checkpoint(ckpt)
        if isinstance(model, pipeline.QuantizedToyModel):
            raise ConfigError("eval-toy needs an FP32 checkpoint as the reference")
    else:
        model = pipeline.init_toy_model(pipeline.ToyModelConfig(seed=seed, n_outliers=outliers,
                                                                outlier_factor=outlier_factor))
    cfg = model.config
    prompt_set = pipeline.calibration_batches(cfg, prompts, prompt_len, seed=seed + 2)
    if precision == "fp32":
        if smooth is not None or hadamard:
            raise ConfigError("transforms need a quantized precision")
        qmodel = model
    else:
        stats = pipeline.calibrate(model, pipeline.calibration_batches(cfg, calib_samples, calib_len, seed=seed + 1))
        qmodel = pipeline.quantize_model(model, precision, stats, smooth_alpha=smooth, hadamard=hadamard,
                                         group_size=group_size)
    err = _mean_rel_error(model, qmodel, prompt_set)
    mismatched = total = 0
    generations = []
    for p in prompt_set:
        ref = pipeline.generate(model, p, max_new)[len(p):]
        got = pipeline.generate(qmodel, p, max_new)[len(p):]
        generations.append(got)
        width = max(len(ref), len(got))
        mismatched += sum(1 for i in range(width) if i >= len(ref) or i >= len(got) or ref[i] != got[i])
        total += width
    return {
        "mean_rel_logit_error": err,
        "token_divergence_rate": mismatched / total if total else 0.0,
        "repetition_ratio": analysis.repetition_ratio(generations),
    }


def cmd_eval_toy(args) -> int:
    report = eval_toy(args.precision, smooth=args.smooth, hadamard=args.hadamard, prompts=args.prompts,
                      seed=args.seed, prompt_len=args.prompt_len, max_new=args.max_new,
                      outliers=args.outliers, outlier_factor=args.outlier_factor,
                      group_size=args.group_size or None, ckpt=args.ckpt)
    rows = [("metric", "value"), ("precision", args.precision), ("smooth", args.smooth or ""),
            ("hadamard", int(args.hadamard)), ("prompts", args.prompts), ("seed", args.seed)]
    rows += [(k, repr(v)) for k, v in report.items()]
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    _emit(buf.getvalue(), args.out)
    return 0


def _bench_operands(kernel: str, a: np.ndarray, w: np.ndarray, group_size: int):
    if kernel == "f32":
        return (lambda: (a @ w).astype(np.float32)), matmul_ref(a, w)
    aq = quantize_tensor(a, QuantScheme(8, Granularity.PER_TOKEN))
    if kernel == "w4a8_ref":
        wscheme = (QuantScheme(4, Granularity.PER_GROUP, group_size) if group_size
                   else QuantScheme(4, Granularity.PER_CHANNEL))
        wq = quantize_tensor(w, wscheme)
        fn = gemm_w4a8_ref
    else:
        wq = quantize_tensor(w, QuantScheme(8, Granularity.PER_CHANNEL))
        fn = gemm_w8a8_ref if kernel == "w8a8_ref" else gemm_w8a8_opt
    return (lambda: fn(aq, wq)), matmul_ref(dequantize(aq), dequantize(wq))


def bench(ms, n: int, k: int, iters: int, kernels, seed: int, group_size: int = 0) -> list[dict]:
    if k > MAX_K:
        raise ConfigError(f"k={k} exceeds the overflow-free bound {MAX_K}")
    if iters <= 0:
        raise ConfigError("iters must be positive")
    if group_size and k % group_size:
        raise ConfigError(f"group size {group_size} does not divide k={k}")
    records = []
    w = rand_tensor((k, n), seed + 1, "normal")
    for m in ms:
        a = rand_tensor((m, k), seed, "normal")
        for kernel in kernels:
            run, oracle = _bench_operands(kernel, a, w, group_size)
            err = relative_error(run(), oracle)
            if not err <= CHECK_TOL[kernel]:
                raise InvariantError(f"{kernel} failed its correctness check at m={m}: rel err {err:.3e}")
            times = []
            for _ in range(iters):
                t0 = time.perf_counter_ns()
                run()
                times.append(time.perf_counter_ns() - t0)
            sizes = payload_bytes(kernel, m, k, n, group_size if kernel == "w4a8_ref" else 0)
            records.append({
                "kernel": kernel, "m": m, "n": n, "k": k, "iters": iters,
                "wall_ns": max(1, int(np.median(times))),
                **sizes,
                "payload_bytes": sizes["weight_bytes"] + sizes["act_bytes"] + sizes["scale_bytes"],
                "check_rel_err": f"{err:.3e}",
                "peak_rss_kb_platform_dependent": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss,
            })
    return records


def cmd_bench(args) -> int:
    kernels = [k.strip() for k in args.kernels.split(",") if k.strip()]
    bad = [k for k in kernels if k not in KERNELS]
    if bad or not kernels:
        raise ConfigError(f"unknown kernels {bad}; choose from {','.join(KERNELS)}")
    records = bench(_int_list(args.m), args.n, args.k, args.iters, kernels, args.seed, args.group_size)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(records[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(records)
    _emit(buf.getvalue(), args.out)
    return 0


def _layer_weight(ckpt: str, layer: str) -> np.ndarray:
    model = pipeline.load_checkpoint(ckpt)
    if isinstance(model, pipeline.QuantizedToyModel):
        if layer not in model.qlinears:
            raise InputError(f"layer {layer!r} not in {ckpt}")
        weight = model.qlinears[layer].weight
        return dequantize(weight) if model.qlinears[layer].quantized else np.asarray(weight)
    if layer not in model.linears:
        raise InputError(f"layer {layer!r} not in {ckpt}")
    return model.linears[layer]


def cmd_analyze(args) -> int:
    if args.channel_stats:
        ckpt, layer = args.channel_stats
        text = analysis.profile_csv(analysis.channel_profile(_layer_weight(ckpt, layer), axis=args.axis))
    elif args.word_counts:
        lines = _load_text(args.word_counts).splitlines()
        text = analysis.word_count_csv(analysis.word_count_stats(lines))
    else:
        cfg = analysis.RepetitionConfig(min_phrase=args.min_phrase, max_phrase=args.max_phrase,
                                        min_repeats=args.min_repeats, must_reach_end=not args.anywhere)
        lines = _load_text(args.repetition).splitlines()
        reports = [analysis.detect_terminal_repetition(analysis.tokenize(line), cfg) for line in lines]
        text = analysis.repetition_csv(reports)
        if args.passed:
            flags = [line.strip() not in ("0", "false", "False", "") for line in _load_text(args.passed).splitlines()]
            grouped = analysis.grouped_accuracy([r.detected for r in reports], flags)
            text += "".join(f"summary_{k},{v!r}\n" for k, v in grouped.items())
    _emit(text, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lbq", description="Low-bit post-training quantization toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def seeded(p):
        p.add_argument("--seed", type=int, default=None, help="RNG seed (default: $LBQ_SEED or 0)")

    def toy(p):
        p.add_argument("--outliers", type=int, default=DEFAULT_OUTLIERS,
                       help="outlier input channels injected per linear layer (0 disables)")
        p.add_argument("--outlier-factor", type=float, default=100.0)

    p = sub.add_parser("init-toy", help="write a fresh FP32 toy-model checkpoint")
    p.add_argument("out")
    seeded(p)
    toy(p)
    p.set_defaults(func=cmd_init_toy)

    p = sub.add_parser("quantize", help="quantize an FP32 toy checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--scheme", choices=("w8a8", "w4a8"), default="w8a8")
    p.add_argument("--smooth", type=float, default=None, metavar="ALPHA")
    p.add_argument("--hadamard", action="store_true")
    p.add_argument("--group-size", type=int, default=0, help="w4a8 group size (0: per-channel)")
    p.add_argument("--calib", default="random", help="'random' or a UTF-8 text file")
    p.add_argument("--calib-samples", type=int, default=16)
    p.add_argument("--calib-len", type=int, default=128)
    seeded(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval-toy", help="compare a quantized toy model against FP32")
    p.add_argument("--precision", choices=("fp32", "w8a8", "w4a8"), default="w8a8")
    p.add_argument("--smooth", type=float, default=None, metavar="ALPHA")
    p.add_argument("--hadamard", action="store_true")
    p.add_argument("--group-size", type=int, default=0)
    p.add_argument("--prompts", type=int, default=32)
    p.add_argument("--prompt-len", type=int, default=32)
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--ckpt", default=None, help="FP32 checkpoint to evaluate instead of a seeded model")
    p.add_argument("--out", default=None)
    seeded(p)
    toy(p)
    p.set_defaults(func=cmd_eval_toy)

    p = sub.add_parser("bench", help="time GEMM kernels and report payload bytes (CSV)")
    p.add_argument("--m", default="2,4,8,16,32", help="comma-separated row counts (batch x seq)")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--k", type=int, default=1024)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--kernels", default=",".join(KERNELS))
    p.add_argument("--group-size", type=int, default=0)
    p.add_argument("--out", default=None)
    seeded(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("analyze", help="channel profiles, word counts, repetition (CSV)")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--channel-stats", nargs=2, metavar=("CKPT", "LAYER"))
    what.add_argument("--word-counts", metavar="FILE")
    what.add_argument("--repetition", metavar="FILE")
    p.add_argument("--axis", type=int, choices=(0, 1), default=0, help="0: one channel per weight row")
    p.add_argument("--min-phrase", type=int, default=1)
    p.add_argument("--max-phrase", type=int, default=32)
    p.add_argument("--min-repeats", type=int, default=3)
    p.add_argument("--anywhere", action="store_true", help="accept a repeated run that stops before the last token")
    p.add_argument("--passed", metavar="FILE", help="per-sample 0/1 outcomes for grouped accuracy")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if hasattr(args, "seed") and args.seed is None:
            args.seed = _default_seed()
        return args.func(args)
    except LBQError as exc:
        print(f"lbq: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"lbq: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
