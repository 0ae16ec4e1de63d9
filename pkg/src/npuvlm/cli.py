"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 malformed/incompatible input
(format, schema, config or coverage), 3 runtime limit such as a context
overflow.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import artifacts, bundle
from .calib import build_precision_plan, evaluate_quantization, quantize_model
from .errors import CompletenessError, ConfigMismatchError, ContextOverflowError, FormatError, ShapeError
from .model import VLMInput
from .perf import (HardwareProfile, OpCounts, TrafficLedger, decode_reduction, decode_step_traffic, instrumented_decode,
                   instrumented_run, roofline_latency, roofline_seconds)
from .ranges import RangeBook, parse_method
from .reports import RunReport, canonical_json, digest, validate
from .runtime import Runtime
from .vit import brittleness_experiment

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_LIMIT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class LimitError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def default_seed() -> int:
    return int(os.environ.get("ANRL_SEED", "0"))


# input helpers


def input_files(paths) -> list[Path]:
    """Expand directories to their ``*.bin`` files; sorted by file name."""
    out = []
    for p in paths:
        p = Path(p)
        out.extend(sorted(p.glob("*.bin")) if p.is_dir() else [p])
    return sorted(out, key=lambda q: (q.name, str(q)))


def read_inputs(paths) -> list[np.ndarray]:
    files = input_files(paths)
    if not files:
        raise FormatError("no input files given")
    out, bad = [], []
    for f in files:
        try:
            out.append(bundle.read_tensor(f))
        except (OSError, FormatError) as e:
            bad.append(f"{f} ({e})")
    if bad:
        raise FormatError("unreadable input: " + "; ".join(bad))
    return out


def parse_ids(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def as_samples(model, images, prompt_ids=()):
    if model.kind == "vlm":
        return [VLMInput(img, prompt_ids) for img in images]
    return list(images)


def load_bundle(path):
    try:
        return bundle.load(path)
    except FileNotFoundError:
        raise FormatError(f"{path}: no such bundle") from None


def write_out(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def emit(args, command, cfg_obj, metrics, seed=None):
    rep = RunReport(command, digest(cfg_obj), metrics, seed)
    write_out(rep.to_json(), args.out)
    return rep


# commands


def cmd_init_model(args):
    cfg = artifacts.load_config(args.kind, args.config)
    model = artifacts.init_model(args.kind, cfg, args.seed)
    data = bundle.save(artifacts.model_to_bundle(model, args.seed), args.out)
    print(json.dumps({"out": args.out, "kind": model.kind, "params": model.param_count(), "bytes": len(data),
                      "crc32": zlib.crc32(data)}, sort_keys=True))


def cmd_gen_inputs(args):
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    s = args.size
    for i in range(args.count):
        if args.dist == "uniform":
            img = rng.uniform(-1, 1, (3, s, s))
        elif args.dist == "gaussian":
            img = rng.standard_normal((3, s, s))
        else:
            # smooth gradients plus a few random rectangles, like flat synthetic scenes
            yy, xx = np.mgrid[0:s, 0:s] / s
            img = np.stack([np.cos(2 * np.pi * (rng.uniform(0.5, 3) * xx + rng.uniform(0.5, 3) * yy + rng.uniform()))
                            for _ in range(3)])
            for _ in range(4):
                y0, x0 = rng.integers(0, s, 2)
                h, w = rng.integers(s // 8, s // 2, 2)
                img[:, y0:y0 + h, x0:x0 + w] = rng.uniform(-1, 1, (3, 1, 1))
        bundle.write_tensor(out / f"input_{i:04d}.bin", img.astype(np.float32))
    print(json.dumps({"out": str(out), "count": args.count}, sort_keys=True))


def cmd_calibrate(args):
    parse_method(args.method)
    b = load_bundle(args.bundle)
    if b.quantized:
        raise FormatError("calibrate needs a float bundle")
    model = artifacts.model_from_bundle(b)
    images = read_inputs(args.inputs)
    book = RangeBook(method=args.method)
    rt = Runtime(recorder=book)
    for x in as_samples(model, images, parse_ids(args.prompt_ids)):
        model.stages(x, rt)
        if args.generate_tokens and model.kind == "vlm":
            model.generate(x, args.generate_tokens, rt)
    d = book.to_dict()
    validate(d, "range_book")
    write_out(canonical_json(d), args.out)


def read_book(path) -> RangeBook:
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FormatError(f"{path}: no such range book") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not JSON ({e})") from None
    if d.get("schema_version") != 1:
        raise FormatError(f"{path}: unsupported schema_version {d.get('schema_version')!r}")
    validate(d, "range_book")
    return RangeBook.from_dict(d)


def cmd_merge_ranges(args):
    books = [read_book(p) for p in args.books]
    out = books[0]
    for b in books[1:]:
        out = out.merge(b)
    write_out(canonical_json(out.to_dict()), args.out)


def load_plan(spec: str):
    if spec in ("paper", "fp-ref", "w8a16", "w4a16"):
        return build_precision_plan(spec)
    try:
        d = json.loads(Path(spec).read_text())
    except FileNotFoundError:
        raise FormatError(f"plan {spec!r} is neither a preset nor a file") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"plan {spec}: not JSON ({e})") from None
    return build_precision_plan("custom", custom=d)


def cmd_quantize(args):
    b = load_bundle(args.bundle)
    if b.quantized:
        raise FormatError("bundle is already quantized")
    model = artifacts.model_from_bundle(b)
    book = read_book(args.ranges)
    q = quantize_model(model, load_plan(args.plan), book, args.method)
    data = bundle.save(artifacts.quantized_to_bundle(q, b.seed), args.out)
    counts = {}
    for t in q.qweights.values():
        counts[f"i{t.params.bits}"] = counts.get(f"i{t.params.bits}", 0) + 1
    print(json.dumps({"out": args.out, "bytes": len(data), "tensors": counts}, sort_keys=True))


def cmd_eval(args):
    fb, qb = load_bundle(args.float), load_bundle(args.quant)
    fm, qm = artifacts.model_from_bundle(fb), artifacts.model_from_bundle(qb)
    images = read_inputs(args.inputs)
    samples = as_samples(fm, images, parse_ids(args.prompt_ids))
    rep = evaluate_quantization(fm, qm, samples, args.generate_tokens if fm.kind == "vlm" else 0)
    metrics = rep.to_dict()
    metrics["plan"] = qb.plan
    emit(args, "eval", {"float": fb.config, "quant_plan": qb.plan}, metrics, fb.seed)


def cmd_bench_decode(args):
    b = load_bundle(args.bundle)
    model = artifacts.model_from_bundle(b)
    if model.kind != "vlm":
        raise FormatError("bench-decode needs a VLM bundle")
    cfg = model.config.backbone
    ledger = TrafficLedger(act_bytes=2, weight_bits=16)
    act = getattr(model, "act_params", None)
    weights = model.executed.weights if act is not None else model.weights
    t0 = time.perf_counter()
    try:
        sess = instrumented_decode(cfg, weights, args.prompt_len, args.steps, ledger, act_params=act, seed=args.seed)
    except ContextOverflowError as e:
        if e.position < args.prompt_len:
            raise LimitError(f"prompt of {args.prompt_len} tokens exceeds max_context {e.max_context}") from None
        step = e.position - args.prompt_len + 1
        raise LimitError(f"context overflow at decode step {step} (sequence position {e.position}, "
                         f"max_context {e.max_context})") from None
    wall = time.perf_counter() - t0
    hw = read_hw(args.hw)
    metrics = {
        "prompt_len": args.prompt_len,
        "steps": args.steps,
        "wall_seconds": wall,
        "tokens_per_second": args.steps / wall if wall > 0 else None,
        "rolling_state_bytes": sess.rolling_state_bytes(2),
        "kv_bytes": sess.kv_bytes(2),
        "traffic_totals": {ph: vars(ledger.totals(ph)) for ph in ledger.phases()},
        "roofline_seconds": roofline_latency(ledger, hw),
    }
    # wall time is the one non-deterministic field
    if args.no_timing:
        metrics["wall_seconds"] = None
        metrics["tokens_per_second"] = None
    emit(args, "bench-decode", b.config, metrics, args.seed)


def read_hw(path) -> HardwareProfile:
    if not path:
        return HardwareProfile()
    try:
        return HardwareProfile.from_dict(json.loads(Path(path).read_text()))
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise FormatError(f"hardware profile {path}: {e}") from None


def _plan_bits(b: bundle.Bundle):
    if not b.quantized:
        return 16
    return {k: (v.params.bits if hasattr(v, "params") else 32) for k, v in b.tensors.items()}


def cmd_traffic(args):
    b = load_bundle(args.bundle)
    model = artifacts.model_from_bundle(b)
    if model.kind != "vlm":
        raise FormatError("traffic needs a VLM bundle")
    hw = read_hw(args.hw)
    cfg = model.config.backbone
    position = args.seq_len - 1
    if not 0 <= position < cfg.max_context:
        raise FormatError(f"seq-len must be in [1, {cfg.max_context}]")
    bits = _plan_bits(b)
    per_layer = decode_step_traffic(cfg, position, 2, bits, args.weights_resident)
    red = decode_reduction(cfg, position, 2, bits, args.weights_resident)
    ledger = TrafficLedger(weight_bits=bits, act_bytes=2, weights_resident=args.weights_resident,
                           onchip_buffer_bytes=hw.onchip_buffer_bytes)
    float_model = model.executed if hasattr(model, "executed") else model
    s = model.config.encoder.input_size
    instrumented_run(float_model, [VLMInput(np.zeros((3, s, s), np.float32), ())], ledger)
    roof = roofline_latency(ledger, hw)
    dec = OpCounts()
    for c in per_layer.values():
        dec.add(c)
    roof["decode_per_step"] = roofline_seconds(dec.macs, dec.dram_bytes, hw)
    metrics = {
        "seq_len": args.seq_len,
        "position": position,
        "weights_resident": args.weights_resident,
        "kv_reduction_vs_pure": red["kv_only"],
        "cache_reduction_vs_pure": red["cache"],
        "total_reduction_vs_pure": red["total"],
        "kv_read_bytes": red["kv_read_bytes"],
        "kv_read_bytes_pure": red["kv_read_bytes_pure"],
        "decode_layers": {k: vars(v) for k, v in per_layer.items()},
        "traffic_totals": {ph: vars(ledger.totals(ph)) for ph in ledger.phases()},
        "roofline_seconds": roof,
        "hardware": hw.to_dict(),
    }
    if args.csv:
        Path(args.csv).write_text(ledger.to_csv())
    emit(args, "traffic", b.config, metrics, b.seed)


def cmd_compare_encoders(args):
    cb, vb = load_bundle(args.conv), load_bundle(args.vit)
    conv, vit = artifacts.model_from_bundle(cb), artifacts.model_from_bundle(vb)
    if conv.kind != "conv_encoder" or vit.kind != "vit":
        raise FormatError("compare-encoders needs a conv_encoder bundle and a vit bundle")
    evals = read_inputs(args.inputs)
    calib = read_inputs(args.calib) if args.calib else evals
    rep = brittleness_experiment(conv, vit, calib, evals, load_plan(args.plan), seed=args.seed)
    hw = read_hw(args.hw)
    roof = {}
    for name, m in (("conv", conv), ("vit", vit)):
        L = instrumented_run(m, [np.zeros_like(evals[0])], TrafficLedger(
            weight_bits=8, act_bytes=2, onchip_buffer_bytes=hw.onchip_buffer_bytes))
        roof[name] = roofline_latency(L, hw)["vision"]
    rep["roofline_seconds"] = roof
    rep["latency_ratio_vit_over_conv"] = roof["vit"] / roof["conv"]
    emit(args, "compare-encoders", {"conv": cb.config, "vit": vb.config}, rep, args.seed)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="npuvlm", description="NPU-oriented VLM toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init-model", help="write a seeded model bundle")
    s.add_argument("--config", default="toy", help="toy, paper or a JSON config file")
    s.add_argument("--kind", default="vlm", choices=["vlm", "conv-encoder", "conv_encoder", "vit"])
    s.add_argument("--seed", type=int, default=default_seed())
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init_model)

    s = sub.add_parser("gen-inputs", help="write raw-tensor image files")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--size", type=int, default=96)
    s.add_argument("--dist", choices=["uniform", "gaussian", "structured"], default="uniform")
    s.add_argument("--seed", type=int, default=default_seed())
    s.set_defaults(func=cmd_gen_inputs)

    s = sub.add_parser("calibrate", help="record activation ranges")
    s.add_argument("--bundle", required=True)
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--method", default="minmax", help="minmax or percentile:P")
    s.add_argument("--prompt-ids", default="")
    s.add_argument("--generate-tokens", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("merge-ranges", help="merge range books")
    s.add_argument("books", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_merge_ranges)

    s = sub.add_parser("quantize", help="write a quantized bundle")
    s.add_argument("--bundle", required=True)
    s.add_argument("--ranges", required=True)
    s.add_argument("--plan", default="paper", help="paper, fp-ref, w8a16, w4a16 or a JSON plan file")
    s.add_argument("--method", default=None, help="override the range book's calibration method")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("eval", help="compare a quantized bundle against its float model")
    s.add_argument("--float", required=True)
    s.add_argument("--quant", required=True)
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--prompt-ids", default="")
    s.add_argument("--generate-tokens", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench-decode", help="prefill plus greedy decode with traffic counters")
    s.add_argument("--bundle", required=True)
    s.add_argument("--prompt-len", type=int, default=16)
    s.add_argument("--steps", type=int, default=64)
    s.add_argument("--hw")
    s.add_argument("--seed", type=int, default=default_seed())
    s.add_argument("--no-timing", action="store_true", help="omit wall-clock fields")
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench_decode)

    s = sub.add_parser("traffic", help="decode traffic and roofline report")
    s.add_argument("--bundle", required=True)
    s.add_argument("--seq-len", type=int, default=4096)
    s.add_argument("--hw")
    s.add_argument("--weights-resident", action="store_true")
    s.add_argument("--csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_traffic)

    s = sub.add_parser("compare-encoders", help="quantization brittleness of conv vs ViT encoders")
    s.add_argument("--conv", required=True)
    s.add_argument("--vit", required=True)
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--calib", nargs="+")
    s.add_argument("--plan", default="w8a16")
    s.add_argument("--hw")
    s.add_argument("--seed", type=int, default=default_seed())
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare_encoders)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    try:
        args.func(args)
    except (LimitError, ContextOverflowError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_LIMIT
    except CompletenessError as e:
        print(f"error: missing coverage: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (FormatError, ConfigMismatchError, ShapeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
