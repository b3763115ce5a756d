"""``razer`` command line.

Exit codes: 0 success, 1 usage error, 2 data/format error. Errors are
reported on stderr as a one-line JSON object ``{"error": kind, "message": ...}``.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import _accel
from .codec import (
    ContainerError,
    container_bytes,
    effective_bits,
    read_container,
    read_nt,
    write_nt,
)
from .kernels import KV_DTYPES, KVCacheState, attention, bench_gemv, kv_append, kv_attention, write_bench_csv
from .numerics import DTYPES, get_datatype
from .quantizer import QuantConfig, dequantize_tensor, mse, quantize_tensor
from .svsearch import (
    DEFAULT_RANGES,
    DEFAULT_SVSETS,
    LayerSpec,
    SearchRange,
    SVSet,
    calibrate_model,
    search_layer_svset,
    sweep_sv_error,
)

SWEEP_COLUMNS = ("sv_magnitude", "razer_err", "fp_baseline_err", "int_baseline_err")
KV_COLUMNS = ("step", "tokens", "buffered", "blocks", "flush", "attn_error")
META_BITS = {"int4": 4, "int3": 3, "fp4rzr": 2, "fp3rzr": 2}


class UsageError(Exception):
    pass


class DataError(Exception):
    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_nt(path):
    try:
        return read_nt(path)
    except FileNotFoundError:
        raise DataError("not_found", f"{path} does not exist") from None
    except ContainerError as e:
        raise DataError(e.kind, f"{path}: {e.message}") from None


def _parse_sv(text: str, datatype: str) -> SVSet:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"--sv expects 'auto' or four comma-separated numbers, got {text!r}") from None
    try:
        return SVSet(tuple(vals), get_datatype(datatype).name)
    except ValueError as e:
        raise UsageError(f"invalid special-value set: {e}") from None


def _parse_range(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"range must look like a:b, got {text!r}") from None
    if not a < b:
        raise UsageError(f"range start {a} must be below its end {b}")
    return a, b


def _parse_shapes(text: str):
    shapes = []
    for part in text.split(","):
        try:
            n, k = (int(v) for v in part.lower().split("x"))
        except ValueError:
            raise UsageError(f"shape {part!r} is not NxK") from None
        if n < 1 or k < 1:
            raise UsageError(f"shape {part!r} must be positive")
        shapes.append((n, k))
    return shapes


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout, False
    return open(path, "w", newline=""), True


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path, columns, rows):
    f, close = _open_out(path)
    try:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    finally:
        if close:
            f.close()


def _emit(obj):
    print(json.dumps(obj, indent=2))


def _calibrate_tensor(T, datatype, g, budget, seed) -> SVSet:
    spec = get_datatype(datatype)
    layer = LayerSpec(np.asarray(T, dtype=np.float64).reshape(-1, np.shape(T)[-1]), name="input")
    res = search_layer_svset(layer, spec, SearchRange(*DEFAULT_RANGES[spec.name]), budget, seed, g)
    return res.svset


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_quantize(args):
    T = _load_nt(args.input)
    datatype = args.dtype
    g = args.group_size
    if T.shape[-1] % g:
        warnings.warn(f"innermost dimension {T.shape[-1]} is not a multiple of {g}; the last group is zero-padded")
    if datatype in ("int3", "fp3rzr") and g != 128:
        raise UsageError("3-bit datatypes are stored as 128-element bit planes; use --group-size 128")
    sv = None
    if datatype.endswith("rzr"):
        if args.sv is None:
            raise UsageError(f"--sv is required for {datatype}")
        sv = _calibrate_tensor(T, datatype, g, args.budget, args.seed) if args.sv == "auto" \
            else _parse_sv(args.sv, datatype)
    elif args.sv is not None:
        warnings.warn("--sv is ignored for integer datatypes")
    cfg = QuantConfig(datatype, g, alpha=args.clip, beta=args.clip)
    qt = quantize_tensor(T, cfg, sv)
    data = container_bytes(qt)
    Path(args.output).write_bytes(data)
    err = mse(T, dequantize_tensor(qt))
    bits = get_datatype(datatype).bits
    _emit({
        "dtype": datatype,
        "group_size": g,
        "dims": list(qt.dims),
        "groups": qt.n_groups,
        "padded": qt.tail_len != g,
        "sv_set": list(sv.values) if sv is not None else None,
        "mse": err,
        "mse_per_element": err / T.size,
        "effective_bits": effective_bits(bits, g, 8, META_BITS[datatype]),
        "stored_bits_per_element": 8 * len(data) / T.size,
        "output": str(args.output),
        "bytes": len(data),
    })


def cmd_dequantize(args):
    try:
        qt = read_container(args.input)
    except FileNotFoundError:
        raise DataError("not_found", f"{args.input} does not exist") from None
    except ContainerError as e:
        raise DataError(e.kind, f"{args.input}: {e.message}") from None
    write_nt(args.output, dequantize_tensor(qt))
    _emit({"dtype": qt.config.datatype, "group_size": qt.config.group_size, "dims": list(qt.dims),
           "output": str(args.output)})


def cmd_sweep_sv(args):
    T = _load_nt(args.input)
    a, b = _parse_range(args.range)
    if a <= 0:
        raise UsageError("sweep magnitudes must be positive")
    if args.step <= 0:
        raise UsageError("--step must be positive")
    count = int(math.floor((b - a) / args.step + 1e-9)) + 1
    mags = a + args.step * np.arange(count)
    res = sweep_sv_error(T, get_datatype(args.dtype), mags, args.group_size)
    razer, fp, base = res.normalized("int")
    rows = [{"sv_magnitude": float(m), "razer_err": float(r), "fp_baseline_err": float(fp),
             "int_baseline_err": float(base)} for m, r in zip(mags, razer)]
    _write_csv(args.csv, SWEEP_COLUMNS, rows)


def _layer_files(directory):
    d = Path(directory)
    if not d.is_dir():
        raise DataError("not_found", f"{directory} is not a directory")
    files = sorted(d.glob("*.nt"))
    if not files:
        raise DataError("empty", f"no .nt files in {directory}")
    return files


def cmd_calibrate(args):
    w_files = _layer_files(args.layers)
    kv_files = _layer_files(args.kv_layers) if args.kv_layers else []
    if kv_files and len(kv_files) != len(w_files):
        raise UsageError("--kv-layers must hold one file per weight layer")
    if args.budget < 20:
        raise UsageError("--budget must be at least 20")
    layers = []
    for i, f in enumerate(w_files):
        W = _load_nt(f)
        KV = _load_nt(kv_files[i]) if kv_files else None
        layers.append(LayerSpec(W.reshape(-1, W.shape[-1]), KV=None if KV is None else KV.reshape(-1, KV.shape[-1]),
                                name=f.stem))
    spec = get_datatype(args.dtype)
    kv_spec = get_datatype(args.kv_dtype or args.dtype)
    range_w = SearchRange(*_parse_range(args.range)) if args.range else None
    res = calibrate_model(layers, spec, kv_spec, args.budget, args.seed, args.group_size, args.kv_group_size,
                          range_w=range_w)
    report = res.to_report([l.name for l in layers], args.seed, args.budget, args.dtype, args.group_size)
    with open(args.out, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    _emit(report)


def cmd_kv_sim(args):
    if args.tokens < 1 or args.dim < 1 or args.buffer < 1 or args.group_size < 2:
        raise UsageError("tokens, dim and buffer must be positive and group size at least 2")
    sv = None
    if args.dtype.endswith("rzr"):
        sv = DEFAULT_SVSETS[get_datatype(args.dtype).name] if args.sv is None else _parse_sv(args.sv, args.dtype)
    state = KVCacheState(args.dim, args.buffer, args.group_size, args.dtype,
                         tuple(sv.values) if sv is not None else None)
    rng = np.random.default_rng(args.seed)
    # the stream is half precision so the fp16 passthrough is lossless
    stream = rng.standard_normal((args.tokens, 3, args.dim)).astype(np.float16).astype(np.float64)
    rows = []
    for t in range(args.tokens):
        k, v, q = stream[t]
        before = state.events
        kv_append(state, k, v)
        out = kv_attention(state, q)
        ref = attention(stream[:t + 1, 0], stream[:t + 1, 1], q)
        d = out - ref
        rows.append({"step": t, "tokens": state.total_tokens, "buffered": len(state.buffer_k),
                     "blocks": len(state.blocks), "flush": state.events - before,
                     "attn_error": float(d @ d)})
    _write_csv(args.csv, KV_COLUMNS, rows)
    if args.csv not in (None, "-"):
        _emit({"dtype": args.dtype, "tokens": args.tokens, "flush_events": state.events,
               "buffered": len(state.buffer_k), "mean_attn_error": float(np.mean([r["attn_error"] for r in rows]))})


def cmd_bench_gemv(args):
    shapes = _parse_shapes(args.shapes)
    if args.reps < 3:
        raise UsageError("--reps must be at least 3")
    rows = bench_gemv(shapes, args.reps, args.seed, args.group_size, self_check=not args.no_self_check)
    f, close = _open_out(args.csv)
    try:
        write_bench_csv(rows, f)
    finally:
        if close:
            f.close()


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="razer", description="RaZeR quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("quantize", help="quantize a .nt tensor into an .rzr container")
    q.add_argument("--input", required=True)
    q.add_argument("--dtype", required=True, choices=DTYPES)
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--sv", help="'auto' or four comma-separated special values")
    q.add_argument("--clip", type=float, default=1.0, help="clip ratio in (0, 1]")
    q.add_argument("--output", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--budget", type=int, default=200, help="evaluations for --sv auto")
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("dequantize", help="decode an .rzr container to a .nt tensor")
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.set_defaults(func=cmd_dequantize)

    s = sub.add_parser("sweep-sv", help="quantization error versus special-value magnitude")
    s.add_argument("--input", required=True)
    s.add_argument("--dtype", default="fp3rzr", choices=("fp3rzr", "fp4rzr"))
    s.add_argument("--range", default="2:14")
    s.add_argument("--step", type=float, default=1.0)
    s.add_argument("--group-size", type=int, default=128)
    s.add_argument("--csv", default="-")
    s.set_defaults(func=cmd_sweep_sv)

    c = sub.add_parser("calibrate", help="search a model-level special-value set")
    c.add_argument("--layers", required=True, help="directory of per-layer weight .nt files")
    c.add_argument("--kv-layers", help="directory of per-layer KV .nt files (same order)")
    c.add_argument("--dtype", default="fp4rzr", choices=("fp3rzr", "fp4rzr"))
    c.add_argument("--kv-dtype", choices=("fp3rzr", "fp4rzr"))
    c.add_argument("--budget", type=int, default=200)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--group-size", type=int, default=128)
    c.add_argument("--kv-group-size", type=int, default=64)
    c.add_argument("--range", help="weight search range a:b (default per datatype)")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    k = sub.add_parser("kv-sim", help="simulate a buffered quantized KV cache")
    k.add_argument("--tokens", type=int, required=True)
    k.add_argument("--dim", type=int, default=128)
    k.add_argument("--buffer", type=int, default=64)
    k.add_argument("--group-size", type=int, default=64)
    k.add_argument("--dtype", default="fp4rzr", choices=KV_DTYPES)
    k.add_argument("--sv", help="special values for RaZeR dtypes")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--csv", default="-")
    k.set_defaults(func=cmd_kv_sim)

    b = sub.add_parser("bench-gemv", help="time fused versus reference GEMV")
    b.add_argument("--shapes", default="4096x4096")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--group-size", type=int, default=128)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--no-self-check", action="store_true")
    b.add_argument("--csv", default="-")
    b.set_defaults(func=cmd_bench_gemv)
    return p


def _fail(kind, message, code):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    _accel.apply_thread_cap()
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except UsageError as e:
        return _fail("usage", str(e), 1)
    except DataError as e:
        return _fail(e.kind, str(e), 2)
    except ContainerError as e:
        return _fail(e.kind, e.message, 2)
    except OSError as e:
        return _fail("io", str(e), 2)
    except ValueError as e:
        return _fail("data", str(e), 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
