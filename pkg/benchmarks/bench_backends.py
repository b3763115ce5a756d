"""Compare the numba and pure-numpy backends.

Runs ``razer bench-gemv`` once per backend in a fresh interpreter (the
backend is fixed at import time by RAZER_DISABLE_NUMBA), then times the
fast and table-lookup code casts in-process on both backends.

    python3 benchmarks/bench_backends.py --shapes 4096x4096,13824x5120 --reps 5
"""
import argparse
import csv
import io
import os
import subprocess
import sys
import time

import numpy as np


def run_gemv(shapes, reps, disable_numba):
    env = dict(os.environ, RAZER_DISABLE_NUMBA="1" if disable_numba else "0")
    cmd = [sys.executable, "-m", "razer", "bench-gemv", "--shapes", shapes, "--reps", str(reps)]
    out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout
    return list(csv.DictReader(io.StringIO(out)))


def time_casts(n, reps):
    from razer import _accel
    from razer.fastcast import cast_codes

    codes = np.random.default_rng(0).integers(0, 16, n).astype(np.uint8)
    rows = []
    for use_numba in ([False, True] if _accel._HAVE_NUMBA else [False]):
        for method in ("fast", "lookup"):
            cast_codes(codes, 1, method=method, use_numba=use_numba)
            best = min(_once(cast_codes, codes, method, use_numba) for _ in range(reps))
            rows.append(("numba" if use_numba else "numpy", method, best))
    return rows


def _once(fn, codes, method, use_numba):
    t0 = time.perf_counter_ns()
    fn(codes, 1, method=method, use_numba=use_numba)
    return time.perf_counter_ns() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--shapes", default="1024x1024,4096x4096")
    ap.add_argument("--reps", type=int, default=5)
    ap.add_argument("--cast-codes", type=int, default=1 << 22)
    args = ap.parse_args()

    numba_rows = run_gemv(args.shapes, args.reps, disable_numba=False)
    numpy_rows = run_gemv(args.shapes, args.reps, disable_numba=True)
    print(f"{'shape':>12} {'path':>10} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for a, b in zip(numba_rows, numpy_rows):
        ta, tb = int(a["median_ns"]) / 1e6, int(b["median_ns"]) / 1e6
        print(f"{a['shape']:>12} {a['path']:>10} {ta:10.2f} {tb:10.2f} {tb / ta:8.1f}x")
    payload, baseline = int(numba_rows[-1]["payload_bytes"]), int(numba_rows[-1]["baseline_bytes"])
    print(f"last shape: packed {payload / 2**20:.2f} MiB vs half {baseline / 2**20:.2f} MiB")

    print(f"\ncode cast, {args.cast_codes} codes (best of {args.reps})")
    for backend, method, ns in time_casts(args.cast_codes, args.reps):
        print(f"{backend:>6} {method:>7} {ns / 1e6:8.2f} ms  {args.cast_codes / ns:6.2f} codes/ns")


if __name__ == "__main__":
    main()
