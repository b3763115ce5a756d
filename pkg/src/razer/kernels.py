"""Fused-dequantization GEMV, its reference, and the buffered KV-cache simulator."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ._accel import USE_NUMBA, njit, prange
from .codec import container_layout, pack_fp4
from .fastcast import _fast_cast_one, _half_to_f32, razer4_to_half_fast_array, sv_half_table
from .quantizer import QuantConfig, QuantizedTensor, dequantize_groups, dequantize_tensor, from_groups, quantize_tensor

BENCH_COLUMNS = ("shape", "path", "median_ns", "payload_bytes", "baseline_bytes")


# ---------------------------------------------------------------------------
# quantized matrices
# ---------------------------------------------------------------------------

@dataclass
class QuantizedMatrix:
    """FP4-RaZeR weights grouped along K; row r's codes start at r * groups_per_row * g."""

    rows: int
    cols: int
    group_size: int
    words: np.ndarray        # packed codes, uint32
    scales: np.ndarray       # (rows * groups_per_row,) float32
    sv_index: np.ndarray     # (rows * groups_per_row,) uint8
    sv_set: tuple

    @property
    def groups_per_row(self) -> int:
        return math.ceil(self.cols / self.group_size)

    @property
    def n_groups(self) -> int:
        return self.rows * self.groups_per_row

    @property
    def sv_halves(self) -> np.ndarray:
        return sv_half_table(self.sv_set)

    @classmethod
    def from_quantized(cls, qt: QuantizedTensor) -> "QuantizedMatrix":
        if qt.config.datatype != "fp4rzr" or len(qt.dims) != 2:
            raise ValueError("fused GEMV needs a 2-D fp4rzr tensor")
        n, k = qt.dims
        return cls(n, k, qt.config.group_size, pack_fp4(qt.codes).words, qt.scales.astype(np.float32),
                   qt.sv_index.astype(np.uint8), tuple(qt.sv_set))

    @classmethod
    def from_dense(cls, W, sv_set, group_size: int = 128) -> "QuantizedMatrix":
        qt = quantize_tensor(np.asarray(W), QuantConfig("fp4rzr", group_size), sv_set)
        return cls.from_quantized(qt)

    def codes(self) -> np.ndarray:
        shifts = np.arange(0, 32, 4, dtype=np.uint32)
        flat = ((self.words[:, None] >> shifts) & 0xF).astype(np.uint8).reshape(-1)
        return flat[:self.n_groups * self.group_size].reshape(self.n_groups, self.group_size)

    def dequantize(self) -> np.ndarray:
        """Dense float32 weights, decoded through the table-free cast."""
        halves = razer4_to_half_fast_array(self.codes(), self.sv_index[:, None], self.sv_halves)
        vals = halves.view(np.float16).astype(np.float32) * self.scales[:, None]
        return from_groups(vals, (self.rows, self.cols))


# ---------------------------------------------------------------------------
# GEMV
# ---------------------------------------------------------------------------

@njit(parallel=True, cache=True)
def _gemv_fused_numba(words, scales, sv_index, sv_halves, x, n_rows, n_cols, g, out):
    per_row = (n_cols + g - 1) // g
    for r in prange(n_rows):
        acc = np.float32(0.0)
        base = r * per_row * g
        for j in range(per_row):
            gi = r * per_row + j
            s = scales[gi]
            svh = np.int64(sv_halves[sv_index[gi]])
            k1 = min((j + 1) * g, n_cols)
            for k in range(j * g, k1):
                i = base + k
                code = (np.int64(words[i >> 3]) >> ((i & 7) * 4)) & 0xF
                w = _half_to_f32(_fast_cast_one(code, svh)) * s
                acc += w * x[k]
        out[r] = acc
    return out


def _gemv_fused_numpy(Wq: QuantizedMatrix, x):
    g = Wq.group_size
    per_row = Wq.groups_per_row
    codes = Wq.codes().reshape(Wq.rows, per_row * g)
    sv_idx = np.repeat(Wq.sv_index.reshape(Wq.rows, per_row), g, axis=1)
    scales = np.repeat(Wq.scales.reshape(Wq.rows, per_row), g, axis=1)
    halves_tab = Wq.sv_halves
    acc = np.zeros(Wq.rows, dtype=np.float32)
    for k in range(Wq.cols):
        col = razer4_to_half_fast_array(codes[:, k], sv_idx[:, k], halves_tab)
        w = col.view(np.float16).astype(np.float32) * scales[:, k]
        acc = acc + w * x[k]
    return acc


def gemv_fused(Wq: QuantizedMatrix, x, use_numba: bool | None = None) -> np.ndarray:
    """y = W x with decoding inside the loop; float32, strictly left to right per row."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape != (Wq.cols,):
        raise ValueError(f"x has shape {x.shape}, expected ({Wq.cols},)")
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        out = np.empty(Wq.rows, dtype=np.float32)
        return _gemv_fused_numba(Wq.words, Wq.scales, Wq.sv_index, Wq.sv_halves, x,
                                 Wq.rows, Wq.cols, Wq.group_size, out)
    return _gemv_fused_numpy(Wq, x)


def gemv_reference(W, x) -> np.ndarray:
    """Plain float32 dot products with the same sequential accumulation order."""
    W = np.asarray(W, dtype=np.float32)
    x = np.asarray(x, dtype=np.float32)
    if W.ndim != 2 or x.shape != (W.shape[1],):
        raise ValueError(f"cannot multiply {W.shape} by {x.shape}")
    acc = np.zeros(W.shape[0], dtype=np.float32)
    for k in range(W.shape[1]):
        acc = acc + W[:, k] * x[k]
    return acc


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------

KV_DTYPES = ("fp4rzr", "fp3rzr", "int4", "int3", "fp16")


@dataclass
class KVBlock:
    keys: np.ndarray          # dequantized (n_b, D)
    values: np.ndarray
    qkeys: QuantizedTensor | None = None
    qvalues: QuantizedTensor | None = None


@dataclass
class KVCacheState:
    dim: int
    n_b: int = 64
    group_size: int = 64
    dtype: str = "fp4rzr"
    sv_set: tuple | None = None
    buffer_k: list = field(default_factory=list)
    buffer_v: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    events: int = 0

    def __post_init__(self):
        if self.dtype not in KV_DTYPES:
            raise ValueError(f"unknown KV dtype {self.dtype!r}")
        if self.n_b < 1 or self.dim < 1:
            raise ValueError("buffer capacity and dim must be positive")
        if self.dtype.endswith("rzr") and self.sv_set is None:
            raise ValueError("RaZeR KV cache needs a special-value set")

    @property
    def total_tokens(self) -> int:
        return self.n_b * len(self.blocks) + len(self.buffer_k)

    def keys(self) -> np.ndarray:
        parts = [b.keys for b in self.blocks]
        if self.buffer_k:
            parts.append(np.asarray(self.buffer_k))
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, self.dim))

    def values(self) -> np.ndarray:
        parts = [b.values for b in self.blocks]
        if self.buffer_v:
            parts.append(np.asarray(self.buffer_v))
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, self.dim))


def _flush(state: KVCacheState) -> None:
    K = np.asarray(state.buffer_k, dtype=np.float64)
    V = np.asarray(state.buffer_v, dtype=np.float64)
    if state.dtype == "fp16":
        block = KVBlock(K.astype(np.float16).astype(np.float64), V.astype(np.float16).astype(np.float64))
    else:
        cfg = QuantConfig(state.dtype, state.group_size)
        qk = quantize_tensor(K, cfg, state.sv_set)
        qv = quantize_tensor(V, cfg, state.sv_set)
        block = KVBlock(from_groups(dequantize_groups(qk), K.shape).astype(np.float64),
                        from_groups(dequantize_groups(qv), V.shape).astype(np.float64), qk, qv)
    state.blocks.append(block)
    state.buffer_k.clear()
    state.buffer_v.clear()
    state.events += 1


def kv_append(state: KVCacheState, k_vec, v_vec) -> KVCacheState:
    """Buffer one token; a full buffer is quantized as one block and emptied."""
    k_vec = np.asarray(k_vec, dtype=np.float64)
    v_vec = np.asarray(v_vec, dtype=np.float64)
    if k_vec.shape != (state.dim,) or v_vec.shape != (state.dim,):
        raise ValueError(f"token vectors must have shape ({state.dim},)")
    state.buffer_k.append(k_vec)
    state.buffer_v.append(v_vec)
    if len(state.buffer_k) == state.n_b:
        _flush(state)
    return state


def attention(K, V, q) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    scores = K @ q / math.sqrt(K.shape[1])
    scores -= scores.max()
    p = np.exp(scores)
    p /= p.sum()
    return p @ V


def kv_attention(state: KVCacheState, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (state.dim,):
        raise ValueError(f"query must have shape ({state.dim},)")
    if state.total_tokens == 0:
        raise ValueError("attention over an empty cache")
    return attention(state.keys(), state.values(), q)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

def payload_accounting(n: int, k: int, group_size: int = 128) -> tuple[int, int]:
    """(packed FP4 code bytes, half-precision bytes) for an n x k matrix."""
    return container_layout((n, k), "fp4rzr", group_size).payload, 2 * n * k


def _median_ns(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return int(np.median(times))


def bench_gemv(shapes, reps: int = 5, seed: int = 0, group_size: int = 128, sv_set=(5.0, 8.0, -5.0, -8.0),
               self_check: bool = True) -> list[dict]:
    """Median wall time of fused vs reference GEMV per shape, with byte accounting."""
    if reps < 3:
        raise ValueError("reps must be at least 3")
    rng = np.random.default_rng(seed)
    rows = []
    for n, k in shapes:
        W = rng.standard_normal((n, k)).astype(np.float32)
        x = rng.standard_normal(k).astype(np.float32)
        qt = quantize_tensor(W, QuantConfig("fp4rzr", group_size), sv_set)
        Wq = QuantizedMatrix.from_quantized(qt)
        W_deq = dequantize_tensor(qt)
        y_fused = gemv_fused(Wq, x)           # also triggers JIT compilation
        if self_check:
            y_ref = gemv_reference(W_deq, x)
            if not np.array_equal(y_fused.view(np.uint32), y_ref.view(np.uint32)):
                raise AssertionError(f"fused and reference GEMV disagree for shape {n}x{k}")
        payload, baseline = payload_accounting(n, k, group_size)
        for path, fn in (("fused", lambda: gemv_fused(Wq, x)), ("reference", lambda: gemv_reference(W_deq, x))):
            rows.append({"shape": f"{n}x{k}", "path": path, "median_ns": _median_ns(fn, reps),
                         "payload_bytes": payload, "baseline_bytes": baseline})
    return rows


def write_bench_csv(rows, sink) -> None:
    w = csv.DictWriter(sink, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
