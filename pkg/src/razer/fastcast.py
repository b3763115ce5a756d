"""RaZeR code -> half conversion.

The fast path rebuilds the half pattern arithmetically: the sign bit is the
code's LSB shifted to bit 15, and the {E,M} field plus a constant bias
offset lands directly in the half's exponent/mantissa bits. Because 0.5 is
encoded as 000 the subnormal case disappears; the two patterns produced by
the zero slots (0x3A00 for +0, 0xBA00 for -0) are swapped for 0 and the
special value with selects, compared in the half domain.
"""
from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit
from .codec import Fp3Planes, PackedFp4Block, fp3_code_at, unpack_fp4
from .numerics import fp3_grid, fp4_grid, half_encode, half_encode_array

DEFAULT_SV_HALVES = (0x4500, 0x4800, 0xC500, 0xC800)
ZERO_SLOT = 0x3A00
SV_SLOT = 0xBA00


class _SvMarker:
    def __repr__(self):
        return "SV_MARKER"


SV_MARKER = _SvMarker()


def sv_half_table(sv_values) -> np.ndarray:
    """Half bit patterns of the special values (scale is applied downstream)."""
    vals = np.asarray(getattr(sv_values, "values", sv_values), dtype=np.float64)
    halves = half_encode_array(vals)
    if not np.array_equal(halves.view(np.float16).astype(np.float64), vals):
        raise ValueError("special values are not exactly representable in half precision")
    return halves.astype(np.uint16)


def razer4_to_half_fast(code: int, sv_idx: int, table=DEFAULT_SV_HALVES) -> int:
    sign = (code << 15) & 0xFFFF
    em = ((0x38 + (code & 0xE)) << 8) & 0xFFFF
    v_fp = sign | em
    v_sv = int(table[sv_idx])
    v = v_sv if v_fp == SV_SLOT else v_fp
    return 0 if v_fp == ZERO_SLOT else v


def razer4_to_half_fast_array(codes, sv_idx, table=DEFAULT_SV_HALVES) -> np.ndarray:
    """Vectorized fast cast; ``sv_idx`` broadcasts against ``codes``."""
    codes = np.asarray(codes, dtype=np.uint16)
    tab = np.asarray(table, dtype=np.uint16)
    sign = codes << np.uint16(15)
    em = (np.uint16(0x38) + (codes & np.uint16(0xE))) << np.uint16(8)
    v_fp = sign | em
    v = np.where(v_fp == SV_SLOT, tab[np.asarray(sv_idx, dtype=np.int64)], v_fp)
    return np.where(v_fp == ZERO_SLOT, np.uint16(0), v).astype(np.uint16)


def lookup_table(table=DEFAULT_SV_HALVES) -> np.ndarray:
    """4 x 16 table of half patterns indexed by [sv_idx, code]."""
    spec = fp4_grid()
    base = np.array([half_encode(spec.value_of(c)) if c != spec.reserved_code else 0
                     for c in range(16)], dtype=np.uint16)
    lut = np.tile(base, (4, 1))
    lut[:, spec.reserved_code] = np.asarray(table, dtype=np.uint16)
    return lut


def razer4_to_half_lookup(code: int, sv_idx: int, table=DEFAULT_SV_HALVES) -> int:
    return int(lookup_table(table)[sv_idx, code])


def encode_half_to_razer4(value) -> int:
    """Inverse of the cast: a grid value (or ``SV_MARKER``) to its 4-bit code."""
    spec = fp4_grid()
    if value is SV_MARKER:
        return spec.reserved_code
    return spec.code_of(float(value))


# ---------------------------------------------------------------------------
# batch conversion
# ---------------------------------------------------------------------------

@njit(cache=True)
def _half_to_f32(h):
    sign = -1.0 if (h >> 15) & 1 else 1.0
    e = (h >> 10) & 0x1F
    m = h & 0x3FF
    if e == 0:
        return np.float32(sign * m * 2.0 ** -24)
    return np.float32(sign * (m + 1024) * 2.0 ** (e - 25))


@njit(cache=True)
def _fast_cast_one(code, sv_half):
    sign = (code << 15) & 0xFFFF
    em = ((0x38 + (code & 0xE)) << 8) & 0xFFFF
    v_fp = sign | em
    v = sv_half if v_fp == 0xBA00 else v_fp
    return 0 if v_fp == 0x3A00 else v


@njit(cache=True)
def _batch_cast_numba(words, count, sv_half, scale, out):
    for i in range(count):
        code = (words[i >> 3] >> ((i & 7) * 4)) & 0xF
        out[i] = _half_to_f32(_fast_cast_one(np.int64(code), sv_half)) * scale
    return out


def _batch_cast_numpy(words, count, sv_half, scale):
    codes = unpack_fp4(PackedFp4Block(words, count))
    halves = razer4_to_half_fast_array(codes, 0, (sv_half,))
    return halves.view(np.float16).astype(np.float32) * scale


def batch_cast(block: PackedFp4Block, sv_idx: int, table, scale, use_numba: bool | None = None) -> np.ndarray:
    """Decode a packed block with one (sv, scale) pair; float32 results in code order."""
    if block.count > 8 * np.asarray(block.words).size:
        raise ValueError("count exceeds packed capacity")
    sv_half = int(np.asarray(table, dtype=np.uint16)[sv_idx])
    scale = np.float32(scale)
    words = np.ascontiguousarray(block.words, dtype=np.uint32)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba:
        out = np.empty(block.count, dtype=np.float32)
        return _batch_cast_numba(words.astype(np.int64), block.count, sv_half, scale, out)
    return _batch_cast_numpy(words, block.count, sv_half, scale)


# ---------------------------------------------------------------------------
# FP3
# ---------------------------------------------------------------------------

def fp3_half_table(sv_half: int) -> np.ndarray:
    """8-entry code -> half table for FP3; the reserved slot holds ``sv_half``."""
    spec = fp3_grid()
    tab = np.zeros(8, dtype=np.uint16)
    for c, v in zip(spec.codes, spec.grid):
        tab[c] = half_encode(v)
    tab[spec.reserved_code] = sv_half
    return tab


def razer3_to_half(planes: Fp3Planes, index: int, sv_idx: int, sv_table) -> int:
    code = fp3_code_at(planes, index)
    return int(fp3_half_table(int(np.asarray(sv_table, dtype=np.uint16)[sv_idx]))[code])


# ---------------------------------------------------------------------------
# unpacked code streams (used to compare the two decoding strategies)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _codes_fast_numba(codes, sv_half, out):
    for i in range(codes.size):
        out[i] = _fast_cast_one(np.int64(codes[i]), sv_half)
    return out


@njit(cache=True)
def _codes_lookup_numba(codes, row, out):
    for i in range(codes.size):
        out[i] = row[codes[i]]
    return out


def cast_codes(codes, sv_idx: int, table=DEFAULT_SV_HALVES, method: str = "fast",
               use_numba: bool | None = None) -> np.ndarray:
    """Half patterns for a flat uint8 code stream sharing one sv index."""
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    if use_numba is None:
        use_numba = USE_NUMBA
    if method == "fast":
        if use_numba:
            sv_half = int(np.asarray(table, dtype=np.uint16)[sv_idx])
            return _codes_fast_numba(codes, sv_half, np.empty(codes.size, dtype=np.uint16))
        return razer4_to_half_fast_array(codes, sv_idx, table)
    if method == "lookup":
        row = lookup_table(table)[sv_idx]
        if use_numba:
            return _codes_lookup_numba(codes, row, np.empty(codes.size, dtype=np.uint16))
        return row[codes]
    raise ValueError(f"unknown method {method!r}")
