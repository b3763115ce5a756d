"""Packed storage: nibble words, FP3 bit planes, the .rzr container and .nt tensors.

Container layout (all integers little-endian)::

    magic      4s   b"RZR1"
    version    u16
    dtype      u8   0=int4 1=int3 2=fp4rzr 3=fp3rzr
    group_size u32
    ndim       u8
    dims       u64 * ndim
    tail_len   u32
    sv_table   f32 * 4          (zeros for integer dtypes)
    scales     u16 * groups     (half bit patterns)
    meta       2-bit sv index per group, 4 per byte      (RaZeR dtypes)
               4-bit zero point per group, 2 per byte    (integer dtypes)
    payload    4-bit dtypes: dense nibbles, 8 codes per u32 word
               3-bit dtypes: 3 x 16-byte bit planes per 128-element group
"""
from __future__ import annotations

import io
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import half_decode_array, half_encode_array
from .quantizer import QuantConfig, QuantizedTensor

MAGIC = b"RZR1"
VERSION = 1
DTYPE_CODES = {"int4": 0, "int3": 1, "fp4rzr": 2, "fp3rzr": 3}
DTYPE_NAMES = {v: k for k, v in DTYPE_CODES.items()}
PLANE_GROUP = 128

NT_MAGIC = b"NTSR"
NT_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}


class ContainerError(ValueError):
    """Malformed container or tensor file; ``kind`` names the failure."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


# ---------------------------------------------------------------------------
# FP4 nibble packing
# ---------------------------------------------------------------------------

@dataclass
class PackedFp4Block:
    words: np.ndarray   # uint32
    count: int

    def __post_init__(self):
        self.words = np.asarray(self.words, dtype=np.uint32)
        if not 0 <= self.count <= 8 * self.words.size:
            raise ValueError(f"{self.count} codes do not fit in {self.words.size} words")


def pack_fp4(codes) -> PackedFp4Block:
    """Code i goes to word i // 8, bits 4*(i % 8) .. 4*(i % 8) + 3."""
    codes = np.asarray(codes).reshape(-1)
    if codes.size and (codes.min() < 0 or codes.max() > 0xF):
        raise ValueError("codes must be 4-bit")
    n = codes.size
    nib = np.zeros(math.ceil(n / 8) * 8, dtype=np.uint32)
    nib[:n] = codes
    shifts = np.arange(0, 32, 4, dtype=np.uint32)
    words = np.bitwise_or.reduce(nib.reshape(-1, 8) << shifts, axis=1).astype(np.uint32)
    return PackedFp4Block(words, n)


def unpack_fp4(block: PackedFp4Block) -> np.ndarray:
    words = np.asarray(block.words, dtype=np.uint32)
    if block.count > 8 * words.size:
        raise ValueError("count exceeds packed capacity")
    shifts = np.arange(0, 32, 4, dtype=np.uint32)
    nib = ((words[:, None] >> shifts) & 0xF).astype(np.uint8).reshape(-1)
    return nib[:block.count]


# ---------------------------------------------------------------------------
# FP3 bit planes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Fp3Planes:
    """Bit i of each 128-bit plane belongs to element i of the group."""

    sign_plane: int
    exp_hi_plane: int
    exp_lo_plane: int


def _planes_from_codes(codes: np.ndarray) -> np.ndarray:
    """(groups, 128) 3-bit codes -> (groups, 3, 16) bytes ordered sign, exp_hi, exp_lo."""
    codes = np.asarray(codes, dtype=np.uint8)
    bits = np.stack([codes & 1, (codes >> 2) & 1, (codes >> 1) & 1], axis=1)
    return np.packbits(bits, axis=2, bitorder="little")


def _codes_from_planes(planes: np.ndarray) -> np.ndarray:
    bits = np.unpackbits(np.asarray(planes, dtype=np.uint8), axis=2, bitorder="little")
    return (bits[:, 0] | (bits[:, 1] << 2) | (bits[:, 2] << 1)).astype(np.uint8)


def pack_fp3(codes) -> Fp3Planes:
    codes = np.asarray(codes).reshape(-1)
    if codes.size != PLANE_GROUP:
        raise ValueError(f"FP3 planes hold exactly {PLANE_GROUP} codes, got {codes.size}")
    if codes.min() < 0 or codes.max() > 7:
        raise ValueError("codes must be 3-bit")
    raw = _planes_from_codes(codes[None, :])[0]
    sign, hi, lo = (int.from_bytes(raw[j].tobytes(), "little") for j in range(3))
    return Fp3Planes(sign, hi, lo)


def unpack_fp3(planes: Fp3Planes) -> np.ndarray:
    raw = np.stack([np.frombuffer(p.to_bytes(16, "little"), dtype=np.uint8)
                    for p in (planes.sign_plane, planes.exp_hi_plane, planes.exp_lo_plane)])
    return _codes_from_planes(raw[None])[0]


def fp3_code_at(planes: Fp3Planes, index: int) -> int:
    if not 0 <= index < PLANE_GROUP:
        raise IndexError(f"index {index} outside a {PLANE_GROUP}-element group")
    return (((planes.exp_hi_plane >> index) & 1) << 2) | (((planes.exp_lo_plane >> index) & 1) << 1) \
        | ((planes.sign_plane >> index) & 1)


# ---------------------------------------------------------------------------
# small bit-field helpers
# ---------------------------------------------------------------------------

def _pack_fields(values, width: int) -> bytes:
    per = 8 // width
    v = np.zeros(math.ceil(len(values) / per) * per, dtype=np.uint8)
    v[:len(values)] = values
    shifts = np.arange(0, 8, width, dtype=np.uint8)
    return np.bitwise_or.reduce(v.reshape(-1, per) << shifts, axis=1).astype(np.uint8).tobytes()


def _unpack_fields(raw: bytes, n: int, width: int):
    b = np.frombuffer(raw, dtype=np.uint8)
    shifts = np.arange(0, 8, width, dtype=np.uint8)
    vals = ((b[:, None] >> shifts) & ((1 << width) - 1)).reshape(-1)
    return vals[:n].astype(np.uint8), vals[n:]


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContainerLayout:
    header: int
    sv_table: int
    scales: int
    meta: int
    payload: int
    n_groups: int

    @property
    def total(self) -> int:
        return self.header + self.sv_table + self.scales + self.meta + self.payload


def container_layout(dims, dtype: str, group_size: int) -> ContainerLayout:
    """Section sizes in bytes, derived from header fields alone."""
    dims = tuple(int(d) for d in dims)
    rows = math.prod(dims[:-1]) if len(dims) > 1 else 1
    n_groups = rows * math.ceil(dims[-1] / group_size)
    header = 4 + 2 + 1 + 4 + 1 + 8 * len(dims) + 4
    if dtype in ("int4", "fp4rzr"):
        payload = math.ceil(n_groups * group_size / 8) * 4
    else:
        payload = n_groups * 3 * (PLANE_GROUP // 8)
    meta = math.ceil(n_groups / 2) if dtype.startswith("int") else math.ceil(n_groups / 4)
    return ContainerLayout(header, 16, 2 * n_groups, meta, payload, n_groups)


def container_bytes(qt: QuantizedTensor) -> bytes:
    dtype = qt.config.datatype
    if dtype not in DTYPE_CODES:
        raise ContainerError("unknown_dtype", f"cannot store datatype {dtype!r}")
    g = qt.config.group_size
    if dtype in ("int3", "fp3rzr") and g != PLANE_GROUP:
        raise ValueError(f"3-bit containers require group size {PLANE_GROUP}, got {g}")
    halves = half_encode_array(qt.scales)
    if not np.array_equal(halves.view(np.float16).astype(np.float32), np.asarray(qt.scales, np.float32)):
        raise ValueError("scales are not representable in half precision")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HBIB", VERSION, DTYPE_CODES[dtype], g, len(qt.dims)))
    out.write(struct.pack(f"<{len(qt.dims)}Q", *qt.dims))
    out.write(struct.pack("<I", qt.tail_len))
    sv = qt.sv_set if qt.sv_set is not None else (0.0,) * 4
    out.write(np.asarray(sv, dtype="<f4").tobytes())
    out.write(halves.astype("<u2").tobytes())
    if dtype.startswith("int"):
        out.write(_pack_fields(qt.zero_points, 4))
    else:
        out.write(_pack_fields(qt.sv_index, 2))
    if dtype in ("int4", "fp4rzr"):
        out.write(pack_fp4(qt.codes).words.astype("<u4").tobytes())
    else:
        out.write(_planes_from_codes(qt.codes).tobytes())
    return out.getvalue()


def parse_container(data: bytes) -> QuantizedTensor:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError("truncated", f"need {n} bytes at offset {pos}, file has {len(view)}")
        chunk = bytes(view[pos:pos + n])
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise ContainerError("bad_magic", "not an RZR1 container")
    version, dcode, g, ndim = struct.unpack("<HBIB", take(8))
    if version != VERSION:
        raise ContainerError("version", f"unsupported container version {version}")
    if dcode not in DTYPE_NAMES:
        raise ContainerError("unknown_dtype", f"dtype code {dcode}")
    dtype = DTYPE_NAMES[dcode]
    if ndim == 0 or g < 2:
        raise ContainerError("corrupt", "invalid ndim or group size")
    dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
    if 0 in dims:
        raise ContainerError("corrupt", "zero-sized dimension")
    (tail_len,) = struct.unpack("<I", take(4))
    layout = container_layout(dims, dtype, g)
    expected_tail = dims[-1] - (math.ceil(dims[-1] / g) - 1) * g
    if tail_len != expected_tail:
        raise ContainerError("corrupt", f"tail_len {tail_len} inconsistent with dims (expected {expected_tail})")
    if dtype in ("int3", "fp3rzr") and g != PLANE_GROUP:
        raise ContainerError("corrupt", "3-bit containers require group size 128")
    if len(data) < layout.total:
        raise ContainerError("truncated", f"expected {layout.total} bytes, file has {len(data)}")
    if len(data) > layout.total:
        raise ContainerError("trailing", f"{len(data) - layout.total} unexpected trailing bytes")
    n = layout.n_groups
    sv = np.frombuffer(take(16), dtype="<f4").astype(np.float32)
    halves = np.frombuffer(take(layout.scales), dtype="<u2")
    try:
        scales = half_decode_array(halves)
    except ValueError as e:
        raise ContainerError("corrupt", str(e)) from None
    meta_raw = take(layout.meta)
    payload = take(layout.payload)
    if dtype in ("int4", "fp4rzr"):
        words = np.frombuffer(payload, dtype="<u4").astype(np.uint32)
        flat = unpack_fp4(PackedFp4Block(words, words.size * 8))
        if np.any(flat[n * g:]):
            raise ContainerError("corrupt", "nonzero padding nibbles")
        codes = flat[:n * g].reshape(n, g)
    else:
        codes = _codes_from_planes(np.frombuffer(payload, dtype=np.uint8).reshape(n, 3, PLANE_GROUP // 8))
    config = QuantConfig(dtype, g)
    if dtype.startswith("int"):
        zps, rest = _unpack_fields(meta_raw, n, 4)
        if np.any(rest) or np.any(zps > (1 << config.spec.bits) - 1):
            raise ContainerError("corrupt", "invalid zero-point field")
        if np.any(sv != 0):
            raise ContainerError("corrupt", "integer container carries a special-value table")
        return QuantizedTensor(dims, config, codes, scales, tail_len, zero_points=zps.astype(np.int64))
    idx, rest = _unpack_fields(meta_raw, n, 2)
    if np.any(rest):
        raise ContainerError("corrupt", "nonzero padding in special-value index field")
    return QuantizedTensor(dims, config, codes, scales, tail_len,
                           sv_set=tuple(float(v) for v in sv), sv_index=idx)


def write_container(qt: QuantizedTensor, sink) -> int:
    data = container_bytes(qt)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as f:
            f.write(data)
    else:
        sink.write(data)
    return len(data)


def read_container(source) -> QuantizedTensor:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return parse_container(bytes(source))
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as f:
            return parse_container(f.read())
    return parse_container(source.read())


# ---------------------------------------------------------------------------
# .nt tensors
# ---------------------------------------------------------------------------

def write_nt(path, array, dtype: str = "f32") -> None:
    code = {"f32": 0, "f16": 1}[dtype]
    arr = np.ascontiguousarray(array, dtype=NT_DTYPES[code])
    with open(path, "wb") as f:
        f.write(NT_MAGIC)
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes())


def read_nt(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != NT_MAGIC:
        raise ContainerError("bad_magic", f"{path} is not an NTSR tensor")
    if len(data) < 6:
        raise ContainerError("truncated", "tensor header is incomplete")
    code, ndim = struct.unpack("<BB", data[4:6])
    if code not in NT_DTYPES:
        raise ContainerError("unknown_dtype", f"tensor dtype code {code}")
    end = 6 + 8 * ndim
    if len(data) < end:
        raise ContainerError("truncated", "tensor dims are incomplete")
    dims = struct.unpack(f"<{ndim}Q", data[6:end])
    dt = NT_DTYPES[code]
    need = math.prod(dims) * dt.itemsize
    if len(data) - end < need:
        raise ContainerError("truncated", f"payload needs {need} bytes, has {len(data) - end}")
    if len(data) - end > need:
        raise ContainerError("trailing", "unexpected bytes after tensor payload")
    arr = np.frombuffer(data[end:], dtype=dt).reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise ContainerError("corrupt", "tensor contains NaN or Inf")
    return arr.astype(np.float32)


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def effective_bits(code_bits: float, group_size: int, scale_bits: float, meta_bits: float) -> float:
    """Code bits plus per-group metadata amortized over the group."""
    return code_bits + (scale_bits + meta_bits) / group_size
