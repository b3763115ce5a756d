"""Half-precision bit utilities and the canonical quantization grids.

RaZeR codes use an {E, M, S} bit order: the sign lives in the least
significant bit so that a single shift moves it to bit 15 of a half. The
remapped negative-zero slot is the "reserved" code; it stands for the
per-group special value.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from ._accel import USE_NUMBA, njit

HALF_MAX = 65504.0
HALF_MIN_SUBNORMAL = 2.0 ** -24


# ---------------------------------------------------------------------------
# half precision
# ---------------------------------------------------------------------------

def half_encode(x: float) -> int:
    """Nearest binary16 pattern, ties to even; overflow saturates to +-65504."""
    if not np.isfinite(x):
        raise ValueError(f"cannot encode non-finite value {x!r}")
    with np.errstate(over="ignore"):
        h = np.float16(x)
    if np.isinf(h):
        h = np.float16(np.copysign(HALF_MAX, x))
    return int(h.view(np.uint16))


def half_encode_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot encode non-finite values")
    with np.errstate(over="ignore"):
        h = x.astype(np.float16)
    h = np.where(np.isinf(h), np.copysign(np.float16(HALF_MAX), x).astype(np.float16), h)
    return h.view(np.uint16)


def half_decode(h: int) -> float:
    """Exact value of a half bit pattern. NaN/Inf patterns are rejected."""
    h = int(h)
    if not 0 <= h <= 0xFFFF:
        raise ValueError(f"{h:#x} is not a 16-bit pattern")
    if (h >> 10) & 0x1F == 0x1F:
        raise ValueError(f"half pattern {h:#06x} is NaN or Inf")
    return float(np.uint16(h).view(np.float16))


def half_decode_array(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.uint16)
    if np.any((h >> 10) & 0x1F == 0x1F):
        raise ValueError("half patterns contain NaN or Inf")
    return h.view(np.float16).astype(np.float32)


def round_to_half(x) -> np.ndarray:
    """Round positive scales onto representable half values (never to zero)."""
    x = np.asarray(x, dtype=np.float64)
    x = np.clip(x, HALF_MIN_SUBNORMAL, HALF_MAX)
    return x.astype(np.float16).astype(np.float32)


# ---------------------------------------------------------------------------
# datatypes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatatypeSpec:
    """A quantization grid plus its code assignment.

    ``grid`` is strictly increasing and ``codes[i]`` is the binary code of
    ``grid[i]``. For RaZeR variants ``reserved_code`` is the remapped
    negative-zero slot that decodes to the group's special value.
    """

    name: str
    grid: tuple
    codes: tuple
    bits: int
    reserved_code: int | None = None
    kind: str = "fp"
    _code_to_value: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if len(self.grid) != len(self.codes):
            raise ValueError("grid and codes differ in length")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.count_nonzero(g == 0) != 1:
            raise ValueError("grid must contain zero exactly once")
        used = set(self.codes)
        if len(used) != len(self.codes):
            raise ValueError("codes are not unique")
        if self.reserved_code is not None:
            used.add(self.reserved_code)
        if used != set(range(1 << self.bits)):
            raise ValueError("codes do not cover the code space")
        object.__setattr__(self, "_code_to_value", dict(zip(self.codes, self.grid)))

    @property
    def grid_array(self) -> np.ndarray:
        return np.asarray(self.grid, dtype=np.float64)

    @property
    def codes_array(self) -> np.ndarray:
        return np.asarray(self.codes, dtype=np.uint8)

    @property
    def zero_code(self) -> int:
        return self.codes[self.grid.index(0.0)]

    @property
    def max_positive(self) -> float:
        return float(self.grid[-1])

    @property
    def max_negative(self) -> float:
        """Magnitude of the most negative grid value."""
        return float(-self.grid[0])

    def value_of(self, code: int) -> float:
        try:
            return self._code_to_value[int(code)]
        except KeyError:
            raise ValueError(f"code {code:#x} has no grid value in {self.name}") from None

    def code_of(self, value: float) -> int:
        try:
            return self.codes[self.grid.index(float(value))]
        except ValueError:
            raise ValueError(f"{value} is not on the {self.name} grid") from None

    def decode_table(self, sv: float = 0.0) -> np.ndarray:
        """Dense code -> value table; the reserved slot holds ``sv``."""
        table = np.zeros(1 << self.bits, dtype=np.float64)
        for c, v in zip(self.codes, self.grid):
            table[c] = v
        if self.reserved_code is not None:
            table[self.reserved_code] = sv
        return table


def _fp_codes(magnitudes, bits):
    # positives carry S=0, negatives S=1; the magnitude index is the {E,M} field
    grid, codes = [], []
    for em, mag in enumerate(magnitudes):
        if mag == 0.0:
            continue
        grid.append(mag)
        codes.append(em << 1)
        grid.append(-mag)
        codes.append((em << 1) | 1)
    order = np.argsort(grid)
    return [grid[i] for i in order], [codes[i] for i in order]


@lru_cache(maxsize=None)
def fp4_grid() -> DatatypeSpec:
    # {E,M} field -> magnitude. 0.5 sits at 000 and zero at 001 so that the
    # cast needs no subnormal special case.
    mags = [0.5, 0.0, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]
    grid, codes = _fp_codes(mags, 4)
    zero_at = int(np.searchsorted(grid, 0.0))
    grid.insert(zero_at, 0.0)
    codes.insert(zero_at, 0b0010)
    return DatatypeSpec("fp4", tuple(float(v) for v in grid), tuple(codes), 4, reserved_code=0b0011)


@lru_cache(maxsize=None)
def fp3_grid() -> DatatypeSpec:
    # E2M0 with exponent bias 1; the E=00 row is zero
    mags = [0.0, 1.0, 2.0, 4.0]
    grid, codes = _fp_codes(mags, 3)
    zero_at = int(np.searchsorted(grid, 0.0))
    grid.insert(zero_at, 0.0)
    codes.insert(zero_at, 0b000)
    return DatatypeSpec("fp3", tuple(float(v) for v in grid), tuple(codes), 3, reserved_code=0b001)


@lru_cache(maxsize=None)
def int_grid(bits: int) -> DatatypeSpec:
    if bits not in (3, 4):
        raise ValueError("integer grids are 3 or 4 bits")
    n = 1 << bits
    return DatatypeSpec(f"int{bits}", tuple(float(v) for v in range(n)), tuple(range(n)), bits, kind="int")


DTYPES = ("int4", "int3", "fp4rzr", "fp3rzr")


def get_datatype(name: str) -> DatatypeSpec:
    key = name.lower()
    if key in ("fp4", "fp4rzr"):
        return fp4_grid()
    if key in ("fp3", "fp3rzr"):
        return fp3_grid()
    if key == "int4":
        return int_grid(4)
    if key == "int3":
        return int_grid(3)
    raise ValueError(f"unknown datatype {name!r}")


# ---------------------------------------------------------------------------
# nearest-grid mapping
# ---------------------------------------------------------------------------

def nearest_grid_value(x: float, grid) -> tuple[int, float]:
    """Index and value of the grid point closest to ``x``; ties go toward zero."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty grid")
    i = int(nearest_indices(np.array([x], dtype=np.float64), grid)[0])
    return i, float(grid[i])


def _nearest_indices_numpy(y, grid):
    m = grid.shape[0]
    if m == 1:
        return np.zeros(y.shape, dtype=np.int64)
    idx = np.clip(np.searchsorted(grid, y), 1, m - 1)
    lo = grid[idx - 1]
    hi = grid[idx]
    dlo = y - lo
    dhi = hi - y
    take_hi = (dhi < dlo) | ((dhi == dlo) & (np.abs(hi) < np.abs(lo)))
    return np.where(take_hi, idx, idx - 1)


@njit(cache=True)
def _nearest_indices_numba(y, grid, out):
    m = grid.shape[0]
    for t in range(y.shape[0]):
        v = y[t]
        lo_i = 0
        hi_i = m
        while lo_i < hi_i:  # first index with grid[i] >= v
            mid = (lo_i + hi_i) >> 1
            if grid[mid] < v:
                lo_i = mid + 1
            else:
                hi_i = mid
        i = lo_i
        if i < 1:
            i = 1
        if i > m - 1:
            i = m - 1
        lo = grid[i - 1]
        hi = grid[i]
        dlo = v - lo
        dhi = hi - v
        if dhi < dlo or (dhi == dlo and abs(hi) < abs(lo)):
            out[t] = i
        else:
            out[t] = i - 1
    return out


def nearest_indices(y, grid, use_numba: bool | None = None) -> np.ndarray:
    """Vectorized nearest-grid index for every element of ``y`` (any shape)."""
    y = np.asarray(y, dtype=np.float64)
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if use_numba is None:
        use_numba = USE_NUMBA
    if use_numba and grid.shape[0] > 1:
        flat = np.ascontiguousarray(y).reshape(-1)
        out = np.empty(flat.shape[0], dtype=np.int64)
        _nearest_indices_numba(flat, grid, out)
        return out.reshape(y.shape)
    return _nearest_indices_numpy(y, grid)
