import time

import numpy as np
import pytest

from razer import _accel
from razer.codec import pack_fp3, pack_fp4
from razer.fastcast import (
    DEFAULT_SV_HALVES,
    SV_MARKER,
    batch_cast,
    cast_codes,
    encode_half_to_razer4,
    razer3_to_half,
    razer4_to_half_fast,
    razer4_to_half_fast_array,
    razer4_to_half_lookup,
    sv_half_table,
)
from razer.numerics import fp3_grid, fp4_grid, half_decode, half_encode
from razer.quantizer import dequantize_group_razer, quantize_group_razer

SV = (5.0, 8.0, -5.0, -8.0)


def test_default_table_halves():
    assert tuple(sv_half_table(SV)) == DEFAULT_SV_HALVES


@pytest.mark.parametrize("code, sv_idx, bits", [(0b0100, 0, 0x3C00), (0b0010, 2, 0x0000), (0b0011, 1, 0x4800),
                                                (0b1111, 0, 0xC600), (0b0000, 3, 0x3800), (0b0001, 0, 0xB800)])
def test_fast_examples(code, sv_idx, bits):
    assert razer4_to_half_fast(code, sv_idx) == bits
    assert razer4_to_half_lookup(code, sv_idx) == bits


def test_minus_six_against_grid():
    assert half_decode(razer4_to_half_fast(0b1111, 0)) == -6.0 == fp4_grid().value_of(0b1111)


def test_fast_equals_lookup_exhaustive():
    for sv_idx in range(4):
        for code in range(16):
            assert razer4_to_half_fast(code, sv_idx) == razer4_to_half_lookup(code, sv_idx)
    codes = np.tile(np.arange(16), 4)
    idx = np.repeat(np.arange(4), 16)
    lut = np.array([razer4_to_half_lookup(c, i) for c, i in zip(codes, idx)], dtype=np.uint16)
    assert np.array_equal(razer4_to_half_fast_array(codes, idx), lut)


def test_every_code_decodes_to_grid():
    spec = fp4_grid()
    for code in spec.codes:
        assert half_decode(razer4_to_half_fast(code, 0)) == spec.value_of(code)


class TestEncode:
    @pytest.mark.parametrize("value, code", [(6.0, 0b1110), (SV_MARKER, 0b0011), (0.0, 0b0010)])
    def test_examples(self, value, code):
        assert encode_half_to_razer4(value) == code

    def test_inverse_pairs(self):
        for code in range(16):
            bits = razer4_to_half_fast(code, 0)
            value = SV_MARKER if code == 0b0011 else half_decode(bits)
            assert encode_half_to_razer4(value) == code
        for v in fp4_grid().grid:
            assert half_decode(razer4_to_half_fast(encode_half_to_razer4(v), 0)) == v

    def test_unrepresentable(self):
        with pytest.raises(ValueError):
            encode_half_to_razer4(5.0)


class TestBatch:
    def test_zeros(self, use_numba):
        block = pack_fp4([0b0010] * 20)
        assert np.all(batch_cast(block, 0, DEFAULT_SV_HALVES, 3.0, use_numba=use_numba) == 0.0)

    def test_scale_two(self, use_numba):
        spec = fp4_grid()
        block = pack_fp4(list(spec.codes))
        out = batch_cast(block, 0, DEFAULT_SV_HALVES, 2.0, use_numba=use_numba)
        assert out.tolist() == [2 * v for v in spec.grid]

    def test_matches_lookup(self, rng, use_numba):
        codes = rng.integers(0, 16, 1000)
        for sv_idx in range(4):
            out = batch_cast(pack_fp4(codes), sv_idx, DEFAULT_SV_HALVES, 0.37, use_numba=use_numba)
            ref = np.array([half_decode(razer4_to_half_lookup(c, sv_idx)) for c in codes], dtype=np.float32)
            assert np.array_equal(out, ref * np.float32(0.37))

    def test_bit_identical_to_dequantize(self, rng, use_numba):
        spec = fp4_grid()
        for _ in range(20):
            q = quantize_group_razer(rng.standard_normal(128) * 3, spec, SV)
            out = batch_cast(pack_fp4(q.codes), q.params.sv_index, sv_half_table(SV), q.params.scale,
                             use_numba=use_numba)
            assert np.array_equal(out.view(np.uint32), dequantize_group_razer(q, spec, SV).view(np.uint32))


class TestFp3:
    def test_zero_planes(self):
        planes = pack_fp3([0] * 128)
        assert all(razer3_to_half(planes, i, 0, DEFAULT_SV_HALVES) == 0 for i in (0, 77, 127))

    def test_four(self):
        codes = [0] * 128
        codes[5] = fp3_grid().code_of(4.0)
        assert razer3_to_half(pack_fp3(codes), 5, 0, DEFAULT_SV_HALVES) == 0x4400 == half_encode(4.0)

    def test_reserved(self):
        codes = [fp3_grid().reserved_code] * 128
        assert razer3_to_half(pack_fp3(codes), 9, 3, DEFAULT_SV_HALVES) == DEFAULT_SV_HALVES[3]

    def test_index_range(self):
        with pytest.raises(IndexError):
            razer3_to_half(pack_fp3([0] * 128), 128, 0, DEFAULT_SV_HALVES)


class TestCodeStreams:
    def test_methods_agree(self, rng, use_numba):
        codes = rng.integers(0, 16, 4096)
        for sv_idx in range(4):
            fast = cast_codes(codes, sv_idx, method="fast", use_numba=use_numba)
            assert np.array_equal(fast, cast_codes(codes, sv_idx, method="lookup", use_numba=use_numba))

    def test_bad_method(self):
        with pytest.raises(ValueError):
            cast_codes([0], 0, method="table")

    @pytest.mark.skipif(not _accel._HAVE_NUMBA, reason="compiled backend unavailable")
    def test_fast_throughput_not_below_lookup(self, rng):
        codes = rng.integers(0, 16, 1 << 22).astype(np.uint8)

        def best_time(method):
            cast_codes(codes, 1, method=method, use_numba=True)
            times = []
            for _ in range(15):
                t0 = time.perf_counter()
                cast_codes(codes, 1, method=method, use_numba=True)
                times.append(time.perf_counter() - t0)
            return min(times)

        assert best_time("fast") <= best_time("lookup")
