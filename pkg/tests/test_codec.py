import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from razer.codec import (
    ContainerError,
    Fp3Planes,
    PackedFp4Block,
    container_bytes,
    container_layout,
    effective_bits,
    fp3_code_at,
    pack_fp3,
    pack_fp4,
    read_container,
    read_nt,
    unpack_fp3,
    unpack_fp4,
    write_container,
    write_nt,
)
from razer.quantizer import QuantConfig, dequantize_tensor, quantize_tensor

SV = (5.0, 8.0, -5.0, -8.0)


class TestFp4Packing:
    def test_nibble_order(self):
        block = pack_fp4(range(8))
        assert block.words.tolist() == [0x76543210]
        assert unpack_fp4(block).tolist() == list(range(8))

    def test_nine_codes(self):
        block = pack_fp4([1] * 9)
        assert block.words.tolist() == [0x11111111, 0x00000001]
        assert unpack_fp4(block).tolist() == [1] * 9

    @settings(max_examples=300)
    @given(st.lists(st.integers(0, 15), min_size=1, max_size=1024))
    def test_round_trip(self, codes):
        block = pack_fp4(codes)
        assert block.words.size == math.ceil(len(codes) / 8)
        assert unpack_fp4(block).tolist() == codes

    def test_rejects(self):
        with pytest.raises(ValueError):
            pack_fp4([16])
        with pytest.raises(ValueError):
            PackedFp4Block(np.zeros(1, dtype=np.uint32), 9)


class TestFp3Planes:
    def test_zero(self):
        assert pack_fp3([0] * 128) == Fp3Planes(0, 0, 0)

    def test_alternating_sign(self):
        p = pack_fp3([0, 1] * 64)
        assert p.sign_plane == int("AA" * 16, 16)
        assert p.exp_hi_plane == 0 and p.exp_lo_plane == 0

    def test_plane_assignment(self):
        p = pack_fp3([0b110] + [0] * 127)
        assert (p.sign_plane, p.exp_hi_plane, p.exp_lo_plane) == (0, 1, 1)

    def test_exhaustive_positions(self):
        for i in range(128):
            for code in range(8):
                codes = np.zeros(128, dtype=np.uint8)
                codes[i] = code
                p = pack_fp3(codes)
                assert fp3_code_at(p, i) == code
                assert unpack_fp3(p).tolist() == codes.tolist()

    def test_random_round_trip(self, rng):
        codes = rng.integers(0, 8, 128)
        assert unpack_fp3(pack_fp3(codes)).tolist() == codes.tolist()

    def test_size_check(self):
        with pytest.raises(ValueError):
            pack_fp3([0] * 64)
        with pytest.raises(IndexError):
            fp3_code_at(Fp3Planes(0, 0, 0), 128)


def _tensors(rng):
    return [
        ("fp4rzr", 128, rng.standard_normal((6, 300))),
        ("fp4rzr", 64, rng.standard_normal((2, 3, 64))),
        ("fp3rzr", 128, rng.standard_normal((5, 256))),
        ("int4", 128, rng.standard_normal((4, 130))),
        ("int3", 128, rng.standard_normal((3, 128))),
    ]


class TestContainer:
    @pytest.mark.parametrize("case", range(5))
    def test_round_trip(self, rng, case):
        dtype, g, T = _tensors(rng)[case]
        sv = SV if dtype == "fp4rzr" else (5.0, 6.0, -5.0, -6.0) if dtype == "fp3rzr" else None
        qt = quantize_tensor(T, QuantConfig(dtype, g), sv)
        data = container_bytes(qt)
        assert len(data) == container_layout(T.shape, dtype, g).total
        back = read_container(data)
        assert container_bytes(back) == data
        assert np.array_equal(dequantize_tensor(back), dequantize_tensor(qt))

    def test_file_round_trip(self, tmp_path, rng):
        qt = quantize_tensor(rng.standard_normal((4, 128)), QuantConfig("fp4rzr"), SV)
        path = tmp_path / "w.rzr"
        write_container(qt, path)
        buf = io.BytesIO()
        write_container(read_container(path), buf)
        assert buf.getvalue() == path.read_bytes()

    def test_fp4_payload_size(self):
        layout = container_layout((13824, 5120), "fp4rzr", 128)
        assert layout.payload == 13824 * 5120 // 2
        assert layout.payload / 2 ** 20 == 33.75

    def test_payload_formula(self):
        for n in (1, 7, 129):
            layout = container_layout((n, 100), "fp4rzr", 32)
            assert layout.payload == math.ceil(layout.n_groups * 32 / 8) * 4

    def test_truncated(self, rng):
        data = container_bytes(quantize_tensor(rng.standard_normal(256), QuantConfig("fp4rzr"), SV))
        with pytest.raises(ContainerError) as e:
            read_container(data[:-1])
        assert e.value.kind == "truncated"

    @pytest.mark.parametrize("offset, value, kind", [(0, b"X", "bad_magic"), (4, b"\x09", "version"),
                                                     (6, b"\x07", "unknown_dtype")])
    def test_header_errors(self, rng, offset, value, kind):
        data = bytearray(container_bytes(quantize_tensor(rng.standard_normal(256), QuantConfig("fp4rzr"), SV)))
        data[offset:offset + 1] = value
        with pytest.raises(ContainerError) as e:
            read_container(bytes(data))
        assert e.value.kind == kind

    def test_trailing_bytes(self, rng):
        data = container_bytes(quantize_tensor(rng.standard_normal(256), QuantConfig("fp4rzr"), SV))
        with pytest.raises(ContainerError) as e:
            read_container(data + b"\0")
        assert e.value.kind == "trailing"

    def test_fp3_needs_128(self, rng):
        qt = quantize_tensor(rng.standard_normal(64), QuantConfig("fp3rzr", 64), (5.0, 6.0, -5.0, -6.0))
        with pytest.raises(ValueError):
            container_bytes(qt)


class TestNt:
    @pytest.mark.parametrize("dtype", ["f32", "f16"])
    def test_round_trip(self, tmp_path, rng, dtype):
        T = rng.standard_normal((3, 4, 5)).astype(np.float16).astype(np.float32)
        write_nt(tmp_path / "t.nt", T, dtype)
        assert np.array_equal(read_nt(tmp_path / "t.nt"), T)

    def test_header_bytes(self, tmp_path):
        write_nt(tmp_path / "t.nt", np.array([1.0], dtype=np.float32))
        raw = (tmp_path / "t.nt").read_bytes()
        assert raw == b"NTSR" + bytes([0, 1]) + (1).to_bytes(8, "little") + np.float32(1).tobytes()

    def test_bad(self, tmp_path):
        (tmp_path / "bad.nt").write_bytes(b"NOPE")
        with pytest.raises(ContainerError):
            read_nt(tmp_path / "bad.nt")


class TestEffectiveBits:
    @pytest.mark.parametrize("args, expect", [((4, 128, 8, 2), 4.078125), ((4, 128, 8, 4), 4.09375),
                                              ((4, 128, 256, 0), 6.0), ((4, 128, 8, 0), 4.0625)])
    def test_table(self, args, expect):
        assert effective_bits(*args) == expect

    def test_decreasing_in_group_size(self):
        vals = [effective_bits(4, g, 8, 2) for g in (16, 32, 64, 128, 256)]
        assert all(a > b for a, b in zip(vals, vals[1:]))
