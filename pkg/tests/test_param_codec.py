from __future__ import annotations

import struct

import numpy as np
import pytest

from oldn.errors import (
    CodecError,
    CodeTableError,
    StreamMagicError,
    StreamTruncatedError,
    StreamVersionError,
    SymbolCountError,
)
from oldn.param_codec import (
    HEADER_SIZE,
    AlResidualStream,
    ResidualSymbols,
    apply_residual,
    canonical_codes,
    code_lengths,
    dequantize,
    huffman_decode,
    huffman_encode,
    quantize_residual,
    read_stream,
    stream_size_bits,
    write_stream,
)


def _encode(values, prec=8) -> AlResidualStream:
    return huffman_encode(ResidualSymbols(np.asarray(values, dtype=np.int64), prec))


class TestQuantize:
    def test_small_residual_rounds_to_one(self):
        symbols = quantize_residual(np.array([1.004]), np.array([1.0]), prec=8)
        assert symbols.values.tolist() == [1]

    def test_half_rounds_away_from_zero(self):
        symbols = quantize_residual(np.array([0.25, -0.25, 0.75]), np.zeros(3), prec=1)
        assert symbols.values.tolist() == [1, -1, 2]

    def test_clamped_to_sixteen_bits(self):
        symbols = quantize_residual(np.array([1e6, -1e6]), np.zeros(2), prec=8)
        assert symbols.values.tolist() == [32767, -32767]

    def test_precision_range(self):
        with pytest.raises(CodecError):
            quantize_residual(np.zeros(1), np.zeros(1), prec=25)

    def test_length_mismatch(self):
        with pytest.raises(SymbolCountError):
            quantize_residual(np.zeros(3), np.zeros(2), prec=8)

    def test_dequantize_matches_apply(self, tiny_model, rng):
        base = tiny_model.snapshot()
        symbols = ResidualSymbols(rng.integers(-20, 21, len(base)), prec=6)
        expected = dequantize(symbols, base).values
        np.testing.assert_allclose(expected, base.values + symbols.values / 64.0)
        applied = apply_residual(tiny_model, symbols).snapshot().values
        np.testing.assert_array_equal(applied, expected.astype(np.float32).astype(np.float64))

    def test_apply_zero_residual_is_identity(self, tiny_model):
        model = apply_residual(tiny_model, ResidualSymbols.zeros(tiny_model.online_count, 8))
        for p in tiny_model.paths():
            np.testing.assert_array_equal(model[p].data, tiny_model[p].data)


class TestHuffman:
    def test_round_trip_randomized(self):
        rng = np.random.default_rng(7)
        cases = [np.zeros(128, dtype=np.int64), np.full(5, -3), np.array([32767, -32767, 0])]
        for k in range(200):
            size = int(rng.integers(1, 300))
            if k % 3 == 0:
                values = rng.integers(-2, 3, size)
            elif k % 3 == 1:
                values = np.round(rng.laplace(0.0, 4.0, size)).astype(np.int64)
            else:
                values = np.where(rng.random(size) < 0.95, 0, rng.integers(-500, 500, size))
            cases.append(values)
        for values in cases:
            data = _encode(values).to_bytes()
            decoded = huffman_decode(data)
            np.testing.assert_array_equal(decoded.values, values)
            assert decoded.prec == 8

    def test_all_zero_payload_is_one_bit_per_symbol(self):
        stream = _encode(np.zeros(128))
        assert stream.table == ((0, 1),)
        assert 8 * len(stream.payload) <= 128

    def test_table_is_deterministic_and_canonical(self):
        values = [0, 0, 0, 0, 1, 1, -1, 2]
        table = code_lengths(values)
        assert table == code_lengths(list(reversed(values)))
        assert table[0] == (0, 1)
        codes = canonical_codes(table)
        words = [format(code, f"0{length}b") for code, length in codes.values()]
        for a in words:
            assert not any(b != a and b.startswith(a) for b in words)

    def test_skewed_source_is_compact(self):
        values = np.zeros(1000, dtype=np.int64)
        values[::100] = 5
        stream = _encode(values)
        assert len(stream.payload) <= 1000 // 8 + 1

    def test_size_in_bits(self):
        stream = _encode([0, 1, 0, 2])
        assert stream_size_bits(stream) == 8 * len(stream.to_bytes())

    def test_empty_rejected(self):
        with pytest.raises(SymbolCountError):
            _encode([])


class TestMalformedStreams:
    def test_bad_magic(self):
        data = b"XXXX" + _encode([0, 1, 2]).to_bytes()[4:]
        with pytest.raises(StreamMagicError):
            huffman_decode(data)

    def test_bad_version(self):
        data = bytearray(_encode([0, 1, 2]).to_bytes())
        data[4] = 9
        with pytest.raises(StreamVersionError):
            huffman_decode(bytes(data))

    def test_truncated_header(self):
        with pytest.raises(StreamTruncatedError):
            huffman_decode(_encode([0, 1]).to_bytes()[:HEADER_SIZE - 3])

    def test_truncated_table(self):
        stream = _encode([0, 1, 2, 3])
        with pytest.raises(StreamTruncatedError):
            huffman_decode(stream.to_bytes()[:HEADER_SIZE + 4])

    def test_truncated_payload(self):
        stream = _encode(np.arange(40) % 7)
        data = stream.to_bytes()[:-len(stream.payload)]
        with pytest.raises(StreamTruncatedError):
            huffman_decode(data)

    def test_decreasing_code_lengths(self):
        with pytest.raises(CodeTableError):
            canonical_codes([(0, 2), (1, 1)])

    def test_oversubscribed_table(self):
        with pytest.raises(CodeTableError):
            canonical_codes([(0, 1), (1, 1), (2, 1)])

    def test_symbols_without_table(self):
        data = b"ALRS" + struct.pack("<BBHH", 1, 8, 3, 0)
        with pytest.raises(CodeTableError):
            huffman_decode(data)


def test_stream_file_round_trip(tmp_path):
    stream = _encode([3, -1, 0, 0, 0])
    path = write_stream(tmp_path / "plane.u.alrs", stream)
    assert read_stream(path) == stream


def test_missing_stream_file(tmp_path):
    with pytest.raises(CodecError):
        read_stream(tmp_path / "absent.alrs")
