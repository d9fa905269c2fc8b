"""Side information: quantized AL residuals, canonical Huffman coded.

Stream layout (all integers little-endian)::

    0..3   b"ALRS"
    4      version (1)
    5      prec, residual step is 2**-prec
    6..7   symbol count
    8..9   alphabet size A
    10..   A x (symbol i16, code length u8), in code-assignment order
    ...    payload, MSB-first, zero padded to a byte boundary

Codes are assigned canonically in table order: lengths never decrease, and the
next code is the previous one plus one, shifted left by the length increase.
"""

from __future__ import annotations

import heapq
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .errors import (
    CodecError,
    CodeTableError,
    StreamMagicError,
    StreamTruncatedError,
    StreamVersionError,
    SymbolCountError,
)
from .network import AlSnapshot, ModelParams


MAGIC = b"ALRS"
VERSION = 1
SYMBOL_LIMIT = 32767
MAX_PREC = 24
HEADER_SIZE = 10
TABLE_RECORD = struct.Struct("<hB")


@dataclass(frozen=True)
class ResidualSymbols:
    values: np.ndarray  # int64
    prec: int

    @property
    def q(self) -> float:
        return 2.0 ** -self.prec

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def nonzero(self) -> int:
        return int(np.count_nonzero(self.values))

    @classmethod
    def zeros(cls, count: int, prec: int) -> "ResidualSymbols":
        return cls(np.zeros(count, dtype=np.int64), prec)


@dataclass(frozen=True)
class AlResidualStream:
    prec: int
    count: int
    table: Tuple[Tuple[int, int], ...]  # (symbol, code length)
    payload: bytes

    @property
    def header_bytes(self) -> int:
        return HEADER_SIZE + TABLE_RECORD.size * len(self.table)

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<BBHH", VERSION, self.prec, self.count, len(self.table))
        for sym, length in self.table:
            out += TABLE_RECORD.pack(sym, length)
        return bytes(out) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "AlResidualStream":
        if len(data) < 4 or data[:4] != MAGIC:
            raise StreamMagicError(f"bad stream magic {bytes(data[:4])!r}")
        if len(data) < HEADER_SIZE:
            raise StreamTruncatedError(f"stream header truncated at {len(data)} bytes")
        version, prec, count, alphabet = struct.unpack_from("<BBHH", data, 4)
        if version != VERSION:
            raise StreamVersionError(f"unsupported stream version {version}", version=version)
        end = HEADER_SIZE + TABLE_RECORD.size * alphabet
        if len(data) < end:
            raise StreamTruncatedError(f"code table truncated: need {end} bytes, have {len(data)}")
        table = tuple(TABLE_RECORD.unpack_from(data, HEADER_SIZE + i * TABLE_RECORD.size) for i in range(alphabet))
        return cls(prec=prec, count=count, table=table, payload=bytes(data[end:]))


# --- Quantization -------------------------------------------------------------

def _values(v: Union[AlSnapshot, np.ndarray, Sequence[float]]) -> np.ndarray:
    return np.asarray(v.values if isinstance(v, AlSnapshot) else v, dtype=np.float64).ravel()


def _check_prec(prec: int) -> int:
    if not 0 <= int(prec) <= MAX_PREC:
        raise CodecError(f"precision exponent {prec} outside [0, {MAX_PREC}]", code="precision")
    return int(prec)


def quantize_residual(online: AlSnapshot | np.ndarray, baseline: AlSnapshot | np.ndarray, prec: int) -> ResidualSymbols:
    """s_i = round((online_i - baseline_i) * 2**prec), half away from zero, clamped to 16 bits."""
    prec = _check_prec(prec)
    a, b = _values(online), _values(baseline)
    if a.size != b.size:
        raise SymbolCountError(f"snapshot lengths differ: {a.size} vs {b.size}", expected=b.size, got=a.size)
    scaled = (a - b) * float(2 ** prec)
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return ResidualSymbols(np.clip(rounded, -SYMBOL_LIMIT, SYMBOL_LIMIT).astype(np.int64), prec)


def dequantize(symbols: ResidualSymbols, baseline: AlSnapshot) -> AlSnapshot:
    """Baseline AL + s * 2**-prec, in float64."""
    if len(symbols) != len(baseline):
        raise SymbolCountError(
            f"{len(symbols)} residual symbols for {len(baseline)} AL weights",
            expected=len(baseline),
            got=len(symbols),
        )
    values = baseline.values + symbols.values.astype(np.float64) * symbols.q
    return AlSnapshot(baseline.paths, baseline.sizes, values)


def apply_residual(baseline: ModelParams, symbols: ResidualSymbols, prec: int | None = None) -> ModelParams:
    """Decoder-side model update; frozen tensors are shared with ``baseline``, untouched."""
    if prec is not None and prec != symbols.prec:
        symbols = ResidualSymbols(symbols.values, _check_prec(prec))
    return baseline.with_snapshot(dequantize(symbols, baseline.snapshot()))


# --- Canonical Huffman --------------------------------------------------------

def code_lengths(symbols: Sequence[int]) -> List[Tuple[int, int]]:
    """(symbol, length) pairs in code-assignment order.

    Ties in the merge queue resolve by (frequency desc, symbol asc) rank, so the
    table is a pure function of the symbol histogram.
    """
    freq = Counter(int(s) for s in symbols)
    ranked = sorted(freq, key=lambda s: (-freq[s], s))
    rank = {s: i for i, s in enumerate(ranked)}
    if len(ranked) == 1:
        return [(ranked[0], 1)]

    depth: Dict[int, int] = {s: 0 for s in ranked}
    # (weight, tiebreak, member symbols)
    heap: List[Tuple[int, int, Tuple[int, ...]]] = [(freq[s], rank[s], (s,)) for s in ranked]
    heapq.heapify(heap)
    order = len(ranked)
    while len(heap) > 1:
        w1, _, m1 = heapq.heappop(heap)
        w2, _, m2 = heapq.heappop(heap)
        for s in m1 + m2:
            depth[s] += 1
        heapq.heappush(heap, (w1 + w2, order, m1 + m2))
        order += 1
    return sorted(((s, depth[s]) for s in ranked), key=lambda p: (p[1], rank[p[0]]))


def canonical_codes(table: Sequence[Tuple[int, int]]) -> Dict[int, Tuple[int, int]]:
    """symbol -> (code, length); validates the table."""
    codes: Dict[int, Tuple[int, int]] = {}
    code, prev = 0, 0
    for i, (sym, length) in enumerate(table):
        if length < 1:
            raise CodeTableError(f"symbol {sym} has code length {length}")
        if length < prev:
            raise CodeTableError(f"code lengths decrease at entry {i} ({prev} -> {length})")
        if sym in codes:
            raise CodeTableError(f"symbol {sym} listed twice")
        if i:
            code = (code + 1) << (length - prev)
        if code >> length:
            raise CodeTableError("code lengths oversubscribe the code space")
        codes[sym] = (code, length)
        prev = length
    return codes


def huffman_encode(symbols: ResidualSymbols) -> AlResidualStream:
    values = [int(s) for s in np.asarray(symbols.values).ravel()]
    if not values:
        raise SymbolCountError("cannot encode an empty symbol list", got=0)
    if len(values) > 0xFFFF:
        raise SymbolCountError(f"{len(values)} symbols exceed the 16-bit count field", got=len(values))
    if any(abs(s) > SYMBOL_LIMIT for s in values):
        raise CodecError(f"symbol outside [-{SYMBOL_LIMIT}, {SYMBOL_LIMIT}]", code="symbol_range")
    table = code_lengths(values)
    codes = canonical_codes(table)

    out = bytearray()
    acc, nbits = 0, 0
    for s in values:
        code, length = codes[s]
        acc = (acc << length) | code
        nbits += length
        while nbits >= 8:
            nbits -= 8
            out.append((acc >> nbits) & 0xFF)
        acc &= (1 << nbits) - 1
    if nbits:
        out.append((acc << (8 - nbits)) & 0xFF)
    return AlResidualStream(prec=_check_prec(symbols.prec), count=len(values), table=tuple(table), payload=bytes(out))


def huffman_decode(stream: AlResidualStream | bytes) -> ResidualSymbols:
    if not isinstance(stream, AlResidualStream):
        stream = AlResidualStream.from_bytes(stream)
    if stream.count and not stream.table:
        raise CodeTableError(f"{stream.count} symbols but an empty code table")
    lookup = {(length, code): sym for sym, (code, length) in canonical_codes(stream.table).items()}
    max_len = max((length for _, length in stream.table), default=0)

    payload = stream.payload
    total_bits = 8 * len(payload)
    out = np.empty(stream.count, dtype=np.int64)
    pos = 0
    for i in range(stream.count):
        code, length = 0, 0
        while True:
            if pos >= total_bits:
                raise StreamTruncatedError(f"payload ends after {i} of {stream.count} symbols", decoded=i)
            code = (code << 1) | ((payload[pos >> 3] >> (7 - (pos & 7))) & 1)
            pos += 1
            length += 1
            sym = lookup.get((length, code))
            if sym is not None:
                out[i] = sym
                break
            if length >= max_len:
                raise CodeTableError(f"payload bits at symbol {i} match no code")
    return ResidualSymbols(out, _check_prec(stream.prec))


def stream_size_bits(stream: AlResidualStream) -> int:
    return 8 * (stream.header_bytes + len(stream.payload))


def write_stream(path: Path | str, stream: AlResidualStream) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(stream.to_bytes())
    return p


def read_stream(path: Path | str) -> AlResidualStream:
    p = Path(path)
    try:
        return AlResidualStream.from_bytes(p.read_bytes())
    except OSError as e:
        raise CodecError(f"cannot read stream {p}: {e}", code="stream_io", path=str(p)) from e
