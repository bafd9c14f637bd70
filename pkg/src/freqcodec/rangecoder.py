"""Carry-propagating range coder with 16-bit frequency tables.

The state is a 33-bit ``low`` with a one-byte cache for carries and a 32-bit
``range`` renormalized to stay at or above ``2**24`` (LZMA style). Symbols
outside a row's support are sent as the row's escape entry followed by an
Elias-gamma style payload in bypass bits.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .entropy_models import PRECISION, TOTAL_FREQ, CdfTable

TOP = 1 << 24
MASK32 = 0xFFFFFFFF


class DecodeError(ValueError):
    """Raised for malformed, truncated or inconsistent streams."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode(self, cum: int, freq: int):
        r = self.range >> PRECISION
        self.low += r * cum
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int):
        """Uniform ``nbits``-bit value (``nbits <= 16``)."""
        r = self.range >> nbits
        self.low += r * value
        self.range = r
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def encode_escape(self, u: int):
        n = (u + 1).bit_length()
        self.encode_bits(n - 1, 6)
        rest = (u + 1) - (1 << (n - 1))
        nbits = n - 1
        while nbits > 0:
            take = min(16, nbits)
            nbits -= take
            self.encode_bits((rest >> nbits) & ((1 << take) - 1), take)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # leading byte is always the zero initial cache
        assert self.out[0] == 0
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("truncated stream")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def _normalize(self):
        while self.range < TOP:
            self.range <<= 8
            self.code = ((self.code << 8) | self._byte()) & MASK32

    def target(self) -> int:
        self._r = self.range >> PRECISION
        t = self.code // self._r
        if t >= TOTAL_FREQ:
            raise DecodeError("corrupt stream: target outside frequency range")
        return t

    def consume(self, cum: int, freq: int):
        self.code -= self._r * cum
        self.range = self._r * freq
        self._normalize()

    def decode_bits(self, nbits: int) -> int:
        r = self.range >> nbits
        v = self.code // r
        if v >> nbits:
            raise DecodeError("corrupt stream: bypass value out of range")
        self.code -= r * v
        self.range = r
        self._normalize()
        return v

    def decode_escape(self) -> int:
        n = self.decode_bits(6) + 1
        value = 1
        nbits = n - 1
        while nbits > 0:
            take = min(16, nbits)
            nbits -= take
            value = (value << take) | self.decode_bits(take)
        return value - 1


def _escape_payload(value: int, offset: int, length: int) -> int:
    if value < offset:
        return 2 * (offset - value - 1)
    return 2 * (value - offset - length) + 1


def _escape_value(u: int, offset: int, length: int) -> int:
    if u % 2 == 0:
        return offset - 1 - u // 2
    return offset + length + u // 2


def encode_symbols(enc: RangeEncoder, symbols: np.ndarray, table: CdfTable, rows: Optional[np.ndarray] = None):
    """Append ``symbols`` to ``enc``; symbol ``i`` is coded with row ``rows[i]``."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    rows = np.arange(len(symbols)) if rows is None else np.asarray(rows).ravel()
    cum, freq, escape = table.lookup(symbols, rows)
    offsets = table.offsets[rows]
    lengths = table.lengths[rows]
    for i, (c, f, e) in enumerate(zip(cum.tolist(), freq.tolist(), escape.tolist())):
        enc.encode(c, f)
        if e:
            enc.encode_escape(_escape_payload(int(symbols[i]), int(offsets[i]), int(lengths[i])))


def decode_symbols(dec: RangeDecoder, table: CdfTable, rows: Optional[np.ndarray] = None, count: Optional[int] = None) -> np.ndarray:
    """Read one symbol per entry of ``rows`` (or ``count`` symbols with rows ``0..count-1``)."""
    if rows is None:
        rows = np.arange(len(table) if count is None else count)
    rows = np.asarray(rows).ravel()
    out = np.empty(len(rows), dtype=np.int64)
    cdf = table.cdf
    offsets = table.offsets.tolist()
    lengths = table.lengths.tolist()
    starts = table.starts.tolist()
    for i, r in enumerate(rows.tolist()):
        t = dec.target()
        length = lengths[r]
        row = cdf[starts[r] : starts[r] + length + 2]
        s = int(np.searchsorted(row, t, side="right")) - 1
        if s > length:
            raise DecodeError("corrupt stream: symbol beyond table")
        lo = int(row[s])
        dec.consume(lo, int(row[s + 1]) - lo)
        if s == length:
            out[i] = _escape_value(dec.decode_escape(), offsets[r], length)
        else:
            out[i] = offsets[r] + s
    return out


def range_encode(symbols: np.ndarray, table: CdfTable, rows: Optional[np.ndarray] = None) -> bytes:
    enc = RangeEncoder()
    encode_symbols(enc, symbols, table, rows)
    return enc.finish()


def range_decode(data: bytes, table: CdfTable, rows: Optional[np.ndarray] = None, count: Optional[int] = None) -> np.ndarray:
    return decode_symbols(RangeDecoder(data), table, rows, count)
