"""Integer range coder over static cumulative-frequency tables.

A carry-propagating 32-bit range coder in the LZMA style. Frequencies are
quantized to ``PRECISION_BITS`` (16) so the coder state stays inside
unsigned 32-bit arithmetic; everything here is plain integer math and the
output is identical on every platform.

The leading byte of the LZMA-style encoder is always zero and is dropped, so
an empty message costs exactly four bytes (the flush).
"""

from bisect import bisect_right
from typing import Iterable, List, Sequence

import numpy as np

PRECISION_BITS = 16
TOTAL_FREQ = 1 << PRECISION_BITS

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class TruncatedPayloadError(ValueError):
    """Raised when the decoder runs past the end of its payload."""


def quantize_pmf(pmf: np.ndarray, precision: int = PRECISION_BITS) -> np.ndarray:
    """Turn a probability vector into integer frequencies summing to ``2**precision``.

    Every symbol gets a frequency of at least one, so nothing in the support
    becomes uncodable. Leftover counts go to the largest fractional parts
    (ties broken by symbol index).
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    total = 1 << precision
    if n == 0 or n > total:
        raise ValueError(f"cannot quantize an alphabet of {n} symbols to {precision} bits")
    if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
        raise ValueError("pmf must be finite and non-negative")
    pmf = pmf / pmf.sum()
    scaled = pmf * (total - n)
    freq = np.floor(scaled).astype(np.int64) + 1
    deficit = total - int(freq.sum())
    if deficit > 0:
        frac = scaled - np.floor(scaled)
        order = np.lexsort((np.arange(n), -frac))
        freq[order[:deficit]] += 1
    elif deficit < 0:  # pragma: no cover - floor() cannot overshoot
        raise AssertionError("frequency quantization overshoot")
    return freq


def cumulative(freq: Sequence[int]) -> List[int]:
    """Exclusive prefix sums with the total appended: ``cum[s] .. cum[s+1]``."""
    cum = [0]
    for f in freq:
        cum.append(cum[-1] + int(f))
    return cum


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self._cache
            while True:
                self._out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self._cache_size -= 1
                if self._cache_size == 0:
                    break
            self._cache = (self.low >> 24) & 0xFF
        self._cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum_low: int, freq: int):
        if freq <= 0:
            raise ValueError("cannot encode a zero-frequency symbol")
        r = self.range >> PRECISION_BITS
        self.low += r * cum_low
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # first emitted byte is the initial zero cache
        return bytes(self._out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise TruncatedPayloadError(
                f"payload exhausted after {len(self._data)} bytes")
        b = self._data[self._pos]
        self._pos += 1
        return b

    @property
    def bytes_consumed(self) -> int:
        return self._pos

    def decode(self, cum: Sequence[int]) -> int:
        r = self.range >> PRECISION_BITS
        value = min(self.code // r, TOTAL_FREQ - 1)
        sym = bisect_right(cum, value) - 1
        if sym >= len(cum) - 1:
            raise ValueError("corrupt payload: symbol outside table")
        self.code -= r * cum[sym]
        self.range = r * (cum[sym + 1] - cum[sym])
        if self.code >= self.range:
            raise ValueError("corrupt payload: code outside symbol interval")
        while self.range < _TOP:
            self.range <<= 8
            self.code = (self.code << 8) | self._next_byte()
        return sym


def encode_symbols(symbols: Iterable[int], tables: Iterable[Sequence[int]]) -> bytes:
    """Encode each symbol index with its own cumulative table (zipped)."""
    enc = RangeEncoder()
    for s, cum in zip(symbols, tables):
        enc.encode(cum[s], cum[s + 1] - cum[s])
    return enc.finish()


def decode_symbols(data: bytes, tables: Iterable[Sequence[int]]) -> List[int]:
    dec = RangeDecoder(data)
    out = [dec.decode(cum) for cum in tables]
    if dec.bytes_consumed != len(data):
        raise ValueError(
            f"payload has {len(data) - dec.bytes_consumed} trailing bytes")
    return out
