"""Binary-renormalizing arithmetic coder over quantized integer CDFs.

The coder keeps 64-bit ``low``/``high`` state and renormalizes bit by bit
(emit when both halves agree, count pending bits when the range straddles
the middle). Frequencies live on a 16-bit grid (total 65536), so the
per-symbol rounding loss is below 2^-46 bits and the only real overhead
is the final flush: coded length always lands in (ideal, ideal + 11 bits]
for any symbol sequence, where ideal = sum(-log2(freq/65536)).

Invariants maintained around every coded symbol:
  - 0 <= low <= high < 2^64, with high - low + 1 > 2^62 after renorm
  - encoder and decoder low/high evolve in lock-step given equal inputs
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

import numpy as np

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS

_BITS = 64
_FULL = 1 << _BITS
_HALF = _FULL >> 1
_QUARTER = _FULL >> 2
_THREEQ = _HALF + _QUARTER
_MASK = _FULL - 1


class CoderError(Exception):
    pass


class DecodeError(CoderError):
    pass


class BitWriter:
    """MSB-first bit sink over a growing byte buffer."""

    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0

    def write(self, bit: int) -> None:
        self._acc = (self._acc << 1) | bit
        self._nbits += 1
        if self._nbits == 8:
            self._bytes.append(self._acc)
            self._acc = 0
            self._nbits = 0

    @property
    def bit_length(self) -> int:
        return 8 * len(self._bytes) + self._nbits

    def getvalue(self) -> bytes:
        out = bytearray(self._bytes)
        if self._nbits:
            out.append(self._acc << (8 - self._nbits))
        return bytes(out)


class BitReader:
    """MSB-first bit source; reads past the end yield zeros."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._acc = 0
        self._nbits = 0

    def read(self) -> int:
        if self._nbits == 0:
            if self._pos < len(self._data):
                self._acc = self._data[self._pos]
                self._pos += 1
                self._nbits = 8
            else:
                return 0
        self._nbits -= 1
        return (self._acc >> self._nbits) & 1


class QuantizedCdf:
    """Cumulative integer frequencies; cum[0] = 0, cum[-1] = 65536."""

    __slots__ = ("cum",)

    def __init__(self, cum):
        arr = np.asarray(cum, dtype=np.int64)
        if arr.ndim != 1 or arr.size < 2:
            raise CoderError("cdf must be a 1-D cumulative array with >= 2 entries")
        if arr[0] != 0 or arr[-1] != TOTAL:
            raise CoderError(f"cdf endpoints must be 0 and {TOTAL}")
        if np.any(np.diff(arr) < 1):
            raise CoderError("cdf must be strictly increasing (every symbol needs mass)")
        self.cum = [int(v) for v in arr]

    @property
    def n_symbols(self) -> int:
        return len(self.cum) - 1

    def freq(self, symbol: int) -> int:
        return self.cum[symbol + 1] - self.cum[symbol]


def quantize_cdf_rows(pmf_rows: np.ndarray) -> np.ndarray:
    """Quantize each row of probabilities onto the 16-bit frequency grid.

    Frequencies are rounded, floored at 1, and the rounding deficit or
    surplus is absorbed by each row's largest-frequency symbol.
    """
    pmf = np.asarray(pmf_rows, dtype=np.float64)
    if pmf.ndim == 1:
        pmf = pmf[None, :]
    n = pmf.shape[1]
    if n > TOTAL // 2:
        raise CoderError(f"alphabet of {n} symbols is too large for 16-bit totals")
    if not np.all(np.isfinite(pmf)) or np.any(pmf < 0.0):
        raise CoderError("pmf rows must be finite and non-negative")
    freqs = np.rint(pmf * TOTAL).astype(np.int64)
    np.maximum(freqs, 1, out=freqs)
    leftover = TOTAL - freqs.sum(axis=1)
    top = np.argmax(freqs, axis=1)
    rows = np.arange(freqs.shape[0])
    freqs[rows, top] += leftover
    if np.any(freqs[rows, top] < 1):
        raise CoderError("pmf too far from normalized to quantize")
    cum = np.zeros((freqs.shape[0], n + 1), dtype=np.int64)
    np.cumsum(freqs, axis=1, out=cum[:, 1:])
    return cum


def quantize_cdf(pmf) -> QuantizedCdf:
    return QuantizedCdf(quantize_cdf_rows(np.asarray(pmf))[0])


class RangeEncoder:
    def __init__(self):
        self._writer = BitWriter()
        self.low = 0
        self.high = _MASK
        self._pending = 0
        self._done = False

    def _emit(self, bit: int) -> None:
        w = self._writer
        w.write(bit)
        inv = bit ^ 1
        for _ in range(self._pending):
            w.write(inv)
        self._pending = 0

    def encode_symbol(self, cum: Sequence[int], symbol: int) -> None:
        if self._done:
            raise CoderError("encoder already finished")
        if not 0 <= symbol < len(cum) - 1:
            raise CoderError(f"symbol {symbol} outside alphabet of {len(cum) - 1}")
        span = self.high - self.low + 1
        base = self.low
        self.high = base + (cum[symbol + 1] * span) // TOTAL - 1
        self.low = base + (cum[symbol] * span) // TOTAL
        low, high = self.low, self.high
        while True:
            if high < _HALF:
                self._emit(0)
            elif low >= _HALF:
                self._emit(1)
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < _THREEQ:
                self._pending += 1
                low -= _QUARTER
                high -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
        self.low, self.high = low, high

    def finish(self) -> bytes:
        if self._done:
            raise CoderError("encoder already finished")
        self._done = True
        # Disambiguate the final interval, flush pending bits, then pad two
        # zero bits so the coded length can never dip below the ideal.
        self._pending += 1
        self._emit(0 if self.low < _QUARTER else 1)
        self._writer.write(0)
        self._writer.write(0)
        return self._writer.getvalue()


class RangeDecoder:
    def __init__(self, data: bytes):
        self._reader = BitReader(data)
        self.low = 0
        self.high = _MASK
        self.code = 0
        for _ in range(_BITS):
            self.code = (self.code << 1) | self._reader.read()

    def decode_symbol(self, cum: Sequence[int]) -> int:
        span = self.high - self.low + 1
        offset = self.code - self.low
        value = ((offset + 1) * TOTAL - 1) // span
        symbol = bisect_right(cum, value) - 1
        base = self.low
        self.high = base + (cum[symbol + 1] * span) // TOTAL - 1
        self.low = base + (cum[symbol] * span) // TOTAL
        low, high, code = self.low, self.high, self.code
        read = self._reader.read
        while True:
            if high < _HALF:
                pass
            elif low >= _HALF:
                low -= _HALF
                high -= _HALF
                code -= _HALF
            elif low >= _QUARTER and high < _THREEQ:
                low -= _QUARTER
                high -= _QUARTER
                code -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
            code = (code << 1) | read()
        self.low, self.high, self.code = low, high, code
        if not (low <= code <= high):
            raise DecodeError("range invariant violated: corrupted stream")
        return symbol


def _cum_rows(cdfs, count: int | None):
    if isinstance(cdfs, QuantizedCdf):
        if count is None:
            raise CoderError("a shared cdf needs an explicit symbol count")
        return [cdfs.cum] * count, count
    if isinstance(cdfs, np.ndarray):
        rows = cdfs.tolist()
        return rows, len(rows)
    rows = [c.cum for c in cdfs]
    return rows, len(rows)


def encode(symbols, cdfs, count: int | None = None) -> bytes:
    """Encode integer symbols under per-symbol quantized CDFs."""
    syms = [int(s) for s in np.asarray(symbols).reshape(-1)]
    rows, n = _cum_rows(cdfs, len(syms) if count is None else count)
    if len(syms) != n:
        raise CoderError(f"{len(syms)} symbols but {n} cdfs")
    enc = RangeEncoder()
    for s, cum in zip(syms, rows):
        enc.encode_symbol(cum, s)
    return enc.finish()


def decode(data: bytes, cdfs, count: int | None = None) -> np.ndarray:
    """Exact inverse of ``encode`` given the same CDF sequence."""
    rows, n = _cum_rows(cdfs, count)
    dec = RangeDecoder(data)
    out = np.empty(n, dtype=np.int64)
    for i, cum in enumerate(rows):
        out[i] = dec.decode_symbol(cum)
    return out


def ideal_bits(symbols, cdfs, count: int | None = None) -> float:
    """Information content of the symbols under the quantized CDFs."""
    syms = np.asarray(symbols).reshape(-1)
    rows, n = _cum_rows(cdfs, syms.size if count is None else count)
    total = 0.0
    for s, cum in zip(syms, rows):
        total -= np.log2((cum[int(s) + 1] - cum[int(s)]) / TOTAL)
    return float(total)
