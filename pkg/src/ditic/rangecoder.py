"""32-bit range coder with carry propagation over 16-bit quantized CDFs.

Every table carries two escape bins around its core support. An escaped
symbol is followed by its distance beyond the support as a raw 16-bit value.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

PRECISION = 16
TOTAL = 1 << PRECISION
RAW_BITS = 16
MAX_SUPPORT = 1024
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class CoderError(ValueError):
    pass


class TruncatedStreamError(CoderError):
    pass


@dataclass(frozen=True)
class CdfTable:
    """``cum`` has K+1 entries, ``cum[0] == 0``, ``cum[K] == 2**16``.

    Bin 0 and bin K-1 are the escape bins; bin ``i`` in between codes the
    symbol ``offset + i - 1``.
    """

    cum: tuple
    offset: int
    precision: int = PRECISION

    @property
    def n_bins(self) -> int:
        return len(self.cum) - 1

    @property
    def core_size(self) -> int:
        return self.n_bins - 2

    def mass(self, b: int) -> int:
        return self.cum[b + 1] - self.cum[b]

    def symbol_probability(self, v: int) -> float:
        """Model probability of symbol ``v`` including the raw escape payload."""
        b, raw = _bin_of(self, v)
        p = self.mass(b) / TOTAL
        return p if raw is None else p / TOTAL


@dataclass(frozen=True)
class Bitstream:
    data: bytes

    @property
    def bit_len(self) -> int:
        return 8 * len(self.data)


def quantize_edges(edges: np.ndarray) -> tuple:
    """Turn float CDF edges (first 0, last 1) into a strictly increasing 16-bit table."""
    cum = np.rint(np.asarray(edges, dtype=np.float64) * TOTAL).astype(np.int64)
    K = len(cum) - 1
    if K > TOTAL:
        raise CoderError("too many bins for the coder precision")
    cum[0], cum[-1] = 0, TOTAL
    idx = np.arange(K + 1)
    cum = np.maximum.accumulate(cum - idx) + idx
    cum[-1] = TOTAL
    cum = np.minimum.accumulate((cum - idx)[::-1])[::-1] + idx
    return tuple(int(c) for c in cum)


def table_from_pmf(pmf, offset: int, tail_low: float, tail_high: float) -> CdfTable:
    probs = np.concatenate([[max(tail_low, 0.0)], np.clip(pmf, 0, None), [max(tail_high, 0.0)]])
    edges = np.concatenate([[0.0], np.cumsum(probs)])
    edges /= edges[-1]
    return CdfTable(quantize_edges(edges), int(offset))


def support_for(sigma: float, max_support: int = MAX_SUPPORT) -> int:
    return min(int(math.ceil(12.0 * sigma)) + 1, max_support)


def gaussian_cdf_table(mu_frac: float, sigma: float, sigma_floor: float = 0.11,
                       max_support: int = MAX_SUPPORT) -> CdfTable:
    """Discretized Gaussian over residuals ``-S..S`` plus escape bins."""
    if not sigma >= sigma_floor - 1e-12:
        raise CoderError(f"sigma {sigma} below floor {sigma_floor}")
    S = support_for(sigma, max_support)
    j = np.arange(2 * S + 2)
    core = ndtr((j - S - 0.5 - mu_frac) / sigma)
    edges = np.concatenate([[0.0], core, [1.0]])
    return CdfTable(quantize_edges(edges), -S)


def _bin_of(table: CdfTable, v: int):
    i = v - table.offset
    n = table.core_size
    if 0 <= i < n:
        return i + 1, None
    if i < 0:
        raw = -1 - i
        b = 0
    else:
        raw = i - n
        b = n + 1
    if raw >= 1 << RAW_BITS:
        return b, -1
    return b, raw


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            out = self.out
            while True:
                out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, start: int, size: int):
        r = self.range >> PRECISION
        self.low += start * r
        self.range = size * r
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(5):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError("bitstream ended early")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self) -> int:
        self._r = self.range >> PRECISION
        value = self.code // self._r
        if value >= TOTAL:
            raise CoderError("corrupt bitstream")
        return value

    def consume(self, start: int, size: int):
        r = self._r
        self.code -= start * r
        self.range = size * r
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._byte()) & _MASK32
            self.range <<= 8


def encode_symbols(symbols: Sequence[int], tables: Sequence[CdfTable]) -> Bitstream:
    if len(symbols) != len(tables):
        raise CoderError(f"{len(symbols)} symbols but {len(tables)} tables")
    enc = RangeEncoder()
    for i, (v, t) in enumerate(zip(symbols, tables)):
        b, raw = _bin_of(t, int(v))
        if raw == -1:
            raise CoderError(f"symbol {int(v)} at index {i} is outside the escape-extended support")
        cum = t.cum
        enc.encode(cum[b], cum[b + 1] - cum[b])
        if raw is not None:
            enc.encode(raw, 1)
    return Bitstream(enc.finish())


def decode_symbols(stream: Bitstream | bytes, tables: Sequence[CdfTable]) -> list[int]:
    data = stream.data if isinstance(stream, Bitstream) else bytes(stream)
    dec = RangeDecoder(data)
    out = []
    for t in tables:
        cum = t.cum
        value = dec.target()
        b = bisect_right(cum, value) - 1
        dec.consume(cum[b], cum[b + 1] - cum[b])
        n = len(cum) - 3
        if 0 < b <= n:
            out.append(t.offset + b - 1)
            continue
        raw = dec.target()
        dec.consume(raw, 1)
        out.append(t.offset - 1 - raw if b == 0 else t.offset + n + raw)
    return out


def ideal_bits(symbols: Sequence[int], tables: Sequence[CdfTable]) -> float:
    """Sum of -log2 p under the quantized tables."""
    return float(sum(-math.log2(t.symbol_probability(int(v))) for v, t in zip(symbols, tables)))
