"""Static rANS coder over 16-bit quantized frequency tables.

32-bit state, 16-bit renormalization.  Out-of-range symbols are coded as a
dedicated escape slot followed by their 32-bit two's-complement value, sent
as two uniform 16-bit rANS symbols.

Stream layout: the encoder's 16-bit output words in decoder read order
(little-endian), then the 4-byte final encoder state.  The encoder starts
from a state carrying a 31-bit CRC of the symbol sequence, so the decoder
must finish on exactly that state with every word consumed.  rANS decoding
resynchronizes after a corrupted word, so a bare "back to the initial
constant" check would miss most corruptions; the CRC closes that gap.
"""

from __future__ import annotations

import math
import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
RANS_L = 1 << 16
_MASK16 = 0xFFFF


class CorruptStreamError(ValueError):
    """The byte stream is truncated, corrupt, or inconsistent with its tables."""


@dataclass(frozen=True, eq=False)
class EntropyTable:
    """Cumulative frequencies for symbols ``offset .. offset + n - 1`` plus escape.

    ``cum_freq`` starts at 0 and ends at ``TOTAL``; slot ``i`` spans
    ``[cum_freq[i], cum_freq[i + 1])``.  The last slot is the escape.
    """

    offset: int
    cum_freq: tuple[int, ...]
    _starts: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cf = self.cum_freq
        if len(cf) < 2 or cf[0] != 0 or cf[-1] != TOTAL:
            raise ValueError("cum_freq must start at 0 and end at 2**16")
        if any(b <= a for a, b in zip(cf, cf[1:])):
            raise ValueError("cum_freq must be strictly increasing")
        object.__setattr__(self, "_starts", list(cf[:-1]))

    @classmethod
    def from_frequencies(cls, offset: int, freqs: Sequence[int]) -> "EntropyTable":
        return cls(int(offset), tuple(int(v) for v in np.concatenate([[0], np.cumsum(freqs)])))

    @property
    def escape_index(self) -> int:
        return len(self.cum_freq) - 2

    @property
    def num_symbols(self) -> int:
        """Regular (non-escape) symbols."""
        return len(self.cum_freq) - 2

    @property
    def frequencies(self) -> np.ndarray:
        return np.diff(np.asarray(self.cum_freq, dtype=np.int64))

    def __eq__(self, other):
        return isinstance(other, EntropyTable) and (self.offset, self.cum_freq) == (other.offset, other.cum_freq)

    def __hash__(self):
        return hash((self.offset, self.cum_freq))

    def slot(self, symbol: int) -> int:
        idx = symbol - self.offset
        return idx if 0 <= idx < self.num_symbols else self.escape_index

    def code_length(self, symbol: int) -> float:
        """Ideal cost in bits, including the raw word for escapes."""
        s = self.slot(symbol)
        bits = PRECISION - math.log2(self.cum_freq[s + 1] - self.cum_freq[s])
        return bits + 32.0 if s == self.escape_index else bits


def ideal_code_length(symbols: Sequence[int], table_indices: Sequence[int], tables: Sequence[EntropyTable]) -> float:
    """Sum of -log2 p_table over a stream (plus 32 bits per escape)."""
    return sum(tables[t].code_length(int(s)) for s, t in zip(symbols, table_indices))


def _check_state(symbols: Sequence[int]) -> int:
    crc = zlib.crc32(np.asarray(symbols, dtype="<i4").tobytes())
    return (1 << 31) | (crc & 0x7FFFFFFF)


def _escape_raw(symbol: int) -> int:
    if not -(1 << 31) <= symbol < (1 << 31):
        raise ValueError(f"escaped symbol {symbol} does not fit in 32 bits")
    return symbol & 0xFFFFFFFF


def rans_encode(symbols: Sequence[int], table_indices: Sequence[int], tables: Sequence[EntropyTable]) -> bytes:
    """Encode ``symbols[i]`` with ``tables[table_indices[i]]``."""
    if len(symbols) != len(table_indices):
        raise ValueError(f"{len(symbols)} symbols but {len(table_indices)} table indices")
    ntab = len(tables)
    words: list[int] = []
    push = words.append
    syms = [int(s) for s in symbols]
    idxs = [int(t) for t in table_indices]
    for sym in syms:
        _escape_raw(sym)
    x = _check_state(syms)
    for pos in range(len(syms) - 1, -1, -1):
        t = idxs[pos]
        if not 0 <= t < ntab:
            raise IndexError(f"table index {t} at position {pos} out of range [0, {ntab})")
        table = tables[t]
        sym = syms[pos]
        s = sym - table.offset
        if 0 <= s < table.num_symbols:
            pending = [(table.cum_freq[s], table.cum_freq[s + 1] - table.cum_freq[s])]
        else:
            raw = _escape_raw(sym)
            esc = table.escape_index
            # decoder reads escape, then low half, then high half
            pending = [
                (raw >> 16, 1),
                (raw & _MASK16, 1),
                (table.cum_freq[esc], table.cum_freq[esc + 1] - table.cum_freq[esc]),
            ]
        for start, freq in pending:
            if x >= freq << 16:
                push(x & _MASK16)
                x >>= 16
            x = ((x // freq) << PRECISION) + (x % freq) + start
    words.reverse()
    return struct.pack(f"<{len(words)}H", *words) + struct.pack("<I", x)


def rans_decode(
    data: bytes, count: int, table_indices: Sequence[int], tables: Sequence[EntropyTable]
) -> list[int]:
    """Inverse of :func:`rans_encode`; raises CorruptStreamError on bad input."""
    if count != len(table_indices):
        raise ValueError(f"count {count} does not match {len(table_indices)} table indices")
    if len(data) < 4 or len(data) % 2:
        raise CorruptStreamError(f"stream length {len(data)} is not a valid rANS payload")
    nwords = (len(data) - 4) // 2
    words = struct.unpack(f"<{nwords}H", data[:-4])
    (x,) = struct.unpack("<I", data[-4:])
    if x < RANS_L:
        raise CorruptStreamError("final state below the normalization bound")
    ntab = len(tables)
    pos = 0
    out: list[int] = []
    append = out.append

    def advance(x, start, freq):
        nonlocal pos
        x = freq * (x >> PRECISION) + (x & _MASK16) - start
        if x < RANS_L:
            if pos >= nwords:
                raise CorruptStreamError("stream truncated")
            x = (x << 16) | words[pos]
            pos += 1
        return x

    for i in range(count):
        t = int(table_indices[i])
        if not 0 <= t < ntab:
            raise IndexError(f"table index {t} at position {i} out of range [0, {ntab})")
        table = tables[t]
        cf = table.cum_freq
        slot = x & _MASK16
        s = bisect_right(table._starts, slot) - 1
        x = advance(x, cf[s], cf[s + 1] - cf[s])
        if s == table.escape_index:
            lo = x & _MASK16
            x = advance(x, lo, 1)
            hi = x & _MASK16
            x = advance(x, hi, 1)
            raw = (hi << 16) | lo
            append(raw - (1 << 32) if raw >= 1 << 31 else raw)
        else:
            append(s + table.offset)
    if pos != nwords or x != _check_state(out):
        raise CorruptStreamError("final-state check failed: stream is corrupt or mismatched")
    return out
