"""Byte-oriented renormalizing range coder over 16-bit-total PMFs.

Integer-only arithmetic on a 32-bit range with carry propagation through a
cache byte, so encoder and decoder agree bit-for-bit on any platform. The
coder itself is stateless across slices: each payload is self-contained
and the symbol count travels out of band.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .context import PMF_TOTAL, Pmf
from .errors import DecodeError

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


@dataclass(frozen=True)
class CodedSlice:
    """Entropy-coded payload plus the symbol count needed to decode it."""

    payload: bytes
    n_symbols: int


class _Encoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.pending = 0
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            self.out.append((self.cache + carry) & 0xFF)
            filler = (0xFF + carry) & 0xFF
            for _ in range(self.pending):
                self.out.append(filler)
            self.pending = 0
            self.cache = (self.low >> 24) & 0xFF
        else:
            self.pending += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, cum_lo: int, freq: int):
        r = self.range >> 16
        self.low += r * cum_lo
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class _Decoder:
    def __init__(self, payload: bytes):
        self.data = payload
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        self._next_byte()  # carry-absorbing lead byte
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise DecodeError("payload truncated")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def peek_value(self) -> int:
        r = self.range >> 16
        v = self.code // r
        return v if v < PMF_TOTAL else PMF_TOTAL - 1

    def consume(self, cum_lo: int, freq: int):
        r = self.range >> 16
        self.code -= r * cum_lo
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self.code = (self.code << 8) | self._next_byte()


def encode_symbols(symbols, pmfs) -> CodedSlice:
    """Encode symbols[i] under pmfs[i]; lengths must match."""
    symbols = list(symbols)
    if len(symbols) != len(pmfs):
        raise ValueError("one PMF per symbol is required")
    enc = _Encoder()
    for sym, pmf in zip(symbols, pmfs):
        sym = int(sym)
        if not 0 <= sym < len(pmf.freq):
            raise ValueError(f"symbol {sym} outside the PMF alphabet")
        cum = pmf.cum
        lo = int(cum[sym - 1]) if sym > 0 else 0
        enc.encode(lo, int(pmf.freq[sym]))
    return CodedSlice(enc.finish(), len(symbols))


def decode_symbols(coded: CodedSlice, pmfs) -> list:
    """Invert `encode_symbols` given the same PMF sequence, in order."""
    if len(pmfs) != coded.n_symbols:
        raise DecodeError("PMF count does not match the symbol count")
    if coded.n_symbols == 0:
        return []
    dec = _Decoder(coded.payload)
    out = []
    for pmf in pmfs:
        cum = pmf.cum
        v = dec.peek_value()
        sym = int(np.searchsorted(cum, v, side="right"))
        if sym >= len(cum):
            raise DecodeError("decoded value outside the PMF alphabet")
        lo = int(cum[sym - 1]) if sym > 0 else 0
        dec.consume(lo, int(pmf.freq[sym]))
        out.append(sym)
    return out


def ideal_bits(symbols, pmfs) -> float:
    """Model code length in bits, excluding coder and flush overhead."""
    total = 0.0
    for sym, pmf in zip(symbols, pmfs):
        total += pmf.bits(int(sym))
    return total
