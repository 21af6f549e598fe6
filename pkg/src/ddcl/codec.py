"""Signed-integer bit coding.

Integers are folded onto the naturals (zigzag), shifted by one and written as
Elias-gamma codewords, most significant bit first. ``ideal_bit_length`` is the
fractional ``log2(2|m| + 1)`` accounting used by every reported metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

MAX_MAGNITUDE = (1 << 31) - 1


class CodecError(ValueError):
    pass


class TruncatedCodeword(CodecError):
    def __init__(self, offset: int):
        super().__init__(f"truncated codeword at bit offset {offset}")
        self.offset = offset


def _check_magnitude(m: int) -> int:
    m = int(m)
    if abs(m) > MAX_MAGNITUDE:
        raise OverflowError(f"|m| = {abs(m)} exceeds 2**31 - 1")
    return m


def zigzag(m: int) -> int:
    m = _check_magnitude(m)
    return 2 * m if m >= 0 else -2 * m - 1


def unzigzag(k: int) -> int:
    k = int(k)
    if k < 0:
        raise ValueError(f"zigzag value must be non-negative, got {k}")
    return k // 2 if k % 2 == 0 else -(k + 1) // 2


def ideal_bit_length(m) -> float | np.ndarray:
    """``log2(2|m| + 1)``; works elementwise on arrays."""
    if np.ndim(m):
        return np.log2(2.0 * np.abs(np.asarray(m, dtype=np.float64)) + 1.0)
    return math.log2(2 * abs(int(m)) + 1)


def gamma_length(n: int) -> int:
    """Elias-gamma codeword length for ``n >= 1``."""
    return 2 * (int(n).bit_length() - 1) + 1


def encoded_length(m: int) -> int:
    return gamma_length(zigzag(m) + 1)


@dataclass(frozen=True)
class BitString:
    """Packed bits, MSB first; pad bits in the final byte are zero."""

    data: bytes
    length: int

    def __post_init__(self):
        if self.length < 0 or len(self.data) != (self.length + 7) // 8:
            raise ValueError("byte count does not match bit length")

    def __len__(self) -> int:
        return self.length

    @cached_property
    def _text(self) -> str:
        if not self.data:
            return ""
        return format(int.from_bytes(self.data, "big"), f"0{len(self.data) * 8}b")[:self.length]

    def bit(self, i: int) -> int:
        if not 0 <= i < self.length:
            raise IndexError(i)
        return (self.data[i >> 3] >> (7 - (i & 7))) & 1

    def to01(self) -> str:
        return self._text

    @classmethod
    def from01(cls, text: str) -> "BitString":
        text = "".join(text.split())
        if set(text) - {"0", "1"}:
            raise ValueError(f"not a bit string: {text!r}")
        return _pack(text)

    def __add__(self, other: "BitString") -> "BitString":
        return _pack(self._text + other._text)


def _pack(text: str) -> BitString:
    n = len(text)
    if not n:
        return BitString(b"", 0)
    pad = -n % 8
    return BitString((int(text, 2) << pad).to_bytes((n + pad) // 8, "big"), n)


class BitWriter:
    """Accumulates bits; ``getvalue`` packs them once."""

    def __init__(self):
        self._parts: list[str] = []

    def write(self, value: int, width: int) -> None:
        """Append the low ``width`` bits of ``value``, MSB first."""
        if width > 0:
            self._parts.append(format(value & ((1 << width) - 1), f"0{width}b"))

    def extend(self, bits: BitString) -> None:
        self._parts.append(bits.to01())

    def extend01(self, text: str) -> None:
        self._parts.append(text)

    def getvalue(self) -> BitString:
        return _pack("".join(self._parts))


def _codeword(m: int) -> str:
    binary = format(zigzag(m) + 1, "b")
    return "0" * (len(binary) - 1) + binary


def _write_int(writer: BitWriter, m: int) -> None:
    writer.extend01(_codeword(m))


def encode_int(m: int) -> BitString:
    writer = BitWriter()
    _write_int(writer, m)
    return writer.getvalue()


def encode_ints(ints: Iterable[int]) -> BitString:
    writer = BitWriter()
    for m in ints:
        _write_int(writer, int(m))
    return writer.getvalue()


def _decode_at(text: str, cursor: int) -> tuple[int, int]:
    start = cursor
    one = text.find("1", cursor)
    if one < 0:
        raise TruncatedCodeword(start)
    zeros = one - cursor
    if zeros > 32:
        raise CodecError(f"codeword at bit offset {start} exceeds the 32-bit range")
    end = one + zeros + 1
    if end > len(text):
        raise TruncatedCodeword(start)
    k = int(text[one:end], 2) - 1
    if k > 2 * MAX_MAGNITUDE:
        raise CodecError(f"codeword at bit offset {start} exceeds the 32-bit range")
    return unzigzag(k), end


def decode_int(bits: BitString, cursor: int = 0) -> tuple[int, int]:
    """Decode one codeword starting at ``cursor``; returns (m, new cursor)."""
    if not 0 <= cursor <= bits.length:
        raise IndexError(cursor)
    return _decode_at(bits.to01(), cursor)


def decode_ints(bits: BitString, count: int | None = None, cursor: int = 0) -> tuple[list[int], int]:
    """Decode ``count`` codewords (or until the end when ``count`` is None)."""
    text = bits.to01()
    out = []
    while (count is None and cursor < bits.length) or (count is not None and len(out) < count):
        m, cursor = _decode_at(text, cursor)
        out.append(m)
    return out, cursor


def format_codewords(ints: Sequence[int]) -> str:
    return " ".join(_codeword(int(m)) for m in ints)
