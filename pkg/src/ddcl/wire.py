"""Byte-exact framing of discrete messages.

Layout (big-endian, 16-byte header)::

    offset  size  field
    0       1     magic = 0xD7
    1       1     version = 0x01
    2       4     edge_id
    6       4     timestep
    10      2     dim_count
    12      4     payload_bit_len
    16      ceil(payload_bit_len / 8)  payload, Elias-gamma codewords, MSB first,
                                       pad bits zero
"""

from __future__ import annotations

import socket
import struct
from typing import BinaryIO, Iterator

from . import codec
from .channel import DiscreteMessage

MAGIC = 0xD7
VERSION = 0x01
HEADER = struct.Struct(">BBIIHI")
HEADER_SIZE = HEADER.size  # 16


class WireError(ValueError):
    code = "wire_error"


class MagicMismatch(WireError):
    code = "magic_mismatch"


class VersionMismatch(WireError):
    code = "version_mismatch"


class Truncated(WireError):
    code = "truncated"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class NonzeroPadding(WireError):
    code = "nonzero_padding"


class PayloadMismatch(WireError):
    """Payload does not decode to exactly dim_count codewords in payload_bit_len bits."""

    code = "payload_mismatch"


class TrailingBytes(WireError):
    code = "trailing_bytes"


def encode_frame(message: DiscreteMessage, edge_id: int, timestep: int) -> bytes:
    if message.d > 0xFFFF:
        raise OverflowError(f"dim_count {message.d} exceeds 65535")
    bits = codec.encode_ints(message.ints)
    if bits.length > 0xFFFFFFFF:
        raise OverflowError("payload too long")
    header = HEADER.pack(MAGIC, VERSION, edge_id, timestep, message.d, bits.length)
    return header + bits.data


def _parse_header(buf: bytes) -> tuple[int, int, int, int]:
    if len(buf) < 1:
        raise Truncated("empty frame", 0)
    if buf[0] != MAGIC:
        raise MagicMismatch(f"bad magic byte 0x{buf[0]:02X}")
    if len(buf) < 2:
        raise Truncated("header cut short", len(buf))
    if buf[1] != VERSION:
        raise VersionMismatch(f"unsupported version 0x{buf[1]:02X}")
    if len(buf) < HEADER_SIZE:
        raise Truncated("header cut short", len(buf))
    _, _, edge_id, timestep, dim_count, bit_len = HEADER.unpack_from(buf)
    return edge_id, timestep, dim_count, bit_len


def frame_size(header: bytes) -> int:
    """Total frame length implied by a (complete) header."""
    *_, bit_len = _parse_header(header)
    return HEADER_SIZE + (bit_len + 7) // 8


def decode_frame(buf: bytes) -> tuple[DiscreteMessage, int, int]:
    buf = bytes(buf)
    edge_id, timestep, dim_count, bit_len = _parse_header(buf)
    n_bytes = (bit_len + 7) // 8
    end = HEADER_SIZE + n_bytes
    if len(buf) < end:
        raise Truncated("payload cut short", len(buf))
    if len(buf) > end:
        raise TrailingBytes(f"{len(buf) - end} bytes after frame end")
    payload = buf[HEADER_SIZE:end]
    pad = n_bytes * 8 - bit_len
    if pad and payload[-1] & ((1 << pad) - 1):
        raise NonzeroPadding("pad bits in the last payload byte are not zero")
    bits = codec.BitString(payload, bit_len)
    try:
        ints, cursor = codec.decode_ints(bits, dim_count)
    except codec.CodecError as exc:
        raise PayloadMismatch(str(exc)) from exc
    if cursor != bit_len:
        raise PayloadMismatch(f"{dim_count} codewords used {cursor} of {bit_len} payload bits")
    return DiscreteMessage.from_ints(ints), edge_id, timestep


# -- stream transport ----------------------------------------------------------


def _read_exact(stream: BinaryIO, n: int, offset: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = stream.read(n - got)
        if not chunk:
            raise Truncated("stream ended mid-frame", offset + got)
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frames(stream: BinaryIO) -> Iterator[tuple[DiscreteMessage, int, int]]:
    """Yield decoded frames from a byte stream until clean EOF."""
    offset = 0
    while True:
        first = stream.read(1)
        if not first:
            return
        header = first + _read_exact(stream, HEADER_SIZE - 1, offset + 1)
        size = frame_size(header)
        body = _read_exact(stream, size - HEADER_SIZE, offset + HEADER_SIZE)
        yield decode_frame(header + body)
        offset += size


def parse_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port:
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host, int(port)


def connect(addr: str, timeout: float = 10.0) -> socket.socket:
    return socket.create_connection(parse_addr(addr), timeout=timeout)


def listen(addr: str) -> socket.socket:
    server = socket.create_server(parse_addr(addr))
    return server
