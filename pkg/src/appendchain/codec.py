"""Canonical byte encoding shared by hashing, signing, journaling and the wire.

Every structure that is hashed, signed, persisted or shipped between nodes is
serialized with the same deterministic rules:

* fields appear in declaration order,
* unsigned integers and timestamps (milliseconds) are 8-byte big-endian,
* signed integers are 8-byte big-endian two's complement,
* byte strings and UTF-8 text carry a 4-byte big-endian length prefix,
* optional fields carry a 1-byte presence flag (0x00 absent, 0x01 present),
* digests are raw 32-byte values with no prefix,
* element counts for sequences are 4-byte big-endian.

The encoding is injective: two structures of the same type encode equal only
if every field is equal.  Decoding is strict — trailing garbage, truncated
input or out-of-range values raise :class:`DecodeError` and never crash the
caller with anything else.
"""

from __future__ import annotations

import struct

DIGEST_SIZE = 32

_U8 = struct.Struct(">B")
_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")
_I64 = struct.Struct(">q")

U64_MAX = 2**64 - 1


class DecodeError(ValueError):
    """Raised when a byte string cannot be decoded as the expected structure."""


def pack_u8(value: int) -> bytes:
    return _U8.pack(value)


def pack_u32(value: int) -> bytes:
    return _U32.pack(value)


def pack_u64(value: int) -> bytes:
    return _U64.pack(value)


def pack_i64(value: int) -> bytes:
    return _I64.pack(value)


def pack_bytes(value: bytes) -> bytes:
    """Length-prefixed byte string."""
    return _U32.pack(len(value)) + value


def pack_text(value: str) -> bytes:
    """Length-prefixed UTF-8 text."""
    return pack_bytes(value.encode("utf-8"))


def pack_digest(value: bytes) -> bytes:
    if len(value) != DIGEST_SIZE:
        raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(value)}")
    return value


def pack_optional_coords(coords: tuple[int, int] | None) -> bytes:
    """Presence-flagged pair of signed micro-degree coordinates."""
    if coords is None:
        return b"\x00"
    lat, lon = coords
    return b"\x01" + _I64.pack(lat) + _I64.pack(lon)


class Reader:
    """Strict sequential decoder over a byte string.

    Bounds are checked before every read; a short buffer raises
    :class:`DecodeError` without allocating for the missing payload.
    """

    __slots__ = ("_data", "_pos")

    def __init__(self, data: bytes, pos: int = 0):
        self._data = data
        self._pos = pos

    @property
    def pos(self) -> int:
        return self._pos

    def remaining(self) -> int:
        return len(self._data) - self._pos

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise DecodeError(
                f"truncated input: wanted {n} bytes at offset {self._pos}, "
                f"have {len(self._data) - self._pos}"
            )
        chunk = self._data[self._pos:end]
        self._pos = end
        return chunk

    def read_u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def read_u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def read_u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def read_i64(self) -> int:
        return _I64.unpack(self._take(8))[0]

    def read_bytes(self) -> bytes:
        length = self.read_u32()
        if length > self.remaining():
            raise DecodeError(
                f"length prefix {length} exceeds remaining {self.remaining()} bytes"
            )
        return self._take(length)

    def read_text(self) -> str:
        raw = self.read_bytes()
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(f"invalid UTF-8 text field: {exc}") from None

    def read_digest(self) -> bytes:
        return self._take(DIGEST_SIZE)

    def read_optional_coords(self) -> tuple[int, int] | None:
        flag = self.read_u8()
        if flag == 0:
            return None
        if flag != 1:
            raise DecodeError(f"invalid presence flag 0x{flag:02x}")
        return (self.read_i64(), self.read_i64())

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(
                f"{len(self._data) - self._pos} trailing bytes after structure"
            )


# Wire frame type bytes.  The first byte of every frame names the message;
# the rest is the canonical encoding of its payload.

# Consensus traffic (gateway <-> gateway)
MSG_PRE_PREPARE = 0x10
MSG_PREPARE = 0x11
MSG_COMMIT = 0x12
MSG_WITNESS_REQUEST = 0x13
MSG_WITNESS_VOTE = 0x14
MSG_DECISION = 0x15
MSG_PROPOSE_KEY = 0x16

# Replication traffic (gateway <-> gateway)
MSG_PEER_TRANSACTION = 0x20
MSG_PEER_BLOCK = 0x21
MSG_SYNC_REQUEST = 0x22
MSG_SYNC_RESPONSE = 0x23

# Device traffic (device <-> home gateway)
MSG_CONNECT = 0x30
MSG_DATA = 0x31
MSG_NEW_KEY_REQUEST = 0x32
MSG_NEW_KEY_RESPONSE = 0x33
MSG_QUERY = 0x34
MSG_STATUS = 0x35
MSG_QUERY_RESULT = 0x36

# Transport bookkeeping (socket mode only)
MSG_HELLO = 0x40

# Journal record types
JOURNAL_HEADER = 0x01
JOURNAL_TRANSACTION = 0x02
