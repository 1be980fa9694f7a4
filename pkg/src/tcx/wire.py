"""Canonical binary encoding used by every on-wire and on-disk structure.

A record is a sequence of fields, each written as a 4-byte big-endian length
followed by the field bytes, in declaration order. Integers are fixed-width
big-endian. Nested structures are encoded to bytes first and embedded as a
single field, so any structure can be re-encoded bit-exactly after decoding.
"""

from __future__ import annotations

import struct
from typing import Iterable, List, Optional, Sequence

from .errors import WireError

MAX_FIELD = 1 << 30


def encode_fields(*fields: bytes) -> bytes:
    out = bytearray()
    for f in fields:
        f = bytes(f)
        out += struct.pack(">I", len(f))
        out += f
    return bytes(out)


def decode_fields(data: bytes, count: Optional[int] = None) -> List[bytes]:
    """Split ``data`` into its length-prefixed fields.

    Raises WireError on truncation, trailing garbage, or a field count other
    than ``count`` (when given).
    """
    data = bytes(data)
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise WireError("truncated length prefix")
        (n,) = struct.unpack_from(">I", data, pos)
        pos += 4
        if n > MAX_FIELD or pos + n > len(data):
            raise WireError("field overruns buffer")
        fields.append(data[pos : pos + n])
        pos += n
    if count is not None and len(fields) != count:
        raise WireError(f"expected {count} fields, got {len(fields)}")
    return fields


def encode_list(items: Iterable[bytes]) -> bytes:
    return encode_fields(*items)


def decode_list(data: bytes) -> List[bytes]:
    return decode_fields(data)


def u8(v: int) -> bytes:
    return struct.pack(">B", v)


def u32(v: int) -> bytes:
    return struct.pack(">I", v)


def u64(v: int) -> bytes:
    return struct.pack(">Q", v)


def _fixed(data: bytes, size: int, fmt: str) -> int:
    if len(data) != size:
        raise WireError(f"expected {size}-byte integer, got {len(data)} bytes")
    return struct.unpack(fmt, data)[0]


def read_u8(data: bytes) -> int:
    return _fixed(data, 1, ">B")


def read_u32(data: bytes) -> int:
    return _fixed(data, 4, ">I")


def read_u64(data: bytes) -> int:
    return _fixed(data, 8, ">Q")


def text(s: str) -> bytes:
    return s.encode("utf-8")


def read_text(data: bytes) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise WireError("invalid UTF-8") from exc


def expect_len(data: bytes, size: int, what: str) -> bytes:
    if len(data) != size:
        raise WireError(f"{what}: expected {size} bytes, got {len(data)}")
    return data


def encode_str_list(items: Sequence[str]) -> bytes:
    return encode_fields(*(text(s) for s in items))


def decode_str_list(data: bytes) -> List[str]:
    return [read_text(f) for f in decode_fields(data)]
