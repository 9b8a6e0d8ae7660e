"""Length-prefixed binary framing shared by every on-wire and on-disk format.

All multi-byte integers are big-endian. A "field" is a 32-bit length followed by
that many bytes. Decoders are strict: short reads and trailing bytes raise
:class:`WireError`.
"""

from __future__ import annotations

import struct

MAX_FIELD = 1 << 24

_U32 = struct.Struct(">I")


class WireError(ValueError):
    """Raised on truncated, oversized or otherwise malformed framing."""


def u8(value: int) -> bytes:
    if not 0 <= value <= 0xFF:
        raise WireError(f"u8 out of range: {value}")
    return bytes((value,))


def u32(value: int) -> bytes:
    if not 0 <= value <= 0xFFFFFFFF:
        raise WireError(f"u32 out of range: {value}")
    return _U32.pack(value)


def field(data: bytes) -> bytes:
    if len(data) > MAX_FIELD:
        raise WireError("field too large")
    return _U32.pack(len(data)) + bytes(data)


def pack_fields(*fields: bytes) -> bytes:
    """Count-prefixed list of fields; the generic message body encoding."""
    return u32(len(fields)) + b"".join(field(f) for f in fields)


def unpack_fields(data: bytes, expected: int | None = None) -> list[bytes]:
    r = Reader(data)
    count = r.u32()
    if expected is not None and count != expected:
        raise WireError(f"expected {expected} fields, got {count}")
    if count > len(data):
        raise WireError("implausible field count")
    out = [r.field() for _ in range(count)]
    r.done()
    return out


class Reader:
    """Cursor over a byte string with strict bounds checks."""

    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise WireError("truncated input")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def field(self) -> bytes:
        data, pos = self.data, self.pos
        if pos + 4 > len(data):
            raise WireError("truncated input")
        n = int.from_bytes(data[pos:pos + 4], "big")
        if n > MAX_FIELD:
            raise WireError("field too large")
        end = pos + 4 + n
        if end > len(data):
            raise WireError("truncated input")
        self.pos = end
        return data[pos + 4:end]

    def done(self) -> None:
        if self.pos != len(self.data):
            raise WireError(f"{len(self.data) - self.pos} trailing bytes")


def encode_str_map(mapping: dict[str, str]) -> bytes:
    """Canonical encoding of a string map: entries sorted by key."""
    parts = []
    for key in sorted(mapping):
        parts.append(key.encode())
        parts.append(str(mapping[key]).encode())
    return pack_fields(*parts)


def decode_str_map(data: bytes) -> dict[str, str]:
    parts = unpack_fields(data)
    if len(parts) % 2:
        raise WireError("odd number of map fields")
    try:
        items = [(parts[i].decode(), parts[i + 1].decode()) for i in range(0, len(parts), 2)]
    except UnicodeDecodeError as exc:
        raise WireError("map entry is not utf-8") from exc
    keys = [k for k, _ in items]
    if keys != sorted(keys) or len(set(keys)) != len(keys):
        raise WireError("map keys not canonical")
    return dict(items)


def encode_int_set(values) -> bytes:
    return pack_fields(*(u32(v) for v in sorted(set(values))))


def decode_int_set(data: bytes) -> tuple[int, ...]:
    out = []
    for f in unpack_fields(data):
        if len(f) != 4:
            raise WireError("bad integer width")
        out.append(_U32.unpack(f)[0])
    if out != sorted(set(out)):
        raise WireError("set not canonical")
    return tuple(out)


def decode_u32(data: bytes) -> int:
    if len(data) != 4:
        raise WireError("bad integer width")
    return _U32.unpack(data)[0]
