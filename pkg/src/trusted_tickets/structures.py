"""TPM data structures that cross the chip boundary: key kinds, PCR
constraints, certify-info records and measurement-log entries."""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .crypto import Digest, hash_bytes, hash_concat
from .wire import Reader, WireError, decode_int_set, encode_int_set, field, pack_fields, u8, unpack_fields

PCR_SIZE = 32
ZERO_PCR = bytes(PCR_SIZE)

CERTIFY_INFO_TAG = 0x30
_VERSION = 1


class KeyKind(enum.IntEnum):
    EK = 1
    AIK = 2
    SIGNING = 3
    BINDING = 4
    STORAGE = 5


def composite(values: list[bytes] | tuple[bytes, ...]) -> Digest:
    """Composite of PCR values already ordered by ascending index."""
    return hash_concat(*values)


def extend_value(old: bytes, measurement: bytes) -> bytes:
    return hash_bytes(old + measurement).bytes


@dataclass(frozen=True)
class PcrConstraint:
    selection: tuple[int, ...]
    expected_composite: Digest

    def __post_init__(self):
        object.__setattr__(self, "selection", tuple(sorted(set(self.selection))))

    def encode(self) -> bytes:
        return pack_fields(encode_int_set(self.selection), self.expected_composite.bytes)

    @classmethod
    def decode(cls, data: bytes) -> "PcrConstraint":
        sel, comp = unpack_fields(data, 2)
        try:
            return cls(decode_int_set(sel), Digest(comp))
        except ValueError as exc:
            raise WireError(str(exc)) from exc


def encode_optional_constraint(c: PcrConstraint | None) -> bytes:
    return b"" if c is None else c.encode()


def decode_optional_constraint(data: bytes) -> PcrConstraint | None:
    return None if data == b"" else PcrConstraint.decode(data)


@dataclass(frozen=True)
class CertifyInfo:
    """What an AIK vouches for when it certifies another TPM key."""

    public: bytes
    key_kind: KeyKind
    scheme_id: int
    pcr_constraint: PcrConstraint | None
    nonce: bytes

    def encode(self) -> bytes:
        return (
            u8(_VERSION)
            + u8(CERTIFY_INFO_TAG)
            + field(self.public)
            + u8(int(self.key_kind))
            + u8(self.scheme_id)
            + field(encode_optional_constraint(self.pcr_constraint))
            + field(self.nonce)
        )

    @classmethod
    def decode(cls, data: bytes) -> "CertifyInfo":
        r = Reader(data)
        if r.u8() != _VERSION or r.u8() != CERTIFY_INFO_TAG:
            raise WireError("not a certify-info record")
        public = r.field()
        try:
            kind = KeyKind(r.u8())
        except ValueError as exc:
            raise WireError("bad key kind") from exc
        scheme = r.u8()
        constraint = decode_optional_constraint(r.field())
        nonce = r.field()
        r.done()
        return cls(public, kind, scheme, constraint, nonce)


@dataclass(frozen=True)
class LogEntry:
    pcr_index: int
    measurement: bytes
    description: str

    def encode(self) -> bytes:
        return pack_fields(u8(self.pcr_index), self.measurement, self.description.encode())

    @classmethod
    def decode(cls, data: bytes) -> "LogEntry":
        idx, m, desc = unpack_fields(data, 3)
        if len(idx) != 1:
            raise WireError("bad pcr index")
        return cls(idx[0], m, desc.decode("utf-8", errors="strict"))


def encode_log(entries) -> bytes:
    return pack_fields(*(e.encode() for e in entries))


def decode_log(data: bytes) -> list[LogEntry]:
    return [LogEntry.decode(f) for f in unpack_fields(data)]


def replay_log(entries, selection) -> Digest:
    """Recompute the composite over ``selection`` from a boot-time log."""
    values = {i: ZERO_PCR for i in selection}
    for e in entries:
        if e.pcr_index in values:
            values[e.pcr_index] = extend_value(values[e.pcr_index], e.measurement)
    return composite([values[i] for i in sorted(values)])


@dataclass(frozen=True)
class Quote:
    selection: tuple[int, ...]
    composite: Digest
    log: tuple[LogEntry, ...]
    signature: bytes

    def encode(self) -> bytes:
        return pack_fields(
            encode_int_set(self.selection), self.composite.bytes, encode_log(self.log), self.signature
        )

    @classmethod
    def decode(cls, data: bytes) -> "Quote":
        sel, comp, log, sig = unpack_fields(data, 4)
        try:
            return cls(decode_int_set(sel), Digest(comp), tuple(decode_log(log)), sig)
        except ValueError as exc:
            raise WireError(str(exc)) from exc


def quote_message(composite_digest: Digest, nonce: bytes) -> bytes:
    return hash_bytes(composite_digest.bytes + nonce).bytes
