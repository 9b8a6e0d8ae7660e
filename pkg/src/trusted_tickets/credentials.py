"""Credentials, tickets and chain verification.

A credential ``Cert(entity, issuer)`` is the issuer's public key plus the
issuer's signature over ``hash(kind || entity)``. A ticket is a payload with
the chain ``Cert(P, CSK)``, ``Cert(CSK, AIK)``, ``Cert(AIK, g)``.

Wire format (all credentials and tickets start with version ``0x01``)::

    credential := 0x01 kind:u8 field(subject) field(issuer_public) field(signature)
    ticket     := 0x01 0x80 group_id:u32 field(payload)
                  field(cert_payload) field(cert_csk) field(cert_group)

where ``field(x)`` is a big-endian u32 length followed by ``x``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

from . import crypto
from .crypto import Digest, hash_bytes
from .errors import ChainReject, MalformedEncoding
from .structures import CertifyInfo, KeyKind, PcrConstraint
from .wire import (
    Reader,
    WireError,
    decode_str_map,
    decode_u32,
    encode_str_map,
    field,
    pack_fields,
    u8,
    u32,
    unpack_fields,
)

VERSION = 0x01
TICKET_TAG = 0x80


class SubjectKind(enum.IntEnum):
    AIK_GROUP = 1
    CSK = 2
    PAYLOAD = 3
    EK = 4
    BINDING_KEY = 5


class RejectReason(str, enum.Enum):
    UNKNOWN_GROUP = "UnknownGroup"
    BAD_GROUP_CREDENTIAL = "BadGroupCredential"
    BAD_CSK_CREDENTIAL = "BadCskCredential"
    BAD_PAYLOAD_SIGNATURE = "BadPayloadSignature"
    PAYLOAD_MISMATCH = "PayloadMismatch"


def signed_message(kind: int, subject: bytes) -> bytes:
    return hash_bytes(u8(int(kind)) + subject).bytes


@dataclass(frozen=True)
class Credential:
    subject_kind: SubjectKind
    subject_bytes: bytes
    issuer_public: bytes
    signature: bytes

    def encode(self) -> bytes:
        return (
            u8(VERSION)
            + u8(int(self.subject_kind))
            + field(self.subject_bytes)
            + field(self.issuer_public)
            + field(self.signature)
        )


@dataclass(frozen=True)
class Ticket:
    payload: bytes
    cert_payload: Credential
    cert_csk: Credential
    cert_group: Credential
    group_id: int

    def encode(self) -> bytes:
        return (
            u8(VERSION)
            + u8(TICKET_TAG)
            + u32(self.group_id)
            + field(self.payload)
            + field(self.cert_payload.encode())
            + field(self.cert_csk.encode())
            + field(self.cert_group.encode())
        )


@dataclass(frozen=True)
class GroupSubject:
    """Entity certified by a group credential; names no platform."""

    aik_public: bytes
    group_id: int
    attributes: dict
    serial: int

    def encode(self) -> bytes:
        return pack_fields(
            self.aik_public, u32(self.group_id), encode_str_map(self.attributes), u32(self.serial)
        )

    @classmethod
    def decode(cls, data: bytes) -> "GroupSubject":
        aik, gid, attrs, serial = unpack_fields(data, 4)
        return cls(aik, decode_u32(gid), decode_str_map(attrs), decode_u32(serial))


@dataclass(frozen=True)
class BindingSubject:
    binding_public: bytes
    pcr_constraint: PcrConstraint

    def encode(self) -> bytes:
        return pack_fields(self.binding_public, self.pcr_constraint.encode())

    @classmethod
    def decode(cls, data: bytes) -> "BindingSubject":
        pub, constraint = unpack_fields(data, 2)
        return cls(pub, PcrConstraint.decode(constraint))


@dataclass(frozen=True)
class VerifiedTicket:
    group_id: int
    payload: bytes
    aik_digest: Digest
    attributes: dict
    serial: int
    aik_public: bytes


def _decode_credential(r: Reader) -> Credential:
    if r.u8() != VERSION:
        raise WireError("bad version")
    try:
        kind = SubjectKind(r.u8())
    except ValueError as exc:
        raise WireError("bad subject kind") from exc
    subject, issuer, sig = r.field(), r.field(), r.field()
    return Credential(kind, subject, issuer, sig)


def decode_credential(data: bytes) -> Credential:
    try:
        r = Reader(data)
        cred = _decode_credential(r)
        r.done()
    except WireError as exc:
        raise MalformedEncoding(str(exc)) from exc
    return cred


def decode_ticket(data: bytes) -> Ticket:
    try:
        r = Reader(data)
        if r.u8() != VERSION:
            raise WireError("bad version")
        if r.u8() != TICKET_TAG:
            raise WireError("not a ticket")
        group_id = r.u32()
        payload = r.field()
        creds = [r.field() for _ in range(3)]
        r.done()
    except WireError as exc:
        raise MalformedEncoding(str(exc)) from exc
    cert_payload, cert_csk, cert_group = (decode_credential(c) for c in creds)
    return Ticket(payload, cert_payload, cert_csk, cert_group, group_id)


def encode(obj: Credential | Ticket) -> bytes:
    return obj.encode()


def decode(data: bytes) -> Credential | Ticket:
    if len(data) >= 2 and data[0] == VERSION and data[1] == TICKET_TAG:
        return decode_ticket(data)
    return decode_credential(data)


def make_credential(kind: SubjectKind, subject: bytes, issuer_private: bytes, issuer_public: bytes) -> Credential:
    sig = crypto.sign(issuer_private, signed_message(kind, subject))
    return Credential(SubjectKind(kind), bytes(subject), bytes(issuer_public), sig)


def verify_credential(cred: Credential, expected_issuer_public: bytes | None = None) -> bool:
    if expected_issuer_public is not None and cred.issuer_public != expected_issuer_public:
        return False
    return crypto.verify(
        cred.issuer_public, cred.signature, signed_message(cred.subject_kind, cred.subject_bytes)
    )


def verify_ticket_chain(ticket: Ticket, known_group_keys: Mapping[int, bytes]) -> VerifiedTicket:
    """Check all three links, raising :class:`ChainReject` at the first bad one."""
    group_key = known_group_keys.get(ticket.group_id)
    if group_key is None:
        raise ChainReject(RejectReason.UNKNOWN_GROUP)

    g = ticket.cert_group
    if g.subject_kind != SubjectKind.AIK_GROUP or not verify_credential(g, group_key):
        raise ChainReject(RejectReason.BAD_GROUP_CREDENTIAL)
    try:
        group_subject = GroupSubject.decode(g.subject_bytes)
    except WireError:
        raise ChainReject(RejectReason.BAD_GROUP_CREDENTIAL) from None
    if group_subject.group_id != ticket.group_id:
        raise ChainReject(RejectReason.BAD_GROUP_CREDENTIAL)

    c = ticket.cert_csk
    if c.subject_kind != SubjectKind.CSK or not verify_credential(c, group_subject.aik_public):
        raise ChainReject(RejectReason.BAD_CSK_CREDENTIAL)
    try:
        info = CertifyInfo.decode(c.subject_bytes)
    except WireError:
        raise ChainReject(RejectReason.BAD_CSK_CREDENTIAL) from None
    if info.key_kind != KeyKind.SIGNING:
        raise ChainReject(RejectReason.BAD_CSK_CREDENTIAL)

    p = ticket.cert_payload
    if p.subject_kind != SubjectKind.PAYLOAD or not verify_credential(p, info.public):
        raise ChainReject(RejectReason.BAD_PAYLOAD_SIGNATURE)
    if p.subject_bytes != hash_bytes(ticket.payload).bytes:
        raise ChainReject(RejectReason.PAYLOAD_MISMATCH)

    return VerifiedTicket(
        group_id=ticket.group_id,
        payload=ticket.payload,
        aik_digest=hash_bytes(group_subject.aik_public),
        attributes=dict(group_subject.attributes),
        serial=group_subject.serial,
        aik_public=group_subject.aik_public,
    )


def ack_subject(payload: bytes, aik_digest: Digest) -> bytes:
    return hash_bytes(payload + aik_digest.bytes).bytes


def make_ack(rs_keypair, payload: bytes, aik_digest: Digest) -> Credential:
    return make_credential(
        SubjectKind.PAYLOAD, ack_subject(payload, aik_digest), rs_keypair.private, rs_keypair.public
    )


def verify_ack(ack: Credential, rs_public: bytes, payload: bytes, aik_digest: Digest) -> bool:
    return (
        ack.subject_kind == SubjectKind.PAYLOAD
        and ack.subject_bytes == ack_subject(payload, aik_digest)
        and verify_credential(ack, rs_public)
    )
