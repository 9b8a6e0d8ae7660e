"""Independent reference implementations used as test oracles.

Nothing here imports the package under test: ticket parsing uses ``struct``,
hashing uses ``hashlib`` and signatures are checked with ``cryptography``
directly, so agreement between these functions and the package is evidence
rather than tautology.
"""

from __future__ import annotations

import hashlib
import struct
from fractions import Fraction
from math import lcm

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

MALFORMED = "MALFORMED"
OK = "OK"

KIND_AIK_GROUP, KIND_CSK, KIND_PAYLOAD = 1, 2, 3
VALID_KINDS = {1, 2, 3, 4, 5}
KEYKIND_SIGNING = 3
VALID_KEYKINDS = {1, 2, 3, 4, 5}


class Bad(Exception):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


class Cursor:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Bad("short")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def byte(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def blob(self) -> bytes:
        n = self.u32()
        if n > 1 << 24:
            raise Bad("huge")
        return self.take(n)

    def end(self) -> None:
        if self.pos != len(self.data):
            raise Bad("trailing")


def fields(data: bytes) -> list[bytes]:
    c = Cursor(data)
    n = c.u32()
    if n > len(data):
        raise Bad("count")
    out = [c.blob() for _ in range(n)]
    c.end()
    return out


def exactly(data: bytes, n: int) -> list[bytes]:
    out = fields(data)
    if len(out) != n:
        raise Bad("field count")
    return out


def parse_credential(data: bytes) -> tuple[int, bytes, bytes, bytes]:
    c = Cursor(data)
    if c.byte() != 1:
        raise Bad("version")
    kind = c.byte()
    if kind not in VALID_KINDS:
        raise Bad("kind")
    out = (kind, c.blob(), c.blob(), c.blob())
    c.end()
    return out


def parse_ticket(data: bytes) -> dict:
    c = Cursor(data)
    if c.byte() != 1 or c.byte() != 0x80:
        raise Bad("header")
    gid = c.u32()
    payload = c.blob()
    creds = [c.blob() for _ in range(3)]
    c.end()
    p, k, g = (parse_credential(x) for x in creds)
    return {"group_id": gid, "payload": payload, "cert_payload": p, "cert_csk": k, "cert_group": g}


def ed25519_ok(public: bytes, sig: bytes, msg: bytes) -> bool:
    if len(public) != 32:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(sig, msg)
    except (InvalidSignature, ValueError):
        return False
    return True


def cred_ok(cred, expected_kind: int, issuer: bytes | None) -> bool:
    kind, subject, issuer_pub, sig = cred
    if kind != expected_kind or (issuer is not None and issuer_pub != issuer):
        return False
    return ed25519_ok(issuer_pub, sig, sha256(bytes([kind]) + subject))


def parse_group_subject(subject: bytes) -> tuple[bytes, int]:
    aik, gid, attrs, serial = exactly(subject, 4)
    if len(gid) != 4 or len(serial) != 4:
        raise Bad("width")
    parts = fields(attrs)
    if len(parts) % 2:
        raise Bad("map")
    keys = [parts[i].decode() for i in range(0, len(parts), 2)]
    for i in range(1, len(parts), 2):
        parts[i].decode()
    if keys != sorted(keys) or len(set(keys)) != len(keys):
        raise Bad("map order")
    return aik, struct.unpack(">I", gid)[0]


def parse_certify_info(info: bytes) -> tuple[bytes, int]:
    c = Cursor(info)
    if c.byte() != 1 or c.byte() != 0x30:
        raise Bad("tag")
    public = c.blob()
    kind = c.byte()
    if kind not in VALID_KEYKINDS:
        raise Bad("keykind")
    c.byte()  # scheme
    constraint = c.blob()
    if constraint:
        sel, comp = exactly(constraint, 2)
        if len(comp) != 32:
            raise Bad("composite")
        values = []
        for f in fields(sel):
            if len(f) != 4:
                raise Bad("width")
            values.append(struct.unpack(">I", f)[0])
        if values != sorted(set(values)):
            raise Bad("set")
    c.blob()  # nonce
    c.end()
    return public, kind


def expected_outcome(ticket_bytes: bytes, group_keys: dict[int, bytes]) -> str:
    """What a correct receiving system must answer for these bytes.

    Returns ``MALFORMED``, ``OK`` or the name of the first failing link.
    """
    try:
        t = parse_ticket(ticket_bytes)
    except (Bad, UnicodeDecodeError):
        return MALFORMED
    key = group_keys.get(t["group_id"])
    if key is None:
        return "UnknownGroup"
    if not cred_ok(t["cert_group"], KIND_AIK_GROUP, key):
        return "BadGroupCredential"
    try:
        aik, gid = parse_group_subject(t["cert_group"][1])
    except (Bad, UnicodeDecodeError):
        return "BadGroupCredential"
    if gid != t["group_id"]:
        return "BadGroupCredential"
    if not cred_ok(t["cert_csk"], KIND_CSK, aik):
        return "BadCskCredential"
    try:
        csk, keykind = parse_certify_info(t["cert_csk"][1])
    except Bad:
        return "BadCskCredential"
    if keykind != KEYKIND_SIGNING:
        return "BadCskCredential"
    if not cred_ok(t["cert_payload"], KIND_PAYLOAD, csk):
        return "BadPayloadSignature"
    if t["cert_payload"][1] != sha256(t["payload"]):
        return "PayloadMismatch"
    return OK


def ticket_aik(ticket_bytes: bytes) -> bytes:
    return parse_group_subject(parse_ticket(ticket_bytes)["cert_group"][1])[0]


def ack_ok(ack_bytes: bytes, rs_public: bytes, payload: bytes, aik_public: bytes) -> bool:
    kind, subject, issuer, sig = parse_credential(ack_bytes)
    return (
        kind == KIND_PAYLOAD
        and issuer == rs_public
        and subject == sha256(payload + sha256(aik_public))
        and ed25519_ok(issuer, sig, sha256(bytes([kind]) + subject))
    )


def splice(ticket_a: bytes, ticket_b: bytes, mask: int) -> bytes:
    """Rebuild a ticket taking component i from ``b`` when bit i of mask is set.

    Components: 0 payload, 1 cert_payload, 2 cert_csk, 3 cert_group (with its
    group id).
    """
    ca, cb = Cursor(ticket_a), Cursor(ticket_b)
    parts = []
    for c in (ca, cb):
        c.take(2)
        gid = c.take(4)
        parts.append([c.blob() for _ in range(4)] + [gid])
    pick = [parts[(mask >> i) & 1][i] for i in range(4)]
    gid = parts[(mask >> 3) & 1][4]
    return b"\x01\x80" + gid + b"".join(struct.pack(">I", len(p)) + p for p in pick)


def weighted_mean(pairs: list[tuple[int, Fraction]]) -> Fraction:
    """Brute force: scale weights to integers and average repeated scores."""
    scale = lcm(*(w.denominator for _, w in pairs))
    expanded = []
    for score, w in pairs:
        expanded.extend([score] * int(w * scale))
    return Fraction(sum(expanded), len(expanded))


def split_amount(amount: int, shares: dict[str, Fraction]) -> dict[str, int]:
    """Non-CP roles get floor(amount * w) by integer division; CP the rest."""
    out = {r: (amount * w.numerator) // w.denominator for r, w in shares.items() if r != "CP"}
    out["CP"] = amount - sum(out.values())
    return out


def pcr_values(history: list[tuple[int, bytes]], count: int) -> list[bytes]:
    """Replay ``(index, measurement digest)`` extends from an all-zero bank."""
    pcrs = [bytes(32)] * count
    for index, measurement in history:
        pcrs[index] = sha256(pcrs[index] + measurement)
    return pcrs


def pcr_composite(history: list[tuple[int, bytes]], selection, count: int = 24) -> bytes:
    pcrs = pcr_values(history, count)
    return sha256(b"".join(pcrs[i] for i in sorted(set(selection))))
