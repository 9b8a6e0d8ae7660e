"""Push-content protection against a curious network operator.

Two delivery variants run over the same device model:

* **seal** -- for every message the sync server challenges the device for a
  fresh quote, checks the platform state, encrypts the content to an
  AIK-certified ephemeral key and the device stores it sealed to its PCRs;
* **bind** -- once, during roll-out, the device gets a PCR-constrained binding
  key certified by the PCA; afterwards content is simply encrypted to that
  key and no further attestation takes place.

A third mode lets a device obtain a delivery session by redeeming a ticket
whose payload carries its binding key and certificate; group attributes set
the session priority.

All traffic between the sync server and the device crosses the NOC segment,
where a passive relay records it. Plaintext only ever appears on the
device-local segment.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field

from .. import crypto
from ..agent import HeldTicket, TrustedAgent
from ..credentials import (
    BindingSubject,
    Credential,
    GroupSubject,
    SubjectKind,
    VerifiedTicket,
    decode_credential,
    verify_credential,
)
from ..crypto import Rng, hash_bytes
from ..errors import BadBindingCredential, BadQuote, MalformedEncoding, Rejected, UnknownTicket
from ..pca import BindingEvidence
from ..protocol import Flow, Request, Segment, Service, Transport
from ..receiving import ReceivingSystem
from ..structures import ZERO_PCR, CertifyInfo, KeyKind, PcrConstraint, Quote, composite, extend_value, replay_log
from ..tpm import TpmError, verify_quote
from ..wire import WireError, decode_int_set, decode_u32, encode_int_set, pack_fields, u32, unpack_fields

BOOT_SELECTION = (0, 1, 2)
REFERENCE_BOOT = (
    (0, b"firmware v1.4", "firmware"),
    (1, b"bootloader v2.0", "bootloader"),
    (2, b"handset os 7.1", "os"),
)


def reference_constraint(boot=REFERENCE_BOOT, selection=BOOT_SELECTION) -> PcrConstraint:
    """PCR state a correctly booted device reaches, computed from golden values."""
    values = {i: ZERO_PCR for i in selection}
    for index, image, _ in boot:
        if index in values:
            values[index] = extend_value(values[index], hash_bytes(image).bytes)
    return PcrConstraint(tuple(sorted(values)), composite([values[i] for i in sorted(values)]))


# -- device -------------------------------------------------------------------


class DeviceStore(Service):
    """The device's local storage and the messaging app reading from it."""

    def __init__(self, name: str):
        self.party = name
        self.blobs: list[tuple[str, bytes]] = []
        self.delivered: list[bytes] = []

    def on_store(self, f, sender):
        mode, blob = f
        self.blobs.append((mode.decode(), blob))
        return "STORED", [u32(len(self.blobs) - 1)]

    def on_deliver(self, f, sender):
        (plaintext,) = f
        self.delivered.append(plaintext)
        return "DELIVERED", [u32(len(self.delivered) - 1)]


class Device(Service):
    """A handset: trusted agent plus the endpoints the sync server talks to."""

    def __init__(self, agent: TrustedAgent, transport: Transport):
        self.agent = agent
        self.party = agent.name
        self.tpm = agent.tpm
        self.transport = transport
        self.store = DeviceStore(agent.name + ".local")
        self.attestation: HeldTicket | None = None
        self.binding_handle: int | None = None
        self.binding_public: bytes | None = None
        self.binding_credential: Credential | None = None
        self._ephemeral: dict[bytes, int] = {}

    @property
    def name(self) -> str:
        return self.agent.name

    def boot(self, boot=REFERENCE_BOOT) -> None:
        for index, image, desc in boot:
            self.tpm.extend_pcr(index, hash_bytes(image), desc)

    def tamper(self, index: int = 2, image: bytes = b"rootkit") -> None:
        """Change the platform state after the fact."""
        self.tpm.extend_pcr(index, hash_bytes(image), "unexpected")

    def _local(self, kind: str, *fields: bytes) -> list[bytes]:
        reply = self.transport.call(self.name, self.store.party, Segment.DEVICE_LOCAL, kind, pack_fields(*fields))
        return reply.fields(reply.kind)

    # -- seal variant: device side --------------------------------------

    def on_attest_request(self, f, sender):
        nonce, selection = f
        if self.attestation is None:
            raise BadQuote("device has no attestation identity")
        sel = decode_int_set(selection)
        aik = self.attestation.aik_handle
        quote = self.tpm.quote(aik, nonce, sel)
        proof = self.agent._proof
        handle = self.tpm.load_key(self.tpm.create_binding_key(proof, self.tpm.current_constraint(sel)))
        info, sig = self.tpm.certify_key(aik, handle, nonce)
        self._ephemeral[nonce] = handle
        return "QUOTE", [quote.encode(), self.attestation.credential.encode(), self.tpm.public_key(handle), info, sig]

    def on_content(self, f, sender):
        nonce, ciphertext = f
        handle = self._ephemeral.pop(nonce, None)
        if handle is None:
            raise UnknownTicket("no attestation session for this nonce")
        try:
            plaintext = self.tpm.unbind(handle, ciphertext)
        except (TpmError, crypto.CryptoError) as exc:
            raise BadQuote(f"cannot open content: {exc}") from exc
        finally:
            self.tpm.flush_key(handle)
        blob = self.tpm.seal(plaintext, BOOT_SELECTION)
        (index,) = self._local("STORE", b"sealed", blob)
        return "STORED", [index]

    # -- bind variant: device side --------------------------------------

    def provision_flow(self, pca: str, syncs: str) -> Flow:
        """Roll-out: get a PCR-bound binding key certified, register it."""
        if self.attestation is None:
            raise BadQuote("device has no attestation identity")
        reply = yield Request(self.name, pca, Segment.TA_PCA, "NONCE_REQUEST", pack_fields())
        (nonce,) = reply.fields("NONCE", 1)
        aik = self.attestation.aik_handle
        constraint = self.tpm.current_constraint(BOOT_SELECTION)
        handle = self.tpm.load_key(self.tpm.create_binding_key(self.agent._proof, constraint))
        info, sig = self.tpm.certify_key(aik, handle, nonce)
        quote = self.tpm.quote(aik, nonce, BOOT_SELECTION)
        evidence = BindingEvidence(self.attestation.aik_public, quote, info, sig)
        public = self.tpm.public_key(handle)
        reply = yield Request(
            self.name,
            pca,
            Segment.TA_PCA,
            "QUOTE",
            pack_fields(public, constraint.encode(), nonce, *evidence.fields()),
        )
        cred_bytes, _ca_public = reply.fields("BINDING_CREDENTIAL", 2)
        self.binding_handle, self.binding_public = handle, public
        self.binding_credential = decode_credential(cred_bytes)
        reply = yield Request(
            self.name, syncs, Segment.NOC, "REGISTER_BINDING", pack_fields(self.name.encode(), public, cred_bytes)
        )
        reply.fields("REGISTERED", 1)
        return self.binding_credential

    def on_bound_content(self, f, sender):
        (blob,) = f
        (index,) = self._local("STORE", b"bound", blob)
        return "STORED", [index]

    # -- reading ----------------------------------------------------------

    def read_message(self, index: int) -> bytes:
        """Open a stored message and hand it to the app; fails on state drift."""
        mode, blob = self.store.blobs[index]
        if mode == "sealed":
            plaintext = self.tpm.unseal(blob)
        else:
            plaintext = self.tpm.unbind(self.binding_handle, blob)
        self._local("DELIVER", plaintext)
        return plaintext

    def ticket_payload(self) -> bytes:
        return pack_fields(self.name.encode(), self.binding_public, self.binding_credential.encode())


# -- sync server ---------------------------------------------------------------


@dataclass(order=True)
class Session:
    sort_key: tuple[int, int]
    device: str = field(compare=False)
    binding_public: bytes = field(compare=False)
    group_id: int = field(compare=False)


def decode_access_payload(payload: bytes) -> tuple[str, bytes, Credential]:
    try:
        device, public, cred = unpack_fields(payload, 3)
        return device.decode("utf-8"), public, decode_credential(cred)
    except (WireError, UnicodeDecodeError, MalformedEncoding) as exc:
        raise BadBindingCredential(f"unreadable access payload: {exc}") from exc


class SyncServer(Service):
    """Pushes content to devices; optionally admits sessions by ticket."""

    party = "SYNCS"

    def __init__(
        self,
        rng: Rng,
        group_keys: dict[int, bytes],
        binding_ca_public: bytes,
        *,
        trusted: PcrConstraint | None = None,
        name: str = "SYNCS",
    ):
        self.party = name
        self._rng = rng
        self.group_keys = dict(group_keys)
        self.binding_ca_public = binding_ca_public
        self.trusted = trusted or reference_constraint()
        self.bindings: dict[str, bytes] = {}
        self.sessions: list[Session] = []
        self._arrivals = itertools.count()
        self.rs: ReceivingSystem | None = None
        self.attestations = 0
        self.aborted: list[str] = []

    @property
    def name(self) -> str:
        return self.party

    # -- checks -----------------------------------------------------------

    def check_binding_credential(self, public: bytes, cred: Credential) -> None:
        if cred.subject_kind != SubjectKind.BINDING_KEY or not verify_credential(cred, self.binding_ca_public):
            raise BadBindingCredential("binding key is not certified by the PCA")
        try:
            subject = BindingSubject.decode(cred.subject_bytes)
        except WireError as exc:
            raise BadBindingCredential("unreadable binding credential") from exc
        if subject.binding_public != public:
            raise BadBindingCredential("credential names a different key")
        if subject.pcr_constraint != self.trusted:
            raise BadBindingCredential("key is bound to an untrusted platform state")

    def check_attestation(self, nonce: bytes, f: list[bytes]) -> bytes:
        """Verify a QUOTE reply; return the certified ephemeral key."""
        try:
            quote_bytes, aik_cred_bytes, public, info_bytes, sig = f
            quote = Quote.decode(quote_bytes)
            aik_cred = decode_credential(aik_cred_bytes)
            subject = GroupSubject.decode(aik_cred.subject_bytes)
            info = CertifyInfo.decode(info_bytes)
        except (ValueError, MalformedEncoding) as exc:
            raise BadQuote(f"unreadable attestation: {exc}") from exc
        group_key = self.group_keys.get(subject.group_id)
        if group_key is None or aik_cred.subject_kind != SubjectKind.AIK_GROUP or not verify_credential(aik_cred, group_key):
            raise BadQuote("attestation identity not certified")
        if not verify_quote(quote, subject.aik_public, nonce):
            raise BadQuote("quote signature invalid")
        if replay_log(quote.log, quote.selection) != quote.composite:
            raise BadQuote("log does not match quote")
        if quote.selection != self.trusted.selection or quote.composite != self.trusted.expected_composite:
            raise BadQuote("device is not in a trusted state")
        key_cred = Credential(SubjectKind.BINDING_KEY, info_bytes, subject.aik_public, sig)
        if not (
            verify_credential(key_cred)
            and info.public == public
            and info.key_kind == KeyKind.BINDING
            and info.nonce == nonce
            and info.pcr_constraint == self.trusted
        ):
            raise BadQuote("content key not certified for the trusted state")
        return public

    # -- seal variant -----------------------------------------------------

    def push_seal_flow(self, device: str, content: bytes) -> Flow:
        nonce = self._rng.bytes(20)
        reply = yield Request(
            self.name, device, Segment.NOC, "ATTEST_REQUEST", pack_fields(nonce, encode_int_set(self.trusted.selection))
        )
        self.attestations += 1
        try:
            public = self.check_attestation(nonce, reply.fields("QUOTE", 5))
        except Rejected:
            self.aborted.append(device)
            raise
        ciphertext = crypto.encrypt_to(public, content, self._rng)
        reply = yield Request(self.name, device, Segment.NOC, "CONTENT", pack_fields(nonce, ciphertext))
        (index,) = reply.fields("STORED", 1)
        return decode_u32(index)

    # -- bind variant -----------------------------------------------------

    def on_register_binding(self, f, sender):
        device, public, cred = f
        self.check_binding_credential(public, decode_credential(cred))
        self.bindings[device.decode()] = public
        return "REGISTERED", [device]

    def push_bind_flow(self, device: str, content: bytes, public: bytes | None = None) -> Flow:
        public = public or self.bindings.get(device)
        if public is None:
            raise BadBindingCredential(f"{device} has no registered binding key")
        ciphertext = crypto.encrypt_to(public, content, self._rng)
        reply = yield Request(self.name, device, Segment.NOC, "BOUND_CONTENT", pack_fields(ciphertext))
        (index,) = reply.fields("STORED", 1)
        return decode_u32(index)

    # -- ticketed access --------------------------------------------------

    def enable_tickets(self, rs: ReceivingSystem) -> None:
        rs.payload_check = self._check_access
        rs.on_accept = self._admit
        self.rs = rs

    def _check_access(self, verified: VerifiedTicket) -> None:
        _, public, cred = decode_access_payload(verified.payload)
        self.check_binding_credential(public, cred)

    def _admit(self, verified: VerifiedTicket, ack: Credential) -> None:
        device, public, _ = decode_access_payload(verified.payload)
        priority = int(verified.attributes.get("priority", "0"))
        heapq.heappush(
            self.sessions, Session((-priority, next(self._arrivals)), device, public, verified.group_id)
        )

    def on_ticket(self, f, sender):
        if self.rs is None:
            raise UnknownTicket("this server does not accept tickets")
        return self.rs.on_ticket(f, sender)

    def next_session(self) -> Session | None:
        return heapq.heappop(self.sessions) if self.sessions else None


class NocRelay:
    """Passive network operator: keeps a copy of everything it forwards."""

    def __init__(self):
        self.seen = []

    def __call__(self, envelope) -> None:
        self.seen.append(envelope)

    def saw(self, needle: bytes) -> bool:
        return any(needle in e.body for e in self.seen)


__all__ = [
    "BOOT_SELECTION",
    "Device",
    "DeviceStore",
    "NocRelay",
    "Session",
    "SyncServer",
    "reference_constraint",
]
