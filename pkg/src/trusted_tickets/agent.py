"""Trusted agent: acquires group tickets from a PCA and redeems them at an RS.

Both operations are written as flows (generators yielding :class:`Request`)
so the harness can interleave many agents deterministically; the
``acquire_ticket`` / ``redeem_ticket`` wrappers drive a flow to completion.
Neither flow sends a quote or a measurement log.
"""

from __future__ import annotations

from dataclasses import dataclass

from .credentials import (
    Credential,
    GroupSubject,
    SubjectKind,
    Ticket,
    decode_credential,
    signed_message,
    verify_ack,
)
from .crypto import CryptoError, Digest, Rng, hash_bytes
from .errors import ActivationFailure, AlreadySpent, AlreadySpentLocally, BadAck, MalformedEncoding
from .protocol import Flow, Request, Segment, Transport, drive
from .tpm import Tpm, TpmError, create_tpm, owner_proof
from .wire import WireError, pack_fields, u32


@dataclass
class HeldTicket:
    aik_handle: int
    credential: Credential
    group_id: int
    spent: bool = False
    ticket_bytes: bytes | None = None

    @property
    def aik_public(self) -> bytes:
        return _group_subject(self.credential).aik_public

    @property
    def aik_digest(self) -> Digest:
        return hash_bytes(self.aik_public)


def _group_subject(cred: Credential) -> GroupSubject:
    return GroupSubject.decode(cred.subject_bytes)


class TrustedAgent:
    """One user platform: a TPM, its owner secret and the tickets it holds."""

    def __init__(self, name: str, tpm: Tpm, owner_secret: bytes, rng: Rng):
        self.name = name
        self.tpm = tpm
        self._owner_secret = owner_secret
        self._rng = rng
        self.held: list[HeldTicket] = []
        if tpm.owner_secret_digest is None:
            tpm.take_ownership(owner_secret)

    @classmethod
    def manufacture(cls, name: str, rng: Rng, manufacturer_key) -> "TrustedAgent":
        tpm, _ = create_tpm(rng.child("tpm"), manufacturer_key)
        return cls(name, tpm, rng.child("owner").bytes(20), rng.child("agent"))

    @property
    def platform_id(self) -> bytes:
        return self.tpm.platform_id

    @property
    def _proof(self) -> Digest:
        return owner_proof(self._owner_secret)

    def unspent(self, group_id: int | None = None) -> list[HeldTicket]:
        return [h for h in self.held if not h.spent and (group_id is None or h.group_id == group_id)]

    # -- acquisition --------------------------------------------------------

    def acquire_flow(self, group_id: int, pca: str = "PCA") -> Flow:
        label = f"{self.name}/g{group_id}/{len(self.held)}"
        aik_handle, binding = self.tpm.make_identity(self._proof, label)
        aik_public = binding.aik_public
        try:
            reply = yield Request(
                self.name,
                pca,
                Segment.TA_PCA,
                "IDENTITY_REQUEST",
                pack_fields(aik_public, binding.encode(), self.tpm.ek_credential.encode(), u32(group_id)),
            )
            (blob,) = reply.fields("ACTIVATION_BLOB", 1)
            try:
                cred = self.tpm.activate_identity(aik_handle, blob)
            except (TpmError, CryptoError) as exc:
                raise ActivationFailure(str(exc)) from exc
        except BaseException:
            # an unactivated AIK is useless; reclaim the key slot
            self.tpm.flush_key(aik_handle)
            raise
        reply = yield Request(
            self.name,
            pca,
            Segment.TA_PCA,
            "ACTIVATION_CONFIRM",
            pack_fields(hash_bytes(aik_public).bytes, hash_bytes(cred.encode()).bytes),
        )
        reply.fields("CONFIRMED", 1)
        entry = HeldTicket(aik_handle, cred, group_id)
        self.held.append(entry)
        return entry

    def acquire_ticket(self, transport: Transport, group_id: int, pca: str = "PCA") -> HeldTicket:
        return drive(self.acquire_flow(group_id, pca), transport)

    # -- redemption ---------------------------------------------------------

    def build_ticket(self, entry: HeldTicket, payload: bytes) -> Ticket:
        """Fresh CSK, certified by the ticket's AIK, signing ``payload``."""
        blob = self.tpm.create_signing_key(self._proof)
        csk = self.tpm.load_key(blob)
        try:
            info, csk_sig = self.tpm.certify_key(entry.aik_handle, csk, self._rng.bytes(20))
            aik_public = entry.aik_public
            cert_csk = Credential(SubjectKind.CSK, info, aik_public, csk_sig)
            csk_public = self.tpm.public_key(csk)
            payload_digest = hash_bytes(payload).bytes
            sig = self.tpm.sign_with_key(csk, signed_message(SubjectKind.PAYLOAD, payload_digest))
            cert_payload = Credential(SubjectKind.PAYLOAD, payload_digest, csk_public, sig)
        finally:
            self.tpm.flush_key(csk)
        return Ticket(payload, cert_payload, cert_csk, entry.credential, entry.group_id)

    def redeem_flow(self, entry: HeldTicket, payload: bytes, rs: str, rs_public: bytes) -> Flow:
        if entry.spent:
            raise AlreadySpentLocally("ticket already redeemed by this agent")
        ticket = self.build_ticket(entry, payload)
        entry.ticket_bytes = ticket.encode()
        try:
            reply = yield Request(self.name, rs, Segment.TA_RS, "TICKET", pack_fields(entry.ticket_bytes))
            if reply.kind == "ACK":
                try:
                    (ack_bytes,) = reply.fields("ACK", 1)
                except MalformedEncoding as exc:
                    raise BadAck("unreadable acknowledgement") from exc
            else:
                reply.fields("ACK", 1)  # re-raises the remote rejection
        except AlreadySpent:
            entry.spent = True
            raise
        try:
            ack = decode_credential(ack_bytes)
        except (MalformedEncoding, WireError) as exc:
            raise BadAck("unreadable acknowledgement") from exc
        if not verify_ack(ack, rs_public, payload, entry.aik_digest):
            raise BadAck("acknowledgement does not verify under the RS key")
        entry.spent = True
        return ack

    def redeem_ticket(
        self, transport: Transport, entry: HeldTicket, payload: bytes, rs: str, rs_public: bytes
    ) -> Credential:
        return drive(self.redeem_flow(entry, payload, rs, rs_public), transport)

