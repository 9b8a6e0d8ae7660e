"""Privacy CA: group-credential issuance, identity escrow, blacklisting,
charging initiation and binding-key certification.

Issuance is gated: group, platform credential, AIK binding, blacklist and the
authorisation policy are all checked before any credential or activation blob
is built. The credential travels encrypted to the requesting TPM's EK, so only
that TPM can activate it.
"""

from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import crypto
from .credentials import (
    BindingSubject,
    Credential,
    GroupSubject,
    SubjectKind,
    decode_credential,
    make_credential,
    verify_credential,
)
from .crypto import Digest, KeyPair, Rng, hash_bytes
from .errors import (
    ActivationFailure,
    AuthorisationDenied,
    BadAikBinding,
    BadPlatformCredential,
    BadQuote,
    Blacklisted,
    CompositeMismatch,
    DuplicateGroup,
    MalformedEncoding,
    Refused,
    StaleNonce,
    UnknownAik,
    UnknownEscrow,
    UnknownGroup,
)
from .protocol import Service
from .structures import CertifyInfo, KeyKind, PcrConstraint, Quote, replay_log
from .tpm import IdentityBinding, identity_binding_message, verify_quote
from .wire import WireError, decode_str_map, decode_u32, encode_str_map, pack_fields, u32


class ChargeMode(str, enum.Enum):
    PRE = "PRE"
    POST = "POST"


class IssuanceState(str, enum.Enum):
    CHALLENGED = "CHALLENGED"
    COMPLETE = "COMPLETE"


@dataclass
class GroupDescriptor:
    group_id: int
    price: int
    attributes: dict[str, str]
    group_keypair: KeyPair

    @property
    def public(self) -> bytes:
        return self.group_keypair.public


@dataclass(frozen=True)
class EscrowRecord:
    aik_digest: Digest
    platform_id: bytes
    group_id: int
    issued_at: int
    credential_serial: int
    price: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "aik_digest": self.aik_digest.hex(),
                "platform_id": self.platform_id.hex(),
                "group_id": self.group_id,
                "issued_at": self.issued_at,
                "serial": self.credential_serial,
                "price": self.price,
            },
            sort_keys=True,
        )


@dataclass
class PendingIssuance:
    aik_public: bytes
    group_id: int
    platform_id: bytes
    activation_blob_digest: Digest | None = None
    credential_digest: Digest | None = None
    state: IssuanceState = IssuanceState.CHALLENGED


@dataclass(frozen=True)
class ResolutionToken:
    """An RS's signed request to de-anonymise one AIK."""

    rs_id: str
    aik_digest: Digest
    reason: str
    signature: bytes

    def fields(self) -> list[bytes]:
        return [self.rs_id.encode(), self.aik_digest.bytes, self.reason.encode(), self.signature]

    @classmethod
    def from_fields(cls, f: list[bytes]) -> "ResolutionToken":
        rs_id, digest, reason, sig = f
        return cls(rs_id.decode(), Digest(digest), reason.decode(), sig)


def resolution_message(aik_digest: Digest, reason: str) -> bytes:
    return hash_bytes(aik_digest.bytes + reason.encode()).bytes


def sign_resolution(rs_id: str, keypair: KeyPair, aik_digest: Digest, reason: str) -> ResolutionToken:
    sig = crypto.sign(keypair.private, resolution_message(aik_digest, reason))
    return ResolutionToken(rs_id, aik_digest, reason, sig)


@dataclass(frozen=True)
class BindingEvidence:
    """What a device presents to get a binding key certified."""

    aik_public: bytes
    quote: Quote
    certify_info: bytes
    certify_signature: bytes

    def fields(self) -> list[bytes]:
        return [self.aik_public, self.quote.encode(), self.certify_info, self.certify_signature]

    @classmethod
    def from_fields(cls, f: list[bytes]) -> "BindingEvidence":
        aik, quote, info, sig = f
        return cls(aik, Quote.decode(quote), info, sig)


@dataclass(frozen=True)
class AuditEntry:
    seq: int
    aik_digest: str
    requester: str
    reason: str
    outcome: str

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


PricingFn = Callable[[GroupDescriptor, list[int], int], int]
ChargeFn = Callable[[str, int, str], object]


def account_ref(platform_id: bytes) -> str:
    """CP account name for a platform; the CP never sees AIKs."""
    return "user:" + platform_id.hex()


class PrivacyCA(Service):
    party = "PCA"

    def __init__(
        self,
        rng: Rng,
        manufacturer_public: bytes,
        *,
        charge: ChargeFn | None = None,
        charging_mode: ChargeMode | None = None,
        pricing: PricingFn | None = None,
        authorise: Callable[[bytes, int], bool] | None = None,
        trusted_composites: set[bytes] | None = None,
        require_cp_coauthorisation: bool = False,
        cp_public: bytes | None = None,
        journal_dir: Path | None = None,
        clock: Callable[[], int] | None = None,
    ):
        self._rng = rng
        self.manufacturer_public = manufacturer_public
        self.binding_ca = crypto.generate_keypair(rng.child("binding-ca"))
        self.groups: dict[int, GroupDescriptor] = {}
        self.escrow: list[EscrowRecord] = []
        self._escrow_by_aik: dict[bytes, EscrowRecord] = {}
        self.pending: dict[tuple[bytes, bytes], PendingIssuance] = {}
        self.blacklisted: set[bytes] = set()
        self.revoked: set[int] = set()
        self.rs_keys: dict[str, bytes] = {}
        self.audit_log: list[AuditEntry] = []
        self.charges: list[object] = []
        self._nonces: set[bytes] = set()
        self._serial = 0
        self.charge = charge
        self.charging_mode = ChargeMode(charging_mode) if charging_mode else None
        self.pricing = pricing
        self.authorise = authorise
        self.trusted_composites = trusted_composites
        self.require_cp_coauthorisation = require_cp_coauthorisation
        self.cp_public = cp_public
        self.journal_dir = Path(journal_dir) if journal_dir else None
        self._clock = clock or (lambda: len(self.escrow) + len(self.audit_log))
        self._lock = threading.RLock()

    # -- groups and directory ----------------------------------------------

    def register_group(self, group_id: int, price: int, attributes: dict[str, str], rng: Rng | None = None) -> GroupDescriptor:
        with self._lock:
            if group_id in self.groups:
                raise DuplicateGroup(f"group {group_id} exists")
            if price < 0:
                raise ValueError("group prices are non-negative")
            kp = crypto.generate_keypair(rng or self._rng.child(f"group-{group_id}"))
            desc = GroupDescriptor(group_id, price, dict(attributes), kp)
            self.groups[group_id] = desc
            return desc

    def directory(self) -> dict[int, bytes]:
        return {g: d.public for g, d in sorted(self.groups.items())}

    def register_rs(self, rs_id: str, public: bytes) -> None:
        self.rs_keys[rs_id] = public

    def revocation_list(self) -> tuple[int, ...]:
        return tuple(sorted(self.revoked))

    # -- issuance -----------------------------------------------------------

    def handle_identity_request(
        self,
        aik_public: bytes,
        identity_binding: IdentityBinding,
        ek_credential: Credential,
        group_id: int,
    ) -> bytes:
        group = self.groups.get(group_id)
        if group is None:
            raise UnknownGroup(f"group {group_id}")
        if ek_credential.subject_kind != SubjectKind.EK or not verify_credential(
            ek_credential, self.manufacturer_public
        ):
            raise BadPlatformCredential("EK credential not issued by a trusted manufacturer")
        if identity_binding.aik_public != aik_public or not crypto.verify(
            aik_public,
            identity_binding.binding_signature,
            identity_binding_message(identity_binding.label, aik_public),
        ):
            raise BadAikBinding("identity binding does not verify under the AIK")

        ek_public = ek_credential.subject_bytes
        platform_id = hash_bytes(ek_public).bytes
        aik_digest = hash_bytes(aik_public)
        with self._lock:
            if platform_id in self.blacklisted:
                raise Blacklisted("platform is blacklisted")
            if self.authorise is not None and not self.authorise(platform_id, group_id):
                raise AuthorisationDenied("policy refused issuance")
            if aik_digest.bytes in self._escrow_by_aik or (platform_id, aik_digest.bytes) in self.pending:
                raise AuthorisationDenied("AIK already has an issuance")
            price = self.price_for(group, platform_id)
            pending = PendingIssuance(aik_public, group_id, platform_id)
            self.pending[(platform_id, aik_digest.bytes)] = pending
            serial = self._serial + 1
            if self.charging_mode == ChargeMode.PRE:
                try:
                    self.initiate_charging(platform_id, price, ticket_ref(serial), ChargeMode.PRE)
                except Exception:
                    del self.pending[(platform_id, aik_digest.bytes)]
                    raise
            self._serial = serial

            subject = GroupSubject(aik_public, group_id, group.attributes, serial)
            cred = make_credential(
                SubjectKind.AIK_GROUP, subject.encode(), group.group_keypair.private, group.public
            )
            inner = pack_fields(aik_digest.bytes, cred.encode())
            blob = crypto.encrypt_to(ek_public, inner, self._rng)
            pending.activation_blob_digest = hash_bytes(blob)
            pending.credential_digest = hash_bytes(cred.encode())
            record = EscrowRecord(aik_digest, platform_id, group_id, self._clock(), serial, price)
            self.escrow.append(record)
            self._escrow_by_aik[aik_digest.bytes] = record
            self._journal("escrow.jsonl", record.to_json())
            return blob

    def confirm_activation(self, aik_digest: Digest, proof: bytes) -> None:
        """Close the handshake: ``proof`` is the digest of the activated credential,
        which only the TPM holding the EK could have decrypted."""
        with self._lock:
            record = self._escrow_by_aik.get(aik_digest.bytes)
            if record is None:
                raise UnknownAik("no issuance for this AIK")
            pending = self.pending.get((record.platform_id, aik_digest.bytes))
            if pending is None or pending.credential_digest is None or pending.credential_digest.bytes != proof:
                raise ActivationFailure("activation proof does not match the issued credential")
            pending.state = IssuanceState.COMPLETE

    def price_for(self, group: GroupDescriptor, platform_id: bytes) -> int:
        if self.pricing is None:
            return group.price
        return self.pricing(group, self.history(platform_id), self._clock())

    def history(self, platform_id: bytes) -> list[int]:
        return [r.issued_at for r in self.escrow if r.platform_id == platform_id]

    def escrow_record(self, aik_digest: Digest) -> EscrowRecord | None:
        return self._escrow_by_aik.get(aik_digest.bytes)

    # -- accountability -----------------------------------------------------

    def resolve_identity(
        self, aik_digest: Digest, token: ResolutionToken, cp_signature: bytes | None = None
    ) -> bytes:
        with self._lock:
            outcome = "refused:NoAuthorisation"
            try:
                rs_public = self.rs_keys.get(token.rs_id)
                authorised = (
                    rs_public is not None
                    and token.aik_digest == aik_digest
                    and crypto.verify(rs_public, token.signature, resolution_message(aik_digest, token.reason))
                )
                if authorised and self.require_cp_coauthorisation:
                    authorised = cp_signature is not None and self.cp_public is not None and crypto.verify(
                        self.cp_public, cp_signature, resolution_message(aik_digest, token.reason)
                    )
                if not authorised:
                    raise Refused("NoAuthorisation")
                record = self._escrow_by_aik.get(aik_digest.bytes)
                if record is None:
                    outcome = "refused:UnknownAik"
                    raise Refused("UnknownAik")
                outcome = "resolved"
                return record.platform_id
            finally:
                entry = AuditEntry(self._clock(), aik_digest.hex(), token.rs_id, token.reason, outcome)
                self.audit_log.append(entry)
                self._journal("audit.jsonl", entry.to_json())

    def blacklist(self, platform_id: bytes) -> frozenset[bytes]:
        with self._lock:
            self.blacklisted.add(bytes(platform_id))
            return frozenset(self.blacklisted)

    def revoke_credential(self, serial: int) -> tuple[int, ...]:
        with self._lock:
            self.revoked.add(int(serial))
            return self.revocation_list()

    # -- charging -----------------------------------------------------------

    def initiate_charging(self, platform_id: bytes, amount: int, ref: str, mode: ChargeMode):
        if self.charge is None:
            raise UnknownEscrow("no charging provider configured")
        known = any(r.platform_id == platform_id for r in self.escrow) or any(
            p.platform_id == platform_id for p in self.pending.values()
        )
        if not known:
            raise UnknownEscrow("platform has no escrow record")
        receipt = self.charge(account_ref(platform_id), amount, ref)
        self.charges.append((ChargeMode(mode).value, ref, amount))
        return receipt

    def charge_redemption(self, aik_digest: Digest):
        """Ex-post charge requested by an RS after it redeemed a ticket."""
        record = self._escrow_by_aik.get(aik_digest.bytes)
        if record is None:
            raise UnknownEscrow("ticket AIK unknown to this PCA")
        return self.initiate_charging(
            record.platform_id, record.price, ticket_ref(record.credential_serial), ChargeMode.POST
        )

    # -- binding keys -------------------------------------------------------

    def issue_nonce(self) -> bytes:
        with self._lock:
            nonce = self._rng.bytes(20)
            self._nonces.add(nonce)
            return nonce

    def certify_binding_key(
        self, binding_public: bytes, pcr_constraint: PcrConstraint, evidence: BindingEvidence, nonce: bytes
    ) -> Credential:
        with self._lock:
            if nonce not in self._nonces:
                raise StaleNonce("nonce was not issued or was already used")
            self._nonces.discard(nonce)
        if hash_bytes(evidence.aik_public).bytes not in self._escrow_by_aik:
            raise UnknownAik("AIK not certified by this PCA")
        quote = evidence.quote
        if not verify_quote(quote, evidence.aik_public, nonce):
            raise BadQuote("quote signature invalid")
        if replay_log(quote.log, quote.selection) != quote.composite:
            raise BadQuote("measurement log does not reproduce the quoted composite")
        if quote.selection != pcr_constraint.selection or quote.composite != pcr_constraint.expected_composite:
            raise CompositeMismatch("quoted state differs from the requested constraint")
        if self.trusted_composites is not None and quote.composite.bytes not in self.trusted_composites:
            raise CompositeMismatch("quoted state is not a trusted configuration")
        try:
            info = CertifyInfo.decode(evidence.certify_info)
        except WireError as exc:
            raise BadQuote("unreadable key certification") from exc
        if not (
            info.public == binding_public
            and info.key_kind == KeyKind.BINDING
            and info.pcr_constraint == pcr_constraint
            and info.nonce == nonce
            and verify_credential(
                Credential(SubjectKind.BINDING_KEY, evidence.certify_info, evidence.aik_public, evidence.certify_signature)
            )
        ):
            raise BadQuote("binding key certification does not match")
        subject = BindingSubject(binding_public, pcr_constraint)
        return make_credential(
            SubjectKind.BINDING_KEY, subject.encode(), self.binding_ca.private, self.binding_ca.public
        )

    # -- persistence --------------------------------------------------------

    def _journal(self, name: str, line: str) -> None:
        if self.journal_dir is not None:
            with (self.journal_dir / name).open("a") as fh:
                fh.write(line + "\n")

    # -- wire ---------------------------------------------------------------

    def on_identity_request(self, f, sender):
        aik_public, binding, ek_cred, group = f
        blob = self.handle_identity_request(
            aik_public, IdentityBinding.decode(binding), decode_credential(ek_cred), decode_u32(group)
        )
        return "ACTIVATION_BLOB", [blob]

    def on_activation_confirm(self, f, sender):
        digest, proof = f
        self.confirm_activation(Digest(digest), proof)
        return "CONFIRMED", [digest]

    def on_directory(self, f, sender):
        out = []
        for g, d in sorted(self.groups.items()):
            out += [u32(g), d.public, encode_str_map(d.attributes)]
        return "DIRECTORY", out

    def on_revocations(self, f, sender):
        return "REVOCATIONS", [u32(s) for s in self.revocation_list()]

    def on_charge_request(self, f, sender):
        (digest,) = f
        receipt = self.charge_redemption(Digest(digest))
        return "CHARGED", receipt.fields()

    def on_resolve(self, f, sender):
        token = ResolutionToken.from_fields(f[:4])
        cp_sig = f[4] if len(f) > 4 and f[4] else None
        return "IDENTITY", [self.resolve_identity(token.aik_digest, token, cp_sig)]

    def on_nonce_request(self, f, sender):
        return "NONCE", [self.issue_nonce()]

    def on_quote(self, f, sender):
        binding_public, constraint, nonce, *rest = f
        evidence = BindingEvidence.from_fields(rest)
        cred = self.certify_binding_key(binding_public, PcrConstraint.decode(constraint), evidence, nonce)
        return "BINDING_CREDENTIAL", [cred.encode(), self.binding_ca.public]


def ticket_ref(serial: int) -> str:
    return f"ticket-{serial}"


def decode_directory(fields: list[bytes]) -> dict[int, tuple[bytes, dict[str, str]]]:
    if len(fields) % 3:
        raise MalformedEncoding("directory field count")
    out = {}
    for i in range(0, len(fields), 3):
        out[decode_u32(fields[i])] = (fields[i + 1], decode_str_map(fields[i + 2]))
    return out
