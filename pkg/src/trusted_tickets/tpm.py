"""Software TPM covering the command subset the ticket system relies on.

Shielded state (EK private, loaded key privates, the storage secret) never
leaves a :class:`Tpm` instance through any command. Key blobs and sealed
blobs are bound to the instance by AES-GCM under a storage secret derived
from the EK.

Blob formats (``field`` = u32 big-endian length + bytes)::

    wrapped key := 0x01 0x20 field(public) u8(kind) u8(scheme)
                   field(constraint) field(nonce) field(enc_private)
    sealed blob := 0x01 0x21 field(tpm_tag) field(selection) field(composite)
                   field(nonce) field(ciphertext)

The AES-GCM additional data for either blob is every byte that precedes the
ciphertext field.
"""

from __future__ import annotations

import hmac
import threading
from dataclasses import dataclass
from typing import Iterable

from . import crypto
from .credentials import Credential, GroupSubject, SubjectKind, decode_credential, make_credential
from .crypto import DecryptFailure, Digest, KeyPair, Rng, hash_bytes
from .errors import MalformedEncoding
from .structures import (
    ZERO_PCR,
    CertifyInfo,
    KeyKind,
    LogEntry,
    PcrConstraint,
    Quote,
    composite,
    decode_optional_constraint,
    encode_optional_constraint,
    extend_value,
    quote_message,
)
from .wire import Reader, WireError, decode_int_set, encode_int_set, field, pack_fields, u8, unpack_fields

DEFAULT_PCR_COUNT = 24

BLOB_VERSION = 0x01
WRAPPED_KEY_TAG = 0x20
SEALED_BLOB_TAG = 0x21

EK_HANDLE = 0x40000006
_FIRST_HANDLE = 0x01000000


class TpmError(Exception):
    pass


class AlreadyOwned(TpmError):
    pass


class NotOwned(TpmError):
    pass


class BadOwnerProof(TpmError):
    pass


class BadIndex(TpmError):
    pass


class BadHandle(TpmError):
    pass


class SubjectMismatch(TpmError):
    pass


class AlreadyActivated(TpmError):
    pass


class AikNotActivated(TpmError):
    pass


class LoadFailure(TpmError):
    pass


class KeyUsageViolation(TpmError):
    pass


class PcrMismatch(TpmError):
    pass


class ForeignBlob(TpmError):
    pass


@dataclass
class KeyRecord:
    handle: int
    kind: KeyKind
    keypair: KeyPair
    pcr_constraint: PcrConstraint | None = None
    activated: bool = False


@dataclass(frozen=True)
class IdentityBinding:
    aik_public: bytes
    label: str
    binding_signature: bytes

    def encode(self) -> bytes:
        return pack_fields(self.aik_public, self.label.encode(), self.binding_signature)

    @classmethod
    def decode(cls, data: bytes) -> "IdentityBinding":
        pub, label, sig = unpack_fields(data, 3)
        try:
            return cls(pub, label.decode("utf-8"), sig)
        except UnicodeDecodeError as exc:
            raise WireError("label is not utf-8") from exc


def identity_binding_message(label: str, aik_public: bytes) -> bytes:
    return hash_bytes(label.encode() + aik_public).bytes


def owner_proof(owner_secret: bytes) -> Digest:
    return hash_bytes(owner_secret)


class Tpm:
    """One emulated chip. Commands on one instance are serialised by a lock."""

    def __init__(self, rng: Rng, pcr_count: int = DEFAULT_PCR_COUNT):
        self._rng = rng
        self._lock = threading.RLock()
        self._ek = crypto.generate_keypair(rng, crypto.ENC_X25519_AESGCM)
        self._storage_key = crypto.derive_key(self._ek.private, b"tpm-storage-root")
        self._tag = hash_bytes(b"tpm-instance" + self._storage_key).bytes[:16]
        self.ek_credential: Credential | None = None
        self.owner_secret_digest: Digest | None = None
        self.pcrs = [ZERO_PCR] * pcr_count
        self.measurement_log: list[LogEntry] = []
        self.platform_id = hash_bytes(self._ek.public).bytes
        self._keys: dict[int, KeyRecord] = {
            EK_HANDLE: KeyRecord(EK_HANDLE, KeyKind.EK, self._ek)
        }
        self._next_handle = _FIRST_HANDLE

    # -- identity -----------------------------------------------------------

    @property
    def ek_public(self) -> bytes:
        return self._ek.public

    @property
    def ek_handle(self) -> int:
        return EK_HANDLE

    @property
    def pcr_count(self) -> int:
        return len(self.pcrs)

    def take_ownership(self, owner_secret: bytes) -> None:
        with self._lock:
            if self.owner_secret_digest is not None:
                raise AlreadyOwned("TPM already has an owner")
            self.owner_secret_digest = owner_proof(owner_secret)

    def _check_owner(self, proof: Digest) -> None:
        if self.owner_secret_digest is None:
            raise NotOwned("take ownership first")
        if not hmac.compare_digest(proof.bytes, self.owner_secret_digest.bytes):
            raise BadOwnerProof("owner authorisation failed")

    # -- measurement --------------------------------------------------------

    def extend_pcr(self, index: int, measurement: Digest, description: str = "") -> bytes:
        with self._lock:
            if not 0 <= index < len(self.pcrs):
                raise BadIndex(f"PCR {index} out of range")
            self.pcrs[index] = extend_value(self.pcrs[index], measurement.bytes)
            self.measurement_log.append(LogEntry(index, measurement.bytes, description))
            return self.pcrs[index]

    def reboot(self) -> None:
        """Platform reset: PCRs return to zero and the measurement log restarts.

        Key slots survive; the emulator has no volatile/persistent split.
        """
        with self._lock:
            self.pcrs = [ZERO_PCR] * len(self.pcrs)
            self.measurement_log = []

    def read_pcr(self, index: int) -> bytes:
        if not 0 <= index < len(self.pcrs):
            raise BadIndex(f"PCR {index} out of range")
        return self.pcrs[index]

    def composite(self, selection: Iterable[int]) -> Digest:
        sel = sorted(set(selection))
        for i in sel:
            if not 0 <= i < len(self.pcrs):
                raise BadIndex(f"PCR {i} out of range")
        return composite([self.pcrs[i] for i in sel])

    def current_constraint(self, selection: Iterable[int]) -> PcrConstraint:
        sel = tuple(sorted(set(selection)))
        return PcrConstraint(sel, self.composite(sel))

    def _check_constraint(self, constraint: PcrConstraint | None) -> None:
        if constraint is None:
            return
        if self.composite(constraint.selection) != constraint.expected_composite:
            raise PcrMismatch("platform state differs from the key's PCR constraint")

    # -- key store ----------------------------------------------------------

    def _install(self, kind: KeyKind, keypair: KeyPair, constraint: PcrConstraint | None = None) -> int:
        handle = self._next_handle
        self._next_handle += 1
        self._keys[handle] = KeyRecord(handle, kind, keypair, constraint)
        return handle

    def _record(self, handle: int) -> KeyRecord:
        rec = self._keys.get(handle)
        if rec is None:
            raise BadHandle(f"no key at handle {handle:#x}")
        return rec

    def key_kind(self, handle: int) -> KeyKind:
        return self._record(handle).kind

    def public_key(self, handle: int) -> bytes:
        return self._record(handle).keypair.public

    def is_activated(self, handle: int) -> bool:
        return self._record(handle).activated

    def handles(self) -> list[int]:
        return sorted(self._keys)

    def flush_key(self, handle: int) -> None:
        with self._lock:
            if handle == EK_HANDLE:
                raise KeyUsageViolation("the EK cannot be evicted")
            self._record(handle)
            del self._keys[handle]

    # -- AIK lifecycle ------------------------------------------------------

    def make_identity(self, proof: Digest, label: str) -> tuple[int, IdentityBinding]:
        with self._lock:
            self._check_owner(proof)
            aik = crypto.generate_keypair(self._rng, crypto.SIG_ED25519)
            handle = self._install(KeyKind.AIK, aik)
            sig = crypto.sign(aik.private, identity_binding_message(label, aik.public))
            return handle, IdentityBinding(aik.public, label, sig)

    def activate_identity(self, aik_handle: int, activation_blob: bytes) -> Credential:
        with self._lock:
            rec = self._record(aik_handle)
            if rec.kind != KeyKind.AIK:
                raise BadHandle("not an AIK")
            if rec.activated:
                raise AlreadyActivated("AIK already activated")
            inner = crypto.decrypt(self._ek.private, activation_blob)
            try:
                aik_digest, cred_bytes = unpack_fields(inner, 2)
                cred = decode_credential(cred_bytes)
                subject = GroupSubject.decode(cred.subject_bytes)
            except (WireError, MalformedEncoding) as exc:
                raise DecryptFailure("activation blob contents malformed") from exc
            mine = hash_bytes(rec.keypair.public).bytes
            if (
                aik_digest != mine
                or cred.subject_kind != SubjectKind.AIK_GROUP
                or subject.aik_public != rec.keypair.public
            ):
                raise SubjectMismatch("credential names a different AIK")
            rec.activated = True
            return cred

    # -- wrapped keys -------------------------------------------------------

    def create_key(self, proof: Digest, kind: KeyKind, pcr_constraint: PcrConstraint | None = None) -> bytes:
        if kind not in (KeyKind.SIGNING, KeyKind.BINDING, KeyKind.STORAGE):
            raise KeyUsageViolation(f"cannot create {kind.name} keys")
        with self._lock:
            self._check_owner(proof)
            scheme = crypto.SIG_ED25519 if kind == KeyKind.SIGNING else crypto.ENC_X25519_AESGCM
            kp = crypto.generate_keypair(self._rng, scheme)
            nonce = self._rng.bytes(crypto.NONCE_SIZE)
            header = (
                u8(BLOB_VERSION)
                + u8(WRAPPED_KEY_TAG)
                + field(kp.public)
                + u8(int(kind))
                + u8(scheme)
                + field(encode_optional_constraint(pcr_constraint))
                + field(nonce)
            )
            enc = crypto.aead_encrypt(self._storage_key, nonce, kp.private, header)
            return header + field(enc)

    def create_signing_key(self, proof: Digest, pcr_constraint: PcrConstraint | None = None) -> bytes:
        return self.create_key(proof, KeyKind.SIGNING, pcr_constraint)

    def create_binding_key(self, proof: Digest, pcr_constraint: PcrConstraint | None = None) -> bytes:
        return self.create_key(proof, KeyKind.BINDING, pcr_constraint)

    def load_key(self, blob: bytes) -> int:
        with self._lock:
            try:
                r = Reader(blob)
                if r.u8() != BLOB_VERSION or r.u8() != WRAPPED_KEY_TAG:
                    raise WireError("not a wrapped key")
                public = r.field()
                kind = KeyKind(r.u8())
                scheme = r.u8()
                constraint = decode_optional_constraint(r.field())
                nonce = r.field()
                header_end = r.pos
                enc = r.field()
                r.done()
            except ValueError as exc:
                raise LoadFailure(f"malformed key blob: {exc}") from exc
            try:
                private = crypto.aead_decrypt(self._storage_key, nonce, enc, blob[:header_end])
            except DecryptFailure as exc:
                raise LoadFailure("key blob was not produced by this TPM") from exc
            return self._install(kind, KeyPair(public, private, scheme), constraint)

    def certify_key(self, aik_handle: int, key_handle: int, nonce: bytes) -> tuple[bytes, bytes]:
        """AIK statement that ``key_handle`` is TPM-resident.

        Returns ``(certify_info, signature)``; the signature covers
        ``hash(kind || certify_info)`` so the pair forms a credential of kind
        CSK (signing keys) or BINDING_KEY (binding keys).
        """
        with self._lock:
            aik = self._record(aik_handle)
            if aik.kind != KeyKind.AIK:
                raise BadHandle("certifying key must be an AIK")
            if not aik.activated:
                raise AikNotActivated("AIK has no activated credential")
            rec = self._record(key_handle)
            if rec.kind in (KeyKind.EK, KeyKind.AIK):
                raise BadHandle("only loaded non-identity keys can be certified")
            info = CertifyInfo(rec.keypair.public, rec.kind, rec.keypair.scheme_id, rec.pcr_constraint, bytes(nonce))
            info_bytes = info.encode()
            kind = SubjectKind.CSK if rec.kind == KeyKind.SIGNING else SubjectKind.BINDING_KEY
            cred = make_credential(kind, info_bytes, aik.keypair.private, aik.keypair.public)
            return info_bytes, cred.signature

    def sign_with_key(self, key_handle: int, data: bytes) -> bytes:
        with self._lock:
            rec = self._record(key_handle)
            if rec.kind != KeyKind.SIGNING:
                raise KeyUsageViolation(f"{rec.kind.name} keys cannot sign arbitrary data")
            self._check_constraint(rec.pcr_constraint)
            return crypto.sign(rec.keypair.private, data)

    def unbind(self, key_handle: int, blob: bytes) -> bytes:
        with self._lock:
            rec = self._record(key_handle)
            if rec.kind != KeyKind.BINDING:
                raise KeyUsageViolation(f"{rec.kind.name} keys cannot unbind")
            self._check_constraint(rec.pcr_constraint)
            return crypto.decrypt(rec.keypair.private, blob)

    # -- sealing ------------------------------------------------------------

    def seal(self, data: bytes, pcr_selection: Iterable[int]) -> bytes:
        with self._lock:
            sel = tuple(sorted(set(pcr_selection)))
            comp = self.composite(sel)
            nonce = self._rng.bytes(crypto.NONCE_SIZE)
            header = (
                u8(BLOB_VERSION)
                + u8(SEALED_BLOB_TAG)
                + field(self._tag)
                + field(encode_int_set(sel))
                + field(comp.bytes)
                + field(nonce)
            )
            return header + field(crypto.aead_encrypt(self._storage_key, nonce, data, header))

    def unseal(self, blob: bytes) -> bytes:
        with self._lock:
            try:
                r = Reader(blob)
                if r.u8() != BLOB_VERSION or r.u8() != SEALED_BLOB_TAG:
                    raise WireError("not a sealed blob")
                tag = r.field()
                sel = decode_int_set(r.field())
                comp = Digest(r.field())
                nonce = r.field()
                header_end = r.pos
                ct = r.field()
                r.done()
            except ValueError as exc:
                raise ForeignBlob(f"malformed sealed blob: {exc}") from exc
            if tag != self._tag:
                raise ForeignBlob("blob sealed by another TPM")
            try:
                data = crypto.aead_decrypt(self._storage_key, nonce, ct, blob[:header_end])
            except DecryptFailure as exc:
                raise ForeignBlob("sealed blob failed authentication") from exc
            if self.composite(sel) != comp:
                raise PcrMismatch("platform state differs from seal-time state")
            return data

    # -- attestation --------------------------------------------------------

    def quote(self, aik_handle: int, nonce: bytes, pcr_selection: Iterable[int]) -> Quote:
        with self._lock:
            aik = self._record(aik_handle)
            if aik.kind != KeyKind.AIK:
                raise BadHandle("quotes are signed by AIKs")
            if not aik.activated:
                raise AikNotActivated("AIK has no activated credential")
            sel = tuple(sorted(set(pcr_selection)))
            comp = self.composite(sel)
            log = tuple(e for e in self.measurement_log if e.pcr_index in sel)
            sig = crypto.sign(aik.keypair.private, quote_message(comp, nonce))
            return Quote(sel, comp, log, sig)

    # -- test support -------------------------------------------------------

    def _shielded_secrets(self) -> list[bytes]:
        """Private bytes that must never leave the chip (for leak scans)."""
        return [self._storage_key] + [r.keypair.private for r in self._keys.values()]


def create_tpm(rng: Rng, manufacturer_key: KeyPair, pcr_count: int = DEFAULT_PCR_COUNT) -> tuple[Tpm, Credential]:
    """Manufacture a TPM and its EK credential."""
    tpm = Tpm(rng, pcr_count)
    cred = make_credential(SubjectKind.EK, tpm.ek_public, manufacturer_key.private, manufacturer_key.public)
    tpm.ek_credential = cred
    return tpm, cred


def verify_quote(quote: Quote, aik_public: bytes, nonce: bytes) -> bool:
    return crypto.verify(aik_public, quote.signature, quote_message(quote.composite, nonce))
