"""Deterministic cryptographic substrate.

Signatures use Ed25519, asymmetric encryption uses an X25519 key agreement
feeding HKDF-SHA256 and AES-256-GCM. All key material is drawn from a seeded
:class:`Rng`, so an entire protocol run is a pure function of its seed.
"""

from __future__ import annotations

import functools
import hashlib
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .wire import Reader, WireError, field as lp_field, u8

SIG_ED25519 = 1
ENC_X25519_AESGCM = 2

SCHEMES = {
    SIG_ED25519: "ed25519",
    ENC_X25519_AESGCM: "x25519-hkdf-aes256gcm",
}

DEFAULT_SIGNATURE_SCHEME = SIG_ED25519
DEFAULT_ENCRYPTION_SCHEME = ENC_X25519_AESGCM

ALG_SHA256 = 0x0B
DIGEST_SIZES = {ALG_SHA256: 32}

KEY_SIZE = 32
NONCE_SIZE = 12
_BLOB_VERSION = 1


class CryptoError(Exception):
    pass


class UnknownScheme(CryptoError):
    pass


class MalformedKey(CryptoError):
    pass


class DecryptFailure(CryptoError):
    """Wrong key or tampered ciphertext; the two are deliberately indistinguishable."""


class Rng:
    """Seeded byte stream. One owner per instance; not safe to share across threads."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._random = random.Random(self.seed)

    def bytes(self, n: int) -> bytes:
        return self._random.randbytes(n)

    def randrange(self, *args) -> int:
        return self._random.randrange(*args)

    def choice(self, seq):
        return self._random.choice(seq)

    def shuffle(self, seq) -> None:
        self._random.shuffle(seq)

    def random(self) -> float:
        return self._random.random()

    def child(self, label: str) -> "Rng":
        """Independent stream derived from (seed, label); parent state is untouched."""
        h = hashlib.sha256(self.seed.to_bytes(8, "big") + label.encode()).digest()
        return Rng(int.from_bytes(h[:8], "big"))


@dataclass(frozen=True)
class Digest:
    bytes: bytes
    alg_id: int = ALG_SHA256

    def __post_init__(self):
        size = DIGEST_SIZES.get(self.alg_id)
        if size is None:
            raise UnknownScheme(f"hash algorithm {self.alg_id:#x}")
        if len(self.bytes) != size:
            raise ValueError(f"digest must be {size} bytes")

    def hex(self) -> str:
        return self.bytes.hex()


def hash_bytes(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def hash_concat(*parts: bytes) -> Digest:
    h = hashlib.sha256()
    for p in parts:
        h.update(p)
    return Digest(h.digest())


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    private: bytes = field(repr=False, compare=False)
    scheme_id: int = DEFAULT_SIGNATURE_SCHEME

    def public_only(self) -> "PublicKey":
        return PublicKey(self.public, self.scheme_id)

    def export_private(self) -> bytes:
        return self.private

    def __getstate__(self):
        # pickling is a public serialization path; never carry the private half
        return {"public": self.public, "scheme_id": self.scheme_id}


@dataclass(frozen=True)
class PublicKey:
    public: bytes
    scheme_id: int


def generate_keypair(rng: Rng, scheme_id: int = DEFAULT_SIGNATURE_SCHEME) -> KeyPair:
    if scheme_id not in SCHEMES:
        raise UnknownScheme(f"scheme {scheme_id}")
    seed = rng.bytes(KEY_SIZE)
    if scheme_id == SIG_ED25519:
        pub = Ed25519PrivateKey.from_private_bytes(seed).public_key().public_bytes_raw()
    else:
        pub = X25519PrivateKey.from_private_bytes(seed).public_key().public_bytes_raw()
    return KeyPair(public=pub, private=seed, scheme_id=scheme_id)


def public_from_private(private: bytes, scheme_id: int) -> bytes:
    _check_len(private)
    if scheme_id == SIG_ED25519:
        return Ed25519PrivateKey.from_private_bytes(private).public_key().public_bytes_raw()
    if scheme_id == ENC_X25519_AESGCM:
        return X25519PrivateKey.from_private_bytes(private).public_key().public_bytes_raw()
    raise UnknownScheme(f"scheme {scheme_id}")


def _check_len(key: bytes) -> None:
    if not isinstance(key, (bytes, bytearray)) or len(key) != KEY_SIZE:
        raise MalformedKey(f"expected a {KEY_SIZE}-byte key")


def sign(private: bytes, message: bytes) -> bytes:
    _check_len(private)
    return _signer(bytes(private)).sign(bytes(message))


# Loading a private key derives its public half; services sign with a handful
# of long-lived keys, so keep the loaded objects around.
@functools.lru_cache(maxsize=1 << 10)
def _signer(private: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(private)


def verify(public: bytes, signature: bytes, message: bytes) -> bool:
    if not isinstance(public, (bytes, bytearray)) or len(public) != KEY_SIZE:
        return False
    return _verify_cached(bytes(public), bytes(signature), bytes(message))


# Pure function of its inputs; memoised because replay-heavy workloads
# re-verify the same credentials many times.
@functools.lru_cache(maxsize=1 << 16)
def _verify_cached(public: bytes, signature: bytes, message: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def derive_key(secret: bytes, label: bytes, length: int = KEY_SIZE) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=None, info=label).derive(secret)


def aead_encrypt(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    return AESGCM(key).encrypt(nonce, bytes(plaintext), aad)


def aead_decrypt(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    try:
        return AESGCM(key).decrypt(nonce, bytes(ciphertext), aad)
    except (InvalidTag, ValueError) as exc:
        raise DecryptFailure("authentication failed") from exc


def encrypt_to(public: bytes, plaintext: bytes, rng: Rng) -> bytes:
    """Encrypt for the holder of ``public``.

    Blob layout: version u8, scheme u8, field(ephemeral public),
    field(nonce), field(ciphertext || tag).
    """
    _check_len(public)
    try:
        recipient = X25519PublicKey.from_public_bytes(bytes(public))
    except ValueError as exc:
        raise MalformedKey("not an encryption key") from exc
    eph = X25519PrivateKey.from_private_bytes(rng.bytes(KEY_SIZE))
    eph_pub = eph.public_key().public_bytes_raw()
    key = derive_key(eph.exchange(recipient), b"tt-encrypt" + eph_pub + bytes(public))
    nonce = rng.bytes(NONCE_SIZE)
    header = u8(_BLOB_VERSION) + u8(ENC_X25519_AESGCM)
    ct = aead_encrypt(key, nonce, plaintext, header)
    return header + lp_field(eph_pub) + lp_field(nonce) + lp_field(ct)


def decrypt(private: bytes, blob: bytes) -> bytes:
    _check_len(private)
    try:
        r = Reader(blob)
        version, scheme = r.u8(), r.u8()
        eph_pub, nonce, ct = r.field(), r.field(), r.field()
        r.done()
    except WireError as exc:
        raise DecryptFailure("malformed blob") from exc
    if version != _BLOB_VERSION or scheme != ENC_X25519_AESGCM:
        raise DecryptFailure("unsupported blob")
    if len(eph_pub) != KEY_SIZE or len(nonce) != NONCE_SIZE:
        raise DecryptFailure("malformed blob")
    me = X25519PrivateKey.from_private_bytes(bytes(private))
    try:
        shared = me.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    except ValueError as exc:
        raise DecryptFailure("bad ephemeral key") from exc
    my_pub = me.public_key().public_bytes_raw()
    key = derive_key(shared, b"tt-encrypt" + eph_pub + my_pub)
    return aead_decrypt(key, nonce, ct, u8(version) + u8(scheme))
