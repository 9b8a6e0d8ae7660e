import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from trusted_tickets import crypto
from trusted_tickets.credentials import GroupSubject, SubjectKind, make_credential, verify_credential
from trusted_tickets.crypto import DecryptFailure, Rng, hash_bytes
from trusted_tickets.structures import ZERO_PCR, CertifyInfo, KeyKind, replay_log
from trusted_tickets.tpm import (
    AikNotActivated,
    AlreadyActivated,
    AlreadyOwned,
    BadHandle,
    BadIndex,
    BadOwnerProof,
    ForeignBlob,
    KeyUsageViolation,
    LoadFailure,
    NotOwned,
    PcrMismatch,
    SubjectMismatch,
    create_tpm,
    identity_binding_message,
    owner_proof,
    verify_quote,
)
from trusted_tickets.wire import pack_fields

MANUFACTURER = crypto.generate_keypair(Rng(100))
GROUP = crypto.generate_keypair(Rng(101))
SECRET = b"owner secret"
PROOF = owner_proof(SECRET)


def owned(seed=1):
    tpm, cred = create_tpm(Rng(seed), MANUFACTURER)
    tpm.take_ownership(SECRET)
    return tpm


def activation_blob(ek_public: bytes, aik_public: bytes, rng=None, named=None):
    """What a PCA would send: a group credential for ``named`` (default: the AIK)."""
    subject = GroupSubject(named or aik_public, 1, {"impact_factor": "1"}, 1)
    cred = make_credential(SubjectKind.AIK_GROUP, subject.encode(), GROUP.private, GROUP.public)
    inner = pack_fields(hash_bytes(named or aik_public).bytes, cred.encode())
    return crypto.encrypt_to(ek_public, inner, rng or Rng(5))


def activated_aik(tpm):
    handle, binding = tpm.make_identity(PROOF, "aik")
    tpm.activate_identity(handle, activation_blob(tpm.ek_public, binding.aik_public))
    return handle, binding.aik_public


# -- manufacture and ownership -------------------------------------------------


def test_create_tpm_credential_and_platform_id():
    tpm, cred = create_tpm(Rng(1), MANUFACTURER)
    other, _ = create_tpm(Rng(2), MANUFACTURER)
    assert verify_credential(cred, MANUFACTURER.public)
    assert cred.subject_kind == SubjectKind.EK and cred.subject_bytes == tpm.ek_public
    assert tpm.platform_id == hashlib.sha256(tpm.ek_public).digest()
    assert tpm.platform_id != other.platform_id
    assert all(tpm.read_pcr(i) == ZERO_PCR for i in range(24))
    assert tpm.pcr_count == 24


def test_ownership_gates_owner_commands():
    tpm, _ = create_tpm(Rng(1), MANUFACTURER)
    with pytest.raises(NotOwned):
        tpm.make_identity(PROOF, "x")
    with pytest.raises(NotOwned):
        tpm.create_signing_key(PROOF)
    tpm.take_ownership(SECRET)
    with pytest.raises(AlreadyOwned):
        tpm.take_ownership(b"again")
    with pytest.raises(BadOwnerProof):
        tpm.make_identity(owner_proof(b"wrong"), "x")
    with pytest.raises(BadOwnerProof):
        tpm.create_binding_key(owner_proof(b"wrong"))
    tpm.make_identity(PROOF, "x")


# -- PCRs --------------------------------------------------------------------


def test_extend_definition_and_log():
    tpm = owned()
    m = hash_bytes(b"kernel")
    value = tpm.extend_pcr(4, m, "kernel")
    assert value == hashlib.sha256(ZERO_PCR + m.bytes).digest()
    assert len(tpm.measurement_log) == 1
    assert tpm.measurement_log[0].description == "kernel"
    with pytest.raises(BadIndex):
        tpm.extend_pcr(24, m)
    with pytest.raises(BadIndex):
        tpm.read_pcr(-1)


@given(st.lists(st.binary(min_size=1, max_size=8), min_size=1, max_size=6))
@settings(max_examples=30, deadline=None)
def test_pcr_matches_independent_hash_chain(items):
    tpm, _ = create_tpm(Rng(3), MANUFACTURER)
    expected = ZERO_PCR
    for item in items:
        m = hashlib.sha256(item).digest()
        tpm.extend_pcr(7, hash_bytes(item))
        expected = hashlib.sha256(expected + m).digest()
    assert tpm.read_pcr(7) == expected
    assert len(tpm.measurement_log) == len(items)


def test_extend_is_order_sensitive():
    a, b = owned(1), owned(2)
    m1, m2 = hash_bytes(b"1"), hash_bytes(b"2")
    a.extend_pcr(0, m1)
    a.extend_pcr(0, m2)
    b.extend_pcr(0, m2)
    b.extend_pcr(0, m1)
    assert a.read_pcr(0) != b.read_pcr(0)


def test_composite_of_empty_selection():
    assert owned().composite([]).bytes == hashlib.sha256(b"").digest()


# -- identities ----------------------------------------------------------------


def test_make_identity_binding_verifies_and_keys_differ():
    tpm = owned()
    h1, b1 = tpm.make_identity(PROOF, "first")
    h2, b2 = tpm.make_identity(PROOF, "first")
    assert crypto.verify(b1.aik_public, b1.binding_signature, identity_binding_message("first", b1.aik_public))
    assert b1.aik_public != b2.aik_public and h1 != h2
    assert tpm.key_kind(h1) == KeyKind.AIK and not tpm.is_activated(h1)


def test_activate_identity_paths():
    tpm = owned()
    handle, binding = tpm.make_identity(PROOF, "aik")
    blob = activation_blob(tpm.ek_public, binding.aik_public)

    other = owned(9)
    other_handle, _ = other.make_identity(PROOF, "aik")
    with pytest.raises(DecryptFailure):
        other.activate_identity(other_handle, blob)

    _, stranger = tpm.make_identity(PROOF, "stranger")
    crossed = activation_blob(tpm.ek_public, binding.aik_public, named=stranger.aik_public)
    with pytest.raises(SubjectMismatch):
        tpm.activate_identity(handle, crossed)

    cred = tpm.activate_identity(handle, blob)
    assert GroupSubject.decode(cred.subject_bytes).aik_public == binding.aik_public
    assert tpm.is_activated(handle)
    with pytest.raises(AlreadyActivated):
        tpm.activate_identity(handle, blob)


# -- wrapped keys ----------------------------------------------------------------


def test_wrapped_key_is_bound_to_its_tpm():
    tpm, other = owned(1), owned(2)
    blob = tpm.create_signing_key(PROOF)
    h1, h2 = tpm.load_key(blob), tpm.load_key(blob)
    assert h1 != h2
    sig = tpm.sign_with_key(h1, b"data")
    assert crypto.verify(tpm.public_key(h1), sig, b"data")
    with pytest.raises(LoadFailure):
        other.load_key(blob)
    tampered = bytearray(blob)
    tampered[-1] ^= 1
    with pytest.raises(LoadFailure):
        tpm.load_key(bytes(tampered))
    with pytest.raises(LoadFailure):
        tpm.load_key(b"\x01\x20junk")


def test_constraint_survives_wrap_and_is_enforced():
    tpm = owned()
    tpm.extend_pcr(1, hash_bytes(b"boot"))
    constraint = tpm.current_constraint([1])
    handle = tpm.load_key(tpm.create_signing_key(PROOF, constraint))
    tpm.sign_with_key(handle, b"ok")
    tpm.extend_pcr(1, hash_bytes(b"drift"))
    with pytest.raises(PcrMismatch):
        tpm.sign_with_key(handle, b"no")


def test_handles_never_reused_after_flush():
    tpm = owned()
    h1 = tpm.load_key(tpm.create_signing_key(PROOF))
    tpm.flush_key(h1)
    h2 = tpm.load_key(tpm.create_signing_key(PROOF))
    assert h2 != h1
    with pytest.raises(BadHandle):
        tpm.sign_with_key(h1, b"x")
    with pytest.raises(KeyUsageViolation):
        tpm.flush_key(tpm.ek_handle)


def test_cannot_create_identity_kinds_directly():
    with pytest.raises(KeyUsageViolation):
        owned().create_key(PROOF, KeyKind.AIK)


# -- certify, sign, unbind -------------------------------------------------------


def test_certify_key_signature_and_nonce_echo():
    tpm = owned()
    aik, aik_public = activated_aik(tpm)
    csk = tpm.load_key(tpm.create_signing_key(PROOF))
    info_bytes, sig = tpm.certify_key(aik, csk, b"nonce-123")
    info = CertifyInfo.decode(info_bytes)
    assert info.nonce == b"nonce-123" and info.public == tpm.public_key(csk)
    assert info.key_kind == KeyKind.SIGNING
    expected_msg = hashlib.sha256(bytes([SubjectKind.CSK]) + info_bytes).digest()
    assert crypto.verify(aik_public, sig, expected_msg)


def test_certify_requires_activated_aik_and_real_key():
    tpm = owned()
    handle, _ = tpm.make_identity(PROOF, "fresh")
    csk = tpm.load_key(tpm.create_signing_key(PROOF))
    with pytest.raises(AikNotActivated):
        tpm.certify_key(handle, csk, b"n")
    aik, _ = activated_aik(tpm)
    with pytest.raises(BadHandle):
        tpm.certify_key(aik, tpm.ek_handle, b"n")
    with pytest.raises(BadHandle):
        tpm.certify_key(csk, csk, b"n")


def test_identity_keys_cannot_sign_or_unbind():
    tpm = owned()
    aik, _ = activated_aik(tpm)
    for handle in (aik, tpm.ek_handle):
        with pytest.raises(KeyUsageViolation):
            tpm.sign_with_key(handle, b"arbitrary")
        with pytest.raises(KeyUsageViolation):
            tpm.unbind(handle, b"blob")
    binding = tpm.load_key(tpm.create_binding_key(PROOF))
    with pytest.raises(KeyUsageViolation):
        tpm.sign_with_key(binding, b"x")


def test_unbind_state_gate_and_cross_device():
    tpm, other = owned(1), owned(2)
    tpm.extend_pcr(0, hash_bytes(b"fw"))
    handle = tpm.load_key(tpm.create_binding_key(PROOF, tpm.current_constraint([0])))
    blob = crypto.encrypt_to(tpm.public_key(handle), b"hello", Rng(4))
    assert tpm.unbind(handle, blob) == b"hello"

    other_handle = other.load_key(other.create_binding_key(PROOF))
    with pytest.raises(DecryptFailure):
        other.unbind(other_handle, blob)

    tpm.extend_pcr(0, hash_bytes(b"evil"))
    with pytest.raises(PcrMismatch):
        tpm.unbind(handle, blob)


# -- seal --------------------------------------------------------------------


def test_seal_unseal_paths():
    tpm, other = owned(1), owned(2)
    tpm.extend_pcr(2, hash_bytes(b"os"))
    blob = tpm.seal(b"stored message", [2, 3])
    assert b"stored message" not in blob
    assert tpm.unseal(blob) == b"stored message"
    with pytest.raises(ForeignBlob):
        other.unseal(blob)
    with pytest.raises(ForeignBlob):
        tpm.unseal(blob[:-1] + bytes([blob[-1] ^ 1]))
    tpm.extend_pcr(5, hash_bytes(b"unselected"))
    assert tpm.unseal(blob) == b"stored message"
    tpm.extend_pcr(3, hash_bytes(b"selected"))
    with pytest.raises(PcrMismatch):
        tpm.unseal(blob)


# -- quote ---------------------------------------------------------------------


def test_quote_verifies_and_log_replays():
    tpm = owned()
    for i, name in enumerate([b"fw", b"loader", b"os", b"app"]):
        tpm.extend_pcr(i % 3, hash_bytes(name), name.decode())
    aik, aik_public = activated_aik(tpm)
    quote = tpm.quote(aik, b"fresh", [0, 2])
    assert verify_quote(quote, aik_public, b"fresh")
    assert not verify_quote(quote, aik_public, b"stale")
    assert replay_log(quote.log, quote.selection) == quote.composite == tpm.composite([0, 2])
    assert {e.pcr_index for e in quote.log} <= {0, 2}

    # independent replay with hashlib
    values = {0: ZERO_PCR, 2: ZERO_PCR}
    for e in quote.log:
        values[e.pcr_index] = hashlib.sha256(values[e.pcr_index] + e.measurement).digest()
    assert hashlib.sha256(values[0] + values[2]).digest() == quote.composite.bytes

    handle, _ = tpm.make_identity(PROOF, "unactivated")
    with pytest.raises(AikNotActivated):
        tpm.quote(handle, b"n", [0])


def test_shielded_secrets_never_in_outputs():
    tpm = owned()
    aik, _ = activated_aik(tpm)
    outputs = []
    blob = tpm.create_signing_key(PROOF)
    outputs.append(blob)
    csk = tpm.load_key(blob)
    outputs.extend(tpm.certify_key(aik, csk, b"n"))
    outputs.append(tpm.sign_with_key(csk, b"d"))
    outputs.append(tpm.seal(b"data", [0]))
    outputs.append(tpm.quote(aik, b"n", [0, 1]).encode())
    outputs.append(tpm.ek_credential.encode())
    secrets = tpm._shielded_secrets()
    assert len(secrets) >= 4
    for out in outputs:
        for secret in secrets:
            assert secret not in out


def test_extend_from_zero_is_frozen():
    tpm = owned()
    value = tpm.extend_pcr(0, crypto.Digest(bytes(32)))
    assert value.hex() == "f5a5fd42d16a20302798ef6ed309979b43003d2320d9f0e8ea9831a92759fb4b"
    assert value == hashlib.sha256(bytes(64)).digest()


def test_reboot_resets_pcrs_and_keeps_keys():
    tpm = owned()
    tpm.extend_pcr(1, hash_bytes(b"boot"))
    blob = tpm.seal(b"persisted", [1])
    aik, _ = activated_aik(tpm)
    tpm.reboot()
    assert tpm.read_pcr(1) == ZERO_PCR and tpm.measurement_log == []
    assert aik in tpm.handles()
    with pytest.raises(PcrMismatch):
        tpm.unseal(blob)
    tpm.extend_pcr(1, hash_bytes(b"boot"))
    assert tpm.unseal(blob) == b"persisted"
