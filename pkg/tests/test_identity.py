from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from blockgate.identity import (
    AttestationClaim,
    Certificate,
    Consortium,
    EVFields,
    FailureReason,
    KeyPair,
    KeyRole,
    KeyRoleViolation,
    ResolverRegistry,
    RoleNotPermitted,
    UnknownIdentifier,
    decode_chain,
    encode_chain,
    issue_certificate,
    provision_gateway,
    sign,
    sign_as,
    validate_chain,
    verify,
)

from chain_mutation import EV, mutations, valid_chain


# -- sign / verify ------------------------------------------------------------


def test_verify_round_trip():
    k = KeyPair.derive("v1", KeyRole.VASP_IDENTITY)
    sig = sign(k.private_key, b"hello")
    assert verify(k.public_key, b"hello", sig)
    assert sign(k.private_key, b"hello") == sig  # deterministic


def test_verify_rejects_flipped_byte():
    k = KeyPair.derive("v1", KeyRole.VASP_IDENTITY)
    sig = k.sign(b"hello")
    assert not verify(k.public_key, b"hellp", sig)


def test_verify_rejects_other_vasp_key():
    a = KeyPair.derive("v1", KeyRole.VASP_IDENTITY)
    b = KeyPair.derive("v2", KeyRole.VASP_IDENTITY)
    assert not verify(b.public_key, b"m", a.sign(b"m"))


def test_verify_rejects_garbage_key():
    assert not verify(b"short", b"m", b"\0" * 64)


@settings(max_examples=40, deadline=None)
@given(st.binary(max_size=200), st.integers(0, 199))
def test_any_single_byte_flip_fails(msg, pos):
    k = KeyPair.derive("flip", KeyRole.GATEWAY_IDENTITY)
    sig = k.sign(msg)
    assert verify(k.public_key, msg, sig)
    if msg:
        i = pos % len(msg)
        assert not verify(k.public_key, msg[:i] + bytes([msg[i] ^ 0xFF]) + msg[i + 1:], sig)


def test_four_roles_use_distinct_keys():
    creds = provision_gateway(Consortium.create("distinct"), "gw-d", "vasp-d", EV)
    keys = {creds.vasp_key.public_key, creds.identity_key.public_key, creds.tx_key.public_key,
            creds.device_key.public_key}
    assert len(keys) == 4


def test_sign_as_enforces_role():
    tx_key = KeyPair.derive("gw", KeyRole.TRANSACTION_SIGNING)
    with pytest.raises(KeyRoleViolation):
        sign_as(tx_key, KeyRole.GATEWAY_IDENTITY, b"message")
    assert sign_as(tx_key, KeyRole.TRANSACTION_SIGNING, b"message")


# -- issuance -------------------------------------------------------------------


def test_root_issues_vasp_chain_of_two():
    c = Consortium.create("two")
    _, vasp_cert = c.enroll_vasp("vasp-two", EV, serial=7)
    report = validate_chain((vasp_cert, c.root_cert), c.root_key.public_key)
    assert report.ok and report.vasp_cert == vasp_cert


def test_vasp_issues_bound_gateway_cert():
    chain, root = valid_chain("bound")
    report = validate_chain(chain, root)
    assert report.ok
    assert chain[0].binding_digest == report.vasp_cert.digest


def test_gateway_cannot_issue():
    creds = provision_gateway(Consortium.create("iss"), "gw-i", "vasp-i", EV)
    other = KeyPair.derive("sub", KeyRole.TRANSACTION_SIGNING)
    with pytest.raises(RoleNotPermitted):
        issue_certificate(creds.identity_key, creds.gateway_cert, other.public_key, KeyRole.TRANSACTION_SIGNING, 1)


def test_root_cannot_issue_gateway_directly():
    c = Consortium.create("direct")
    gw = KeyPair.derive("gw", KeyRole.GATEWAY_IDENTITY)
    with pytest.raises(RoleNotPermitted):
        issue_certificate(c.root_key, None, gw.public_key, KeyRole.GATEWAY_IDENTITY, 1)


# -- validation -------------------------------------------------------------------


def test_three_level_chain_ok():
    chain, root = valid_chain()
    assert validate_chain(chain, root).ok


def test_binding_to_other_vasp_breaks():
    c = Consortium.create("bind")
    vk, vcert = c.enroll_vasp("vasp-a", EV, 1)
    _, other = c.enroll_vasp("vasp-b", EV, 2)
    gw = KeyPair.derive("gw-b", KeyRole.GATEWAY_IDENTITY)
    leaf = issue_certificate(vk, vcert, gw.public_key, KeyRole.GATEWAY_IDENTITY, 3, binding_digest=other.digest)
    report = validate_chain((leaf, vcert, c.root_cert), c.root_key.public_key)
    assert report.failure_reason is FailureReason.BROKEN_BINDING


def test_unbound_gateway_cert_breaks():
    creds = provision_gateway(Consortium.create("unbound"), "gw-u", "vasp-u", EV, bind=False)
    report = validate_chain(creds.chain, creds.chain[2].subject_public_key)
    assert report.failure_reason is FailureReason.BROKEN_BINDING


def test_unknown_root():
    chain, _ = valid_chain()
    stranger = KeyPair.derive("stranger-root", KeyRole.CONSORTIUM_ROOT)
    assert validate_chain(chain, stranger.public_key).failure_reason is FailureReason.UNTRUSTED_ROOT


def test_wrong_length_chain():
    chain, root = valid_chain()
    assert validate_chain(chain[:1], root).failure_reason is FailureReason.ROLE_VIOLATION


@pytest.mark.parametrize("pos,field_name,mutated,reason", list(mutations(valid_chain()[0])),
                         ids=lambda v: v if isinstance(v, str) else None)
def test_single_field_mutation(pos, field_name, mutated, reason):
    _, root = valid_chain()
    report = validate_chain(mutated, root)
    assert not report.ok
    assert report.failure_reason is reason


def test_chain_bytes_round_trip():
    chain, root = valid_chain()
    back = decode_chain(encode_chain(chain))
    assert back == chain and validate_chain(back, root).ok
    assert decode_chain((b"\x00\x01",)) is None


def test_ev_lei_format():
    assert EV.well_formed()
    assert not EVFields("X", "CH", "too-short").well_formed()
    assert not EVFields("", "CH", "A" * 20).well_formed()


def test_attestation_claim():
    device = KeyPair.derive("dev", KeyRole.DEVICE_ATTESTATION)
    claim = AttestationClaim.make(device, b"firmware", b"nonce-1")
    assert claim.verify(device.public_key)
    assert not replace(claim, nonce=b"nonce-2").verify(device.public_key)


# -- resolver ---------------------------------------------------------------------


def test_register_and_resolve():
    reg = ResolverRegistry()
    reg.register("g2", "ep7")
    assert reg.resolve("g2") == "ep7"


def test_reregister_keeps_id():
    reg = ResolverRegistry()
    first = reg.register("g2", "ep7")
    second = reg.register("g2", "ep9")
    assert reg.resolve("g2") == "ep9"
    assert first.id == second.id and reg.identifiers() == ["g2"]


def test_resolve_unknown():
    with pytest.raises(UnknownIdentifier):
        ResolverRegistry().resolve("ghost")
