"""Keys, certificates and the gateway resolver registry.

Signatures are Ed25519 (deterministic for a given key and message).  Key
material is derived from a label so every simulated run is reproducible.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from typing import Optional, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from blockgate.encoding import DecodeError, decode, encode, sha256


class KeyRole(Enum):
    CONSORTIUM_ROOT = "ConsortiumRoot"
    VASP_IDENTITY = "VaspIdentity"
    GATEWAY_IDENTITY = "GatewayIdentity"
    TRANSACTION_SIGNING = "TransactionSigning"
    DEVICE_ATTESTATION = "DeviceAttestation"


# issuer role -> subject roles it may certify
ISSUANCE_RULES: dict[KeyRole, frozenset[KeyRole]] = {
    KeyRole.CONSORTIUM_ROOT: frozenset({KeyRole.VASP_IDENTITY}),
    KeyRole.VASP_IDENTITY: frozenset({KeyRole.GATEWAY_IDENTITY, KeyRole.TRANSACTION_SIGNING}),
}


class IdentityError(Exception):
    pass


class RoleNotPermitted(IdentityError):
    pass


class UnknownIdentifier(IdentityError, KeyError):
    pass


class KeyRoleViolation(IdentityError):
    """A key was used for a purpose its role does not cover."""


@lru_cache(maxsize=4096)
def _private(raw: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(raw)


@lru_cache(maxsize=4096)
def _public(raw: bytes) -> Ed25519PublicKey:
    return Ed25519PublicKey.from_public_bytes(raw)


def key_digest(public_key: bytes) -> bytes:
    return sha256(public_key)


@dataclass(frozen=True)
class KeyPair:
    role: KeyRole
    public_key: bytes
    private_key: bytes = field(repr=False)

    @classmethod
    def derive(cls, label: str, role: KeyRole) -> "KeyPair":
        seed = sha256(f"blockgate-key:{role.value}:{label}".encode())
        return cls.from_seed(seed, role)

    @classmethod
    def from_seed(cls, seed: bytes, role: KeyRole) -> "KeyPair":
        public = _private(seed).public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        return cls(role=role, public_key=public, private_key=seed)

    @property
    def digest(self) -> bytes:
        return key_digest(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return sign(self.private_key, message)


def sign(private_key: bytes, message: bytes) -> bytes:
    return _private(private_key).sign(message)


@lru_cache(maxsize=65536)
def verify(public_key: bytes, message: bytes, signature: bytes) -> bool:
    """Ed25519 verification (pure, so results are memoized)."""
    try:
        _public(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def sign_as(keypair: KeyPair, role: KeyRole, message: bytes) -> bytes:
    """Sign only if ``keypair`` holds ``role``; enforces key-role separation."""
    if keypair.role is not role:
        raise KeyRoleViolation(f"{keypair.role.value} key used for {role.value} signature")
    return keypair.sign(message)


_LEI = re.compile(r"^[A-Z0-9]{20}$")


@dataclass(frozen=True)
class EVFields:
    legal_name: str
    jurisdiction: str
    lei: str

    def well_formed(self) -> bool:
        return bool(self.legal_name.strip()) and bool(self.jurisdiction.strip()) and bool(
            _LEI.match(self.lei)
        )


@dataclass(frozen=True)
class Certificate:
    subject_public_key: bytes
    subject_role: KeyRole
    issuer_key_digest: bytes
    serial: int
    ev_fields: Optional[EVFields] = None
    binding_digest: Optional[bytes] = None
    signature: bytes = b""

    @property
    def subject_key_digest(self) -> bytes:
        return key_digest(self.subject_public_key)

    def tbs_bytes(self) -> bytes:
        return encode(self, exclude=("signature",))

    def to_bytes(self) -> bytes:
        return encode(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        return decode(cls, data)

    @property
    def digest(self) -> bytes:
        return sha256(self.to_bytes())


def issue_certificate(
    issuer: KeyPair,
    issuer_cert: Optional[Certificate],
    subject_public_key: bytes,
    subject_role: KeyRole,
    serial: int,
    ev_fields: Optional[EVFields] = None,
    binding_digest: Optional[bytes] = None,
) -> Certificate:
    """Issue a certificate; ``issuer_cert=None`` means ``issuer`` is the consortium root."""
    issuer_role = KeyRole.CONSORTIUM_ROOT if issuer_cert is None else issuer_cert.subject_role
    if issuer_cert is not None and issuer_cert.subject_public_key != issuer.public_key:
        raise RoleNotPermitted("issuer key does not match issuer certificate")
    if subject_role not in ISSUANCE_RULES.get(issuer_role, frozenset()):
        raise RoleNotPermitted(f"{issuer_role.value} may not issue {subject_role.value}")
    cert = Certificate(
        subject_public_key=subject_public_key,
        subject_role=subject_role,
        issuer_key_digest=issuer.digest,
        serial=serial,
        ev_fields=ev_fields,
        binding_digest=binding_digest,
    )
    return replace(cert, signature=issuer.sign(cert.tbs_bytes()))


def self_signed_root(root: KeyPair, serial: int = 1) -> Certificate:
    cert = Certificate(
        subject_public_key=root.public_key,
        subject_role=KeyRole.CONSORTIUM_ROOT,
        issuer_key_digest=root.digest,
        serial=serial,
    )
    return replace(cert, signature=root.sign(cert.tbs_bytes()))


class FailureReason(Enum):
    BAD_SIGNATURE = "BadSignature"
    BROKEN_BINDING = "BrokenBinding"
    UNTRUSTED_ROOT = "UntrustedRoot"
    ROLE_VIOLATION = "RoleViolation"


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    vasp_cert: Optional[Certificate] = None
    failure_reason: Optional[FailureReason] = None


def _fail(reason: FailureReason) -> ValidationReport:
    return ValidationReport(ok=False, failure_reason=reason)


def validate_chain(chain: Sequence[Certificate], trust_root_key: bytes) -> ValidationReport:
    """Validate ``[leaf, vasp, root]`` (or ``[vasp, root]``) up to ``trust_root_key``.

    Checks run top-down in a fixed order so that a single corrupted field
    always maps to one reason: root identity, role structure, the upper
    signatures, the gateway-to-VASP binding, then the leaf signature.
    """
    if len(chain) not in (2, 3):
        return _fail(FailureReason.ROLE_VIOLATION)
    leaf, vasp, root = (None, *chain) if len(chain) == 2 else chain

    root_digest = key_digest(trust_root_key)
    if root.subject_public_key != trust_root_key or root.issuer_key_digest != root_digest:
        return _fail(FailureReason.UNTRUSTED_ROOT)
    if vasp.issuer_key_digest != root_digest:
        return _fail(FailureReason.UNTRUSTED_ROOT)

    if root.subject_role is not KeyRole.CONSORTIUM_ROOT:
        return _fail(FailureReason.ROLE_VIOLATION)
    if vasp.subject_role not in ISSUANCE_RULES[KeyRole.CONSORTIUM_ROOT]:
        return _fail(FailureReason.ROLE_VIOLATION)
    if leaf is not None and leaf.subject_role not in ISSUANCE_RULES[KeyRole.VASP_IDENTITY]:
        return _fail(FailureReason.ROLE_VIOLATION)

    if not verify(trust_root_key, root.tbs_bytes(), root.signature):
        return _fail(FailureReason.BAD_SIGNATURE)
    if not verify(trust_root_key, vasp.tbs_bytes(), vasp.signature):
        return _fail(FailureReason.BAD_SIGNATURE)
    if leaf is None:
        return ValidationReport(ok=True, vasp_cert=vasp)

    if leaf.subject_role is KeyRole.GATEWAY_IDENTITY and leaf.binding_digest != vasp.digest:
        return _fail(FailureReason.BROKEN_BINDING)
    if leaf.issuer_key_digest != vasp.subject_key_digest:
        return _fail(FailureReason.BAD_SIGNATURE)
    if not verify(vasp.subject_public_key, leaf.tbs_bytes(), leaf.signature):
        return _fail(FailureReason.BAD_SIGNATURE)
    return ValidationReport(ok=True, vasp_cert=vasp)


def encode_chain(chain: Sequence[Certificate]) -> tuple[bytes, ...]:
    return tuple(c.to_bytes() for c in chain)


def decode_chain(blobs: Sequence[bytes]) -> Optional[tuple[Certificate, ...]]:
    try:
        return tuple(Certificate.from_bytes(b) for b in blobs)
    except (DecodeError, TypeError, ValueError):
        return None


@dataclass(frozen=True)
class AttestationClaim:
    """Opaque device attestation: only the signature is checked."""

    measurement_digest: bytes
    nonce: bytes
    signature: bytes = b""

    def tbs_bytes(self) -> bytes:
        return encode(self, exclude=("signature",))

    @classmethod
    def make(cls, device_key: KeyPair, measurement: bytes, nonce: bytes) -> "AttestationClaim":
        claim = cls(measurement_digest=sha256(measurement), nonce=nonce)
        return replace(claim, signature=sign_as(device_key, KeyRole.DEVICE_ATTESTATION, claim.tbs_bytes()))

    def verify(self, device_public_key: bytes) -> bool:
        return verify(device_public_key, self.tbs_bytes(), self.signature)


@dataclass(frozen=True)
class GatewayIdentifier:
    id: str
    current_address: str


@dataclass
class ResolverRegistry:
    """In-process map from persistent gateway identifiers to endpoints."""

    _entries: dict[str, GatewayIdentifier] = field(default_factory=dict)
    _owners: dict[str, bytes] = field(default_factory=dict)

    def register(self, gateway_id: str, endpoint: str, owner_vasp_digest: Optional[bytes] = None) -> GatewayIdentifier:
        ident = GatewayIdentifier(id=gateway_id, current_address=endpoint)
        self._entries[gateway_id] = ident
        if owner_vasp_digest is not None:
            self._owners[gateway_id] = owner_vasp_digest
        return ident

    def resolve(self, gateway_id: str) -> str:
        try:
            return self._entries[gateway_id].current_address
        except KeyError:
            raise UnknownIdentifier(gateway_id) from None

    def owner_of(self, gateway_id: str) -> Optional[bytes]:
        return self._owners.get(gateway_id)

    def __contains__(self, gateway_id: str) -> bool:
        return gateway_id in self._entries

    def identifiers(self) -> list[str]:
        return sorted(self._entries)


@dataclass(frozen=True)
class GatewayCredentials:
    """Everything a gateway device holds: the four key roles plus its chain."""

    gateway_id: str
    vasp_key: KeyPair
    identity_key: KeyPair
    tx_key: KeyPair
    device_key: KeyPair
    chain: tuple[Certificate, Certificate, Certificate]  # gateway, vasp, root
    tx_cert: Certificate

    @property
    def gateway_cert(self) -> Certificate:
        return self.chain[0]

    @property
    def vasp_cert(self) -> Certificate:
        return self.chain[1]

    @property
    def digest(self) -> bytes:
        return self.identity_key.digest


@dataclass(frozen=True)
class Consortium:
    root_key: KeyPair
    root_cert: Certificate

    @classmethod
    def create(cls, label: str = "consortium") -> "Consortium":
        key = KeyPair.derive(label, KeyRole.CONSORTIUM_ROOT)
        return cls(root_key=key, root_cert=self_signed_root(key))

    def enroll_vasp(self, label: str, ev: EVFields, serial: int) -> tuple[KeyPair, Certificate]:
        key = KeyPair.derive(label, KeyRole.VASP_IDENTITY)
        cert = issue_certificate(self.root_key, None, key.public_key, KeyRole.VASP_IDENTITY, serial, ev_fields=ev)
        return key, cert


@lru_cache(maxsize=256)
def provision_gateway(
    consortium: Consortium, gateway_id: str, vasp_label: str, ev: EVFields, bind: bool = True
) -> GatewayCredentials:
    """Derive keys and issue the certificate hierarchy for one gateway.

    ``bind=False`` omits the VASP binding digest (a deliberately broken chain
    used by rejection scenarios).
    """
    serial = int.from_bytes(sha256(vasp_label.encode())[:4], "big") % 10_000 + 100
    vasp_key, vasp_cert = consortium.enroll_vasp(vasp_label, ev, serial=serial)
    identity = KeyPair.derive(gateway_id, KeyRole.GATEWAY_IDENTITY)
    tx_key = KeyPair.derive(gateway_id, KeyRole.TRANSACTION_SIGNING)
    device = KeyPair.derive(gateway_id, KeyRole.DEVICE_ATTESTATION)
    gw_cert = issue_certificate(
        vasp_key, vasp_cert, identity.public_key, KeyRole.GATEWAY_IDENTITY, serial=1,
        binding_digest=vasp_cert.digest if bind else None,
    )
    tx_cert = issue_certificate(
        vasp_key, vasp_cert, tx_key.public_key, KeyRole.TRANSACTION_SIGNING, serial=2,
        binding_digest=vasp_cert.digest,
    )
    return GatewayCredentials(
        gateway_id=gateway_id,
        vasp_key=vasp_key,
        identity_key=identity,
        tx_key=tx_key,
        device_key=device,
        chain=(gw_cert, vasp_cert, consortium.root_cert),
        tx_cert=tx_cert,
    )
