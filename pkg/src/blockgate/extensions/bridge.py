"""Read-only bridge node that exports redacted, recipient-gated evidence."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

from blockgate.encoding import encode, encode_fields, encode_int, sha256
from blockgate.identity import KeyPair, key_digest, verify
from blockgate.ledger import LedgerReader


class InvalidToken(Exception):
    pass


class UnknownAsset(Exception):
    pass


class AccessDenied(Exception):
    pass


@dataclass(frozen=True)
class AuthorizationToken:
    issuer_public_key: bytes
    asset_id: str
    recipient_digest: bytes
    expiry: int
    signature: bytes = b""

    @classmethod
    def issue(cls, owner: KeyPair, asset_id: str, recipient_digest: bytes, expiry: int) -> "AuthorizationToken":
        token = cls(owner.public_key, asset_id, recipient_digest, expiry)
        return replace(token, signature=owner.sign(token.tbs_bytes()))

    def tbs_bytes(self) -> bytes:
        return encode(self, exclude=("signature",))

    @property
    def issuer_digest(self) -> bytes:
        return key_digest(self.issuer_public_key)


@dataclass(frozen=True)
class RedactedEvidence:
    asset_profile_id: str
    asset_digest: bytes
    current_owner_key_digest: bytes
    ledger_proof_digest: bytes
    encrypted_for: bytes

    def to_bytes(self) -> bytes:
        return encode(self)

    def open(self, recipient: KeyPair) -> "RedactedEvidence":
        """Only the named recipient's key can open the evidence."""
        if recipient.digest != self.encrypted_for:
            raise AccessDenied("evidence is sealed for another recipient")
        return self


@dataclass
class BridgeNode:
    """Holds a read-only ledger handle; it has no path to append."""

    reader: LedgerReader
    allowed_recipients: Optional[frozenset[bytes]] = None
    archive: list[AuthorizationToken] = field(default_factory=list)

    def export(self, asset_id: str, token: AuthorizationToken, recipient_key: bytes, tick: int) -> RedactedEvidence:
        recipient = key_digest(recipient_key)
        record = self.reader.asset_record(asset_id, tick)
        if record is None:
            raise UnknownAsset(asset_id)
        if not verify(token.issuer_public_key, token.tbs_bytes(), token.signature):
            raise InvalidToken("bad token signature")
        if token.asset_id != asset_id or token.recipient_digest != recipient:
            raise InvalidToken("token names another asset or recipient")
        if tick >= token.expiry:
            raise InvalidToken("token expired")
        if token.issuer_digest != record.owner_key:
            raise InvalidToken("token not issued by the current owner")
        if self.allowed_recipients is not None and recipient not in self.allowed_recipients:
            raise InvalidToken("recipient not on the export allowlist")
        self.archive.append(token)
        return RedactedEvidence(
            asset_profile_id=record.profile_id,
            asset_digest=sha256(asset_id.encode()),
            current_owner_key_digest=record.owner_key,
            ledger_proof_digest=self._proof(asset_id),
            encrypted_for=recipient,
        )

    def _proof(self, asset_id: str) -> bytes:
        # commits to the headers of every block touching the asset without naming their parties
        blocks: Iterable = (b for b, _ in self.reader.history(asset_id))
        return sha256(encode_fields(*(encode_fields(encode_int(b.height), b.header_hash) for b in blocks)))
