"""Wire vocabulary exchanged between peer gateways."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

from blockgate.encoding import decode, encode, encode_fields, sha256
from blockgate.identity import AttestationClaim, KeyPair, KeyRole, sign_as, verify


class Step(Enum):
    TRANSFER_PROPOSAL = "TransferProposal"
    PROPOSAL_RESPONSE = "ProposalResponse"
    LOCK_EVIDENCE = "LockEvidence"
    EVIDENCE_ACK = "EvidenceAck"
    PREPARE_COMMIT = "PrepareCommit"
    PREPARE_ACK = "PrepareAck"
    COMMIT_FINAL = "CommitFinal"
    ACK_FINAL = "AckFinal"
    ABORT = "Abort"


# position of each message in the twelve-step flow (0: outside the numbered flow)
STEP_NUMBER: dict[Step, int] = {
    Step.TRANSFER_PROPOSAL: 1,
    Step.PROPOSAL_RESPONSE: 1,
    Step.LOCK_EVIDENCE: 3,
    Step.EVIDENCE_ACK: 5,
    Step.PREPARE_COMMIT: 6,
    Step.PREPARE_ACK: 7,
    Step.COMMIT_FINAL: 9,
    Step.ACK_FINAL: 11,
    Step.ABORT: 0,
}

COMMIT_MODE_2PC = "TwoPC"


@dataclass(frozen=True)
class NegotiatedParams:
    t1: int
    t2: int
    t3: int
    commit_mode: str
    t_block_l1: int
    t_block_l2: int
    asset_profile_id: str
    travel_rule_payload: bytes

    def digest(self) -> bytes:
        return sha256(encode(self))

    def problems(self) -> list[str]:
        out = []
        if min(self.t1, self.t2, self.t3) <= 0:
            out.append("non-positive timing parameter")
        if self.commit_mode != COMMIT_MODE_2PC:
            out.append(f"unsupported commit mode {self.commit_mode}")
        if self.t_block_l1 < self.t3 + self.t1:
            out.append("L1 lock shorter than protocol budget")
        if self.t_block_l2 < self.t3 + self.t2:
            out.append("L2 lock shorter than protocol budget")
        return out

    @property
    def step_timeout(self) -> int:
        return max(1, self.t3 // 4)


@dataclass(frozen=True)
class TransferProposal:
    asset_id: str
    asset_profile_id: str
    fungible_amount: Optional[int]
    originator_digest: bytes
    beneficiary_digest: bytes
    origin_chain_id: str
    dest_chain_id: str
    origin_gateway_id: str
    dest_gateway_id: str
    params: NegotiatedParams
    cert_chain: tuple[bytes, ...]
    device_public_key: bytes
    attestation: Optional[AttestationClaim]


@dataclass(frozen=True)
class ProposalResponse:
    accepted: bool
    reason: str
    params_digest: bytes
    cert_chain: tuple[bytes, ...]
    responder_gateway_id: str


@dataclass(frozen=True)
class LockEvidence:
    lock_tx_height: int
    block_header_hash: bytes
    originator_beneficiary_keys_digest: bytes
    g1_chain_key_digest: bytes
    timestamp: int


@dataclass(frozen=True)
class HashLockNotice:
    contract_id: str
    amount: int
    digest_h: bytes
    expiry: int


@dataclass(frozen=True)
class LockEvidenceBody:
    evidence: LockEvidence
    lock_tx_id: str
    lock_mechanism: str
    lock_expiry: int
    htlc: Optional[HashLockNotice]


@dataclass(frozen=True)
class EvidenceAckBody:
    evidence_message_digest: bytes
    notification_tx_id: str


@dataclass(frozen=True)
class PrepareCommitBody:
    evidence_ack_digest: bytes


@dataclass(frozen=True)
class PrepareAckBody:
    vote: bool
    prepare_digest: bytes


@dataclass(frozen=True)
class CommitFinalBody:
    disablement_tx: bytes
    height: int
    header_hash: bytes
    confirm_tick: int
    htlc_secret: Optional[bytes]


@dataclass(frozen=True)
class AckFinalBody:
    finalization_tx_id: str
    height: int
    header_hash: bytes
    confirm_tick: int


@dataclass(frozen=True)
class AbortBody:
    reason: str


BODY_TYPES: dict[Step, type] = {
    Step.TRANSFER_PROPOSAL: TransferProposal,
    Step.PROPOSAL_RESPONSE: ProposalResponse,
    Step.LOCK_EVIDENCE: LockEvidenceBody,
    Step.EVIDENCE_ACK: EvidenceAckBody,
    Step.PREPARE_COMMIT: PrepareCommitBody,
    Step.PREPARE_ACK: PrepareAckBody,
    Step.COMMIT_FINAL: CommitFinalBody,
    Step.ACK_FINAL: AckFinalBody,
    Step.ABORT: AbortBody,
}


@dataclass(frozen=True)
class ProtocolMessage:
    session_id: str
    step: Step
    body: bytes
    sender_gateway_digest: bytes
    sequence: int
    signature: bytes = b""

    @classmethod
    def build(cls, session_id: str, body, sender: KeyPair, sequence: int) -> "ProtocolMessage":
        step = next(s for s, t in BODY_TYPES.items() if isinstance(body, t))
        msg = cls(session_id, step, encode(body), sender.digest, sequence)
        return replace(msg, signature=sign_as(sender, KeyRole.GATEWAY_IDENTITY, msg.tbs_bytes()))

    def tbs_bytes(self) -> bytes:
        return encode(self, exclude=("signature",))

    def to_bytes(self) -> bytes:
        return encode(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProtocolMessage":
        return decode(cls, data)

    @property
    def digest(self) -> bytes:
        return sha256(self.to_bytes())

    @property
    def record(self):
        return decode(BODY_TYPES[self.step], self.body)

    @property
    def step_number(self) -> int:
        return STEP_NUMBER[self.step]

    @property
    def dedup_key(self) -> tuple[str, Step, bytes, int]:
        return (self.session_id, self.step, self.sender_gateway_digest, self.sequence)

    def verify(self, public_key: bytes) -> bool:
        return verify(public_key, self.tbs_bytes(), self.signature)


def party_keys_digest(originator_digest: bytes, beneficiary_digest: bytes) -> bytes:
    return sha256(encode_fields(originator_digest, beneficiary_digest))
