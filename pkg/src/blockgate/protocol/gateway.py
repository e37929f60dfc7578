"""Gateway session state machine (coordinator G1 and participant G2).

A ``Gateway`` consumes inputs (received messages, ledger confirmations and
rejections, timeouts, transfer requests, resume markers) and returns the
actions the runtime must carry out.  Every input is a forensic log entry and
nothing else changes session state, so replaying a log through
:meth:`Gateway.apply` rebuilds the exact state the live gateway held.

The participant never reads the origin ledger: its inputs are protocol
messages and its own ledger's receipts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from blockgate.encoding import digest_hex, encode_fields, sha256
from blockgate.extensions.witness import forwarding_payload
from blockgate.identity import (
    AttestationClaim,
    GatewayCredentials,
    KeyRole,
    ResolverRegistry,
    decode_chain,
    encode_chain,
    validate_chain,
)
from blockgate.ledger import (
    DisablementPayload,
    EscrowPayload,
    FinalizationPayload,
    LedgerTransaction,
    NOTIFY_INCOMING,
    NOTIFY_LOCATION,
    NotificationPayload,
    PassiveLockPayload,
    TxKind,
)
from blockgate.protocol.log import (
    ConfirmRecord,
    Direction,
    LogEntry,
    RejectRecord,
    ResumeRecord,
    TimeoutRecord,
    TransferRequest,
)
from blockgate.protocol.messages import (
    COMMIT_MODE_2PC,
    AbortBody,
    AckFinalBody,
    CommitFinalBody,
    EvidenceAckBody,
    HashLockNotice,
    LockEvidence,
    LockEvidenceBody,
    NegotiatedParams,
    PrepareAckBody,
    PrepareCommitBody,
    ProposalResponse,
    ProtocolMessage,
    Step,
    TransferProposal,
    party_keys_digest,
)

PASSIVE_LOCK = "passive_lock"
ESCROW = "escrow"

# ledger submission purposes and the step each one performs
PURPOSE_STEP = {"lock": 2, "notify": 4, "disable": 8, "finalize": 10, "location": 12}


class Phase(Enum):
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"
    COMMITTED = "Committed"
    ABORTED = "Aborted"
    MANUAL = "ManualIntervention"


TERMINAL = frozenset({Phase.COMMITTED, Phase.ABORTED})


class Role(Enum):
    COORDINATOR = "Coordinator"
    PARTICIPANT = "Participant"


class Rejection(Enum):
    CHAIN_INVALID = "ChainInvalid"
    OWNERSHIP_UNPROVEN = "OwnershipUnproven"
    LEGAL_STATUS_INVALID = "LegalStatusInvalid"
    PROFILE_MISMATCH = "ProfileMismatch"
    PARAM_DISAGREEMENT = "ParamDisagreement"


# -- actions -----------------------------------------------------------------


@dataclass(frozen=True)
class Send:
    session_id: str
    peer_gateway_id: str
    message: ProtocolMessage

    @property
    def step_no(self) -> int:
        return self.message.step_number


@dataclass(frozen=True)
class Submit:
    session_id: str
    purpose: str
    tx: LedgerTransaction

    @property
    def step_no(self) -> int:
        return PURPOSE_STEP[self.purpose]


@dataclass(frozen=True)
class SetTimer:
    session_id: str
    token: str
    delay: int
    step_no: int = 0


@dataclass(frozen=True)
class HashLockCreate:
    session_id: str
    contract_id: str
    amount: int
    digest_h: bytes
    recipient: bytes
    expiry: int
    step_no: int = 0


@dataclass(frozen=True)
class HashLockClaim:
    session_id: str
    contract_id: str
    secret: bytes
    step_no: int = 0


@dataclass(frozen=True)
class HashLockRefund:
    session_id: str
    contract_id: str
    step_no: int = 0


@dataclass(frozen=True)
class WitnessRecord:
    session_id: str
    purpose: str
    data: bytes
    step_no: int = 0


Action = Union[Send, Submit, SetTimer, HashLockCreate, HashLockClaim, HashLockRefund, WitnessRecord]


# -- configuration and state -------------------------------------------------


@dataclass(frozen=True)
class GatewayPolicy:
    chain_id: str
    confirm_delay: int = 2
    lock_mechanism: str = PASSIVE_LOCK
    record_evidence: bool = True  # step 4
    report_final: bool = True  # steps 11-12
    accepted_profiles: tuple[str, ...] = ()
    vote_yes: bool = True
    withhold_finalize: bool = False
    require_attestation: bool = False
    t3: int = 40
    peer_confirm_delay: int = 2
    t_block_l1: int = 60
    t_block_l2: int = 60
    travel_rule_payload: bytes = b""
    max_commit_retries: int = 8
    max_status_queries: int = 3
    assertion_limit: int = 1024
    htlc_amount: Optional[int] = None
    htlc_window: int = 120
    htlc_recipient: bytes = b""
    witness: bool = False
    forwarding: bool = False


@dataclass
class SessionState:
    session_id: str
    role: Role
    peer_gateway_id: str
    phase: Phase = Phase.P1
    cursor: str = ""
    params: Optional[NegotiatedParams] = None
    asset_id: str = ""
    profile_id: str = ""
    amount: Optional[int] = None
    originator_digest: bytes = b""
    beneficiary_digest: bytes = b""
    origin_chain_id: str = ""
    dest_chain_id: str = ""
    start_tick: int = 0
    deadline: int = 0
    abort_reason: str = ""
    next_seq: int = 0
    timer_token: str = ""
    timer_gen: int = 0
    retries: int = 0
    status_queries: int = 0
    request: Optional[TransferRequest] = None
    peer_chain: tuple[bytes, ...] = ()
    pending: dict[str, LedgerTransaction] = field(default_factory=dict)
    confirmed: dict[str, ConfirmRecord] = field(default_factory=dict)
    confirmed_txs: dict[str, bytes] = field(default_factory=dict)
    lock_tx_id: str = ""
    lock_expiry: int = 0
    evidence_msg: bytes = b""
    sent_digests: dict[Step, set[bytes]] = field(default_factory=dict)
    vote: Optional[bool] = None
    commit_final: bytes = b""
    notification_tx_id: str = ""
    notify_expiry: int = 0
    ack_final: Optional[AckFinalBody] = None
    htlc: Optional[HashLockNotice] = None
    htlc_secret: bytes = b""
    claimed: bool = False
    seen: set[tuple] = field(default_factory=set)
    last_sent: dict[Step, object] = field(default_factory=dict)

    @property
    def committed_on_origin(self) -> bool:
        return "disable" in self.confirmed


def session_id_for(gateway_id: str, asset_id: str, tick: int, counter: int) -> str:
    return digest_hex(encode_fields(gateway_id.encode(), asset_id.encode(), str(tick).encode(), str(counter).encode()))[:24]


class Gateway:
    """One gateway's protocol engine: pure state transitions plus emitted actions."""

    def __init__(
        self,
        creds: GatewayCredentials,
        policy: GatewayPolicy,
        trust_root_key: bytes,
        registry: ResolverRegistry,
        b4=None,
    ):
        self.creds = creds
        self.policy = policy
        self.trust_root_key = trust_root_key
        self.registry = registry
        self.b4 = b4
        self.sessions: dict[str, SessionState] = {}
        self.anomalies: list[str] = []

    @property
    def gateway_id(self) -> str:
        return self.creds.gateway_id

    # -- dispatch ----------------------------------------------------------

    def apply(self, entry: LogEntry) -> list[Action]:
        """Feed one logged input; return the actions it calls for."""
        d = entry.direction
        now = entry.tick
        if d is Direction.RECV:
            return self.handle_message(ProtocolMessage.from_bytes(entry.data), now)
        rec = entry.record()
        if d is Direction.START:
            return self.start_transfer(rec, now)
        if d is Direction.CONFIRM:
            return self._with_session(rec.session_id, lambda st: self._on_confirm(st, rec, now))
        if d is Direction.REJECT:
            return self._with_session(rec.session_id, lambda st: self._on_reject(st, rec, now))
        if d is Direction.TIMEOUT:
            return self._with_session(rec.session_id, lambda st: self._on_timeout(st, rec.token, now))
        if d is Direction.RESUME:
            return self.resume(rec, now)
        return []

    def _with_session(self, session_id: str, fn) -> list[Action]:
        st = self.sessions.get(session_id)
        if st is None:
            self.anomalies.append(f"UnknownSession {session_id}")
            return []
        return fn(st)

    def handle_message(self, msg: ProtocolMessage, now: int) -> list[Action]:
        st = self.sessions.get(msg.session_id)
        if st is None:
            if msg.step is Step.TRANSFER_PROPOSAL:
                return self._on_proposal(msg, now)
            self.anomalies.append(f"UnknownSession {msg.session_id} {msg.step.value}")
            return []
        if msg.dedup_key in st.seen:
            return []
        st.seen.add(msg.dedup_key)
        if st.role is Role.COORDINATOR:
            handlers = {
                Step.PROPOSAL_RESPONSE: self._on_response,
                Step.EVIDENCE_ACK: self._on_evidence_ack,
                Step.PREPARE_ACK: self._on_prepare_ack,
                Step.ACK_FINAL: self._on_ack_final,
                Step.ABORT: self._on_abort,
            }
        else:
            handlers = {
                Step.TRANSFER_PROPOSAL: self._on_proposal_again,
                Step.LOCK_EVIDENCE: self._on_lock_evidence,
                Step.PREPARE_COMMIT: self._on_prepare_commit,
                Step.COMMIT_FINAL: self._on_commit_final,
                Step.ABORT: self._on_abort,
            }
        handler = handlers.get(msg.step)
        if handler is None:
            self.anomalies.append(f"OutOfOrder {msg.step.value} for {st.role.value}")
            return []
        return handler(st, msg, now)

    # -- helpers -----------------------------------------------------------

    def _send(self, st: SessionState, body) -> Send:
        msg = ProtocolMessage.build(st.session_id, body, self.creds.identity_key, st.next_seq)
        st.next_seq += 1
        st.last_sent[msg.step] = body
        st.sent_digests.setdefault(msg.step, set()).add(msg.digest)
        return Send(st.session_id, st.peer_gateway_id, msg)

    def _resend(self, st: SessionState, step: Step) -> list[Action]:
        body = st.last_sent.get(step)
        return [] if body is None else [self._send(st, body)]

    def _arm(self, st: SessionState, cursor: str) -> SetTimer:
        st.cursor = cursor
        st.timer_gen += 1
        st.timer_token = f"{cursor}#{st.timer_gen}"
        return SetTimer(st.session_id, st.timer_token, st.params.step_timeout)

    def _abort(self, st: SessionState, reason: str, notify: bool = True) -> list[Action]:
        st.phase = Phase.ABORTED
        st.abort_reason = reason
        st.cursor = "done"
        st.timer_token = ""
        return [self._send(st, AbortBody(reason))] if notify else []

    def _submit(self, st: SessionState, purpose: str, kind: TxKind, record, now: int) -> Submit:
        tx = LedgerTransaction.build(kind, st.asset_id, self.creds.tx_key, record, now)
        st.pending[purpose] = tx
        return Submit(st.session_id, purpose, tx)

    def _check_peer(self, blobs: tuple[bytes, ...], peer_id: str, sender_digest: bytes) -> Optional[Rejection]:
        chain = decode_chain(blobs)
        if chain is None:
            return Rejection.CHAIN_INVALID
        report = validate_chain(chain, self.trust_root_key)
        if not report.ok or chain[0].subject_role is not KeyRole.GATEWAY_IDENTITY:
            return Rejection.CHAIN_INVALID
        if chain[0].subject_key_digest != sender_digest:
            return Rejection.CHAIN_INVALID
        if self.registry.owner_of(peer_id) != report.vasp_cert.digest:
            return Rejection.OWNERSHIP_UNPROVEN
        ev = report.vasp_cert.ev_fields
        if ev is None or not ev.well_formed():
            return Rejection.LEGAL_STATUS_INVALID
        return None

    # -- coordinator -------------------------------------------------------

    def proposal_params(self, profile_id: str) -> NegotiatedParams:
        p = self.policy
        return NegotiatedParams(
            t1=p.confirm_delay, t2=p.peer_confirm_delay, t3=p.t3, commit_mode=COMMIT_MODE_2PC,
            t_block_l1=p.t_block_l1, t_block_l2=p.t_block_l2, asset_profile_id=profile_id,
            travel_rule_payload=p.travel_rule_payload,
        )

    def start_transfer(self, req: TransferRequest, now: int) -> list[Action]:
        params = self.proposal_params(req.asset_profile_id)
        st = SessionState(
            session_id=req.session_id, role=Role.COORDINATOR, peer_gateway_id=req.dest_gateway_id,
            params=params, asset_id=req.asset_id, profile_id=req.asset_profile_id, amount=req.fungible_amount,
            originator_digest=req.originator_digest, beneficiary_digest=req.beneficiary_digest,
            origin_chain_id=self.policy.chain_id, dest_chain_id=req.dest_chain_id,
            start_tick=now, deadline=now + params.t3, request=req,
        )
        self.sessions[st.session_id] = st
        if req.handshake_failure:
            return self._abort(st, req.handshake_failure, notify=False)
        attestation = AttestationClaim.make(
            self.creds.device_key, f"firmware:{self.gateway_id}".encode(), st.session_id.encode())
        proposal = TransferProposal(
            asset_id=st.asset_id, asset_profile_id=st.profile_id, fungible_amount=st.amount,
            originator_digest=st.originator_digest, beneficiary_digest=st.beneficiary_digest,
            origin_chain_id=st.origin_chain_id, dest_chain_id=st.dest_chain_id,
            origin_gateway_id=self.gateway_id, dest_gateway_id=st.peer_gateway_id, params=params,
            cert_chain=encode_chain(self.creds.chain), device_public_key=self.creds.device_key.public_key,
            attestation=attestation,
        )
        return [self._send(st, proposal), self._arm(st, "await-response")]

    def _on_response(self, st: SessionState, msg: ProtocolMessage, now: int) -> list[Action]:
        if st.cursor != "await-response":
            return []
        body: ProposalResponse = msg.record
        if not body.accepted:
            return self._abort(st, body.reason or "Rejected", notify=False)
        problem = self._check_peer(body.cert_chain, st.peer_gateway_id, msg.sender_gateway_digest)
        if problem is not None:
            return self._abort(st, problem.value)
        if body.params_digest != st.params.digest():
            return self._abort(st, Rejection.PARAM_DISAGREEMENT.value)
        st.phase = Phase.P2
        st.peer_chain = body.cert_chain
        actions: list[Action] = []
        if self.policy.htlc_amount:
            actions += self._create_hashlock(st, now)
        actions.append(self._lock_submit(st, now))
        st.cursor = "await-lock"
        st.timer_token = ""
        return actions

    def htlc_secret(self, session_id: str) -> bytes:
        return sha256(encode_fields(b"htlc-secret", self.creds.tx_key.private_key, session_id.encode()))

    def _create_hashlock(self, st: SessionState, now: int) -> list[Action]:
        secret = self.htlc_secret(st.session_id)
        notice = HashLockNotice(
            contract_id=digest_hex(encode_fields(b"htlc", st.session_id.encode()))[:32],
            amount=self.policy.htlc_amount, digest_h=sha256(secret), expiry=now + self.policy.htlc_window)
        st.htlc = notice
        st.htlc_secret = secret
        return [
            self._hashlock_create_action(st),
            SetTimer(st.session_id, "htlc-refund", notice.expiry - now),
        ]

    def _hashlock_create_action(self, st: SessionState) -> HashLockCreate:
        n = st.htlc
        return HashLockCreate(st.session_id, n.contract_id, n.amount, n.digest_h, self.policy.htlc_recipient, n.expiry)

    def _lock_submit(self, st: SessionState, now: int) -> Submit:
        p = st.params
        if self.policy.lock_mechanism == ESCROW:
            req = st.request
            record = EscrowPayload(req.escrow_from_key, self.creds.tx_key.digest, p.t_block_l1, req.escrow_authorization)
            sub = self._submit(st, "lock", TxKind.ESCROW, record, now)
        else:
            sub = self._submit(st, "lock", TxKind.PASSIVE_LOCK, PassiveLockPayload(p.t_block_l1), now)
        st.lock_tx_id = sub.tx.tx_id
        return sub

    def _on_confirm(self, st: SessionState, rec: ConfirmRecord, now: int) -> list[Action]:
        tx = st.pending.get(rec.purpose)
        if tx is None or tx.tx_id != rec.tx_id:
            return []
        del st.pending[rec.purpose]
        st.confirmed[rec.purpose] = rec
        st.confirmed_txs[rec.purpose] = tx.to_bytes()
        if st.role is Role.COORDINATOR:
            if rec.purpose == "lock":
                st.lock_expiry = rec.confirm_tick + st.params.t_block_l1
                return self._send_evidence(st, rec)
            if rec.purpose == "disable":
                return self._send_commit_final(st, rec)
            if rec.purpose == "location":
                st.phase = Phase.COMMITTED
                st.cursor = "done"
            return []
        if rec.purpose == "notify":
            st.notification_tx_id = rec.tx_id
            st.notify_expiry = rec.confirm_tick + st.params.t_block_l2
            if st.cursor == "await-notify":
                return self._send_evidence_ack(st)
            if st.cursor == "await-renotify":
                return [self._finalize_submit(st, now)]
            return []
        if rec.purpose == "finalize":
            st.phase = Phase.COMMITTED
            st.cursor = "done"
            st.timer_token = ""
            if self.policy.report_final:
                body = AckFinalBody(rec.tx_id, rec.height, rec.header_hash, rec.confirm_tick)
                return [self._send(st, body)]
        return []

    def _on_reject(self, st: SessionState, rec: RejectRecord, now: int) -> list[Action]:
        tx = st.pending.get(rec.purpose)
        if tx is None or tx.tx_id != rec.tx_id:
            return []
        del st.pending[rec.purpose]
        if st.role is Role.COORDINATOR:
            if rec.purpose == "lock":
                return self._abort(st, "LockFailed")
            if rec.purpose == "disable":
                return self._abort(st, rec.reason or "LockExpired")
            self.anomalies.append(f"location record rejected: {rec.reason}")
            st.phase = Phase.COMMITTED
            st.cursor = "done"
            return []
        if rec.purpose == "notify" and st.cursor == "await-notify":
            return self._abort(st, "NotificationFailed")
        if rec.purpose in ("notify", "finalize") and st.commit_final:
            if rec.purpose == "notify":
                self.anomalies.append(f"re-notification rejected: {rec.reason}")
                st.cursor = "stuck"
                return []
            st.notification_tx_id = ""
            return self._finalize_or_renotify(st, now)
        return []

    def _send_evidence(self, st: SessionState, rec: ConfirmRecord) -> list[Action]:
        evidence = LockEvidence(
            lock_tx_height=rec.height, block_header_hash=rec.header_hash,
            originator_beneficiary_keys_digest=party_keys_digest(st.originator_digest, st.beneficiary_digest),
            g1_chain_key_digest=self.creds.tx_key.digest, timestamp=rec.confirm_tick,
        )
        body = LockEvidenceBody(evidence, st.lock_tx_id, self.policy.lock_mechanism, st.lock_expiry, st.htlc)
        send = self._send(st, body)
        st.evidence_msg = send.message.to_bytes()
        return [send, self._arm(st, "await-evidence-ack")]

    def _on_evidence_ack(self, st: SessionState, msg: ProtocolMessage, now: int) -> list[Action]:
        body: EvidenceAckBody = msg.record
        sent = st.sent_digests.get(Step.LOCK_EVIDENCE, set())
        if body.evidence_message_digest not in sent and st.cursor == "await-evidence-ack":
            self.anomalies.append("EvidenceAck names an unknown evidence message")
            return []
        if st.cursor == "await-evidence-ack":
            st.phase = Phase.P3
            return [self._send(st, PrepareCommitBody(msg.digest)), self._arm(st, "await-prepare-ack")]
        if st.cursor == "await-prepare-ack":
            return self._resend(st, Step.PREPARE_COMMIT) + [self._arm(st, "await-prepare-ack")]
        if st.phase is Phase.ABORTED:
            return self._resend(st, Step.ABORT)
        return []

    def _on_prepare_ack(self, st: SessionState, msg: ProtocolMessage, now: int) -> list[Action]:
        body: PrepareAckBody = msg.record
        if st.cursor == "await-prepare-ack":
            if not body.vote:
                return self._abort(st, "PeerVotedNo")
            if now > st.deadline or now + self.policy.confirm_delay >= st.lock_expiry:
                return self._abort(st, "Timeout")
            st.cursor = "await-disable"
            st.timer_token = ""
            return [self._disable_submit(st, now)]
        if st.committed_on_origin:
            actions = self._resend(st, Step.COMMIT_FINAL)
            if st.cursor in ("await-ack-final", "commit-pending"):
                st.retries = 0
                actions.append(self._arm(st, "await-ack-final"))
            return actions
        if st.phase is Phase.ABORTED:
            return self._resend(st, Step.ABORT)
        return []

    def _disable_submit(self, st: SessionState, now: int) -> Submit:
        peer = decode_chain(st.peer_chain)
        remote = peer[0].subject_key_digest if peer else b""
        record = DisablementPayload(st.lock_tx_id, st.beneficiary_digest, st.dest_chain_id, remote)
        return self._submit(st, "disable", TxKind.DISABLEMENT, record, now)

    def _send_commit_final(self, st: SessionState, rec: ConfirmRecord) -> list[Action]:
        disable_tx = st.confirmed_txs["disable"]
        body = CommitFinalBody(disable_tx, rec.height, rec.header_hash, rec.confirm_tick,
                               st.htlc_secret if st.htlc else None)
        send = self._send(st, body)
        actions: list[Action] = []
        if self.policy.witness:
            actions.append(WitnessRecord(st.session_id, "commit-final", send.message.digest))
        actions.append(send)
        if self.policy.report_final:
            st.retries = 0
            actions.append(self._arm(st, "await-ack-final"))
        else:
            st.phase = Phase.COMMITTED
            st.cursor = "done"
        return actions

    def _on_ack_final(self, st: SessionState, msg: ProtocolMessage, now: int) -> list[Action]:
        if st.cursor not in ("await-ack-final", "commit-pending"):
            return []
        body: AckFinalBody = msg.record
        st.ack_final = body
        st.timer_token = ""
        actions: list[Action] = []
        if self.policy.forwarding:
            actions.append(WitnessRecord(st.session_id, "forwarding", self.forwarding_payload(st)))
        record = NotificationPayload(NOTIFY_LOCATION, "", None, st.beneficiary_digest, sha256(msg.body), 0)
        actions.append(self._submit(st, "location", TxKind.NOTIFICATION, record, now))
        st.cursor = "await-location"
        return actions

    def forwarding_payload(self, st: SessionState) -> bytes:
        return forwarding_payload(st.profile_id, st.asset_id, st.beneficiary_digest, st.dest_chain_id)

    def _on_abort(self, st: SessionState, msg: ProtocolMessage, now: int) -> list[Action]:
        if st.phase in TERMINAL:
            return []
        if st.role is Role.COORDINATOR and (st.committed_on_origin or "disable" in st.pending):
            self.anomalies.append("Abort received after commit decision")
            return []
        if st.role is Role.PARTICIPANT and st.commit_final:
            self.anomalies.append("Abort received after CommitFinal")
            return []
        return self._abort(st, "PeerAbort:" + msg.record.reason, notify=False)

    # -- participant -------------------------------------------------------

    def _on_proposal(self, msg: ProtocolMessage, now: int) -> list[Action]:
        body: TransferProposal = msg.record
        p = body.params
        st = SessionState(
            session_id=msg.session_id, role=Role.PARTICIPANT, peer_gateway_id=body.origin_gateway_id,
            params=p, asset_id=body.asset_id, profile_id=body.asset_profile_id, amount=body.fungible_amount,
            originator_digest=body.originator_digest, beneficiary_digest=body.beneficiary_digest,
            origin_chain_id=body.origin_chain_id, dest_chain_id=body.dest_chain_id,
            start_tick=now, deadline=now + max(p.t3, 1), peer_chain=body.cert_chain,
        )
        st.seen.add(msg.dedup_key)
        self.sessions[st.session_id] = st
        problem = self._vet_proposal(msg, body)
        response = ProposalResponse(
            accepted=problem is None, reason="" if problem is None else problem.value,
            params_digest=p.digest(), cert_chain=encode_chain(self.creds.chain),
            responder_gateway_id=self.gateway_id,
        )
        if problem is not None:
            st.phase = Phase.ABORTED
            st.abort_reason = problem.value
            st.cursor = "done"
            return [self._send(st, response)]
        st.phase = Phase.P2
        return [self._send(st, response), self._arm(st, "await-evidence")]

    def _vet_proposal(self, msg: ProtocolMessage, body: TransferProposal) -> Optional[Rejection]:
        problem = self._check_peer(body.cert_chain, body.origin_gateway_id, msg.sender_gateway_digest)
        if problem is not None:
            return problem
        if body.attestation is not None:
            if not body.attestation.verify(body.device_public_key):
                return Rejection.CHAIN_INVALID
        elif self.policy.require_attestation:
            return Rejection.CHAIN_INVALID
        accepted = self.policy.accepted_profiles
        if body.params.asset_profile_id != body.asset_profile_id:
            return Rejection.PROFILE_MISMATCH
        if accepted and body.asset_profile_id not in accepted:
            return Rejection.PROFILE_MISMATCH
        p = body.params
        if p.problems() or p.t2 < self.policy.confirm_delay or body.dest_chain_id != self.policy.chain_id:
            return Rejection.PARAM_DISAGREEMENT
        if body.dest_gateway_id != self.gateway_id:
            return Rejection.PARAM_DISAGREEMENT
        return None

    def _on_proposal_again(self, st: SessionState, msg: ProtocolMessage, now: int) -> list[Action]:
        return self._resend(st, Step.PROPOSAL_RESPONSE)

    def _on_lock_evidence(self, st: SessionState, msg: ProtocolMessage, now: int) -> list[Action]:
        if st.cursor == "await-prepare":
            return self._resend(st, Step.EVIDENCE_ACK)
        if st.cursor != "await-evidence":
            return []
        body: LockEvidenceBody = msg.record
        ev = body.evidence
        if ev.originator_beneficiary_keys_digest != party_keys_digest(st.originator_digest, st.beneficiary_digest):
            return self._abort(st, "EvidenceInvalid")
        if ev.timestamp > now:
            return self._abort(st, "EvidenceInvalid")
        if self.policy.htlc_amount and not self._hashlock_ok(body.htlc):
            return self._abort(st, "EvidenceInvalid")
        st.evidence_msg = msg.to_bytes()
        st.htlc = body.htlc
        st.timer_token = ""
        if self.policy.record_evidence:
            st.cursor = "await-notify"
            return [self._notify_submit(st, msg.digest, now)]
        return self._send_evidence_ack(st)

    def _hashlock_ok(self, notice: Optional[HashLockNotice]) -> bool:
        if notice is None or self.b4 is None:
            return False
        c = self.b4.contract(notice.contract_id)
        return (
            c is not None and c.recipient_key_digest == self.policy.htlc_recipient
            and c.digest_h == notice.digest_h and c.amount_x == notice.amount
            and c.amount_x >= self.policy.htlc_amount and c.expiry_t_h == notice.expiry
        )

    def _notify_submit(self, st: SessionState, evidence_digest: bytes, now: int) -> Submit:
        record = NotificationPayload(NOTIFY_INCOMING, st.profile_id, st.amount, st.beneficiary_digest,
                                     evidence_digest, st.params.t_block_l2)
        return self._submit(st, "notify", TxKind.NOTIFICATION, record, now)

    def _send_evidence_ack(self, st: SessionState) -> list[Action]:
        send = self._send(st, EvidenceAckBody(sha256(st.evidence_msg), st.notification_tx_id))
        return [send, self._arm(st, "await-prepare")]

    def _on_prepare_commit(self, st: SessionState, msg: ProtocolMessage, now: int) -> list[Action]:
        if st.cursor == "await-prepare":
            body: PrepareCommitBody = msg.record
            if body.evidence_ack_digest not in st.sent_digests.get(Step.EVIDENCE_ACK, set()):
                self.anomalies.append("PrepareCommit names an unknown EvidenceAck")
                return []
            st.phase = Phase.P3
            st.vote = self.policy.vote_yes
            send = self._send(st, PrepareAckBody(st.vote, msg.digest))
            if st.vote:
                st.status_queries = 0
                return [send, self._arm(st, "in-doubt")]
            st.phase = Phase.ABORTED
            st.abort_reason = "VotedNo"
            st.cursor = "done"
            st.timer_token = ""
            return [send]
        if st.vote is not None:
            return self._resend(st, Step.PREPARE_ACK)
        if st.phase is Phase.ABORTED:
            return self._resend(st, Step.ABORT)
        self.anomalies.append(f"OutOfOrder PrepareCommit at {st.cursor}")
        return []

    def _on_commit_final(self, st: SessionState, msg: ProtocolMessage, now: int) -> list[Action]:
        if st.commit_final:
            if st.phase is Phase.COMMITTED:
                return self._resend(st, Step.ACK_FINAL)
            return []
        if st.vote is not True or st.phase is Phase.ABORTED:
            self.anomalies.append("CommitFinal without a yes vote")
            return []
        body: CommitFinalBody = msg.record
        st.commit_final = msg.to_bytes()
        st.timer_token = ""
        actions: list[Action] = []
        if self.policy.witness:
            actions.append(WitnessRecord(st.session_id, "commit-final", msg.digest))
        if st.htlc is not None and body.htlc_secret is not None:
            actions.append(HashLockClaim(st.session_id, st.htlc.contract_id, body.htlc_secret))
            st.claimed = True
        if self.policy.withhold_finalize:
            st.cursor = "withheld"
            return actions
        return actions + self._finalize_or_renotify(st, now)

    def _finalize_or_renotify(self, st: SessionState, now: int) -> list[Action]:
        if st.notification_tx_id and now + self.policy.confirm_delay < st.notify_expiry:
            return [self._finalize_submit(st, now)]
        st.notification_tx_id = ""
        st.cursor = "await-renotify"
        return [self._notify_submit(st, sha256(st.commit_final), now)]

    def _finalize_submit(self, st: SessionState, now: int) -> Submit:
        assertion = st.commit_final
        is_digest = len(assertion) > self.policy.assertion_limit
        if is_digest:
            assertion = sha256(assertion)
        st.cursor = "await-finalize"
        record = FinalizationPayload(st.notification_tx_id, assertion, is_digest)
        return self._submit(st, "finalize", TxKind.FINALIZATION, record, now)

    # -- timers ------------------------------------------------------------

    def _on_timeout(self, st: SessionState, token: str, now: int) -> list[Action]:
        if token == "htlc-refund":
            return [HashLockRefund(st.session_id, st.htlc.contract_id)] if st.htlc else []
        if token != st.timer_token or st.phase in TERMINAL:
            return []
        cursor = st.cursor
        if st.role is Role.COORDINATOR:
            if cursor == "await-ack-final":
                st.retries += 1
                if st.retries > self.policy.max_commit_retries:
                    st.cursor = "commit-pending"
                    st.timer_token = ""
                    return []
                return self._resend(st, Step.COMMIT_FINAL) + [self._arm(st, cursor)]
            step = {"await-response": Step.TRANSFER_PROPOSAL, "await-evidence-ack": Step.LOCK_EVIDENCE,
                    "await-prepare-ack": Step.PREPARE_COMMIT}.get(cursor)
        else:
            if cursor == "in-doubt":
                if st.status_queries >= self.policy.max_status_queries:
                    st.timer_token = ""
                    return []
                st.status_queries += 1
                return self._resend(st, Step.PREPARE_ACK) + [self._arm(st, cursor)]
            step = {"await-evidence": Step.PROPOSAL_RESPONSE, "await-prepare": Step.EVIDENCE_ACK}.get(cursor)
        if step is None:
            return []
        if now < st.deadline:
            return self._resend(st, step) + [self._arm(st, cursor)]
        return self._abort(st, "Timeout")

    # -- recovery ----------------------------------------------------------

    def resume(self, rec: ResumeRecord, now: int) -> list[Action]:
        """Re-engage every open session after a restart or fail-over."""
        absent = set(rec.absent_tx_ids)
        lost_contracts = set(rec.absent_contracts)
        actions: list[Action] = []
        for sid in sorted(self.sessions):
            st = self.sessions[sid]
            if st.phase is Phase.MANUAL:
                continue
            st.timer_token = ""
            if st.htlc is not None and st.role is Role.COORDINATOR:
                if st.htlc.contract_id in lost_contracts:
                    actions.append(self._hashlock_create_action(st))
                actions.append(SetTimer(sid, "htlc-refund", max(0, st.htlc.expiry - now)))
            if st.role is Role.COORDINATOR:
                actions += self._resume_coordinator(st, absent, now)
            else:
                actions += self._resume_participant(st, absent, now)
        return actions

    def _missing(self, st: SessionState, purpose: str, absent: set[str]) -> bool:
        tx = st.pending.get(purpose)
        return tx is not None and tx.tx_id in absent

    def _resubmit(self, st: SessionState, purpose: str) -> Submit:
        return Submit(st.session_id, purpose, st.pending[purpose])

    def _resume_coordinator(self, st: SessionState, absent: set[str], now: int) -> list[Action]:
        c = st.cursor
        if st.phase is Phase.ABORTED:
            return self._resend(st, Step.ABORT)
        if st.phase is Phase.COMMITTED:
            # without AckFinal nothing proves Step 9 left before the crash
            if not self.policy.report_final and st.committed_on_origin:
                return self._resend(st, Step.COMMIT_FINAL)
            return []
        resend_steps = {"await-response": Step.TRANSFER_PROPOSAL, "await-evidence-ack": Step.LOCK_EVIDENCE,
                        "await-prepare-ack": Step.PREPARE_COMMIT}
        if c in resend_steps:
            if now < st.deadline:
                return self._resend(st, resend_steps[c]) + [self._arm(st, c)]
            return self._abort(st, "Timeout")
        if c == "await-lock" and self._missing(st, "lock", absent):
            if now < st.deadline:
                return [self._resubmit(st, "lock")]
            del st.pending["lock"]
            return self._abort(st, "Timeout")
        if c == "await-disable" and self._missing(st, "disable", absent):
            if now <= st.deadline and now + self.policy.confirm_delay < st.lock_expiry:
                return [self._resubmit(st, "disable")]
            del st.pending["disable"]
            return self._abort(st, "Timeout")
        if c in ("await-ack-final", "commit-pending"):
            st.retries = 0
            return self._resend(st, Step.COMMIT_FINAL) + [self._arm(st, "await-ack-final")]
        if c == "await-location" and self._missing(st, "location", absent):
            return [self._resubmit(st, "location")]
        return []

    def _resume_participant(self, st: SessionState, absent: set[str], now: int) -> list[Action]:
        c = st.cursor
        if st.phase is Phase.ABORTED:
            return self._resend(st, Step.ABORT)
        if st.phase is Phase.COMMITTED:
            return self._resend(st, Step.ACK_FINAL)
        if c in ("await-evidence", "await-prepare"):
            step = Step.PROPOSAL_RESPONSE if c == "await-evidence" else Step.EVIDENCE_ACK
            if now < st.deadline:
                return self._resend(st, step) + [self._arm(st, c)]
            return self._abort(st, "Timeout")
        if c == "await-notify" and self._missing(st, "notify", absent):
            if now < st.deadline:
                return [self._resubmit(st, "notify")]
            del st.pending["notify"]
            return self._abort(st, "Timeout")
        if c == "in-doubt":
            st.status_queries = 0
            return self._resend(st, Step.PREPARE_ACK) + [self._arm(st, c)]
        if c == "await-renotify" and self._missing(st, "notify", absent):
            del st.pending["notify"]
            return self._finalize_or_renotify(st, now)
        if c == "await-finalize" and self._missing(st, "finalize", absent):
            del st.pending["finalize"]
            return self._finalize_or_renotify(st, now)
        return []
