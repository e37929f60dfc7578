"""Deterministic discrete-event world hosting gateways, ledgers and channels.

Events run in ``(tick, insertion order)`` order.  Each gateway host keeps a
forensic log that survives crashes; its in-memory engine does not.  Every
input is logged before it is handled and every output is logged before it
is carried out, so crash points split each numbered step three ways:
``BeforeSend`` (nothing logged), ``AfterLogWrite`` (logged, not performed)
and ``AfterSend`` (logged and performed).
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from blockgate import recovery
from blockgate.encoding import digest_hex, encode
from blockgate.extensions.htlc import HashLockLedger, HtlcError
from blockgate.extensions.witness import WitnessChain
from blockgate.identity import (
    FailureReason,
    GatewayCredentials,
    KeyPair,
    KeyRole,
    ResolverRegistry,
    key_digest,
    validate_chain,
)
from blockgate.ledger import (
    AssetNotActive,
    AssetStatus,
    InvalidTransaction,
    Ledger,
    NotOwner,
    TransferPayload,
    TxKind,
    UnknownAsset,
    escrow_authorization_bytes,
)
from blockgate.protocol.gateway import (
    ESCROW,
    TERMINAL,
    Gateway,
    GatewayPolicy,
    HashLockClaim,
    HashLockCreate,
    HashLockRefund,
    Phase,
    Send,
    SetTimer,
    Submit,
    WitnessRecord,
    session_id_for,
)
from blockgate.protocol.log import (
    ConfirmRecord,
    Direction,
    EffectRecord,
    ForensicLog,
    RejectRecord,
    ResumeRecord,
    SubmitRecord,
    TimeoutRecord,
    TransferRequest,
    parse_log,
)
from blockgate.protocol.messages import ProtocolMessage

MAX_EVENTS = 100_000


class InvalidCrashPoint(ValueError):
    pass


class HandshakeFailed(Exception):
    def __init__(self, reason: str = "ChainInvalid", cause: Optional[FailureReason] = None, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.cause = cause


class NonTermination(RuntimeError):
    pass


class SubPoint(Enum):
    BEFORE_SEND = "BeforeSend"
    AFTER_LOG_WRITE = "AfterLogWrite"
    AFTER_SEND = "AfterSend"


class RecoveryPolicy(Enum):
    NONE = "None"
    SELF_HEALING = "SelfHealing"
    PRIMARY_BACKUP = "PrimaryBackup"


class FaultAction(Enum):
    DROP = "Drop"
    DELAY = "Delay"
    MUTATE = "Mutate"


@dataclass(frozen=True)
class CrashPoint:
    step: int
    sub_point: SubPoint

    def __post_init__(self):
        if not 1 <= self.step <= 12:
            raise InvalidCrashPoint(f"step {self.step} outside 1..12")


@dataclass(frozen=True)
class CrashEntry:
    target: str
    point: CrashPoint
    policy: RecoveryPolicy = RecoveryPolicy.NONE
    recovery_delay: int = 5


@dataclass(frozen=True)
class MessageFault:
    step: int
    action: FaultAction
    delay: int = 0
    sender: str = ""  # empty matches either gateway


@dataclass(frozen=True)
class FaultPlan:
    crashes: tuple[CrashEntry, ...] = ()
    message_faults: tuple[MessageFault, ...] = ()


@dataclass
class Channel:
    channel_id: int
    ends: frozenset[str]
    ready_at: int
    keys: dict[str, bytes]  # gateway id -> identity public key learned in the handshake
    open: bool = True


@dataclass
class ProbeResult:
    tick: int
    accepted: bool
    reason: str


class GatewayHost:
    """Runtime wrapper around one gateway: durable log, volatile engine."""

    def __init__(self, world: "World", creds: GatewayCredentials, policy: GatewayPolicy, ledger: Ledger,
                 endpoint: str):
        self.world = world
        self.creds = creds
        self.policy = policy
        self.ledger = ledger
        self.endpoint = endpoint
        self.log = ForensicLog(creds.gateway_id)
        self.alive = True
        self.incarnation = 0
        self.recoveries = 0
        self.abandoned = False  # crashed with no recovery policy
        self.engine: Optional[Gateway] = self.make_engine()
        self.phase_history: list[tuple[int, dict[str, Phase]]] = []

    @property
    def gateway_id(self) -> str:
        return self.creds.gateway_id

    def make_engine(self) -> Gateway:
        w = self.world
        return Gateway(self.creds, self.policy, w.trust_root_key, w.registry, b4=w.b4)

    def record_phases(self) -> dict[str, Phase]:
        """Snapshot session phases; returns those that changed since the last snapshot."""
        now = {sid: st.phase for sid, st in self.engine.sessions.items()}
        before = self.phase_history[-1][1] if self.phase_history else {}
        self.phase_history.append((len(self.log), now))
        return {sid: ph for sid, ph in now.items() if before.get(sid) is not ph}


class World:
    def __init__(self, trust_root_key: bytes, registry: ResolverRegistry, seed: int = 0,
                 fault_plan: FaultPlan = FaultPlan(), latency: int = 1, handshake_ticks: int = 1,
                 max_events: int = MAX_EVENTS, b4: Optional[HashLockLedger] = None,
                 witness: Optional[WitnessChain] = None):
        self.trust_root_key = trust_root_key
        self.registry = registry
        self.seed = seed
        self.fault_plan = fault_plan
        self.latency = latency
        self.handshake_ticks = handshake_ticks
        self.max_events = max_events
        self.b4 = b4
        self.witness = witness
        self.tick = 0
        self.hosts: dict[str, GatewayHost] = {}
        self.ledgers: dict[str, Ledger] = {}
        self.channels: list[Channel] = []
        self.trace: list[str] = []
        self.probes: list[ProbeResult] = []
        self.events_run = 0
        self._queue: list = []
        self._seq = itertools.count()
        self._crash_used = [False] * len(fault_plan.crashes)
        self._fault_used = [False] * len(fault_plan.message_faults)
        self._session_counter = itertools.count()

    # -- setup -------------------------------------------------------------

    def add_ledger(self, ledger: Ledger) -> Ledger:
        self.ledgers[ledger.ledger_id] = ledger
        return ledger

    def add_gateway(self, creds: GatewayCredentials, policy: GatewayPolicy, ledger: Ledger,
                    endpoint: str = "") -> GatewayHost:
        endpoint = endpoint or f"{creds.gateway_id}@primary"
        host = GatewayHost(self, creds, policy, ledger, endpoint)
        self.hosts[creds.gateway_id] = host
        self.registry.register(creds.gateway_id, endpoint, creds.vasp_cert.digest)
        ledger.register_key(creds.tx_key.public_key)
        return host

    def _emit(self, kind: str, **fields) -> None:
        parts = " ".join(f"{k}={v}" for k, v in fields.items())
        self.trace.append(f"tick={self.tick} {kind} {parts}".rstrip())

    def _push(self, tick: int, kind: str, *args) -> None:
        heapq.heappush(self._queue, (tick, next(self._seq), kind, args))

    # -- channels ----------------------------------------------------------

    def channel_between(self, a: str, b: str) -> Optional[Channel]:
        ends = frozenset((a, b))
        for ch in reversed(self.channels):
            if ch.ends == ends and ch.open:
                return ch
        return None

    def open_secure_channel(self, a: str, b: str) -> int:
        """Mutual chain validation; the channel is usable after one tick each way."""
        existing = self.channel_between(a, b)
        if existing is not None:
            return existing.channel_id
        keys = {}
        for gw in (a, b):
            host = self.hosts[gw]
            if not host.alive:
                raise HandshakeFailed("PeerUnreachable", detail=gw)
            report = validate_chain(host.creds.chain, self.trust_root_key)
            if not report.ok or host.creds.chain[0].subject_role is not KeyRole.GATEWAY_IDENTITY:
                cause = report.failure_reason or FailureReason.ROLE_VIOLATION
                self._emit("HANDSHAKE-FAILED", a=a, b=b, gw=gw, reason=cause.value)
                raise HandshakeFailed("ChainInvalid", cause, gw)
            keys[gw] = host.creds.chain[0].subject_public_key
        ch = Channel(len(self.channels), frozenset((a, b)), self.tick + 2 * self.handshake_ticks, keys)
        self.channels.append(ch)
        self._emit("CHANNEL", id=ch.channel_id, a=a, b=b, ready=ch.ready_at)
        return ch.channel_id

    def _close_channels(self, gw: str) -> None:
        for ch in self.channels:
            if gw in ch.ends and ch.open:
                ch.open = False
                self._emit("CHANNEL-CLOSED", id=ch.channel_id)

    # -- transfers ---------------------------------------------------------

    def initiate_transfer(self, g1_id: str, asset_id: str, originator: KeyPair, beneficiary_digest: bytes,
                          dest_chain_id: str, g2_id: str, profile_id: str = "") -> str:
        host = self.hosts[g1_id]
        rec = host.ledger.asset_record(asset_id, self.tick)
        if rec is None:
            raise UnknownAsset(asset_id)
        if rec.status is not AssetStatus.ACTIVE:
            raise AssetNotActive(f"{asset_id} is {rec.status.value}")
        if rec.owner_key != originator.digest:
            raise NotOwner(asset_id)
        self.registry.resolve(g2_id)
        failure = ""
        try:
            self.open_secure_channel(g1_id, g2_id)
        except HandshakeFailed as exc:
            failure = exc.reason
        sid = session_id_for(g1_id, asset_id, self.tick, next(self._session_counter))
        auth = b""
        if host.policy.lock_mechanism == ESCROW:
            auth = originator.sign(escrow_authorization_bytes(
                asset_id, host.creds.tx_key.digest, host.policy.t_block_l1))
        req = TransferRequest(
            session_id=sid, asset_id=asset_id, asset_profile_id=profile_id or rec.profile_id,
            fungible_amount=rec.fungible_amount, originator_digest=originator.digest,
            beneficiary_digest=beneficiary_digest, dest_chain_id=dest_chain_id, dest_gateway_id=g2_id,
            handshake_failure=failure, escrow_from_key=originator.public_key if auth else b"",
            escrow_authorization=auth,
        )
        self._push(self.tick + 2 * self.handshake_ticks, "start", g1_id, req)
        return sid

    def enable_isolation_probe(self, asset_id: str, originator: KeyPair, recipient_digest: bytes) -> None:
        self._probe = (asset_id, originator, recipient_digest)

    # -- crash and recovery --------------------------------------------------

    def inject_crash(self, gw: str, entry: Optional[CrashEntry] = None) -> None:
        host = self.hosts[gw]
        if not host.alive:
            return
        host.alive = False
        host.engine = None
        host.incarnation += 1
        self._close_channels(gw)
        policy = entry.policy if entry else RecoveryPolicy.NONE
        self._emit("CRASH", gw=gw, point=f"{entry.point.step}/{entry.point.sub_point.value}" if entry else "-",
                   policy=policy.value)
        if policy is RecoveryPolicy.NONE:
            host.abandoned = True
        else:
            self.schedule_recovery(gw, policy, entry.recovery_delay)

    def schedule_recovery(self, gw: str, policy: RecoveryPolicy, delay: int) -> None:
        self.hosts[gw].abandoned = False
        self._push(self.tick + delay, "recover", gw, policy)

    def _crash_hook(self, actor: GatewayHost, step: int, sub: SubPoint) -> bool:
        """Fire matching crash entries; return whether ``actor`` is still running."""
        for i, entry in enumerate(self.fault_plan.crashes):
            if not self._crash_used[i] and entry.point.step == step and entry.point.sub_point is sub:
                self._crash_used[i] = True
                self.inject_crash(entry.target, entry)
        return actor.alive

    def _ev_recover(self, gw: str, policy: RecoveryPolicy) -> None:
        host = self.hosts[gw]
        if host.alive:
            return
        host.recoveries += 1
        if policy is RecoveryPolicy.PRIMARY_BACKUP:
            host.endpoint = f"{gw}@backup{host.recoveries}"
            self.registry.register(gw, host.endpoint, host.creds.vasp_cert.digest)
        host.alive = True
        # the new incarnation reads the persisted log text, never the old process memory
        entries = parse_log(host.log.dump())
        host.engine = recovery.rebuild(entries, host.make_engine)
        self._emit("RECOVER", gw=gw, policy=policy.value, endpoint=host.endpoint, entries=len(entries))
        for other in sorted(self.hosts):
            if other != gw and self.hosts[other].alive:
                try:
                    self.open_secure_channel(gw, other)
                except HandshakeFailed:
                    pass
        self._push(self.tick + 2 * self.handshake_ticks, "resume", gw, host.incarnation)

    def _ev_resume(self, gw: str, incarnation: int) -> None:
        host = self.hosts[gw]
        if not host.alive or host.incarnation != incarnation:
            return
        check = recovery.cross_check(host.engine, host.ledger, self.tick)
        for rec in check.confirmed:
            self._feed_record(host, Direction.CONFIRM, rec.purpose, rec)
            if not host.alive:
                return
        for rec in check.later:
            self._push(rec.confirm_tick, "confirm", gw, incarnation, rec)
        lost = []
        if self.b4 is not None:
            for sid in sorted(host.engine.sessions):
                st = host.engine.sessions[sid]
                if st.htlc is not None and st.htlc_secret and self.b4.contract(st.htlc.contract_id) is None:
                    lost.append(st.htlc.contract_id)
        self._feed_record(host, Direction.RESUME, "Resume",
                          ResumeRecord(host.incarnation, tuple(check.absent), tuple(lost)))

    # -- input handling ------------------------------------------------------

    def _feed_record(self, host: GatewayHost, direction: Direction, step: str, record) -> None:
        self._feed(host, direction, step, encode(record))

    def _feed(self, host: GatewayHost, direction: Direction, step: str, data: bytes) -> None:
        host.log.append(direction, step, data, self.tick)
        actions = host.engine.apply(host.log.entries[-1])
        for sid, phase in host.record_phases().items():
            self._emit("PHASE", gw=host.gateway_id, session=sid, phase=phase.value)
        self._execute(host, actions)

    def _ev_start(self, gw: str, req: TransferRequest) -> None:
        host = self.hosts[gw]
        if not host.alive:
            self._emit("LOST-START", gw=gw, session=req.session_id)
            return
        self._emit("START", gw=gw, session=req.session_id, asset=req.asset_id,
                   failure=req.handshake_failure or "-")
        self._feed_record(host, Direction.START, "Start", req)

    def _ev_deliver(self, endpoint: str, channel_id: int, sender: str, data: bytes) -> None:
        host = next((h for h in self.hosts.values() if h.endpoint == endpoint and h.alive), None)
        ch = self.channels[channel_id]
        if host is None or not ch.open:
            self._emit("LOST", to=endpoint, channel=channel_id, digest=digest_hex(data)[:16])
            return
        key = ch.keys.get(sender, b"")
        try:
            msg = ProtocolMessage.from_bytes(data)
            ok = msg.verify(key) and msg.sender_gateway_digest == key_digest(key)
        except Exception:  # undecodable bytes are treated like a bad signature
            msg, ok = None, False
        if not ok:
            host.log.append(Direction.DROP, msg.step.value if msg else "?", data, self.tick)
            self._emit("REJECT-MSG", gw=host.gateway_id, reason="BadSignature", digest=digest_hex(data)[:16])
            return
        self._emit("RECV", gw=host.gateway_id, step=msg.step_number, msg=msg.step.value, seq=msg.sequence,
                   digest=digest_hex(data)[:16])
        self._feed(host, Direction.RECV, msg.step.value, data)

    def _ev_timer(self, gw: str, incarnation: int, session_id: str, token: str) -> None:
        host = self.hosts[gw]
        if not host.alive or host.incarnation != incarnation:
            return
        st = host.engine.sessions.get(session_id)
        if st is None or (token != st.timer_token and token != "htlc-refund"):
            return  # superseded timers are not inputs
        self._emit("TIMEOUT", gw=gw, session=session_id, token=token)
        self._feed_record(host, Direction.TIMEOUT, "Timeout", TimeoutRecord(session_id, token))

    def _ev_confirm(self, gw: str, incarnation: int, rec: ConfirmRecord) -> None:
        host = self.hosts[gw]
        if not host.alive or host.incarnation != incarnation:
            return
        self._emit("CONFIRM", gw=gw, ledger=host.ledger.ledger_id, purpose=rec.purpose, height=rec.height,
                   tx=rec.tx_id[:16])
        self._feed_record(host, Direction.CONFIRM, rec.purpose, rec)
        probe = getattr(self, "_probe", None)
        if probe is not None and rec.purpose == "lock" and host.alive:
            self._probe_tick(host, rec.session_id)

    def _ev_reject(self, gw: str, incarnation: int, rec: RejectRecord) -> None:
        host = self.hosts[gw]
        if not host.alive or host.incarnation != incarnation:
            return
        self._emit("REJECT", gw=gw, ledger=host.ledger.ledger_id, purpose=rec.purpose, reason=rec.reason)
        self._feed_record(host, Direction.REJECT, rec.purpose, rec)

    # -- isolation probe -----------------------------------------------------

    def _probe_tick(self, host: GatewayHost, session_id: str) -> None:
        self._push(self.tick, "probe", host.gateway_id, session_id)

    def _ev_probe(self, gw: str, session_id: str) -> None:
        host = self.hosts[gw]
        if not host.alive:
            return
        st = host.engine.sessions.get(session_id)
        if st is None or st.phase in TERMINAL:
            return
        asset_id, originator, recipient = self._probe
        try:
            host.ledger.submit(TxKind.TRANSFER, asset_id, originator, TransferPayload(recipient), self.tick)
            result = ProbeResult(self.tick, True, "")
        except InvalidTransaction as exc:
            result = ProbeResult(self.tick, False, type(exc).__name__)
        self.probes.append(result)
        self._emit("PROBE", asset=asset_id, accepted=result.accepted, reason=result.reason or "-")
        self._push(self.tick + 1, "probe", gw, session_id)

    # -- action execution ----------------------------------------------------

    def _execute(self, host: GatewayHost, actions) -> None:
        for action in actions:
            if not host.alive:
                return
            if isinstance(action, SetTimer):
                self._push(self.tick + action.delay, "timer", host.gateway_id, host.incarnation,
                           action.session_id, action.token)
                continue
            step = action.step_no
            if step and not self._crash_hook(host, step, SubPoint.BEFORE_SEND):
                return
            self._log_output(host, action)
            if step and not self._crash_hook(host, step, SubPoint.AFTER_LOG_WRITE):
                return
            self._perform(host, action)
            if step and not self._crash_hook(host, step, SubPoint.AFTER_SEND):
                return

    def _log_output(self, host: GatewayHost, action) -> None:
        if isinstance(action, Send):
            host.log.append(Direction.SENT, action.message.step.value, action.message.to_bytes(), self.tick)
        elif isinstance(action, Submit):
            rec = SubmitRecord(action.session_id, action.purpose, action.tx.to_bytes())
            host.log.append(Direction.SUBMIT, action.purpose, encode(rec), self.tick)
        else:
            rec = EffectRecord(action.session_id, type(action).__name__, encode(action))
            host.log.append(Direction.EFFECT, type(action).__name__, encode(rec), self.tick)

    def _perform(self, host: GatewayHost, action) -> None:
        gw = host.gateway_id
        if isinstance(action, Send):
            self._transmit(host, action)
        elif isinstance(action, Submit):
            self._emit("SUBMIT", gw=gw, ledger=host.ledger.ledger_id, step=action.step_no,
                       purpose=action.purpose, tx=action.tx.tx_id[:16])
            try:
                r = host.ledger.append(action.tx, self.tick)
            except InvalidTransaction as exc:
                rec = RejectRecord(action.session_id, action.purpose, action.tx.tx_id, type(exc).__name__)
                self._push(self.tick + host.ledger.confirm_delay, "reject", gw, host.incarnation, rec)
                return
            rec = ConfirmRecord(action.session_id, action.purpose, action.tx.tx_id, r.height, r.header_hash,
                                r.confirm_tick)
            self._push(r.confirm_tick, "confirm", gw, host.incarnation, rec)
        elif isinstance(action, HashLockCreate):
            self._htlc(gw, "create", lambda: self.b4.create(
                host.creds.tx_key.digest, action.amount, action.digest_h, action.recipient, action.expiry,
                self.tick, action.contract_id))
        elif isinstance(action, HashLockClaim):
            self._htlc(gw, "claim", lambda: self.b4.claim(
                action.contract_id, action.secret, host.creds.tx_key.digest, self.tick))
        elif isinstance(action, HashLockRefund):
            self._htlc(gw, "refund", lambda: self.b4.refund(action.contract_id, host.creds.tx_key.digest, self.tick))
        elif isinstance(action, WitnessRecord):
            if self.witness is not None:
                eid = self.witness.record(host.creds.identity_key.digest, action.data, self.tick)
                self._emit("WITNESS", gw=gw, entry=eid, purpose=action.purpose, data=digest_hex(action.data)[:16])

    def _htlc(self, gw: str, op: str, fn) -> None:
        if self.b4 is None:
            return
        try:
            fn()
            self._emit("HTLC", gw=gw, op=op, ok=True)
        except HtlcError as exc:
            self._emit("HTLC", gw=gw, op=op, ok=False, error=type(exc).__name__)

    def _transmit(self, host: GatewayHost, send: Send) -> None:
        msg = send.message
        data = msg.to_bytes()
        gw = host.gateway_id
        self._emit("SEND", gw=gw, to=send.peer_gateway_id, step=msg.step_number, msg=msg.step.value,
                   seq=msg.sequence, digest=digest_hex(data)[:16])
        ch = self.channel_between(gw, send.peer_gateway_id)
        if ch is None or ch.ready_at > self.tick:
            self._emit("LOST", to=send.peer_gateway_id, reason="no-channel")
            return
        delay = self.latency
        for i, fault in enumerate(self.fault_plan.message_faults):
            if self._fault_used[i] or fault.step != msg.step_number or (fault.sender and fault.sender != gw):
                continue
            self._fault_used[i] = True
            self._emit("FAULT", action=fault.action.value, step=fault.step, delay=fault.delay)
            if fault.action is FaultAction.DROP:
                return
            if fault.action is FaultAction.DELAY:
                delay += fault.delay
            else:
                data = data[:-1] + bytes([data[-1] ^ 0x01])
            break
        endpoint = self.registry.resolve(send.peer_gateway_id)
        self._push(self.tick + delay, "deliver", endpoint, ch.channel_id, gw, data)

    # -- main loop -----------------------------------------------------------

    def run_to_quiescence(self) -> list[str]:
        while self._queue:
            self.events_run += 1
            if self.events_run > self.max_events:
                raise NonTermination(f"more than {self.max_events} events")
            tick, _, kind, args = heapq.heappop(self._queue)
            self.tick = max(self.tick, tick)
            getattr(self, "_ev_" + kind)(*args)
        return self.trace

    def final_tick(self) -> int:
        """First tick by which every queued event and ledger expiry has taken effect."""
        horizons = [l.horizon() for l in self.ledgers.values()]
        expiries = [c.expiry_t_h for c in self.b4.contracts.values()] if self.b4 else []
        return max([self.tick, *horizons, *expiries])
