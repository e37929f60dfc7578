"""Append-only ledger with lock, escrow, notification and finalization semantics.

Time is logical ticks.  A transaction appended at tick ``t`` confirms at
``t + confirm_delay`` and is validated against the ledger state as of that
confirmation tick.  Submissions arrive in non-decreasing tick order, so the
block sequence is also ordered by confirmation tick.  Lock, escrow and
notification durations count from the confirmation tick, and a transaction
confirming exactly at an expiry tick loses to the expiry.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional

from blockgate.encoding import decode, digest_hex, encode, encode_fields, encode_int, sha256
from blockgate.identity import KeyPair, KeyRole, key_digest, sign_as, verify

GENESIS_HASH = bytes(32)


class TxKind(Enum):
    TRANSFER = "Transfer"
    ESCROW = "Escrow"
    PASSIVE_LOCK = "PassiveLock"
    DISABLEMENT = "Disablement"
    NOTIFICATION = "Notification"
    FINALIZATION = "Finalization"


class AssetStatus(Enum):
    ACTIVE = "Active"
    LOCKED = "Locked"
    ESCROWED = "Escrowed"
    EXTINGUISHED = "Extinguished"
    NONEXISTENT = "Nonexistent"


class LedgerError(Exception):
    pass


class InvalidTransaction(LedgerError):
    pass


class UnknownAsset(InvalidTransaction):
    pass


class AssetNotActive(InvalidTransaction):
    pass


class NotOwner(InvalidTransaction):
    pass


class LockExpired(InvalidTransaction):
    pass


class LockNotFound(InvalidTransaction):
    pass


class IssuerMismatch(InvalidTransaction):
    pass


class EscrowExpired(InvalidTransaction):
    pass


class NotificationExpired(InvalidTransaction):
    pass


class NotificationNotFound(InvalidTransaction):
    pass


class UnregisteredIssuer(InvalidTransaction):
    pass


# -- payloads ---------------------------------------------------------------


@dataclass(frozen=True)
class TransferPayload:
    new_owner: bytes
    profile_id: str = ""
    fungible_amount: Optional[int] = None


@dataclass(frozen=True)
class EscrowPayload:
    from_key: bytes
    escrow_key: bytes
    t_esc: int
    owner_signature: bytes


@dataclass(frozen=True)
class PassiveLockPayload:
    t_block: int


@dataclass(frozen=True)
class DisablementPayload:
    lock_tx_id: str
    beneficiary_digest: bytes = b""
    dest_chain_id: str = ""
    remote_gateway_digest: bytes = b""


NOTIFY_INCOMING = "incoming"
NOTIFY_LOCATION = "location"


@dataclass(frozen=True)
class NotificationPayload:
    purpose: str
    profile_id: str
    fungible_amount: Optional[int]
    beneficiary_digest: bytes
    evidence_digest: bytes
    t_block: int


@dataclass(frozen=True)
class FinalizationPayload:
    notification_tx_id: str
    assertion: bytes
    assertion_is_digest: bool = False


PAYLOAD_TYPES: dict[TxKind, type] = {
    TxKind.TRANSFER: TransferPayload,
    TxKind.ESCROW: EscrowPayload,
    TxKind.PASSIVE_LOCK: PassiveLockPayload,
    TxKind.DISABLEMENT: DisablementPayload,
    TxKind.NOTIFICATION: NotificationPayload,
    TxKind.FINALIZATION: FinalizationPayload,
}


def escrow_authorization_bytes(asset_id: str, escrow_key: bytes, t_esc: int) -> bytes:
    return encode_fields(b"escrow-authorization", asset_id.encode(), escrow_key, encode_int(t_esc))


@dataclass(frozen=True)
class LedgerTransaction:
    kind: TxKind
    asset_id: str
    issuer_key: bytes
    payload: bytes
    timestamp: int
    signature: bytes = b""

    @classmethod
    def build(cls, kind: TxKind, asset_id: str, issuer: KeyPair, record, timestamp: int) -> "LedgerTransaction":
        if not isinstance(record, PAYLOAD_TYPES[kind]):
            raise TypeError(f"{kind.value} needs {PAYLOAD_TYPES[kind].__name__}")
        tx = cls(kind=kind, asset_id=asset_id, issuer_key=issuer.public_key, payload=encode(record), timestamp=timestamp)
        return replace(tx, signature=sign_as(issuer, KeyRole.TRANSACTION_SIGNING, tx.tbs_bytes()))

    def tbs_bytes(self) -> bytes:
        return encode(self, exclude=("signature",))

    def to_bytes(self) -> bytes:
        return encode(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "LedgerTransaction":
        return decode(cls, data)

    @property
    def tx_id(self) -> str:
        return digest_hex(self.to_bytes())

    @property
    def issuer_digest(self) -> bytes:
        return key_digest(self.issuer_key)

    @property
    def record(self):
        return decode(PAYLOAD_TYPES[self.kind], self.payload)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    transactions: tuple[LedgerTransaction, ...]
    header_hash: bytes
    confirm_tick: int


def compute_header_hash(height: int, prev_hash: bytes, transactions: Iterable[LedgerTransaction]) -> bytes:
    tx_digests = b"".join(encode_fields(sha256(tx.to_bytes())) for tx in transactions)
    return sha256(encode_fields(encode_int(height), prev_hash, tx_digests))


@dataclass(frozen=True)
class ConfirmationReceipt:
    height: int
    header_hash: bytes
    tx_index: int
    tx_id: str
    confirm_tick: int
    expires_at: Optional[int] = None


@dataclass(frozen=True)
class AssetRecord:
    asset_id: str
    profile_id: str
    owner_key: bytes
    fungible_amount: Optional[int]
    status: AssetStatus


@dataclass
class _AssetState:
    asset_id: str
    profile_id: str
    owner: bytes
    amount: Optional[int]
    status: AssetStatus
    lock_tx_id: str = ""
    lock_issuer: bytes = b""
    hold_expiry: int = 0
    revert_owner: bytes = b""

    def effective(self, tick: int) -> "_AssetState":
        if self.status is AssetStatus.LOCKED and tick >= self.hold_expiry:
            return replace(self, status=AssetStatus.ACTIVE, lock_tx_id="")
        if self.status is AssetStatus.ESCROWED and tick >= self.hold_expiry:
            return replace(self, status=AssetStatus.ACTIVE, owner=self.revert_owner, lock_tx_id="")
        return self


@dataclass
class _Notification:
    asset_id: str
    profile_id: str
    amount: Optional[int]
    beneficiary: bytes
    expiry: int
    finalized: bool = False


@dataclass
class _State:
    assets: dict[str, _AssetState] = field(default_factory=dict)
    notifications: dict[str, _Notification] = field(default_factory=dict)

    def view(self, asset_id: str, tick: int) -> Optional[_AssetState]:
        st = self.assets.get(asset_id)
        return None if st is None else st.effective(tick)


class Ledger:
    """One blockchain's ledger.  Single writer: the simulator event thread."""

    def __init__(self, ledger_id: str, chain_id: str, confirm_delay: int = 2, broken_rules: Iterable[str] = ()):
        if confirm_delay < 0:
            raise ValueError("confirm_delay must be >= 0")
        self.ledger_id = ledger_id
        self.chain_id = chain_id
        self.confirm_delay = confirm_delay
        # harness self-test hooks that deliberately break a rule
        self.broken_rules = frozenset(broken_rules)
        self.blocks: list[Block] = []
        self._registered: set[bytes] = set()
        self._index: dict[str, tuple[int, LedgerTransaction]] = {}
        self._state = _State()
        self._last_submit_tick = -1

    # -- registration and submission -------------------------------------

    def register_key(self, public_key: bytes) -> None:
        self._registered.add(public_key)

    def is_registered(self, public_key: bytes) -> bool:
        return public_key in self._registered

    def append(self, tx: LedgerTransaction, tick: int) -> ConfirmationReceipt:
        if tick < self._last_submit_tick:
            raise ValueError("submissions must be in non-decreasing tick order")
        if tx.issuer_key not in self._registered:
            raise UnregisteredIssuer("issuer key not registered on this ledger")
        if not verify(tx.issuer_key, tx.tbs_bytes(), tx.signature):
            raise InvalidTransaction("bad transaction signature")
        if tx.tx_id in self._index:
            raise InvalidTransaction("duplicate transaction")
        confirm = tick + self.confirm_delay
        expires = _apply(self._state, self._index, tx, confirm, self.broken_rules)
        self._last_submit_tick = tick
        height = len(self.blocks) + 1
        prev = self.blocks[-1].header_hash if self.blocks else GENESIS_HASH
        header = compute_header_hash(height, prev, (tx,))
        self.blocks.append(Block(height, prev, (tx,), header, confirm))
        self._index[tx.tx_id] = (height, tx)
        return ConfirmationReceipt(height, header, 0, tx.tx_id, confirm, expires)

    def submit(self, kind: TxKind, asset_id: str, issuer: KeyPair, record, tick: int) -> ConfirmationReceipt:
        return self.append(LedgerTransaction.build(kind, asset_id, issuer, record, tick), tick)

    # -- typed operations --------------------------------------------------

    def create_asset(self, asset_id: str, issuer: KeyPair, owner_digest: bytes, profile_id: str,
                     amount: Optional[int], tick: int) -> str:
        return self.submit(TxKind.TRANSFER, asset_id, issuer, TransferPayload(owner_digest, profile_id, amount), tick).tx_id

    def transfer(self, asset_id: str, owner: KeyPair, new_owner_digest: bytes, tick: int) -> str:
        return self.submit(TxKind.TRANSFER, asset_id, owner, TransferPayload(new_owner_digest), tick).tx_id

    def passive_lock(self, asset_id: str, locker: KeyPair, t_block: int, tick: int) -> str:
        return self.submit(TxKind.PASSIVE_LOCK, asset_id, locker, PassiveLockPayload(t_block), tick).tx_id

    def disable(self, lock_tx_id: str, issuer: KeyPair, tick: int, beneficiary_digest: bytes = b"",
                dest_chain_id: str = "", remote_gateway_digest: bytes = b"") -> str:
        lock = self.transaction(lock_tx_id)
        asset_id = lock.asset_id if lock is not None else ""
        record = DisablementPayload(lock_tx_id, beneficiary_digest, dest_chain_id, remote_gateway_digest)
        return self.submit(TxKind.DISABLEMENT, asset_id, issuer, record, tick).tx_id

    def escrow(self, asset_id: str, owner: KeyPair, escrow_key_digest: bytes, t_esc: int, tick: int,
               submitter: Optional[KeyPair] = None) -> str:
        auth = owner.sign(escrow_authorization_bytes(asset_id, escrow_key_digest, t_esc))
        record = EscrowPayload(owner.public_key, escrow_key_digest, t_esc, auth)
        return self.submit(TxKind.ESCROW, asset_id, submitter or owner, record, tick).tx_id

    def escrow_finalize(self, escrow_tx_id: str, holder: KeyPair, tick: int, **final_record) -> str:
        return self.disable(escrow_tx_id, holder, tick, **final_record)

    def notify_incoming(self, asset_id: str, issuer: KeyPair, profile_id: str, amount: Optional[int],
                        beneficiary_digest: bytes, evidence_digest: bytes, t_block: int, tick: int) -> str:
        record = NotificationPayload(NOTIFY_INCOMING, profile_id, amount, beneficiary_digest, evidence_digest, t_block)
        return self.submit(TxKind.NOTIFICATION, asset_id, issuer, record, tick).tx_id

    def record_location(self, asset_id: str, issuer: KeyPair, beneficiary_digest: bytes, evidence_digest: bytes,
                        tick: int) -> str:
        record = NotificationPayload(NOTIFY_LOCATION, "", None, beneficiary_digest, evidence_digest, 0)
        return self.submit(TxKind.NOTIFICATION, asset_id, issuer, record, tick).tx_id

    def finalize_incoming(self, notification_tx_id: str, issuer: KeyPair, assertion: bytes, tick: int,
                          assertion_is_digest: bool = False) -> str:
        note = self.transaction(notification_tx_id)
        asset_id = note.asset_id if note is not None else ""
        record = FinalizationPayload(notification_tx_id, assertion, assertion_is_digest)
        return self.submit(TxKind.FINALIZATION, asset_id, issuer, record, tick).tx_id

    # -- queries -----------------------------------------------------------

    def transaction(self, tx_id: str) -> Optional[LedgerTransaction]:
        hit = self._index.get(tx_id)
        return None if hit is None else hit[1]

    def receipt(self, tx_id: str) -> Optional[ConfirmationReceipt]:
        hit = self._index.get(tx_id)
        if hit is None:
            return None
        block = self.blocks[hit[0] - 1]
        return ConfirmationReceipt(block.height, block.header_hash, 0, tx_id, block.confirm_tick)

    def is_confirmed(self, tx_id: str, tick: int) -> bool:
        r = self.receipt(tx_id)
        return r is not None and r.confirm_tick <= tick

    def confirmed_blocks(self, tick: int) -> list[Block]:
        return [b for b in self.blocks if b.confirm_tick <= tick]

    def _state_at(self, tick: int) -> _State:
        if not self.blocks or self.blocks[-1].confirm_tick <= tick:
            return self._state
        state = _State()
        index: dict[str, tuple[int, LedgerTransaction]] = {}
        for block in self.blocks:
            if block.confirm_tick > tick:
                break
            for tx in block.transactions:
                _apply(state, index, tx, block.confirm_tick, self.broken_rules)
                index[tx.tx_id] = (block.height, tx)
        return state

    def asset_status(self, asset_id: str, at_tick: int) -> AssetStatus:
        st = self._state_at(at_tick).view(asset_id, at_tick)
        return AssetStatus.NONEXISTENT if st is None else st.status

    def asset_record(self, asset_id: str, at_tick: int) -> Optional[AssetRecord]:
        st = self._state_at(at_tick).view(asset_id, at_tick)
        if st is None:
            return None
        return AssetRecord(st.asset_id, st.profile_id, st.owner, st.amount, st.status)

    def is_asset_active(self, asset_id: str, at_tick: int) -> bool:
        return self.asset_status(asset_id, at_tick) is AssetStatus.ACTIVE

    def lock_expiry(self, lock_tx_id: str) -> Optional[int]:
        tx = self.transaction(lock_tx_id)
        r = self.receipt(lock_tx_id)
        if tx is None or r is None:
            return None
        rec = tx.record
        if tx.kind is TxKind.PASSIVE_LOCK:
            return r.confirm_tick + rec.t_block
        if tx.kind is TxKind.ESCROW:
            return r.confirm_tick + rec.t_esc
        if tx.kind is TxKind.NOTIFICATION:
            return r.confirm_tick + rec.t_block
        return None

    def history(self, asset_id: str) -> list[tuple[Block, LedgerTransaction]]:
        return [(b, tx) for b in self.blocks for tx in b.transactions if tx.asset_id == asset_id]

    def asset_ids(self) -> list[str]:
        return sorted({tx.asset_id for b in self.blocks for tx in b.transactions})

    def horizon(self) -> int:
        """Latest tick at which any confirmation or expiry on this ledger takes effect."""
        last = 0
        for b in self.blocks:
            last = max(last, b.confirm_tick)
            for tx in b.transactions:
                exp = self.lock_expiry(tx.tx_id)
                if exp is not None:
                    last = max(last, exp)
        return last

    def verify_header_chain(self) -> bool:
        prev = GENESIS_HASH
        for i, b in enumerate(self.blocks, start=1):
            if b.height != i or b.prev_hash != prev:
                return False
            if compute_header_hash(b.height, b.prev_hash, b.transactions) != b.header_hash:
                return False
            prev = b.header_hash
        return True

    def trace_lines(self) -> list[str]:
        lines = []
        for b in self.blocks:
            for tx in b.transactions:
                lines.append(
                    f"tick={b.confirm_tick} ledger={self.ledger_id} height={b.height} kind={tx.kind.value} "
                    f"asset={tx.asset_id} issuer={tx.issuer_digest.hex()} payload={digest_hex(tx.payload)}"
                )
        return lines

    def reader(self) -> "LedgerReader":
        return LedgerReader(self)


class LedgerReader:
    """Read-only handle; exposes queries and no way to append."""

    __slots__ = ("_ledger",)

    def __init__(self, ledger: Ledger):
        self._ledger = ledger

    @property
    def ledger_id(self) -> str:
        return self._ledger.ledger_id

    @property
    def chain_id(self) -> str:
        return self._ledger.chain_id

    def asset_status(self, asset_id: str, at_tick: int) -> AssetStatus:
        return self._ledger.asset_status(asset_id, at_tick)

    def asset_record(self, asset_id: str, at_tick: int) -> Optional[AssetRecord]:
        return self._ledger.asset_record(asset_id, at_tick)

    def history(self, asset_id: str) -> list[tuple[Block, LedgerTransaction]]:
        return self._ledger.history(asset_id)

    def receipt(self, tx_id: str) -> Optional[ConfirmationReceipt]:
        return self._ledger.receipt(tx_id)


def _apply(state: _State, index: dict, tx: LedgerTransaction, confirm: int, broken: frozenset = frozenset()) -> Optional[int]:
    """Validate ``tx`` against ``state`` at tick ``confirm`` and apply it.

    Returns the expiry tick the transaction introduces, if any.
    """
    rec = tx.record
    current = state.view(tx.asset_id, confirm)
    issuer = tx.issuer_digest

    if tx.kind is TxKind.TRANSFER:
        if current is None:
            if any(n.asset_id == tx.asset_id and not n.finalized and n.expiry > confirm
                   for n in state.notifications.values()):
                raise InvalidTransaction("asset has a pending incoming notification")
            state.assets[tx.asset_id] = _AssetState(
                tx.asset_id, rec.profile_id, rec.new_owner, rec.fungible_amount, AssetStatus.ACTIVE)
            return None
        if current.status is not AssetStatus.ACTIVE:
            raise AssetNotActive(f"{tx.asset_id} is {current.status.value}")
        if issuer != current.owner:
            raise NotOwner("transfer not issued by the current owner")
        state.assets[tx.asset_id] = replace(current, owner=rec.new_owner)
        return None

    if tx.kind is TxKind.ESCROW:
        if current is None:
            raise UnknownAsset(tx.asset_id)
        if current.status is not AssetStatus.ACTIVE:
            raise AssetNotActive(f"{tx.asset_id} is {current.status.value}")
        if rec.t_esc <= 0:
            raise InvalidTransaction("t_esc must be positive")
        if key_digest(rec.from_key) != current.owner:
            raise NotOwner("escrow source is not the owner")
        if not verify(rec.from_key, escrow_authorization_bytes(tx.asset_id, rec.escrow_key, rec.t_esc),
                      rec.owner_signature):
            raise NotOwner("escrow not authorized by the owner")
        expiry = confirm + rec.t_esc
        state.assets[tx.asset_id] = replace(
            current, status=AssetStatus.ESCROWED, owner=rec.escrow_key, revert_owner=current.owner,
            lock_tx_id=tx.tx_id, lock_issuer=rec.escrow_key, hold_expiry=expiry)
        return expiry

    if tx.kind is TxKind.PASSIVE_LOCK:
        if rec.t_block <= 0:
            raise InvalidTransaction("t_block must be positive")
        if current is None:
            raise UnknownAsset(tx.asset_id)
        if current.status is not AssetStatus.ACTIVE:
            raise AssetNotActive(f"{tx.asset_id} is {current.status.value}")
        expiry = confirm + rec.t_block
        state.assets[tx.asset_id] = replace(
            current, status=AssetStatus.LOCKED, lock_tx_id=tx.tx_id, lock_issuer=issuer, hold_expiry=expiry)
        return expiry

    if tx.kind is TxKind.DISABLEMENT:
        hit = index.get(rec.lock_tx_id)
        lock_tx = None if hit is None else hit[1]
        if (lock_tx is None or lock_tx.kind not in (TxKind.PASSIVE_LOCK, TxKind.ESCROW)
                or lock_tx.asset_id != tx.asset_id or current is None):
            raise LockNotFound(rec.lock_tx_id)
        escrow = lock_tx.kind is TxKind.ESCROW
        raw = state.assets[tx.asset_id]
        if raw.lock_tx_id != rec.lock_tx_id or raw.status not in (AssetStatus.LOCKED, AssetStatus.ESCROWED):
            if raw.status is AssetStatus.EXTINGUISHED:
                raise InvalidTransaction("asset already extinguished")
            raise (EscrowExpired if escrow else LockExpired)(rec.lock_tx_id)
        if confirm >= raw.hold_expiry:
            raise (EscrowExpired if escrow else LockExpired)(rec.lock_tx_id)
        if issuer != raw.lock_issuer:
            raise IssuerMismatch("disablement issuer differs from lock holder")
        if "disablement-keeps-active" in broken:
            state.assets[tx.asset_id] = replace(raw, status=AssetStatus.ACTIVE, lock_tx_id="")
        else:
            state.assets[tx.asset_id] = replace(raw, status=AssetStatus.EXTINGUISHED, hold_expiry=0)
        return None

    if tx.kind is TxKind.NOTIFICATION:
        if rec.purpose == NOTIFY_LOCATION:
            if current is None or current.status is not AssetStatus.EXTINGUISHED:
                raise InvalidTransaction("location record requires an extinguished asset")
            return None
        if rec.purpose != NOTIFY_INCOMING:
            raise InvalidTransaction(f"unknown notification purpose {rec.purpose!r}")
        if rec.t_block <= 0:
            raise InvalidTransaction("t_block must be positive")
        if current is not None:
            raise InvalidTransaction("incoming asset already exists on this ledger")
        if any(n.asset_id == tx.asset_id and not n.finalized and n.expiry > confirm
               for n in state.notifications.values()):
            raise InvalidTransaction("another incoming notification is still live")
        expiry = confirm + rec.t_block
        state.notifications[tx.tx_id] = _Notification(
            tx.asset_id, rec.profile_id, rec.fungible_amount, rec.beneficiary_digest, expiry)
        return expiry

    if tx.kind is TxKind.FINALIZATION:
        note = state.notifications.get(rec.notification_tx_id)
        if note is None or note.asset_id != tx.asset_id:
            raise NotificationNotFound(rec.notification_tx_id)
        if note.finalized:
            raise InvalidTransaction("notification already finalized")
        if confirm >= note.expiry:
            raise NotificationExpired(rec.notification_tx_id)
        if current is not None:
            raise InvalidTransaction("asset already exists on this ledger")
        note.finalized = True
        state.assets[tx.asset_id] = _AssetState(
            tx.asset_id, note.profile_id, note.beneficiary, note.amount, AssetStatus.ACTIVE)
        return None

    raise InvalidTransaction(f"unknown kind {tx.kind}")
