"""Hash-time-locked contracts on a balance ledger (the value plane).

Claim is allowed strictly before ``expiry_t_h``; refund from ``expiry_t_h``
onward, so the two windows never overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from blockgate.encoding import sha256


class HtlcError(Exception):
    pass


class InsufficientFunds(HtlcError):
    pass


class ExpiryInPast(HtlcError):
    pass


class WrongPreimage(HtlcError):
    pass


class Expired(HtlcError):
    pass


class NotRecipient(HtlcError):
    pass


class NotYetExpired(HtlcError):
    pass


class NotCreator(HtlcError):
    pass


class ContractClosed(HtlcError):
    pass


class UnknownContract(HtlcError, KeyError):
    pass


class ContractState(Enum):
    OPEN = "Open"
    CLAIMED = "Claimed"
    REFUNDED = "Refunded"


@dataclass
class HashLockContract:
    contract_id: str
    amount_x: int
    digest_h: bytes
    recipient_key_digest: bytes
    creator_key_digest: bytes
    expiry_t_h: int
    created_at: int
    state: ContractState = ContractState.OPEN
    closed_at: int = -1


@dataclass(frozen=True)
class HtlcEvent:
    tick: int
    contract_id: str
    event: str  # Created / Claimed / Refunded
    actor: bytes


@dataclass
class HashLockLedger:
    """Integer unit accounts plus hash-lock contracts."""

    ledger_id: str = "B4"
    balances: dict[bytes, int] = field(default_factory=dict)
    contracts: dict[str, HashLockContract] = field(default_factory=dict)
    events: list[HtlcEvent] = field(default_factory=list)

    def fund(self, account: bytes, amount: int) -> None:
        if amount < 0:
            raise ValueError("amount must be non-negative")
        self.balances[account] = self.balances.get(account, 0) + amount

    def balance(self, account: bytes) -> int:
        return self.balances.get(account, 0)

    def total_value(self) -> int:
        held = sum(c.amount_x for c in self.contracts.values() if c.state is ContractState.OPEN)
        return sum(self.balances.values()) + held

    def contract(self, contract_id: str):
        return self.contracts.get(contract_id)

    def _get(self, contract_id: str) -> HashLockContract:
        try:
            return self.contracts[contract_id]
        except KeyError:
            raise UnknownContract(contract_id) from None

    def create(self, creator: bytes, amount_x: int, digest_h: bytes, recipient: bytes, expiry_t_h: int,
               tick: int, contract_id: str = "") -> str:
        if amount_x <= 0:
            raise ValueError("amount must be positive")
        if expiry_t_h <= tick:
            raise ExpiryInPast(f"t_h={expiry_t_h} not after tick {tick}")
        if self.balance(creator) < amount_x:
            raise InsufficientFunds(f"balance {self.balance(creator)} < {amount_x}")
        contract_id = contract_id or f"htlc-{len(self.contracts)}"
        if contract_id in self.contracts:
            raise HtlcError(f"contract {contract_id} exists")
        self.balances[creator] -= amount_x
        self.contracts[contract_id] = HashLockContract(
            contract_id, amount_x, digest_h, recipient, creator, expiry_t_h, tick)
        self.events.append(HtlcEvent(tick, contract_id, "Created", creator))
        return contract_id

    def claim(self, contract_id: str, preimage: bytes, claimer: bytes, tick: int) -> HtlcEvent:
        c = self._get(contract_id)
        if c.state is not ContractState.OPEN:
            raise ContractClosed(f"{contract_id} is {c.state.value}")
        if claimer != c.recipient_key_digest:
            raise NotRecipient(contract_id)
        if sha256(preimage) != c.digest_h:
            raise WrongPreimage(contract_id)
        if tick >= c.expiry_t_h:
            raise Expired(contract_id)
        return self._close(c, ContractState.CLAIMED, c.recipient_key_digest, tick)

    def refund(self, contract_id: str, caller: bytes, tick: int) -> HtlcEvent:
        c = self._get(contract_id)
        if c.state is not ContractState.OPEN:
            raise ContractClosed(f"{contract_id} is {c.state.value}")
        if caller != c.creator_key_digest:
            raise NotCreator(contract_id)
        if tick < c.expiry_t_h:
            raise NotYetExpired(contract_id)
        return self._close(c, ContractState.REFUNDED, c.creator_key_digest, tick)

    def _close(self, c: HashLockContract, state: ContractState, payee: bytes, tick: int) -> HtlcEvent:
        c.state = state
        c.closed_at = tick
        self.balances[payee] = self.balance(payee) + c.amount_x
        event = HtlcEvent(tick, c.contract_id, state.value, payee)
        self.events.append(event)
        return event

    def trace_lines(self) -> list[str]:
        return [f"tick={e.tick} ledger={self.ledger_id} htlc={e.contract_id} event={e.event} actor={e.actor.hex()}"
                for e in self.events]
