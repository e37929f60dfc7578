"""Persistent forensic log kept by every gateway.

One entry per line: ``sequence<TAB>tick<TAB>direction<TAB>step<TAB>hex``.
``SENT``/``RECV`` entries hold canonical message bytes; the other
directions hold the canonical encoding of the records below and exist so
that a recovering gateway can rebuild its sessions from the log alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional

from blockgate.encoding import DecodeError, decode, digest_hex, encode


class Direction(Enum):
    SENT = "SENT"
    RECV = "RECV"
    DROP = "DROP"  # received but rejected (bad signature / undecodable)
    START = "START"
    SUBMIT = "SUBMIT"
    CONFIRM = "CONFIRM"
    REJECT = "REJECT"
    TIMEOUT = "TIMEOUT"
    RESUME = "RESUME"
    EFFECT = "EFFECT"  # off-ledger side effect (hash-lock, witness)


INPUT_DIRECTIONS = frozenset(
    {Direction.RECV, Direction.START, Direction.CONFIRM, Direction.REJECT, Direction.TIMEOUT, Direction.RESUME}
)


class CorruptLog(Exception):
    def __init__(self, message: str, valid_entries: Optional[list["LogEntry"]] = None, truncated: bool = False):
        super().__init__(message)
        self.valid_entries = valid_entries or []
        self.truncated = truncated


@dataclass(frozen=True)
class TransferRequest:
    session_id: str
    asset_id: str
    asset_profile_id: str
    fungible_amount: Optional[int]
    originator_digest: bytes
    beneficiary_digest: bytes
    dest_chain_id: str
    dest_gateway_id: str
    handshake_failure: str
    escrow_from_key: bytes = b""
    escrow_authorization: bytes = b""


@dataclass(frozen=True)
class SubmitRecord:
    session_id: str
    purpose: str
    tx: bytes


@dataclass(frozen=True)
class ConfirmRecord:
    session_id: str
    purpose: str
    tx_id: str
    height: int
    header_hash: bytes
    confirm_tick: int


@dataclass(frozen=True)
class RejectRecord:
    session_id: str
    purpose: str
    tx_id: str
    reason: str


@dataclass(frozen=True)
class TimeoutRecord:
    session_id: str
    token: str


@dataclass(frozen=True)
class ResumeRecord:
    incarnation: int
    absent_tx_ids: tuple[str, ...]
    absent_contracts: tuple[str, ...]


@dataclass(frozen=True)
class EffectRecord:
    session_id: str
    purpose: str
    data: bytes


RECORD_TYPES = {
    Direction.START: TransferRequest,
    Direction.SUBMIT: SubmitRecord,
    Direction.CONFIRM: ConfirmRecord,
    Direction.REJECT: RejectRecord,
    Direction.TIMEOUT: TimeoutRecord,
    Direction.RESUME: ResumeRecord,
    Direction.EFFECT: EffectRecord,
}


@dataclass(frozen=True)
class LogEntry:
    sequence: int
    tick: int
    direction: Direction
    step: str
    data: bytes

    def to_line(self) -> str:
        return f"{self.sequence}\t{self.tick}\t{self.direction.value}\t{self.step}\t{self.data.hex()}"

    @classmethod
    def from_line(cls, line: str) -> "LogEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise DecodeError("wrong number of columns")
        try:
            return cls(int(parts[0]), int(parts[1]), Direction(parts[2]), parts[3], bytes.fromhex(parts[4]))
        except ValueError as exc:
            raise DecodeError(str(exc)) from exc

    def record(self):
        """Decode ``data`` into the record type implied by ``direction``."""
        if self.direction in (Direction.SENT, Direction.RECV, Direction.DROP):
            from blockgate.protocol.messages import ProtocolMessage

            return ProtocolMessage.from_bytes(self.data)
        return decode(RECORD_TYPES[self.direction], self.data)

    @property
    def digest(self) -> str:
        return digest_hex(self.to_line().encode())


class ForensicLog:
    """Append-only entry store that outlives the gateway process using it."""

    def __init__(self, owner: str, entries: Iterable[LogEntry] = ()):
        self.owner = owner
        self.entries: list[LogEntry] = list(entries)
        self.listeners: list[Callable[[LogEntry], None]] = []

    def append(self, direction: Direction, step: str, data: bytes, tick: int) -> int:
        seq = len(self.entries)
        entry = LogEntry(seq, tick, direction, step, data)
        self.entries.append(entry)
        for listener in self.listeners:
            listener(entry)
        return seq

    def append_record(self, direction: Direction, step: str, record, tick: int) -> int:
        return self.append(direction, step, encode(record), tick)

    def __len__(self) -> int:
        return len(self.entries)

    def lines(self) -> list[str]:
        return [e.to_line() for e in self.entries]

    def dump(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def write(self, path: Path) -> None:
        Path(path).write_text(self.dump())


def parse_log(text: str) -> list[LogEntry]:
    """Parse log text, enforcing dense sequence numbers.

    A malformed final line is reported as truncation; malformed or
    out-of-sequence lines elsewhere are corruption.
    """
    lines = text.split("\n")
    ends_clean = text.endswith("\n") or text == ""
    if lines and lines[-1] == "":
        lines.pop()
    entries: list[LogEntry] = []
    for i, line in enumerate(lines):
        last = i == len(lines) - 1
        try:
            entry = LogEntry.from_line(line)
        except DecodeError as exc:
            if last and not ends_clean:
                raise CorruptLog(f"truncated final entry: {exc}", entries, truncated=True) from exc
            raise CorruptLog(f"undecodable entry at line {i + 1}: {exc}", entries) from exc
        if entry.sequence != len(entries):
            raise CorruptLog(f"sequence gap at line {i + 1}", entries)
        entries.append(entry)
    return entries


def read_log(path: Path) -> list[LogEntry]:
    return parse_log(Path(path).read_text())
