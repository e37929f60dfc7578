"""Public append-only notarization chain."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

from blockgate.encoding import DecodeError, encode_fields, sha256, split_frames

MAX_DATA = 256


class DataTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class WitnessEntry:
    entry_id: int
    submitter_key_digest: bytes
    data: bytes
    timestamp: int


@dataclass
class WitnessChain:
    ledger_id: str = "W"
    _entries: list[WitnessEntry] = field(default_factory=list)

    def record(self, submitter: bytes, data: bytes, tick: int) -> int:
        if len(data) > MAX_DATA:
            raise DataTooLarge(f"{len(data)} bytes > {MAX_DATA}")
        entry = WitnessEntry(len(self._entries), submitter, bytes(data), tick)
        self._entries.append(entry)
        return entry.entry_id

    def lookup(self, match: Union[bytes, Callable[[bytes], bool]] = b"") -> list[WitnessEntry]:
        """Entries whose data starts with ``match`` (or satisfies it, if callable), in append order."""
        pred = match if callable(match) else (lambda d: d.startswith(match))
        return [e for e in self._entries if pred(e.data)]

    def read(self, at_tick: int) -> tuple[WitnessEntry, ...]:
        return tuple(e for e in self._entries if e.timestamp <= at_tick)

    def __len__(self) -> int:
        return len(self._entries)

    def trace_lines(self) -> list[str]:
        return [f"tick={e.timestamp} ledger={self.ledger_id} entry={e.entry_id} "
                f"submitter={e.submitter_key_digest.hex()} data={e.data.hex()}" for e in self._entries]


def forwarding_payload(profile_id: str, asset_id: str, beneficiary_digest: bytes, dest_chain_id: str) -> bytes:
    """Forwarding-address record: asset type, asset digest, beneficiary digest, destination chain."""
    return encode_fields(profile_id.encode(), sha256(asset_id.encode()), beneficiary_digest, dest_chain_id.encode())


def find_forwarding(chain: WitnessChain, asset_id: str) -> list[tuple[WitnessEntry, str]]:
    """Forwarding entries for ``asset_id`` with the chain each one names, oldest first."""
    wanted = sha256(asset_id.encode())
    out = []
    for entry in chain.lookup(lambda d: True):
        try:
            parts = split_frames(entry.data)
        except DecodeError:
            continue
        if len(parts) == 4 and parts[1] == wanted:
            out.append((entry, parts[3].decode()))
    return out
