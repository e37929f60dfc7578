"""Rebuilding gateway sessions from the forensic log.

Reconstruction is a fold of the logged inputs through a fresh
:class:`~blockgate.protocol.gateway.Gateway`; output entries (SENT, SUBMIT,
EFFECT) are evidence only and never feed state.  After the fold the own
ledger is consulted for submissions whose outcome the log does not record.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Union

from blockgate.ledger import Ledger
from blockgate.protocol.gateway import TERMINAL, Gateway, Phase, Role, SessionState
from blockgate.protocol.log import INPUT_DIRECTIONS, ConfirmRecord, CorruptLog, LogEntry, parse_log

EngineFactory = Callable[[], Gateway]

_OBLIGATIONS = {
    "await-response": "await ProposalResponse",
    "await-lock": "confirm Step 2 lock on own ledger",
    "await-evidence-ack": "await EvidenceAck",
    "await-prepare-ack": "await PrepareAck",
    "await-ack-final": "resend CommitFinal",
    "commit-pending": "resend CommitFinal",
    "await-location": "confirm Step 12 location record",
    "await-evidence": "await LockEvidence",
    "await-notify": "confirm Step 4 notification on own ledger",
    "await-prepare": "await PrepareCommit",
    "in-doubt": "await CommitFinal",
    "await-renotify": "confirm re-notification on own ledger",
    "await-finalize": "confirm Step 10 finalization on own ledger",
    "withheld": "Step 10 withheld",
}


@dataclass(frozen=True)
class Checkpoint:
    session_id: str
    last_logged_sequence: int
    reconstructed_phase: Phase
    pending_obligations: tuple[str, ...]


@dataclass
class LedgerCrossCheck:
    """What the own ledger says about submissions still pending after replay."""

    confirmed: list[ConfirmRecord] = field(default_factory=list)
    later: list[ConfirmRecord] = field(default_factory=list)  # on ledger, confirms in the future
    absent: list[str] = field(default_factory=list)


def _input_entries(entries: Iterable[LogEntry]) -> list[LogEntry]:
    return [e for e in entries if e.direction in INPUT_DIRECTIONS]


def _check_dense(entries: list[LogEntry]) -> None:
    for i, e in enumerate(entries):
        if e.sequence != i:
            raise CorruptLog(f"sequence gap at entry {i}", entries[:i])


def rebuild(entries: Iterable[LogEntry], make_engine: EngineFactory) -> Gateway:
    """Fold the log's inputs through a fresh engine; actions are discarded."""
    entries = list(entries)
    _check_dense(entries)
    engine = make_engine()
    for entry in _input_entries(entries):
        engine.apply(entry)
    return engine


def phase_at_each_prefix(entries: list[LogEntry], make_engine: EngineFactory) -> list[dict[str, Phase]]:
    """Session phases after every log prefix (index i covers entries[:i])."""
    engine = make_engine()
    out = [{}]
    for entry in entries:
        if entry.direction in INPUT_DIRECTIONS:
            engine.apply(entry)
        out.append({sid: st.phase for sid, st in engine.sessions.items()})
    return out


def cross_check(engine: Gateway, ledger: Ledger, now: int) -> LedgerCrossCheck:
    result = LedgerCrossCheck()
    for sid in sorted(engine.sessions):
        st = engine.sessions[sid]
        for purpose in sorted(st.pending):
            tx = st.pending[purpose]
            r = ledger.receipt(tx.tx_id)
            if r is None:
                result.absent.append(tx.tx_id)
                continue
            rec = ConfirmRecord(sid, purpose, tx.tx_id, r.height, r.header_hash, r.confirm_tick)
            (result.confirmed if r.confirm_tick <= now else result.later).append(rec)
    return result


def _obligations(st: SessionState, ledger: Optional[Ledger]) -> tuple[str, ...]:
    out = []
    if st.role is Role.COORDINATOR and st.cursor == "await-disable":
        tx = st.pending.get("disable")
        on_ledger = tx is not None and ledger is not None and ledger.receipt(tx.tx_id) is not None
        out.append("verify Step 8 confirmed on own ledger" if on_ledger else "submit Step 8 disablement")
    elif st.cursor in _OBLIGATIONS:
        out.append(_OBLIGATIONS[st.cursor])
    if st.htlc is not None and st.role is Role.COORDINATOR and not st.committed_on_origin:
        out.append("refund hash-lock at expiry")
    return tuple(out)


def reconstruct(log: Union[str, Iterable[LogEntry]], ledger: Optional[Ledger],
                make_engine: EngineFactory) -> list[Checkpoint]:
    """One checkpoint per open session.

    ``log`` may be raw log text.  A corrupt log yields checkpoints for the
    sessions visible in the valid prefix, all marked ``ManualIntervention``.
    """
    manual = False
    try:
        entries = parse_log(log) if isinstance(log, str) else list(log)
        engine = rebuild(entries, make_engine)
    except CorruptLog as exc:
        manual = True
        entries = exc.valid_entries
        engine = rebuild(entries, make_engine)
    last = entries[-1].sequence if entries else -1
    checkpoints = []
    for sid in sorted(engine.sessions):
        st = engine.sessions[sid]
        if manual:
            st.phase = Phase.MANUAL
            checkpoints.append(Checkpoint(sid, last, Phase.MANUAL, ("manual intervention: corrupt log",)))
        elif st.phase not in TERMINAL:
            checkpoints.append(Checkpoint(sid, last, st.phase, _obligations(st, ledger)))
    return checkpoints
