from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from blockgate.ledger import (
    AssetNotActive,
    AssetStatus,
    DisablementPayload,
    FinalizationPayload,
    InvalidTransaction,
    LedgerTransaction,
    LockExpired,
    LockNotFound,
    IssuerMismatch,
    NotificationExpired,
    NotificationNotFound,
    NotificationPayload,
    NotOwner,
    NOTIFY_INCOMING,
    PassiveLockPayload,
    TransferPayload,
    TxKind,
    UnknownAsset,
    UnregisteredIssuer,
    EscrowExpired,
)
from blockgate.identity import KeyPair, KeyRole

from conftest import ALICE, BOB, G1, G2, ISSUER, make_ledger

A = "asset-A"


def _create(ledger, tick=0, owner=ALICE):
    return ledger.create_asset(A, ISSUER, owner.digest, "profile/bond-v1", None, tick)


# -- append -------------------------------------------------------------------


def test_first_append_is_height_one(ledger):
    r = ledger.submit(TxKind.TRANSFER, A, ISSUER, TransferPayload(ALICE.digest, "p"), 0)
    assert r.height == 1
    assert r.confirm_tick == 2
    assert ledger.receipt(r.tx_id) == replace(r, expires_at=None)


def test_passive_lock_marks_locked_and_keeps_owner(ledger):
    _create(ledger)
    ledger.passive_lock(A, G1, 20, 1)
    assert ledger.asset_status(A, 3) is AssetStatus.LOCKED
    assert ledger.asset_record(A, 3).owner_key == ALICE.digest


def test_transfer_while_locked_is_invalid(ledger):
    _create(ledger)
    ledger.passive_lock(A, G1, 20, 1)
    with pytest.raises(InvalidTransaction):
        ledger.transfer(A, ALICE, BOB.digest, 5)


def test_unregistered_issuer_rejected(ledger):
    stranger = KeyPair.derive("stranger", KeyRole.TRANSACTION_SIGNING)
    with pytest.raises(UnregisteredIssuer):
        ledger.create_asset(A, stranger, ALICE.digest, "p", None, 0)


def test_lock_on_unknown_asset(ledger):
    with pytest.raises(UnknownAsset):
        ledger.passive_lock("nope", G1, 20, 0)


def test_tampered_signature_rejected(ledger):
    tx = LedgerTransaction.build(TxKind.TRANSFER, A, ISSUER, TransferPayload(ALICE.digest, "p"), 0)
    with pytest.raises(InvalidTransaction):
        ledger.append(replace(tx, timestamp=1), 0)


def test_rejected_append_leaves_no_trace(ledger):
    _create(ledger)
    ledger.passive_lock(A, G1, 20, 1)
    before = list(ledger.blocks)
    with pytest.raises(InvalidTransaction):
        ledger.transfer(A, ALICE, BOB.digest, 5)
    assert ledger.blocks == before


# -- passive lock ---------------------------------------------------------------


def test_lock_times_out_back_to_active(ledger):
    _create(ledger)
    lock = ledger.passive_lock(A, G1, 20, 1)
    confirm = ledger.receipt(lock).confirm_tick
    assert ledger.asset_status(A, confirm + 19) is AssetStatus.LOCKED
    assert ledger.is_asset_active(A, confirm + 21)


def test_double_lock_rejected(ledger):
    _create(ledger)
    ledger.passive_lock(A, G1, 20, 1)
    with pytest.raises(AssetNotActive):
        ledger.passive_lock(A, G1, 20, 2)


def test_zero_duration_lock_rejected(ledger):
    _create(ledger)
    with pytest.raises(InvalidTransaction):
        ledger.passive_lock(A, G1, 0, 1)


def test_relock_after_expiry_allowed(ledger):
    _create(ledger)
    ledger.passive_lock(A, G1, 5, 1)  # confirms 3, expires 8
    ledger.passive_lock(A, G1, 5, 6)  # confirms 8
    assert ledger.asset_status(A, 9) is AssetStatus.LOCKED


# -- disablement ---------------------------------------------------------------


def _locked_at_10(ledger):
    _create(ledger)
    return ledger.passive_lock(A, G1, 20, 8)  # confirms at 10, expires at 30


def test_disable_before_expiry_extinguishes(ledger):
    lock = _locked_at_10(ledger)
    ledger.disable(lock, G1, 23, BOB.digest, "B2", G2.digest)  # confirms 25
    assert ledger.asset_status(A, 25) is AssetStatus.EXTINGUISHED
    assert ledger.asset_status(A, 1000) is AssetStatus.EXTINGUISHED
    rec = ledger.history(A)[-1][1].record
    assert (rec.beneficiary_digest, rec.dest_chain_id, rec.remote_gateway_digest) == (BOB.digest, "B2", G2.digest)


def test_disable_after_expiry(ledger):
    lock = _locked_at_10(ledger)
    with pytest.raises(LockExpired):
        ledger.disable(lock, G1, 33)


def test_disable_racing_expiry_loses(ledger):
    lock = _locked_at_10(ledger)
    with pytest.raises(LockExpired):
        ledger.disable(lock, G1, 28)  # confirms exactly at 30


def test_disable_referencing_transfer(ledger):
    created = _create(ledger)
    with pytest.raises(LockNotFound):
        ledger.disable(created, G1, 5)


def test_disable_by_other_issuer(ledger):
    lock = _locked_at_10(ledger)
    with pytest.raises(IssuerMismatch):
        ledger.disable(lock, G2, 12)


# -- escrow --------------------------------------------------------------------


def test_escrow_then_finalize(ledger):
    _create(ledger)
    esc = ledger.escrow(A, ALICE, G1.digest, 30, 0)
    t = ledger.receipt(esc).confirm_tick
    assert ledger.asset_record(A, t).owner_key == G1.digest
    ledger.escrow_finalize(esc, G1, t + 8)
    assert ledger.asset_status(A, t + 10) is AssetStatus.EXTINGUISHED


def test_escrow_reverts_to_originator(ledger):
    _create(ledger)
    esc = ledger.escrow(A, ALICE, G1.digest, 30, 0)
    t = ledger.receipt(esc).confirm_tick
    rec = ledger.asset_record(A, t + 31)
    assert rec.status is AssetStatus.ACTIVE and rec.owner_key == ALICE.digest


def test_escrow_by_non_owner(ledger):
    _create(ledger)
    with pytest.raises(NotOwner):
        ledger.escrow(A, BOB, G1.digest, 30, 0)


def test_escrow_finalize_after_expiry(ledger):
    _create(ledger)
    esc = ledger.escrow(A, ALICE, G1.digest, 10, 0)  # confirms 2, expires 12
    with pytest.raises(EscrowExpired):
        ledger.escrow_finalize(esc, G1, 11)


# -- notification and finalization ---------------------------------------------


def _notify(ledger, tick=0, t_block=20):
    return ledger.notify_incoming(A, G2, "profile/bond-v1", None, BOB.digest, b"\x01" * 32, t_block, tick)


def test_notify_then_finalize_creates_asset():
    ledger = make_ledger("L2", "B2")
    note = _notify(ledger)
    ledger.finalize_incoming(note, G2, b"assertion", 10)
    rec = ledger.asset_record(A, 12)
    assert rec.status is AssetStatus.ACTIVE and rec.owner_key == BOB.digest
    assert ledger.history(A)[-1][1].record.notification_tx_id == note


def test_finalize_after_notification_expired():
    ledger = make_ledger("L2", "B2")
    note = _notify(ledger)  # confirms 2, expires 22
    with pytest.raises(NotificationExpired):
        ledger.finalize_incoming(note, G2, b"x", 25)


def test_finalize_wrong_notification():
    ledger = make_ledger("L2", "B2")
    _notify(ledger)
    with pytest.raises(NotificationNotFound):
        ledger.submit(TxKind.FINALIZATION, A, G2, FinalizationPayload("ff" * 32, b"x"), 4)


def test_location_record_needs_extinguished(ledger):
    _create(ledger)
    with pytest.raises(InvalidTransaction):
        ledger.record_location(A, G1, BOB.digest, b"\x02" * 32, 4)


# -- status query -----------------------------------------------------------------


def test_unknown_asset_is_nonexistent(ledger):
    assert ledger.asset_status("ghost", 100) is AssetStatus.NONEXISTENT


def test_status_before_confirmation(ledger):
    _create(ledger, tick=0)
    assert ledger.asset_status(A, 1) is AssetStatus.NONEXISTENT
    assert ledger.asset_status(A, 2) is AssetStatus.ACTIVE


# -- exhaustive kind x status table -------------------------------------------------

STATUSES = [AssetStatus.NONEXISTENT, AssetStatus.ACTIVE, AssetStatus.LOCKED, AssetStatus.ESCROWED,
            AssetStatus.EXTINGUISHED]

# (kind, status) pairs that must be accepted; everything else must be rejected
PERMITTED = {
    (TxKind.TRANSFER, AssetStatus.NONEXISTENT),
    (TxKind.TRANSFER, AssetStatus.ACTIVE),
    (TxKind.ESCROW, AssetStatus.ACTIVE),
    (TxKind.PASSIVE_LOCK, AssetStatus.ACTIVE),
    (TxKind.DISABLEMENT, AssetStatus.LOCKED),
    (TxKind.DISABLEMENT, AssetStatus.ESCROWED),
    (TxKind.NOTIFICATION, AssetStatus.NONEXISTENT),
    (TxKind.FINALIZATION, AssetStatus.NONEXISTENT),
}


def _in_status(status, kind):
    """Ledger whose asset A has ``status`` at tick 20, plus the last hold tx id and a live notification id."""
    led = make_ledger()
    hold = note = ""
    if status is AssetStatus.NONEXISTENT:
        if kind is TxKind.FINALIZATION:
            note = _notify(led, 0, 100)
        return led, hold, note
    other = "asset-other"
    note = led.notify_incoming(other, G2, "p", None, BOB.digest, b"\0" * 32, 100, 0)
    led.create_asset(A, ISSUER, ALICE.digest, "p", None, 0)
    if status is AssetStatus.LOCKED:
        hold = led.passive_lock(A, G1, 100, 1)
    elif status is AssetStatus.ESCROWED:
        hold = led.escrow(A, ALICE, G1.digest, 100, 1)
    elif status is AssetStatus.EXTINGUISHED:
        hold = led.passive_lock(A, G1, 100, 1)
        led.disable(hold, G1, 2)
    assert led.asset_status(A, 20) is status
    return led, hold, note


def _attempt(led, kind, hold, note, tick=18):
    if kind is TxKind.TRANSFER:
        signer = ISSUER if led.asset_status(A, tick + 2) is AssetStatus.NONEXISTENT else ALICE
        led.submit(kind, A, signer, TransferPayload(BOB.digest, "p"), tick)
    elif kind is TxKind.ESCROW:
        led.escrow(A, ALICE, G1.digest, 30, tick)
    elif kind is TxKind.PASSIVE_LOCK:
        led.passive_lock(A, G1, 30, tick)
    elif kind is TxKind.DISABLEMENT:
        led.submit(kind, A, G1, DisablementPayload(hold or "00" * 32), tick)
    elif kind is TxKind.NOTIFICATION:
        led.submit(kind, A, G2, NotificationPayload(NOTIFY_INCOMING, "p", None, BOB.digest, b"\0" * 32, 30), tick)
    elif kind is TxKind.FINALIZATION:
        led.submit(kind, A, G2, FinalizationPayload(note, b"x"), tick)


@pytest.mark.parametrize("status", STATUSES, ids=lambda s: s.value)
@pytest.mark.parametrize("kind", list(TxKind), ids=lambda k: k.value)
def test_status_machine_table(kind, status):
    led, hold, note = _in_status(status, kind)
    if (kind, status) in PERMITTED:
        _attempt(led, kind, hold, note)
    else:
        with pytest.raises(InvalidTransaction):
            _attempt(led, kind, hold, note)


# -- properties -------------------------------------------------------------------


@settings(max_examples=60, deadline=None)
@given(t_block=st.integers(1, 30), offset=st.integers(0, 40), escrow_attempt=st.booleans())
def test_lock_isolation(t_block, offset, escrow_attempt):
    led = make_ledger(confirm_delay=2)
    led.create_asset(A, ISSUER, ALICE.digest, "p", None, 0)
    lock = led.passive_lock(A, G1, t_block, 1)
    confirm = led.receipt(lock).confirm_tick
    submit = confirm + offset - 2
    inside = confirm <= submit + 2 < confirm + t_block
    act = (lambda: led.escrow(A, ALICE, G2.digest, 5, submit)) if escrow_attempt else \
        (lambda: led.transfer(A, ALICE, BOB.digest, submit))
    if inside:
        with pytest.raises(InvalidTransaction):
            act()
    else:
        act()


_OPS = st.lists(st.tuples(st.sampled_from(["transfer", "lock", "disable", "escrow", "finalize", "wait"]),
                          st.integers(1, 12)), max_size=25)


def _random_history(ops):
    """Apply random operations, ignoring rejections; returns the ledger and the final tick."""
    led = make_ledger()
    led.create_asset(A, ISSUER, ALICE.digest, "p", None, 0)
    owners = {ALICE.digest: ALICE, BOB.digest: BOB}
    tick, last_hold = 0, ""
    for op, n in ops:
        tick += 1
        try:
            record = led.asset_record(A, tick + 2)
            owner = owners.get(record.owner_key) if record else None
            if op == "transfer" and owner:
                led.transfer(A, owner, (BOB if owner is ALICE else ALICE).digest, tick)
            elif op == "lock":
                last_hold = led.passive_lock(A, G1, n, tick)
            elif op == "escrow" and owner:
                last_hold = led.escrow(A, owner, G1.digest, n, tick)
            elif op in ("disable", "finalize") and last_hold:
                led.disable(last_hold, G1, tick)
            elif op == "wait":
                tick += n
        except InvalidTransaction:
            pass
    return led, tick


def _oracle_status(led, tick):
    """Independent fold: walk confirmed transactions and track holds as (kind, expiry)."""
    status, owner, hold = "Nonexistent", None, None
    for block in led.blocks:
        if block.confirm_tick > tick:
            break
        tx = block.transactions[0]
        if hold and block.confirm_tick >= hold[1]:
            if hold[0] == "escrow":
                owner = hold[2]
            status, hold = "Active", None
        rec = tx.record
        if tx.kind is TxKind.TRANSFER:
            status, owner = "Active", rec.new_owner
        elif tx.kind is TxKind.PASSIVE_LOCK:
            status, hold = "Locked", ("lock", block.confirm_tick + rec.t_block, owner)
        elif tx.kind is TxKind.ESCROW:
            status, hold = "Escrowed", ("escrow", block.confirm_tick + rec.t_esc, owner)
            owner = rec.escrow_key
        elif tx.kind is TxKind.DISABLEMENT:
            status, hold = "Extinguished", None
    if hold and tick >= hold[1]:
        if hold[0] == "escrow":
            owner = hold[2]
        status = "Active"
    return status, owner


@settings(max_examples=80, deadline=None)
@given(_OPS)
def test_status_matches_independent_fold(ops):
    led, end = _random_history(ops)
    for t in range(0, end + 20):
        rec = led.asset_record(A, t)
        got = (rec.status.value, rec.owner_key) if rec else ("Nonexistent", None)
        assert got == _oracle_status(led, t), t


@settings(max_examples=50, deadline=None)
@given(_OPS, st.data())
def test_append_only_prefix(ops, data):
    led, end = _random_history(ops)
    u = data.draw(st.integers(0, end + 3))
    v = data.draw(st.integers(u, end + 3))
    early, late = led.confirmed_blocks(u), led.confirmed_blocks(v)
    assert late[: len(early)] == early


@settings(max_examples=30, deadline=None)
@given(_OPS)
def test_header_chain_recomputes(ops):
    led, _ = _random_history(ops)
    assert led.verify_header_chain()
    if led.blocks:
        led.blocks[0] = replace(led.blocks[0], header_hash=b"\0" * 32)
        assert not led.verify_header_chain()


def test_trace_lines_format(ledger):
    _create(ledger)
    (line,) = ledger.trace_lines()
    assert line.startswith("tick=2 ledger=L1 height=1 kind=Transfer asset=asset-A issuer=")
    assert "payload=" in line
