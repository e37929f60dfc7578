import pytest

from blockgate.identity import KeyPair, KeyRole
from blockgate.ledger import Ledger


def tx_key(label: str) -> KeyPair:
    return KeyPair.derive(label, KeyRole.TRANSACTION_SIGNING)


ALICE = tx_key("test:alice")
BOB = tx_key("test:bob")
G1 = tx_key("test:g1")
G2 = tx_key("test:g2")
ISSUER = tx_key("test:issuer")


def make_ledger(ledger_id: str = "L1", chain_id: str = "B1", confirm_delay: int = 2, **kw) -> Ledger:
    ledger = Ledger(ledger_id, chain_id, confirm_delay, **kw)
    for k in (ALICE, BOB, G1, G2, ISSUER):
        ledger.register_key(k.public_key)
    return ledger


@pytest.fixture
def ledger() -> Ledger:
    return make_ledger()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
