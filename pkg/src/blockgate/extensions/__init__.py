"""Optional constructs layered on the base transfer protocol."""

from blockgate.extensions.bridge import AuthorizationToken, BridgeNode, InvalidToken, RedactedEvidence
from blockgate.extensions.htlc import ContractState, HashLockContract, HashLockLedger, HtlcError
from blockgate.extensions.witness import DataTooLarge, WitnessChain, WitnessEntry

__all__ = [
    "AuthorizationToken", "BridgeNode", "InvalidToken", "RedactedEvidence",
    "ContractState", "HashLockContract", "HashLockLedger", "HtlcError",
    "DataTooLarge", "WitnessChain", "WitnessEntry",
]
