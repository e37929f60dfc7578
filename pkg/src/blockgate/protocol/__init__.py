"""Gateway protocol: wire messages, forensic log and session state machine."""

from blockgate.protocol.gateway import Gateway, GatewayPolicy, Phase, Role, SessionState
from blockgate.protocol.log import CorruptLog, Direction, ForensicLog, LogEntry, parse_log
from blockgate.protocol.messages import NegotiatedParams, ProtocolMessage, Step

__all__ = [
    "Gateway", "GatewayPolicy", "Phase", "Role", "SessionState",
    "CorruptLog", "Direction", "ForensicLog", "LogEntry", "parse_log",
    "NegotiatedParams", "ProtocolMessage", "Step",
]
