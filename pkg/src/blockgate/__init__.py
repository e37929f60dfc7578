"""Deterministic cross-ledger asset transfer between gateway pairs."""

__version__ = "0.1.0"
