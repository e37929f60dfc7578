"""Canonical byte encoding shared by every hashed or signed record.

Each field of a record is written in declaration order as a 4-byte
big-endian length prefix followed by the field bytes.  Integers are 8-byte
big-endian (signed), strings are UTF-8, enums encode their value, nested
records encode recursively.  An absent ``Optional`` is empty and a present
one is prefixed with ``0x01``.  Sequences are a concatenation of
length-prefixed items and string maps are encoded as a sequence of sorted
``(key, value)`` pairs.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import struct
import types
import typing
from functools import lru_cache
from typing import Any, Callable, TypeVar, Union

T = TypeVar("T")

_LEN = struct.Struct(">I")
_INT = struct.Struct(">q")


class DecodeError(ValueError):
    """Raised when bytes do not parse as the requested record type."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def digest_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def frame(chunk: bytes) -> bytes:
    return _LEN.pack(len(chunk)) + chunk


def encode_fields(*chunks: bytes) -> bytes:
    """Length-prefix and concatenate already-encoded field bytes."""
    return b"".join(frame(c) for c in chunks)


def encode_int(value: int) -> bytes:
    return _INT.pack(value)


@lru_cache(maxsize=None)
def _hints(cls: type) -> tuple[tuple[str, Any], ...]:
    resolved = typing.get_type_hints(cls)
    return tuple((f.name, resolved[f.name]) for f in dataclasses.fields(cls))


def _optional_inner(tp: Any) -> Any | None:
    origin = typing.get_origin(tp)
    if origin is Union or origin is types.UnionType:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1 and len(typing.get_args(tp)) == 2:
            return args[0]
    return None


def _pack_len(chunk: bytes) -> bytes:
    return _LEN.pack(len(chunk)) + chunk


@lru_cache(maxsize=None)
def _encoder(tp: Any) -> Callable[[Any], bytes]:
    """Build (once per type) the function that encodes values of ``tp``."""
    inner = _optional_inner(tp)
    if inner is not None:
        enc = _encoder(inner)
        return lambda v: b"" if v is None else b"\x01" + enc(v)
    origin = typing.get_origin(tp)
    if origin in (tuple, list):
        item = _encoder(typing.get_args(tp)[0])
        return lambda v: b"".join(_pack_len(item(x)) for x in v)
    if origin is dict:
        val = _encoder(typing.get_args(tp)[1])
        return lambda v: b"".join(_pack_len(_pack_len(k.encode()) + _pack_len(val(v[k]))) for k in sorted(v))
    if tp is bool:
        return lambda v: b"\x01" if v else b"\x00"
    if tp is int:
        return _INT.pack
    if tp is str:
        return lambda v: v.encode("utf-8")
    if tp is bytes:
        return bytes
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        val = _encoder(type(next(iter(tp)).value))
        return lambda v: val(v.value)
    if dataclasses.is_dataclass(tp):
        return encode
    raise TypeError(f"no canonical encoding for {tp!r}")


@lru_cache(maxsize=None)
def _record_plan(cls: type) -> tuple[tuple[str, Callable[[Any], bytes]], ...]:
    return tuple((name, _encoder(tp)) for name, tp in _hints(cls))


def _encode_value(value: Any, tp: Any) -> bytes:
    return _encoder(tp)(value)


def encode(record: Any, exclude: tuple[str, ...] = ()) -> bytes:
    """Encode a dataclass instance; ``exclude`` drops named fields (e.g. signatures)."""
    out = []
    for name, enc in _record_plan(type(record)):
        if name in exclude:
            continue
        chunk = enc(getattr(record, name))
        out.append(_LEN.pack(len(chunk)))
        out.append(chunk)
    return b"".join(out)


def split_frames(data: bytes) -> list[bytes]:
    chunks = []
    pos = 0
    n = len(data)
    while pos < n:
        if pos + 4 > n:
            raise DecodeError("truncated length prefix")
        (size,) = _LEN.unpack_from(data, pos)
        pos += 4
        if pos + size > n:
            raise DecodeError("truncated field")
        chunks.append(data[pos : pos + size])
        pos += size
    return chunks


def _decode_optional(inner: Callable[[bytes], Any]) -> Callable[[bytes], Any]:
    def dec(data: bytes) -> Any:
        if data == b"":
            return None
        if data[:1] != b"\x01":
            raise DecodeError("bad optional flag")
        return inner(data[1:])
    return dec


def _decode_bool(data: bytes) -> bool:
    if data not in (b"\x00", b"\x01"):
        raise DecodeError("bad bool")
    return data == b"\x01"


def _decode_int(data: bytes) -> int:
    if len(data) != 8:
        raise DecodeError("bad int width")
    return _INT.unpack(data)[0]


def _decode_str(data: bytes) -> str:
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(str(exc)) from exc


@lru_cache(maxsize=None)
def _decoder(tp: Any) -> Callable[[bytes], Any]:
    inner = _optional_inner(tp)
    if inner is not None:
        return _decode_optional(_decoder(inner))
    origin = typing.get_origin(tp)
    if origin in (tuple, list):
        item = _decoder(typing.get_args(tp)[0])
        wrap = tuple if origin is tuple else list
        return lambda data: wrap(item(c) for c in split_frames(data))
    if origin is dict:
        val = _decoder(typing.get_args(tp)[1])

        def dec_map(data: bytes) -> dict:
            result = {}
            for pair in split_frames(data):
                parts = split_frames(pair)
                if len(parts) != 2:
                    raise DecodeError("bad map entry")
                result[parts[0].decode()] = val(parts[1])
            return result
        return dec_map
    if tp is bool:
        return _decode_bool
    if tp is int:
        return _decode_int
    if tp is str:
        return _decode_str
    if tp is bytes:
        return bytes
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        raw = _decoder(type(next(iter(tp)).value))

        def dec_enum(data: bytes):
            try:
                return tp(raw(data))
            except ValueError as exc:
                raise DecodeError(str(exc)) from exc
        return dec_enum
    if dataclasses.is_dataclass(tp):
        return lambda data: decode(tp, data)
    raise TypeError(f"no canonical decoding for {tp!r}")


def _decode_value(data: bytes, tp: Any) -> Any:
    return _decoder(tp)(data)


@lru_cache(maxsize=None)
def _decode_plan(cls: type) -> tuple[tuple[str, Callable[[bytes], Any]], ...]:
    return tuple((name, _decoder(tp)) for name, tp in _hints(cls))


def decode(cls: type[T], data: bytes) -> T:
    plan = _decode_plan(cls)
    chunks = split_frames(data)
    if len(chunks) != len(plan):
        raise DecodeError(f"{cls.__name__}: expected {len(plan)} fields, got {len(chunks)}")
    return cls(**{name: dec(chunk) for (name, dec), chunk in zip(plan, chunks)})
