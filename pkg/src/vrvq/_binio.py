"""Shared helpers for the binary file formats: hashing, bounded reads."""

from __future__ import annotations

import struct

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64_MASK = 0xFFFFFFFFFFFFFFFF


class FormatError(ValueError):
    """A binary blob failed a structural check (magic, length, field range)."""


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash, used to fingerprint serialized artifacts."""
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _U64_MASK
    return h


def take(data: bytes, offset: int, count: int, what: str) -> tuple[bytes, int]:
    """Return ``count`` bytes at ``offset`` or raise FormatError naming the field."""
    if offset + count > len(data):
        raise FormatError(f"truncated input while reading {what}")
    return data[offset : offset + count], offset + count


def unpack_at(fmt: str, data: bytes, offset: int, what: str):
    """struct.unpack_from with a truncation check; returns (values, new_offset)."""
    size = struct.calcsize(fmt)
    raw, offset = take(data, offset, size, what)
    return struct.unpack(fmt, raw), offset
