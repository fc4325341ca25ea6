"""Serialization of encodings into a compact bitstream.

Layout: a little-endian header, then an MSB-first bit-packed payload that is
zero-padded to a byte boundary only at the very end of the stream. A
variable-rate frame stores its depth as ``n - 1`` in ``ceil(log2(n_stages))``
bits followed by ``n`` code indices of ``code_bits`` each; codes above the
frame depth are never serialized. Constant-rate streams store the fixed
depth once in the header and pack indices only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ._binio import FormatError, take, unpack_at

STREAM_MAGIC = b"VRVQ"
STREAM_VERSION = 1

MODE_CBR = 0
MODE_VBR = 1

_HEADER_FMT = "<4sBBBBHIIIQ"


class BitWriter:
    """Accumulates fixed-width unsigned fields MSB-first."""

    def __init__(self):
        self._acc = 0
        self._nbits = 0
        self._out = bytearray()
        self.bits_written = 0

    def write(self, value: int, width: int) -> None:
        value = int(value)
        if width < 0:
            raise ValueError("width must be non-negative")
        if value < 0 or value >> width:
            raise ValueError(f"value {value} does not fit in {width} bits")
        self._acc = (self._acc << width) | value
        self._nbits += width
        self.bits_written += width
        while self._nbits >= 8:
            self._nbits -= 8
            self._out.append((self._acc >> self._nbits) & 0xFF)
            self._acc &= (1 << self._nbits) - 1

    def finish(self) -> bytes:
        """Zero-pad the final partial byte and return the buffer."""
        if self._nbits:
            self._out.append((self._acc << (8 - self._nbits)) & 0xFF)
            self._acc = 0
            self._nbits = 0
        return bytes(self._out)


class BitReader:
    """Reads fixed-width unsigned fields MSB-first."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0  # in bits

    @property
    def bits_read(self) -> int:
        return self._pos

    @property
    def bits_left(self) -> int:
        return 8 * len(self._data) - self._pos

    def read(self, width: int) -> int:
        if width > self.bits_left:
            raise FormatError("truncated payload")
        value = 0
        remaining = width
        while remaining:
            byte = self._data[self._pos >> 3]
            used = self._pos & 7
            avail = 8 - used
            chunk = min(avail, remaining)
            shift = avail - chunk
            value = (value << chunk) | ((byte >> shift) & ((1 << chunk) - 1))
            self._pos += chunk
            remaining -= chunk
        return value


@dataclass(frozen=True)
class StreamHeader:
    """Fixed metadata prefix of every stream."""

    mode: int
    n_stages: int
    code_bits: int
    dim: int
    frames: int
    frame_rate_num: int
    frame_rate_den: int
    model_fingerprint: int
    fixed_depth: int | None = None

    def __post_init__(self):
        if self.mode not in (MODE_CBR, MODE_VBR):
            raise ValueError(f"unknown mode {self.mode}")
        if not 1 <= self.n_stages <= 255:
            raise ValueError("n_stages must lie in [1, 255]")
        if not 1 <= self.code_bits <= 16:
            raise ValueError("code_bits must lie in [1, 16]")
        if self.frames < 1 or self.dim < 1:
            raise ValueError("dim and frames must be positive")
        if self.frame_rate_num < 1 or self.frame_rate_den < 1:
            raise ValueError("frame rate must be positive")
        if self.mode == MODE_CBR:
            if self.fixed_depth is None or not 1 <= self.fixed_depth <= self.n_stages:
                raise ValueError("constant-rate streams need fixed_depth in [1, n_stages]")
        elif self.fixed_depth is not None:
            raise ValueError("variable-rate streams must not carry fixed_depth")

    @property
    def depth_bits(self) -> int:
        return max(0, (self.n_stages - 1).bit_length())

    @property
    def frame_rate(self) -> Fraction:
        return Fraction(self.frame_rate_num, self.frame_rate_den)

    def to_bytes(self) -> bytes:
        head = struct.pack(
            _HEADER_FMT,
            STREAM_MAGIC,
            STREAM_VERSION,
            self.mode,
            self.n_stages,
            self.code_bits,
            self.dim,
            self.frames,
            self.frame_rate_num,
            self.frame_rate_den,
            self.model_fingerprint,
        )
        if self.mode == MODE_CBR:
            head += struct.pack("<B", self.fixed_depth)
        return head


@dataclass
class EncodedStream:
    """Header plus the padded payload; ``payload_bits`` excludes the padding."""

    header: StreamHeader
    payload: bytes
    payload_bits: int

    def to_bytes(self) -> bytes:
        return self.header.to_bytes() + self.payload


def pack(encoding) -> EncodedStream:
    """Serialize a VBR or CBR encoding (any object with the encoding fields)."""
    codes = np.asarray(encoding.codes)
    depths = np.asarray(encoding.depths)
    mode = MODE_VBR if encoding.mode == "vbr" else MODE_CBR
    header = StreamHeader(
        mode=mode,
        n_stages=encoding.n_stages,
        code_bits=encoding.code_bits,
        dim=encoding.dim,
        frames=codes.shape[1],
        frame_rate_num=encoding.frame_rate_num,
        frame_rate_den=encoding.frame_rate_den,
        model_fingerprint=encoding.model_fingerprint,
        fixed_depth=encoding.fixed_depth if mode == MODE_CBR else None,
    )
    if np.any(depths < 1) or np.any(depths > header.n_stages):
        raise ValueError("frame depths must lie in [1, n_stages]")
    if mode == MODE_CBR and np.any(depths != header.fixed_depth):
        raise ValueError("constant-rate encoding has non-constant depths")

    writer = BitWriter()
    limit = 1 << header.code_bits
    for t in range(header.frames):
        depth = int(depths[t])
        if mode == MODE_VBR:
            writer.write(depth - 1, header.depth_bits)
        frame_codes = codes[:depth, t]
        if np.any(frame_codes < 0) or np.any(frame_codes >= limit):
            raise ValueError(f"frame {t}: code index out of range for {header.code_bits} bits")
        for c in frame_codes:
            writer.write(int(c), header.code_bits)
    bits = writer.bits_written
    return EncodedStream(header=header, payload=writer.finish(), payload_bits=bits)


def parse_header(blob: bytes) -> tuple[StreamHeader, int]:
    """Header and the offset where the payload starts."""
    (magic, version, mode, n_stages, code_bits, dim, frames, num, den, fp), offset = unpack_at(
        _HEADER_FMT, blob, 0, "stream header"
    )
    if magic != STREAM_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {STREAM_MAGIC!r}")
    if version != STREAM_VERSION:
        raise FormatError(f"unsupported stream version {version}")
    fixed_depth = None
    if mode == MODE_CBR:
        (fixed_depth,), offset = unpack_at("<B", blob, offset, "fixed depth")
    header = StreamHeader(
        mode=mode,
        n_stages=n_stages,
        code_bits=code_bits,
        dim=dim,
        frames=frames,
        frame_rate_num=num,
        frame_rate_den=den,
        model_fingerprint=fp,
        fixed_depth=fixed_depth,
    )
    return header, offset


def unpack(blob: bytes) -> tuple[StreamHeader, np.ndarray, np.ndarray]:
    """Parse a stream into (header, codes, depths).

    Code entries above a frame's depth were never serialized and come back
    as -1. Structural problems (bad magic, truncation, out-of-range depth
    fields, stray payload bytes) raise FormatError.
    """
    header, offset = parse_header(blob)
    reader = BitReader(blob[offset:])
    codes = np.full((header.n_stages, header.frames), -1, dtype=np.int64)
    depths = np.empty(header.frames, dtype=np.int64)
    for t in range(header.frames):
        if header.mode == MODE_VBR:
            raw = reader.read(header.depth_bits)
            if raw >= header.n_stages:
                raise FormatError(f"corrupt stream: frame {t} depth field {raw + 1} exceeds n_stages")
            depth = raw + 1
        else:
            depth = header.fixed_depth
        depths[t] = depth
        for k in range(depth):
            codes[k, t] = reader.read(header.code_bits)
    if reader.bits_left >= 8:
        raise FormatError("payload length mismatch: unread bytes after final frame")
    return header, codes, depths


def measure_bitrate(stream) -> tuple[float, float]:
    """(total_kbps, side_info_kbps) from exact rational frame rates.

    ``stream`` is an EncodedStream or raw bytes. Total counts the payload
    bits before padding; side information is the per-frame depth field of
    variable-rate streams.
    """
    if isinstance(stream, (bytes, bytearray)):
        header, codes, depths = unpack(bytes(stream))
        if header.mode == MODE_VBR:
            payload_bits = int(np.sum(header.depth_bits + header.code_bits * depths))
        else:
            payload_bits = header.frames * header.code_bits * header.fixed_depth
    else:
        header = stream.header
        payload_bits = stream.payload_bits
    rate = header.frame_rate_num / header.frame_rate_den
    seconds = header.frames / rate
    total_kbps = payload_bits / seconds / 1000.0
    side_kbps = (header.depth_bits * rate / 1000.0) if header.mode == MODE_VBR else 0.0
    return total_kbps, side_kbps
