"""Wire frames exchanged between data-centre nodes and the cloud trunk.

20-byte little-endian header followed by ``rows * cols`` float32 values::

    magic u32 (0x4D465343) | version u8 | kind u8 | branch u8 | flags u8 |
    round u32 | rows u32 | cols u32
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

MAGIC = 0x4D465343
VERSION = 1
HEADER = struct.Struct("<IBBBBIII")
HEADER_LEN = HEADER.size

# flags bit 0: inference-only round (no gradient phase follows)
FLAG_EVAL = 0x01


class MsgKind(IntEnum):
    FEATURES_UP = 0x01
    TRUNK_OUT_DOWN = 0x02
    OUTGRAD_UP = 0x03
    INGRAD_DOWN = 0x04
    HELLO = 0x05
    ROUND_BEGIN = 0x06
    SHUTDOWN = 0x07

    @property
    def is_data(self) -> bool:
        return self <= MsgKind.INGRAD_DOWN


UPSTREAM = frozenset({MsgKind.FEATURES_UP, MsgKind.OUTGRAD_UP, MsgKind.HELLO})


class FrameError(ValueError):
    pass


class TruncatedFrame(FrameError):
    pass


class BadMagic(FrameError):
    pass


class UnsupportedVersion(FrameError):
    pass


class UnknownKind(FrameError):
    pass


class PayloadLengthMismatch(FrameError):
    pass


@dataclass
class Frame:
    kind: MsgKind
    branch_id: int
    round_id: int
    payload: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.float32))
    flags: int = 0
    version: int = VERSION

    def __post_init__(self):
        self.kind = MsgKind(self.kind)
        self.payload = np.asarray(self.payload, dtype=np.float32)
        if self.payload.ndim != 2:
            raise FrameError(f"payload must be 2-D, got shape {self.payload.shape}")
        if not self.kind.is_data and self.payload.size:
            raise FrameError(f"control frame {self.kind.name} must carry no payload")

    @property
    def rows(self) -> int:
        return int(self.payload.shape[0])

    @property
    def cols(self) -> int:
        return int(self.payload.shape[1])

    @property
    def byte_len(self) -> int:
        return HEADER_LEN + 4 * self.rows * self.cols

    def __eq__(self, other) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.kind, self.branch_id, self.round_id, self.flags, self.version) == \
            (other.kind, other.branch_id, other.round_id, other.flags, other.version) and \
            self.payload.shape == other.payload.shape and self.payload.tobytes() == other.payload.tobytes()


def control(kind: MsgKind, branch_id: int, round_id: int = 0, flags: int = 0) -> Frame:
    return Frame(kind, branch_id, round_id, np.zeros((0, 0), dtype=np.float32), flags)


def encode_frame(f: Frame) -> bytes:
    if not 0 <= f.branch_id <= 0xFF or not 0 <= f.flags <= 0xFF:
        raise FrameError(f"branch_id/flags must fit in a byte: {f.branch_id}, {f.flags}")
    if not 0 <= f.round_id <= 0xFFFFFFFF:
        raise FrameError(f"round_id out of range: {f.round_id}")
    head = HEADER.pack(MAGIC, f.version, int(f.kind), f.branch_id, f.flags, f.round_id, f.rows, f.cols)
    return head + np.ascontiguousarray(f.payload, dtype="<f4").tobytes()


@dataclass(frozen=True)
class Header:
    version: int
    kind: MsgKind
    branch_id: int
    flags: int
    round_id: int
    rows: int
    cols: int

    @property
    def payload_len(self) -> int:
        return 4 * self.rows * self.cols


def decode_header(buf: bytes) -> Header:
    if len(buf) < HEADER_LEN:
        raise TruncatedFrame(f"frame header needs {HEADER_LEN} bytes, got {len(buf)}")
    magic, version, kind, branch, flags, round_id, rows, cols = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad frame magic 0x{magic:08X}")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported frame version {version}")
    try:
        kind = MsgKind(kind)
    except ValueError:
        raise UnknownKind(f"unknown message kind 0x{kind:02X}") from None
    if not kind.is_data and (rows or cols):
        raise PayloadLengthMismatch(f"control frame {kind.name} declares a {rows}x{cols} payload")
    return Header(version, kind, branch, flags, round_id, rows, cols)


def decode_frame(buf: bytes) -> Frame:
    h = decode_header(buf)
    body = len(buf) - HEADER_LEN
    if body < h.payload_len:
        raise TruncatedFrame(f"payload truncated: header declares {h.payload_len} bytes, got {body}")
    if body > h.payload_len:
        raise PayloadLengthMismatch(f"{body - h.payload_len} bytes beyond the declared {h.payload_len}-byte payload")
    payload = np.frombuffer(buf, dtype="<f4", offset=HEADER_LEN).astype(np.float32).reshape(h.rows, h.cols)
    return Frame(h.kind, h.branch_id, h.round_id, payload, h.flags, h.version)
