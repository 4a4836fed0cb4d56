"""Binary wire protocol between edge agents and the cloud coordinator.

A frame is ``b"ESY1"`` + payload length (u32 LE) + payload. The payload
starts with a one-byte variant tag; fields follow in declaration order.
Integers are little-endian unsigned, reals are float64 LE, strings are a
u16 byte length plus UTF-8, vectors are a u32 count plus float64 entries.
The encoding is canonical: equal messages produce equal bytes. See
``docs/protocol.md`` for byte-level examples.
"""

from __future__ import annotations

import asyncio
import math
import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from .core import EdgeSyncError, InvariantError

MAGIC = b"ESY1"
HEADER = struct.Struct("<4sI")
MAX_PAYLOAD = 64 * 1024 * 1024

TAG_SAMPLE_BATCH = 1
TAG_MODEL_UPDATE = 2
TAG_UPDATE_ACK = 3
TAG_REGISTER = 4
TAG_REQUEST_BATCH = 5
TAG_REGISTER_REPLY = 6


class ProtocolError(EdgeSyncError):
    """Base class for every decode/encode failure."""


class BadMagicError(ProtocolError):
    pass


class TruncatedError(ProtocolError):
    pass


class UnknownVariantError(ProtocolError):
    pass


class TrailingBytesError(ProtocolError):
    pass


class MalformedPayloadError(ProtocolError):
    """Payload parsed but violates a message invariant (bad UTF-8, empty batch, ...)."""


class OversizePayloadError(ProtocolError):
    pass


def _check_vector(values, what: str) -> tuple[float, ...]:
    out = tuple(float(v) for v in values)
    if not all(math.isfinite(v) for v in out):
        raise InvariantError(f"{what} must be finite")
    return out


@dataclass(frozen=True)
class WireSample:
    seq: int
    timestamp: float
    features: tuple[float, ...]
    probs: tuple[float, ...]
    predicted: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", _check_vector(self.features, "features"))
        object.__setattr__(self, "probs", _check_vector(self.probs, "probs"))
        if not self.probs:
            raise InvariantError("probs must be non-empty")
        if not 0 <= self.predicted < len(self.probs):
            raise InvariantError("predicted out of range")
        if not math.isfinite(self.timestamp):
            raise InvariantError("timestamp must be finite")


@dataclass(frozen=True)
class SampleBatch:
    edge_id: str
    window_id: int
    samples: tuple[WireSample, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise InvariantError("SampleBatch must carry at least one sample")


@dataclass(frozen=True)
class ModelUpdate:
    edge_id: str
    version: int
    trainable_values: tuple[float, ...]

    def __post_init__(self) -> None:
        vals = self.trainable_values
        if isinstance(vals, np.ndarray):
            vals = vals.ravel().tolist()
        object.__setattr__(self, "trainable_values", _check_vector(vals, "trainable_values"))

    def as_array(self) -> np.ndarray:
        return np.array(self.trainable_values, dtype=np.float64)


@dataclass(frozen=True)
class UpdateAck:
    edge_id: str
    version: int


@dataclass(frozen=True)
class Register:
    edge_id: str
    feature_dim: int
    class_count: int
    frozen_checksum: bytes

    def __post_init__(self) -> None:
        if len(self.frozen_checksum) != 32:
            raise InvariantError("frozen_checksum must be 32 bytes")


@dataclass(frozen=True)
class RequestBatch:
    """Coordinator asks an edge to close its window now."""

    edge_id: str
    cycle: int


@dataclass(frozen=True)
class RegisterReply:
    edge_id: str
    accepted: bool
    version: int
    reason: str = ""


Message = Union[SampleBatch, ModelUpdate, UpdateAck, Register, RequestBatch, RegisterReply]


# ---------------------------------------------------------------------------
# encoding


class _Writer:
    def __init__(self) -> None:
        self.parts: list[bytes] = []

    def u8(self, v: int) -> None:
        self.parts.append(struct.pack("<B", v))

    def u16(self, v: int) -> None:
        self.parts.append(struct.pack("<H", v))

    def u32(self, v: int) -> None:
        self.parts.append(struct.pack("<I", v))

    def u64(self, v: int) -> None:
        self.parts.append(struct.pack("<Q", v))

    def f64(self, v: float) -> None:
        self.parts.append(struct.pack("<d", v))

    def string(self, s: str) -> None:
        b = s.encode("utf-8")
        if len(b) > 0xFFFF:
            raise InvariantError("string field longer than 65535 bytes")
        self.u16(len(b))
        self.parts.append(b)

    def vector(self, vals) -> None:
        self.u32(len(vals))
        self.parts.append(np.asarray(vals, dtype="<f8").tobytes())

    def raw(self, b: bytes) -> None:
        self.parts.append(b)


def encode_payload(msg: Message) -> bytes:
    w = _Writer()
    if isinstance(msg, SampleBatch):
        w.u8(TAG_SAMPLE_BATCH)
        w.string(msg.edge_id)
        w.u64(msg.window_id)
        w.u32(len(msg.samples))
        for s in msg.samples:
            w.u64(s.seq)
            w.f64(s.timestamp)
            w.vector(s.features)
            w.vector(s.probs)
            w.u32(s.predicted)
    elif isinstance(msg, ModelUpdate):
        w.u8(TAG_MODEL_UPDATE)
        w.string(msg.edge_id)
        w.u64(msg.version)
        w.vector(msg.trainable_values)
    elif isinstance(msg, UpdateAck):
        w.u8(TAG_UPDATE_ACK)
        w.string(msg.edge_id)
        w.u64(msg.version)
    elif isinstance(msg, Register):
        w.u8(TAG_REGISTER)
        w.string(msg.edge_id)
        w.u32(msg.feature_dim)
        w.u32(msg.class_count)
        w.raw(msg.frozen_checksum)
    elif isinstance(msg, RequestBatch):
        w.u8(TAG_REQUEST_BATCH)
        w.string(msg.edge_id)
        w.u64(msg.cycle)
    elif isinstance(msg, RegisterReply):
        w.u8(TAG_REGISTER_REPLY)
        w.string(msg.edge_id)
        w.u8(1 if msg.accepted else 0)
        w.u64(msg.version)
        w.string(msg.reason)
    else:
        raise TypeError(f"not a protocol message: {type(msg).__name__}")
    return b"".join(w.parts)


def encode(msg: Message) -> bytes:
    """Frame ``msg``: magic, payload length, payload."""
    try:
        payload = encode_payload(msg)
    except struct.error as exc:
        raise InvariantError(f"field out of range: {exc}") from exc
    if len(payload) > MAX_PAYLOAD:
        raise OversizePayloadError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(MAGIC, len(payload)) + payload


# ---------------------------------------------------------------------------
# decoding


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, "
                                 f"have {len(self.buf) - self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))[0]

    def u8(self) -> int:
        return self.unpack("<B")

    def u16(self) -> int:
        return self.unpack("<H")

    def u32(self) -> int:
        return self.unpack("<I")

    def u64(self) -> int:
        return self.unpack("<Q")

    def f64(self) -> float:
        return self.unpack("<d")

    def string(self) -> str:
        n = self.u16()
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayloadError("string field is not valid UTF-8") from exc

    def vector(self) -> tuple[float, ...]:
        n = self.u32()
        raw = self.take(8 * n)
        return tuple(np.frombuffer(raw, dtype="<f8").tolist())


def decode_payload(payload: bytes) -> Message:
    r = _Reader(payload)
    tag = r.u8()
    try:
        if tag == TAG_SAMPLE_BATCH:
            edge_id = r.string()
            window_id = r.u64()
            n = r.u32()
            samples = []
            for _ in range(n):
                seq, ts = r.u64(), r.f64()
                feats, probs = r.vector(), r.vector()
                samples.append(WireSample(seq, ts, feats, probs, r.u32()))
            msg: Message = SampleBatch(edge_id, window_id, tuple(samples))
        elif tag == TAG_MODEL_UPDATE:
            msg = ModelUpdate(r.string(), r.u64(), r.vector())
        elif tag == TAG_UPDATE_ACK:
            msg = UpdateAck(r.string(), r.u64())
        elif tag == TAG_REGISTER:
            msg = Register(r.string(), r.u32(), r.u32(), bytes(r.take(32)))
        elif tag == TAG_REQUEST_BATCH:
            msg = RequestBatch(r.string(), r.u64())
        elif tag == TAG_REGISTER_REPLY:
            edge_id = r.string()
            flag = r.u8()
            if flag > 1:
                raise MalformedPayloadError("accepted flag must be 0 or 1")
            msg = RegisterReply(edge_id, bool(flag), r.u64(), r.string())
        else:
            raise UnknownVariantError(f"unknown variant tag {tag}")
    except InvariantError as exc:
        raise MalformedPayloadError(str(exc)) from exc
    if r.pos != len(payload):
        raise TrailingBytesError(f"{len(payload) - r.pos} unread payload bytes")
    return msg


def decode(data: bytes) -> Message:
    """Inverse of :func:`encode` for exactly one frame."""
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedError("frame shorter than the magic")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < HEADER.size:
        raise TruncatedError("frame shorter than its header")
    _, length = HEADER.unpack_from(data)
    if length > MAX_PAYLOAD:
        raise OversizePayloadError(f"declared payload of {length} bytes exceeds limit")
    end = HEADER.size + length
    if len(data) < end:
        raise TruncatedError(f"payload declares {length} bytes, {len(data) - HEADER.size} present")
    if len(data) > end:
        raise TrailingBytesError(f"{len(data) - end} bytes after the frame")
    return decode_payload(data[HEADER.size:end])


def frame_size(msg: Message) -> int:
    return len(encode(msg))


# ---------------------------------------------------------------------------
# stream helpers


async def read_message(reader: asyncio.StreamReader) -> Message | None:
    """Read one frame; ``None`` on clean EOF before a header."""
    try:
        header = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise TruncatedError("stream ended inside a frame header") from exc
    magic, length = HEADER.unpack(header)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise OversizePayloadError(f"declared payload of {length} bytes exceeds limit")
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError as exc:
        raise TruncatedError("stream ended inside a payload") from exc
    return decode_payload(payload)


async def write_message(writer: asyncio.StreamWriter, msg: Message) -> None:
    writer.write(encode(msg))
    await writer.drain()
