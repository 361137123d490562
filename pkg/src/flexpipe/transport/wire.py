"""Byte layout shared by the datagram and reliable transports.

Every frame, little-endian::

    magic        4 bytes  b"FXP1"
    msg_seq      u64
    frag_index   u16
    frag_count   u16
    type_tag_len u16
    type_tag     type_tag_len bytes, UTF-8
    ts_origin    u64      nanoseconds since the Unix epoch
    fragment     rest of the frame

The fragments of one message concatenate to its *body*::

    hop_count    u16
    hop_count x (label_len u16, label UTF-8, ts u64)
    attrs_len    u32
    attrs        attrs_len bytes, compact JSON object (absent when 0)
    payload      rest of the body

A reliable stream carries each message as one frame (index 0, count 1)
behind a u32 length prefix.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

from ..errors import DecodeError
from ..message import MAX_PAYLOAD, Message

MAGIC = b"FXP1"
HEADER = struct.Struct("<4sQHHH")
TS = struct.Struct("<Q")
HOP_COUNT = struct.Struct("<H")
HOP_HEAD = struct.Struct("<H")
ATTRS_LEN = struct.Struct("<I")
LENGTH_PREFIX = struct.Struct("<I")

MAX_FRAGMENTS = 0xFFFF
# Body overhead allowed on top of the 64 MiB payload cap on a reliable stream.
MAX_FRAME = MAX_PAYLOAD + (1 << 20)


@dataclass(frozen=True)
class WireFrame:
    msg_seq: int
    frag_index: int
    frag_count: int
    type_tag: str
    ts_origin: int
    fragment: bytes | memoryview

    def header_bytes(self) -> bytes:
        return frame_header(self.msg_seq, self.frag_index, self.frag_count,
                            self.type_tag.encode("utf-8"), self.ts_origin)


def frame_header(seq: int, index: int, count: int, tag: bytes, ts_origin: int) -> bytes:
    return HEADER.pack(MAGIC, seq, index, count, len(tag)) + tag + TS.pack(ts_origin)


def encode_envelope(msg: Message) -> bytes:
    parts = [HOP_COUNT.pack(len(msg.hops))]
    for label, ts in msg.hops:
        raw = label.encode("utf-8")
        parts.append(HOP_HEAD.pack(len(raw)))
        parts.append(raw)
        parts.append(TS.pack(ts))
    attrs = json.dumps(msg.attrs, separators=(",", ":"), sort_keys=True).encode() if msg.attrs else b""
    parts.append(ATTRS_LEN.pack(len(attrs)))
    parts.append(attrs)
    return b"".join(parts)


def _check_encodable(msg: Message) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(msg.payload)} bytes exceeds 64 MiB")
    tag = msg.type_tag.encode("utf-8")
    if len(tag) > 0xFFFF:
        raise ValueError("type_tag longer than 65535 bytes")
    if not 0 <= msg.seq < 1 << 64 or not 0 <= msg.ts_origin < 1 << 64:
        raise ValueError("seq and ts_origin must fit in u64")
    return tag


def encode_parts(msg: Message) -> list[bytes | memoryview]:
    """Single-frame encoding as a list of buffers (payload not copied)."""
    tag = _check_encodable(msg)
    head = frame_header(msg.seq, 0, 1, tag, msg.ts_origin)
    return [head, encode_envelope(msg), memoryview(msg.payload)]


def serialize(msg: Message) -> bytes:
    return b"".join(encode_parts(msg))


def fragment_count(body_len: int, mtu_payload: int) -> int:
    return max(1, math.ceil(body_len / mtu_payload))


def fragment(msg: Message, mtu_payload: int) -> list[tuple[bytes, memoryview]]:
    """Split ``msg`` into ``(header, fragment)`` pairs of at most ``mtu_payload`` body bytes."""
    tag = _check_encodable(msg)
    body = memoryview(encode_envelope(msg) + bytes(msg.payload))
    count = fragment_count(len(body), mtu_payload)
    if count > MAX_FRAGMENTS:
        raise ValueError(f"message needs {count} fragments, more than {MAX_FRAGMENTS}")
    frames = []
    for index in range(count):
        chunk = body[index * mtu_payload:(index + 1) * mtu_payload]
        frames.append((frame_header(msg.seq, index, count, tag, msg.ts_origin), chunk))
    return frames


def parse_frame(data: bytes | bytearray | memoryview) -> WireFrame:
    view = memoryview(data)
    if len(view) < HEADER.size:
        raise DecodeError("truncated frame header", len(view))
    magic, seq, index, count, tag_len = HEADER.unpack_from(view, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {bytes(magic)!r}", 0)
    if count == 0 or index >= count:
        raise DecodeError(f"fragment index {index} not below count {count}", 12)
    offset = HEADER.size
    if len(view) < offset + tag_len + TS.size:
        raise DecodeError("truncated type tag or timestamp", len(view))
    try:
        tag = bytes(view[offset:offset + tag_len]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError(f"type tag is not UTF-8: {exc.reason}", offset + exc.start) from None
    offset += tag_len
    (ts_origin,) = TS.unpack_from(view, offset)
    offset += TS.size
    return WireFrame(seq, index, count, tag, ts_origin, view[offset:])


def decode_body(type_tag: str, seq: int, ts_origin: int, body: bytes | memoryview,
                base_offset: int = 0) -> Message:
    view = memoryview(body)
    pos = 0

    def need(n: int, what: str) -> None:
        if pos + n > len(view):
            raise DecodeError(f"truncated {what}", base_offset + len(view))

    need(HOP_COUNT.size, "hop count")
    (hop_count,) = HOP_COUNT.unpack_from(view, pos)
    pos += HOP_COUNT.size
    hops = []
    for _ in range(hop_count):
        need(HOP_HEAD.size, "hop label length")
        (label_len,) = HOP_HEAD.unpack_from(view, pos)
        pos += HOP_HEAD.size
        need(label_len + TS.size, "hop entry")
        try:
            label = bytes(view[pos:pos + label_len]).decode("utf-8")
        except UnicodeDecodeError:
            raise DecodeError("hop label is not UTF-8", base_offset + pos) from None
        pos += label_len
        (ts,) = TS.unpack_from(view, pos)
        pos += TS.size
        hops.append((label, ts))
    need(ATTRS_LEN.size, "attrs length")
    (attrs_len,) = ATTRS_LEN.unpack_from(view, pos)
    pos += ATTRS_LEN.size
    need(attrs_len, "attrs")
    attrs = {}
    if attrs_len:
        try:
            attrs = json.loads(bytes(view[pos:pos + attrs_len]))
        except (ValueError, UnicodeDecodeError):
            raise DecodeError("attrs are not valid JSON", base_offset + pos) from None
        if not isinstance(attrs, dict):
            raise DecodeError("attrs must be a JSON object", base_offset + pos)
    pos += attrs_len
    payload = bytes(view[pos:])
    if len(payload) > MAX_PAYLOAD:
        raise DecodeError("payload exceeds 64 MiB", base_offset + pos)
    return Message(type_tag=type_tag, seq=seq, ts_origin=ts_origin, hops=hops,
                   payload=payload, attrs=attrs)


def deserialize(data: bytes | bytearray | memoryview) -> Message:
    frame = parse_frame(data)
    if frame.frag_count != 1:
        raise DecodeError(f"expected a single-fragment frame, got count {frame.frag_count}", 14)
    base = len(data) - len(frame.fragment)
    return decode_body(frame.type_tag, frame.msg_seq, frame.ts_origin, frame.fragment, base)
