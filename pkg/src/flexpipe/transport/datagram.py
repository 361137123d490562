"""Unreliable, timeliness-first message transport over UDP.

Messages are fragmented into frames of at most ``mtu_payload`` body bytes
and sent without acknowledgment or retransmission. The receiver returns a
message only once every fragment has arrived; messages with a lost
fragment are never delivered, and partial assemblies that fall behind the
reassembly window are evicted so they cannot starve newer messages.
"""

from __future__ import annotations

import select
import socket
import time
from collections import deque
from dataclasses import dataclass, field

from ..errors import ConfigError, DecodeError, EndOfStream, TransportError
from ..message import Message, now_ns
from .netem import DelayLine, NetworkConditions
from .wire import decode_body, fragment, frame_header, parse_frame

EOS_TAG = "\x00eos"
_MAX_DATAGRAM = 65535
# A sequence number this far below the newest one means the sender restarted.
_RESTART_GAP = 1 << 20


@dataclass(frozen=True)
class DatagramConfig:
    mtu_payload: int = 1200
    reassembly_window: int = 4

    def __post_init__(self) -> None:
        if not 512 <= self.mtu_payload <= 65000:
            raise ConfigError(f"mtu_payload {self.mtu_payload} outside 512..65000")
        if self.reassembly_window < 1:
            raise ConfigError("reassembly_window must be >= 1")


@dataclass
class DatagramStats:
    messages_sent: int = 0
    frames_sent: int = 0
    frames_send_dropped: int = 0
    frames_received: int = 0
    malformed: int = 0
    stale_frames: int = 0
    messages_delivered: int = 0
    messages_evicted: int = 0


@dataclass
class _Partial:
    count: int
    type_tag: str
    ts_origin: int
    chunks: dict[int, bytes] = field(default_factory=dict)


class DatagramEndpoint:
    def __init__(
        self,
        local_port: int = 0,
        peer_host: str | None = None,
        peer_port: int | None = None,
        cfg: DatagramConfig | None = None,
        local_host: str = "0.0.0.0",
        rcvbuf: int = 4 << 20,
        sndbuf: int = 4 << 20,
    ) -> None:
        self.cfg = cfg or DatagramConfig()
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, rcvbuf)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, sndbuf)
            sock.bind((local_host, local_port))
        except OSError as exc:
            sock.close()
            raise TransportError(f"cannot bind datagram port {local_port}: {exc}") from exc
        sock.setblocking(False)
        self._sock = sock
        self.local_port = sock.getsockname()[1]
        self.peer = (peer_host, peer_port) if peer_host is not None and peer_port else None
        self.stats = DatagramStats()
        self._partials: dict[int, _Partial] = {}
        self._ready: deque[Message] = deque()
        self._max_seq = -1
        self._shim: DelayLine | None = None
        self._closed = False
        self._eos = False

    def __repr__(self) -> str:
        return f"<DatagramEndpoint :{self.local_port} peer={self.peer}>"

    def set_conditions(self, conditions: NetworkConditions) -> None:
        if self._shim is not None:
            self._shim.close()
        self._shim = DelayLine(conditions, self._write, ordered=False)

    # sending

    def send(self, msg: Message, peer: tuple[str, int] | None = None) -> None:
        """Fire-and-forget; never waits for the receiver."""
        target = peer or self.peer
        if target is None:
            raise TransportError("datagram send without a peer address")
        if self._closed:
            raise TransportError("send on a closed endpoint")
        frames = fragment(msg, self.cfg.mtu_payload)
        for hdr, chunk in frames:
            if self._shim is not None:
                self._shim.submit((hdr, chunk, target))
            else:
                self._write((hdr, chunk, target))
        self.stats.messages_sent += 1

    def _write(self, item: tuple) -> None:
        hdr, chunk, target = item
        try:
            self._sock.sendmsg([hdr, chunk], [], 0, target)
            self.stats.frames_sent += 1
        except (BlockingIOError, ConnectionRefusedError):
            self.stats.frames_send_dropped += 1
        except OSError as exc:
            if self._closed:
                return
            raise TransportError(f"datagram send to {target} failed: {exc}") from exc

    def send_eos(self, peer: tuple[str, int] | None = None, repeat: int = 3) -> None:
        """Best-effort end-of-stream notice, sent around any loss shim."""
        target = peer or self.peer
        if target is None or self._closed:
            return
        hdr = frame_header(0, 0, 1, EOS_TAG.encode(), now_ns())
        for _ in range(repeat):
            self._write((hdr, b"\x00\x00\x00\x00\x00\x00", target))

    # receiving

    def _on_frame(self, data: bytes) -> None:
        self.stats.frames_received += 1
        try:
            frame = parse_frame(data)
        except DecodeError:
            self.stats.malformed += 1
            return
        if frame.type_tag == EOS_TAG:
            self._eos = True
            return
        seq = frame.msg_seq
        if self._max_seq - seq > _RESTART_GAP:
            self._partials.clear()
            self._max_seq = -1
        if frame.frag_count == 1:
            self._max_seq = max(self._max_seq, seq)
            self._complete(frame.type_tag, seq, frame.ts_origin, frame.fragment)
            return

        window = self.cfg.reassembly_window
        partial = self._partials.get(seq)
        if partial is None:
            if seq <= self._max_seq - window:
                self.stats.stale_frames += 1
                return
            partial = _Partial(frame.frag_count, frame.type_tag, frame.ts_origin)
            self._partials[seq] = partial
            self._max_seq = max(self._max_seq, seq)
            self._evict(window)
            if seq not in self._partials:
                return
        elif partial.count != frame.frag_count:
            self.stats.malformed += 1
            return
        partial.chunks[frame.frag_index] = bytes(frame.fragment)
        if len(partial.chunks) == partial.count:
            del self._partials[seq]
            body = b"".join(partial.chunks[i] for i in range(partial.count))
            self._complete(partial.type_tag, seq, partial.ts_origin, body)

    def _evict(self, window: int) -> None:
        for old in [s for s in self._partials if s <= self._max_seq - window]:
            del self._partials[old]
            self.stats.messages_evicted += 1
        while len(self._partials) > window:
            del self._partials[min(self._partials)]
            self.stats.messages_evicted += 1

    def _complete(self, type_tag: str, seq: int, ts_origin: int, body) -> None:
        try:
            msg = decode_body(type_tag, seq, ts_origin, body)
        except DecodeError:
            self.stats.malformed += 1
            return
        self._ready.append(msg)

    def _drain_socket(self) -> None:
        while True:
            try:
                data = self._sock.recv(_MAX_DATAGRAM)
            except BlockingIOError:
                return
            except OSError as exc:
                if self._closed:
                    return
                raise TransportError(f"datagram receive failed: {exc}") from exc
            self._on_frame(data)
            if self._ready or self._eos:
                return

    def recv(self, block: bool = True, timeout: float | None = None) -> Message | None:
        """Next fully reassembled message, or None if none completes in time.

        Raises EndOfStream after the sender's end-of-stream notice once all
        messages completed before it have been returned.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if self._ready:
                self.stats.messages_delivered += 1
                return self._ready.popleft()
            if self._eos:
                raise EndOfStream(f"datagram :{self.local_port}")
            if self._closed:
                raise EndOfStream(f"datagram :{self.local_port} closed")
            self._drain_socket()
            if self._ready or self._eos:
                continue
            if not block:
                return None
            wait = None if deadline is None else deadline - time.monotonic()
            if wait is not None and wait <= 0:
                return None
            try:
                select.select([self._sock], [], [], 0.1 if wait is None else min(wait, 0.1))
            except (OSError, ValueError):
                if self._closed:
                    raise EndOfStream(f"datagram :{self.local_port} closed") from None
                raise

    def partial_count(self) -> int:
        return len(self._partials)

    def flush(self, timeout: float = 5.0) -> None:
        if self._shim is not None:
            self._shim.drain(timeout)

    def close(self) -> None:
        if self._closed:
            return
        if self._shim is not None:
            self._shim.close()
        self._closed = True
        self._sock.close()


def datagram_open(
    local_port: int = 0,
    peer_host: str | None = None,
    peer_port: int | None = None,
    cfg: DatagramConfig | None = None,
    **opts,
) -> DatagramEndpoint:
    return DatagramEndpoint(local_port, peer_host, peer_port, cfg, **opts)
