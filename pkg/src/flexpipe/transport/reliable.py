"""Reliable, ordered, length-framed message stream over TCP."""

from __future__ import annotations

import errno
import select
import socket
import threading
import time

from ..errors import ConfigError, EndOfStream, TransportError
from ..message import Message
from .netem import DelayLine, NetworkConditions
from .wire import LENGTH_PREFIX, MAX_FRAME, deserialize, encode_parts

_READ_CHUNK = 1 << 20


class ReliableEndpoint:
    """One end of an established stream session."""

    def __init__(self, sock: socket.socket, sndbuf: int | None = None,
                 rcvbuf: int | None = None) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        if sndbuf:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, sndbuf)
        if rcvbuf:
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, rcvbuf)
        sock.setblocking(True)
        self._sock = sock
        self._buf = bytearray()
        self._send_lock = threading.Lock()
        self._closed = False
        self._eof = False
        self._shim: DelayLine | None = None
        self.peer = sock.getpeername()
        self.sent = 0
        self.received = 0

    def __repr__(self) -> str:
        return f"<ReliableEndpoint peer={self.peer}>"

    @property
    def local_port(self) -> int:
        return self._sock.getsockname()[1]

    def fileno(self) -> int:
        return self._sock.fileno()

    def set_conditions(self, conditions: NetworkConditions) -> None:
        if conditions.loss_rate:
            raise ConfigError("a reliable stream cannot drop frames; use loss_rate=0")
        if self._shim is not None:
            self._shim.close()
        self._shim = DelayLine(conditions, self._write, ordered=True, capacity=1024, block=True)

    # sending

    def _peer_gone(self) -> bool:
        try:
            readable, _, _ = select.select([self._sock], [], [], 0)
            if not readable:
                return False
            return self._sock.recv(1, socket.MSG_PEEK | socket.MSG_DONTWAIT) == b""
        except BlockingIOError:
            return False
        except (OSError, ValueError):
            return True

    def send(self, msg: Message) -> None:
        if self._closed:
            raise TransportError("send on a closed endpoint")
        parts = encode_parts(msg)
        size = sum(len(p) for p in parts)
        if size > MAX_FRAME:
            raise ValueError(f"encoded message of {size} bytes exceeds the frame cap")
        if self._eof or self._peer_gone():
            self._eof = True
            raise TransportError(f"peer {self.peer} closed the session")
        frame = [LENGTH_PREFIX.pack(size), *parts]
        if self._shim is not None:
            for exc in self._shim.errors:
                raise TransportError(f"delayed send failed: {exc}") from exc
            self._shim.submit(frame)
        else:
            self._write(frame)
        self.sent += 1

    def _write(self, parts: list) -> None:
        with self._send_lock:
            try:
                for part in parts:
                    self._sock.sendall(part)
            except OSError as exc:
                raise TransportError(f"send to {self.peer} failed: {exc}") from exc

    def flush(self, timeout: float = 5.0) -> None:
        if self._shim is not None:
            self._shim.drain(timeout)

    # receiving

    def _fill(self, timeout: float | None) -> bool:
        """Read what is available, waiting up to ``timeout``. False on timeout."""
        if self._eof:
            return False
        try:
            readable, _, _ = select.select([self._sock], [], [], timeout)
        except (OSError, ValueError) as exc:
            if self._closed:
                self._eof = True
                return False
            raise TransportError(f"session with {self.peer} broke: {exc}") from exc
        if not readable:
            return False
        try:
            chunk = self._sock.recv(_READ_CHUNK)
        except BlockingIOError:
            return True
        except OSError as exc:
            if self._closed or exc.errno in (errno.EBADF, errno.ECONNRESET):
                self._eof = True
                return True
            raise TransportError(f"session with {self.peer} broke: {exc}") from exc
        if not chunk:
            self._eof = True
        else:
            self._buf += chunk
        return True

    def _take(self) -> Message | None:
        if len(self._buf) < LENGTH_PREFIX.size:
            return None
        (size,) = LENGTH_PREFIX.unpack_from(self._buf, 0)
        if size > MAX_FRAME:
            raise TransportError(f"frame of {size} bytes exceeds the frame cap")
        end = LENGTH_PREFIX.size + size
        if len(self._buf) < end:
            return None
        frame = bytes(memoryview(self._buf)[LENGTH_PREFIX.size:end])
        # Consume the frame first so a corrupt one does not wedge the stream.
        del self._buf[:end]
        self.received += 1
        return deserialize(frame)

    def recv(self, block: bool = True, timeout: float | None = None) -> Message | None:
        """Next whole message; None if none arrives in time.

        Raises EndOfStream once the peer has closed and every complete
        message has been returned.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            msg = self._take()
            if msg is not None:
                return msg
            if self._eof:
                if self._buf:
                    raise TransportError("peer closed mid-message")
                raise EndOfStream(str(self.peer))
            if not block:
                if not self._fill(0):
                    return self._take()
                continue
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            if not self._fill(remaining) and deadline is not None and time.monotonic() >= deadline:
                return None

    def close(self) -> None:
        if self._closed:
            return
        if self._shim is not None:
            self._shim.drain(timeout=2.0)
            self._shim.close()
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class ReliableListener:
    def __init__(self, port: int, host: str = "0.0.0.0", backlog: int = 8) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((host, port))
            sock.listen(backlog)
        except OSError as exc:
            sock.close()
            raise TransportError(f"cannot listen on {host}:{port}: {exc}") from exc
        self._sock = sock
        self.host = host
        self.port = sock.getsockname()[1]
        self._closed = False

    def accept(self, timeout: float | None = None, **endpoint_opts) -> ReliableEndpoint | None:
        try:
            readable, _, _ = select.select([self._sock], [], [], timeout)
        except (OSError, ValueError):
            return None
        if not readable or self._closed:
            return None
        try:
            conn, _ = self._sock.accept()
        except OSError:
            return None
        return ReliableEndpoint(conn, **endpoint_opts)

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def reliable_listen(port: int, host: str = "0.0.0.0") -> ReliableListener:
    return ReliableListener(port, host)


def reliable_connect(
    host: str,
    port: int,
    timeout: float = 5.0,
    attempts: int = 1,
    interval: float = 0.25,
    cancel: threading.Event | None = None,
    **endpoint_opts,
) -> ReliableEndpoint:
    """Connect, retrying up to ``attempts`` times ``interval`` seconds apart."""
    last: OSError | None = None
    for attempt in range(max(1, attempts)):
        if cancel is not None and cancel.is_set():
            break
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)
            return ReliableEndpoint(sock, **endpoint_opts)
        except OSError as exc:
            last = exc
        if attempt + 1 < attempts:
            if cancel is not None:
                cancel.wait(interval)
            else:
                time.sleep(interval)
    raise TransportError(f"cannot connect to {host}:{port} after {attempts} attempt(s): {last}")
