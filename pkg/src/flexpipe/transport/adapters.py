"""Remote channels presented to FlexPort with the same put/get surface as a
local queue, so port semantics map onto them uniformly.

Remote inputs hand received messages to a small local queue that the
kernel reads. For datagram inputs that queue keeps the newest messages
(drop-oldest); for stream inputs it blocks the reader, which pushes back
through the stream to the sender. Stream outputs write through a bounded
outbound queue drained by a writer thread, so a blocking send waits for
queue space and a non-blocking send drops when it is full.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

from ..errors import ActivationError, ChannelClosed, EndOfStream, TransportError
from ..message import Message, now_ns
from ..runtime.channel import LocalChannel, OverflowPolicy
from ..runtime.ports import RemoteDatagram, RemoteReliable, resolve_host
from .datagram import DatagramConfig, DatagramEndpoint
from .netem import NetworkConditions
from .reliable import ReliableEndpoint, reliable_connect, reliable_listen

log = logging.getLogger("flexpipe.transport")

DEFAULT_DATAGRAM_QUEUE = 1
DEFAULT_RELIABLE_QUEUE = 8
# Hop label stamped when a message arrives off the network.
TRANSPORT_HOP = "transport"


@dataclass
class TransportOptions:
    datagram: DatagramConfig = field(default_factory=DatagramConfig)
    connect_attempts: int = 20
    connect_interval: float = 0.25
    # Wait for outgoing stream connections during activation.
    wait_connected: bool = True
    outbound_capacity: int = 1
    sndbuf: int | None = None
    rcvbuf: int | None = None
    conditions: NetworkConditions | None = None
    listen_host: str = "0.0.0.0"
    on_event: Callable[[str, str], None] | None = None

    def emit(self, event: str, detail: str) -> None:
        if self.on_event is not None:
            self.on_event(event, detail)


class ReliableOutput:
    def __init__(self, state: RemoteReliable, opts: TransportOptions, name: str = "") -> None:
        self.name = name
        self.host = resolve_host(state.host)
        self.port = state.port
        self.opts = opts
        self.error: BaseException | None = None
        self.endpoint: ReliableEndpoint | None = None
        self._outbound = LocalChannel(opts.outbound_capacity, name=f"{name}>out")
        self._cancel = threading.Event()
        self._settled = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"tcp-out:{name}", daemon=True)
        self._thread.start()
        if opts.wait_connected:
            self._settled.wait()
            if self.error is not None:
                raise ActivationError(f"{name}: {self.error}")

    @property
    def closed(self) -> bool:
        return self._outbound.closed

    @property
    def connected(self) -> bool:
        return self.endpoint is not None

    def _run(self) -> None:
        target = f"{self.host}:{self.port}"
        self.opts.emit("connect_attempt", f"{self.name} -> {target}")
        try:
            self.endpoint = reliable_connect(
                self.host, self.port,
                attempts=self.opts.connect_attempts,
                interval=self.opts.connect_interval,
                cancel=self._cancel,
                sndbuf=self.opts.sndbuf, rcvbuf=self.opts.rcvbuf,
            )
            if self.opts.conditions is not None:
                self.endpoint.set_conditions(self.opts.conditions)
            self.opts.emit("connected", f"{self.name} -> {target}")
        except TransportError as exc:
            self.error = exc
            self._outbound.close()
            self._settled.set()
            log.warning("%s: %s", self.name, exc)
            return
        self._settled.set()
        try:
            while True:
                msg = self._outbound.get()
                self.endpoint.send(msg)
        except EndOfStream:
            self.endpoint.flush()
        except (TransportError, ValueError) as exc:
            self.error = exc
            self._outbound.close()
        finally:
            self.endpoint.close()

    def put(self, msg: Message, block: bool = True, timeout: float | None = None) -> bool:
        if self.error is not None and not self._cancel.is_set():
            raise TransportError(f"{self.name}: {self.error}")
        return self._outbound.put(msg, block=block, timeout=timeout)

    def close(self) -> None:
        self._outbound.close()

    def shutdown(self, timeout: float = 2.0) -> None:
        self._cancel.set()
        self._outbound.close()
        self._thread.join(timeout)
        if self.endpoint is not None:
            self.endpoint.close()


class ReliableInput:
    def __init__(self, state: RemoteReliable, queue_size: int | None,
                 opts: TransportOptions, name: str = "") -> None:
        self.name = name
        self.opts = opts
        host = opts.listen_host if state.host in ("*", "", "0.0.0.0") else resolve_host(state.host)
        self.listener = reliable_listen(state.port, host)
        self.bound_port = self.listener.port
        opts.emit("listen_bound", f"{name} tcp:{self.bound_port}")
        self.handoff = LocalChannel(queue_size or DEFAULT_RELIABLE_QUEUE, name=f"{name}<in")
        self.endpoint: ReliableEndpoint | None = None
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"tcp-in:{name}", daemon=True)
        self._thread.start()

    @property
    def closed(self) -> bool:
        return self.handoff.closed

    def _run(self) -> None:
        while not self._stop.is_set() and self.endpoint is None:
            self.endpoint = self.listener.accept(timeout=0.1, sndbuf=self.opts.sndbuf,
                                                 rcvbuf=self.opts.rcvbuf)
        if self.endpoint is None:
            return
        try:
            while not self._stop.is_set():
                msg = self.endpoint.recv(timeout=0.1)
                if msg is not None:
                    msg.hops.append((TRANSPORT_HOP, now_ns()))
                    self.handoff.put(msg, block=True)
        except (EndOfStream, TransportError):
            self.handoff.close()
        except ChannelClosed:
            pass

    def get(self, block: bool = True, timeout: float | None = None) -> Message | None:
        return self.handoff.get(block=block, timeout=timeout)

    def close(self) -> None:
        self.handoff.close()

    def shutdown(self, timeout: float = 2.0) -> None:
        self._stop.set()
        self.handoff.close()
        self._thread.join(timeout)
        self.listener.close()
        if self.endpoint is not None:
            self.endpoint.close()


class DatagramOutput:
    def __init__(self, state: RemoteDatagram, opts: TransportOptions, name: str = "") -> None:
        self.name = name
        self.endpoint = DatagramEndpoint(0, resolve_host(state.host), state.port, opts.datagram)
        if opts.conditions is not None:
            self.endpoint.set_conditions(opts.conditions)
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed

    def put(self, msg: Message, block: bool = True, timeout: float | None = None) -> bool:
        if self._closed:
            raise ChannelClosed(self.name)
        self.endpoint.send(msg)
        return True

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.endpoint.flush(timeout=1.0)
        self.endpoint.send_eos()

    def shutdown(self) -> None:
        self.close()
        self.endpoint.close()


class DatagramInput:
    def __init__(self, state: RemoteDatagram, queue_size: int | None,
                 opts: TransportOptions, name: str = "") -> None:
        self.name = name
        host = opts.listen_host if state.host in ("*", "", "0.0.0.0") else resolve_host(state.host)
        self.endpoint = DatagramEndpoint(state.port, cfg=opts.datagram, local_host=host)
        self.bound_port = self.endpoint.local_port
        opts.emit("listen_bound", f"{name} udp:{self.bound_port}")
        self.handoff = LocalChannel(queue_size or DEFAULT_DATAGRAM_QUEUE,
                                    OverflowPolicy.DROP_OLDEST, name=f"{name}<in")
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=f"udp-in:{name}", daemon=True)
        self._thread.start()

    @property
    def closed(self) -> bool:
        return self.handoff.closed

    def _run(self) -> None:
        try:
            while not self._stop.is_set():
                msg = self.endpoint.recv(timeout=0.1)
                if msg is not None:
                    msg.hops.append((TRANSPORT_HOP, now_ns()))
                    self.handoff.put(msg, block=False)
        except (EndOfStream, TransportError):
            self.handoff.close()
        except ChannelClosed:
            pass

    def get(self, block: bool = True, timeout: float | None = None) -> Message | None:
        return self.handoff.get(block=block, timeout=timeout)

    def close(self) -> None:
        self.handoff.close()

    def shutdown(self, timeout: float = 2.0) -> None:
        self._stop.set()
        self.handoff.close()
        self._thread.join(timeout)
        self.endpoint.close()


def open_remote_input(state, queue_size: int | None, options: TransportOptions | None,
                      name: str = ""):
    opts = options or TransportOptions()
    if isinstance(state, RemoteReliable):
        return ReliableInput(state, queue_size, opts, name)
    if isinstance(state, RemoteDatagram):
        return DatagramInput(state, queue_size, opts, name)
    raise ActivationError(f"{name}: not a remote state: {state!r}")


def open_remote_output(state, options: TransportOptions | None, name: str = ""):
    opts = options or TransportOptions()
    if isinstance(state, RemoteReliable):
        return ReliableOutput(state, opts, name)
    if isinstance(state, RemoteDatagram):
        return DatagramOutput(state, opts, name)
    raise ActivationError(f"{name}: not a remote state: {state!r}")
