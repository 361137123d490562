"""Ports and the per-kernel port manager.

A kernel developer registers port tags (and the receive semantics of each
input). The user's recipe later activates every tag with a concrete
connection state, which picks the channel that backs the port: a bounded
local queue, a reliable stream, or a datagram endpoint. Kernel code only
ever talks to the port manager by tag, so the same kernel runs unchanged
whatever the recipe chooses.
"""

from __future__ import annotations

import enum
import ipaddress
import socket
import threading
from dataclasses import dataclass, field
from typing import Any, Protocol, Union

from ..errors import (
    ActivationError,
    ChannelClosed,
    ConfigError,
    EndOfStream,
    PortUsageError,
    RegistrationError,
)
from ..message import Message, now_ns
from .channel import LocalChannel, OverflowPolicy


class PortSemantics(enum.Enum):
    BLOCKING = "blocking"
    NONBLOCKING = "nonblocking"

    @classmethod
    def parse(cls, value: "str | PortSemantics") -> "PortSemantics":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower().replace("-", "").replace("_", "")
        for member in cls:
            if member.value == text:
                return member
        raise ConfigError(f"unknown semantics {value!r} (expected blocking or nonblocking)")


BLOCKING = PortSemantics.BLOCKING
NONBLOCKING = PortSemantics.NONBLOCKING


class Direction(enum.Enum):
    INPUT = "input"
    OUTPUT = "output"


@dataclass(frozen=True)
class Unactivated:
    pass


@dataclass(frozen=True)
class Local:
    capacity: int = 1

    def __post_init__(self) -> None:
        if int(self.capacity) < 1:
            raise ConfigError(f"local queue capacity must be >= 1, got {self.capacity}")


def _check_port(port: int) -> None:
    if not 1 <= int(port) <= 65535:
        raise ConfigError(f"port {port} outside 1..65535")


@dataclass(frozen=True)
class RemoteReliable:
    host: str
    port: int

    def __post_init__(self) -> None:
        _check_port(self.port)


@dataclass(frozen=True)
class RemoteDatagram:
    host: str
    port: int

    def __post_init__(self) -> None:
        _check_port(self.port)


ConnectionState = Union[Unactivated, Local, RemoteReliable, RemoteDatagram]
UNACTIVATED = Unactivated()

# Hosts an input port may use to mean "listen on every interface".
ANY_HOST = ("*", "", "0.0.0.0")


def resolve_host(host: str) -> str:
    """Resolve a host name to an IPv4 address, or raise ActivationError."""
    if host in ANY_HOST:
        return "0.0.0.0"
    try:
        ipaddress.ip_address(host)
        return host
    except ValueError:
        pass
    try:
        return socket.gethostbyname(host)
    except OSError as exc:
        raise ActivationError(f"cannot resolve host {host!r}: {exc}") from exc


class OutboundChannel(Protocol):
    def put(self, msg: Message, block: bool = True, timeout: float | None = None) -> bool: ...
    def close(self) -> None: ...


class InboundChannel(Protocol):
    def get(self, block: bool = True, timeout: float | None = None) -> Message | None: ...
    def close(self) -> None: ...


@dataclass
class PortStats:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0
    received: int = 0
    age_total_ns: int = 0

    @property
    def mean_age_ms(self) -> float | None:
        if not self.received:
            return None
        return self.age_total_ns / self.received / 1e6


@dataclass(eq=False)
class FlexPort:
    """One communication endpoint of a kernel, behaving per its state."""

    tag: str
    direction: Direction
    semantics: PortSemantics | None = None
    state: ConnectionState = UNACTIVATED
    branches: list["FlexPort"] = field(default_factory=list)
    owner: str = ""
    channel: Any = field(default=None, repr=False)
    stats: PortStats = field(default_factory=PortStats, repr=False)
    # An optional NonBlocking input deliberately left unwired by the recipe.
    unconnected: bool = False
    dead: bool = False

    @property
    def activated(self) -> bool:
        return not isinstance(self.state, Unactivated)

    @property
    def label(self) -> str:
        return f"{self.owner}.{self.tag}" if self.owner else self.tag

    def activate(
        self,
        state: ConnectionState,
        semantics: PortSemantics | None = None,
        channel: Any = None,
        queue_size: int | None = None,
        options: Any = None,
    ) -> None:
        if self.activated:
            raise ActivationError(f"port {self.label} is already activated")
        if isinstance(state, Unactivated):
            raise ActivationError(f"cannot activate {self.label} into the unactivated state")
        if self.direction is Direction.INPUT:
            if semantics is not None:
                raise ActivationError(
                    f"input port {self.label}: semantics are fixed at registration"
                )
        else:
            if semantics is None:
                raise ActivationError(f"output port {self.label} needs send semantics")
            self.semantics = PortSemantics.parse(semantics)

        if channel is None:
            channel = self._open_channel(state, queue_size, options)
        self.channel = channel
        self.state = state

    def _open_channel(self, state: ConnectionState, queue_size: int | None, options: Any) -> Any:
        from ..transport import adapters

        if isinstance(state, Local):
            return LocalChannel(state.capacity, name=self.label)
        try:
            if self.direction is Direction.INPUT:
                return adapters.open_remote_input(state, queue_size, options, name=self.label)
            return adapters.open_remote_output(state, options, name=self.label)
        except (OSError, ConfigError) as exc:
            raise ActivationError(f"port {self.label}: {exc}") from exc

    def _require_active(self) -> None:
        if not self.activated:
            raise PortUsageError(f"port {self.label} is not activated")

    def send(self, msg: Message) -> None:
        """Emit ``msg`` here and on every branch, each per its own semantics."""
        self._require_active()
        forks = [msg.fork() for _ in self.branches]
        self._emit(msg)
        for branch, copy in zip(self.branches, forks):
            branch._emit(copy)

    def _emit(self, msg: Message) -> None:
        self.stats.sent += 1
        if self.dead:
            self.stats.dropped += 1
            return
        block = self.semantics is PortSemantics.BLOCKING
        try:
            ok = self.channel.put(msg, block=block)
        except ChannelClosed:
            # Downstream went away; this branch is silently retired.
            self.dead = True
            ok = False
        if ok:
            self.stats.delivered += 1
        else:
            self.stats.dropped += 1

    def recv(self) -> Message | None:
        if self.unconnected:
            return None
        self._require_active()
        block = self.semantics is PortSemantics.BLOCKING
        try:
            msg = self.channel.get(block=block)
        except EndOfStream:
            if block:
                raise
            return None
        if msg is not None:
            self.stats.received += 1
            self.stats.age_total_ns += now_ns() - msg.ts_origin
        return msg

    @property
    def closed(self) -> bool:
        ch = self.channel
        return bool(ch is not None and getattr(ch, "closed", False))

    def close(self) -> None:
        if self.channel is not None:
            self.channel.close()
        for branch in self.branches:
            branch.close()

    def shutdown(self) -> None:
        """Release sockets and helper threads after the owner has stopped."""
        self.close()
        release = getattr(self.channel, "shutdown", None)
        if release is not None:
            release()
        for branch in self.branches:
            branch.shutdown()


@dataclass(frozen=True)
class KernelDescriptor:
    """Development-time declaration of a kernel's ports."""

    kernel_type: str
    instance_id: str
    in_ports: tuple[tuple[str, PortSemantics], ...]
    out_ports: tuple[str, ...]

    def in_semantics(self, tag: str) -> PortSemantics | None:
        return dict(self.in_ports).get(tag)


class PortManager:
    """Maps a kernel's registered tags to activated ports."""

    def __init__(self, owner: str = "", stage_label: str | None = None) -> None:
        self.owner = owner
        self.stage_label = stage_label or owner
        self.in_ports: dict[str, FlexPort] = {}
        self.out_ports: dict[str, FlexPort] = {}
        # branch name -> (registered source tag, branch port)
        self.branched_ports: dict[str, tuple[str, FlexPort]] = {}
        self._seq: dict[str, int] = {}
        self._lock = threading.Lock()

    # registration (developer side)

    def _taken(self, tag: str) -> bool:
        return tag in self.in_ports or tag in self.out_ports or tag in self.branched_ports

    def register_in_port(self, tag: str, semantics: PortSemantics | str) -> None:
        if self._taken(tag):
            raise RegistrationError(f"port tag {tag!r} is already registered on {self.owner!r}")
        self.in_ports[tag] = FlexPort(
            tag, Direction.INPUT, PortSemantics.parse(semantics), owner=self.owner
        )

    def register_out_port(self, tag: str) -> None:
        if self._taken(tag):
            raise RegistrationError(f"port tag {tag!r} is already registered on {self.owner!r}")
        self.out_ports[tag] = FlexPort(tag, Direction.OUTPUT, owner=self.owner)
        self._seq[tag] = 0

    # activation (user side, driven by the recipe)

    def port(self, tag: str) -> FlexPort:
        if tag in self.in_ports:
            return self.in_ports[tag]
        if tag in self.out_ports:
            return self.out_ports[tag]
        if tag in self.branched_ports:
            return self.branched_ports[tag][1]
        raise PortUsageError(f"unknown port tag {tag!r} on {self.owner!r}")

    def activate_port(
        self,
        tag: str,
        state: ConnectionState,
        semantics: PortSemantics | str | None = None,
        *,
        channel: Any = None,
        queue_size: int | None = None,
        options: Any = None,
    ) -> FlexPort:
        if tag not in self.in_ports and tag not in self.out_ports:
            raise ActivationError(f"unknown port tag {tag!r} on {self.owner!r}")
        port = self.port(tag)
        sem = None if semantics is None else PortSemantics.parse(semantics)
        port.activate(state, sem, channel=channel, queue_size=queue_size, options=options)
        return port

    def mark_unconnected(self, tag: str) -> None:
        port = self.in_ports.get(tag)
        if port is None:
            raise ActivationError(f"unknown input port {tag!r} on {self.owner!r}")
        if port.semantics is PortSemantics.BLOCKING:
            raise ActivationError(
                f"blocking input {self.owner}.{tag} is a hard dependency and must be connected"
            )
        port.unconnected = True

    def branch_output(
        self,
        source_tag: str,
        branch_name: str,
        state: ConnectionState,
        semantics: PortSemantics | str,
        *,
        channel: Any = None,
        options: Any = None,
    ) -> FlexPort:
        if source_tag not in self.out_ports:
            kind = "an input port" if source_tag in self.in_ports else "not registered"
            raise ActivationError(f"cannot branch from {source_tag!r}: {kind}")
        if self._taken(branch_name):
            raise ActivationError(f"duplicate branch name {branch_name!r} on {self.owner!r}")
        branch = FlexPort(branch_name, Direction.OUTPUT, owner=self.owner)
        branch.activate(state, PortSemantics.parse(semantics), channel=channel, options=options)
        self.out_ports[source_tag].branches.append(branch)
        self.branched_ports[branch_name] = (source_tag, branch)
        return branch

    # data operations (kernel side)

    def get_input(self, tag: str) -> Message | None:
        port = self.in_ports.get(tag)
        if port is None:
            raise PortUsageError(f"{tag!r} is not an input port of {self.owner!r}")
        return port.recv()

    def get_output_placeholder(self, tag: str) -> Message:
        if tag not in self.out_ports:
            raise PortUsageError(f"{tag!r} is not an output port of {self.owner!r}")
        self.out_ports[tag]._require_active()
        return Message(seq=self._next_seq(tag), ts_origin=now_ns(), origin_port=tag)

    def _next_seq(self, tag: str) -> int:
        with self._lock:
            seq = self._seq[tag]
            self._seq[tag] = seq + 1
            return seq

    def send_output(self, tag: str, msg: Message) -> None:
        port = self.out_ports.get(tag)
        if port is None:
            raise PortUsageError(f"{tag!r} is not an output port of {self.owner!r}")
        port._require_active()
        if msg.origin_port != tag:
            msg.seq = self._next_seq(tag)
            msg.origin_port = tag
        msg.hops.append((self.stage_label, now_ns()))
        port.send(msg)

    def is_closed(self, tag: str) -> bool:
        """True once the channel feeding input ``tag`` has been closed."""
        return self.port(tag).closed

    # lifecycle

    def all_ports(self) -> list[FlexPort]:
        ports = list(self.in_ports.values()) + list(self.out_ports.values())
        return ports + [branch for _, branch in self.branched_ports.values()]

    def close_outputs(self) -> None:
        for port in self.out_ports.values():
            port.close()

    def interrupt(self) -> None:
        """Wake any operation blocked on this kernel's ports."""
        for port in list(self.in_ports.values()) + list(self.out_ports.values()):
            port.close()

    def shutdown(self) -> None:
        for port in list(self.in_ports.values()) + list(self.out_ports.values()):
            port.shutdown()

    def descriptor(self, kernel_type: str) -> KernelDescriptor:
        return KernelDescriptor(
            kernel_type=kernel_type,
            instance_id=self.owner,
            in_ports=tuple((t, p.semantics) for t, p in self.in_ports.items()),
            out_ports=tuple(self.out_ports),
        )


__all__ = [
    "ANY_HOST",
    "BLOCKING",
    "NONBLOCKING",
    "ConnectionState",
    "Direction",
    "FlexPort",
    "KernelDescriptor",
    "Local",
    "OverflowPolicy",
    "PortManager",
    "PortSemantics",
    "PortStats",
    "RemoteDatagram",
    "RemoteReliable",
    "UNACTIVATED",
    "Unactivated",
    "resolve_host",
]
