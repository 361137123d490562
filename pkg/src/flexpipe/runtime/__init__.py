from .channel import ChannelStats, LocalChannel, OverflowPolicy
from .kernel import STOP, FrequencyManager, Kernel, regulate_frequency, run_kernel
from .ports import (
    BLOCKING,
    NONBLOCKING,
    UNACTIVATED,
    ConnectionState,
    Direction,
    FlexPort,
    KernelDescriptor,
    Local,
    PortManager,
    PortSemantics,
    RemoteDatagram,
    RemoteReliable,
    Unactivated,
)

__all__ = [
    "BLOCKING",
    "NONBLOCKING",
    "STOP",
    "UNACTIVATED",
    "ChannelStats",
    "ConnectionState",
    "Direction",
    "FlexPort",
    "FrequencyManager",
    "Kernel",
    "KernelDescriptor",
    "Local",
    "LocalChannel",
    "OverflowPolicy",
    "PortManager",
    "PortSemantics",
    "RemoteDatagram",
    "RemoteReliable",
    "Unactivated",
    "regulate_frequency",
    "run_kernel",
]
