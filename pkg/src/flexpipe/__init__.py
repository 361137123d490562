"""flexpipe: a distributed stream-processing runtime for latency-sensitive pipelines.

Kernels declare ports; a YAML recipe decides at deployment time how each
port connects (local queue, reliable stream, or datagram), with which
send semantics, branching and queue sizes, and on which host each kernel
runs.
"""

from .errors import (
    ActivationError,
    ConfigError,
    DecodeError,
    DeploymentError,
    EndOfStream,
    FlexpipeError,
    PortUsageError,
    RecipeError,
    RegistrationError,
    TransportError,
)
from .message import Message, now_ns
from .runtime import (
    BLOCKING,
    NONBLOCKING,
    STOP,
    Kernel,
    Local,
    LocalChannel,
    PortManager,
    PortSemantics,
    RemoteDatagram,
    RemoteReliable,
)

__version__ = "0.1.0"

__all__ = [
    "BLOCKING",
    "NONBLOCKING",
    "STOP",
    "ActivationError",
    "ConfigError",
    "DecodeError",
    "DeploymentError",
    "EndOfStream",
    "FlexpipeError",
    "Kernel",
    "Local",
    "LocalChannel",
    "Message",
    "PortManager",
    "PortSemantics",
    "PortUsageError",
    "RecipeError",
    "RegistrationError",
    "RemoteDatagram",
    "RemoteReliable",
    "TransportError",
    "now_ns",
]
