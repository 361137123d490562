from .adapters import TransportOptions, open_remote_input, open_remote_output
from .datagram import EOS_TAG, DatagramConfig, DatagramEndpoint, DatagramStats, datagram_open
from .netem import DelayLine, NetworkConditions, inject_network_conditions
from .reliable import ReliableEndpoint, ReliableListener, reliable_connect, reliable_listen
from .wire import WireFrame, deserialize, fragment, fragment_count, parse_frame, serialize

__all__ = [
    "EOS_TAG",
    "DatagramConfig",
    "DatagramEndpoint",
    "DatagramStats",
    "DelayLine",
    "NetworkConditions",
    "ReliableEndpoint",
    "ReliableListener",
    "TransportOptions",
    "WireFrame",
    "datagram_open",
    "deserialize",
    "fragment",
    "fragment_count",
    "inject_network_conditions",
    "open_remote_input",
    "open_remote_output",
    "parse_frame",
    "reliable_connect",
    "reliable_listen",
    "serialize",
]
