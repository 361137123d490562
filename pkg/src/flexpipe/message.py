"""The unit of dataflow passed between kernels, and the shared clock."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any, Union

MAX_PAYLOAD = 64 * 1024 * 1024

Payload = Union[bytes, bytearray, memoryview]

# Wall-clock epoch sampled once, advanced by the monotonic clock so that
# in-process deltas never go backwards while timestamps stay comparable
# across processes on one host.
_WALL_ANCHOR = time.time_ns()
_MONO_ANCHOR = time.monotonic_ns()


def now_ns() -> int:
    """Nanoseconds since the Unix epoch, monotonic within this process."""
    return _WALL_ANCHOR + (time.monotonic_ns() - _MONO_ANCHOR)


@dataclass
class Message:
    """A typed, timestamped payload.

    ``hops`` is the ordered list of ``(stage_label, ts_ns)`` entries appended
    by each kernel that emitted the message (or a message derived from it).
    ``attrs`` carries small scalar metadata such as the sequence number of
    the frame a detection result was computed from.
    """

    type_tag: str = ""
    seq: int = 0
    ts_origin: int = 0
    hops: list[tuple[str, int]] = field(default_factory=list)
    payload: Payload = b""
    attrs: dict[str, Any] = field(default_factory=dict)
    # Output port that handed out this placeholder; not part of equality.
    origin_port: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.payload) > MAX_PAYLOAD:
            raise ValueError(f"payload of {len(self.payload)} bytes exceeds 64 MiB")

    @property
    def payload_len(self) -> int:
        return len(self.payload)

    def age_ns(self, at: int | None = None) -> int:
        return (now_ns() if at is None else at) - self.ts_origin

    def inherit(self, source: "Message") -> "Message":
        """Adopt ``source``'s lineage (origin timestamp and hop history).

        Kernels call this on an output placeholder so end-to-end latency is
        attributed to the sensor message the output was derived from.
        """
        self.ts_origin = source.ts_origin
        self.hops = list(source.hops)
        return self

    def fork(self) -> "Message":
        """Shallow copy for an additional branch: new hop list, same payload."""
        return Message(
            type_tag=self.type_tag,
            seq=self.seq,
            ts_origin=self.ts_origin,
            hops=list(self.hops),
            payload=self.payload,
            attrs=dict(self.attrs),
            origin_port=self.origin_port,
        )

    def check_invariants(self) -> None:
        """Raise AssertionError if the timestamp ordering invariant is broken."""
        prev = self.ts_origin
        for label, ts in self.hops:
            if ts < prev:
                raise AssertionError(f"hop {label!r} at {ts} precedes {prev}")
            prev = ts
