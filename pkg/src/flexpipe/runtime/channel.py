"""Bounded single-producer/single-consumer channel between collocated kernels.

Messages are handed over by reference, so a payload is never copied on its
way from one kernel to the next.
"""

from __future__ import annotations

import enum
import threading
import time
from collections import deque
from dataclasses import dataclass

from ..errors import ChannelClosed, ConfigError, EndOfStream
from ..message import Message


class OverflowPolicy(enum.Enum):
    """What a non-blocking put does when the channel is full."""

    DROP_NEW = "drop_new"
    DROP_OLDEST = "drop_oldest"


@dataclass
class ChannelStats:
    puts: int = 0
    gets: int = 0
    dropped: int = 0
    high_water: int = 0
    # Payload copies made by the channel. Stays 0: delivery is by reference.
    copies: int = 0


class LocalChannel:
    def __init__(
        self,
        capacity: int,
        overflow: OverflowPolicy = OverflowPolicy.DROP_NEW,
        name: str = "",
    ) -> None:
        if capacity < 1:
            raise ConfigError(f"queue capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.overflow = overflow
        self.name = name
        self.stats = ChannelStats()
        self._items: deque[Message] = deque()
        self._lock = threading.Lock()
        self._not_empty = threading.Condition(self._lock)
        self._not_full = threading.Condition(self._lock)
        self._closed = False

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def __repr__(self) -> str:
        return f"LocalChannel({self.name!r}, {len(self._items)}/{self.capacity})"

    @property
    def closed(self) -> bool:
        return self._closed

    def full(self) -> bool:
        with self._lock:
            return len(self._items) >= self.capacity

    def put(self, msg: Message, block: bool = True, timeout: float | None = None) -> bool:
        """Enqueue ``msg``.

        Returns False when a non-blocking put (or a timed-out blocking put)
        could not deliver it. Raises ChannelClosed once the channel is closed.
        """
        with self._not_full:
            if self._closed:
                raise ChannelClosed(self.name)
            if len(self._items) >= self.capacity:
                if not block:
                    self.stats.dropped += 1
                    if self.overflow is OverflowPolicy.DROP_OLDEST:
                        self._items.popleft()
                        self._append(msg)
                        return True
                    return False
                deadline = None if timeout is None else time.monotonic() + timeout
                while len(self._items) >= self.capacity and not self._closed:
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        self.stats.dropped += 1
                        return False
                    self._not_full.wait(remaining)
                if self._closed:
                    raise ChannelClosed(self.name)
            self._append(msg)
            return True

    def _append(self, msg: Message) -> None:
        self._items.append(msg)
        self.stats.puts += 1
        if len(self._items) > self.stats.high_water:
            self.stats.high_water = len(self._items)
        self._not_empty.notify()

    def get(self, block: bool = True, timeout: float | None = None) -> Message | None:
        """Dequeue the oldest message.

        Returns None when nothing is available (non-blocking, or timeout).
        Raises EndOfStream when the channel is closed and drained.
        """
        with self._not_empty:
            if not self._items:
                if self._closed:
                    raise EndOfStream(self.name)
                if not block:
                    return None
                deadline = None if timeout is None else time.monotonic() + timeout
                while not self._items and not self._closed:
                    remaining = None if deadline is None else deadline - time.monotonic()
                    if remaining is not None and remaining <= 0:
                        return None
                    self._not_empty.wait(remaining)
                if not self._items:
                    raise EndOfStream(self.name)
            msg = self._items.popleft()
            self.stats.gets += 1
            self._not_full.notify()
            return msg

    def close(self) -> None:
        """Stop accepting messages; queued ones remain readable."""
        with self._lock:
            self._closed = True
            self._not_empty.notify_all()
            self._not_full.notify_all()
