"""Deterministic loss/delay shim applied to an endpoint's outgoing frames.

Used by tests and benchmarks to emulate a lossy or distant link on
loopback. Loss decisions and jitter draws come from one seeded RNG, consumed
in frame order, so the same seed yields the same delivery pattern.
"""

from __future__ import annotations

import heapq
import itertools
import random
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable

from ..errors import ConfigError


@dataclass(frozen=True)
class NetworkConditions:
    loss_rate: float = 0.0
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ConfigError(f"loss_rate {self.loss_rate} outside [0, 1]")
        if self.delay_ms < 0 or self.jitter_ms < 0:
            raise ConfigError("delay_ms and jitter_ms must be non-negative")


class DelayLine:
    """Drops and delays items before handing them to ``deliver``.

    ``ordered`` keeps FIFO order (a stream: a later item never overtakes an
    earlier one). ``capacity`` bounds the items in flight; beyond it
    ``submit`` blocks when ``block`` is set, else the item is dropped.
    """

    def __init__(
        self,
        conditions: NetworkConditions,
        deliver: Callable[[Any], None],
        ordered: bool = False,
        capacity: int = 4096,
        block: bool = False,
    ) -> None:
        self.conditions = conditions
        self._deliver = deliver
        self._ordered = ordered
        self._capacity = capacity
        self._block = block
        self._rng = random.Random(conditions.seed)
        self._heap: list[tuple[float, int, Any]] = []
        self._counter = itertools.count()
        self._last_due = 0.0
        self._cv = threading.Condition()
        self._closed = False
        self.submitted = 0
        self.lost = 0
        self.delivered = 0
        self.errors: list[BaseException] = []
        self._thread: threading.Thread | None = None
        if conditions.delay_ms > 0 or conditions.jitter_ms > 0:
            self._thread = threading.Thread(target=self._run, name="netem", daemon=True)
            self._thread.start()

    def submit(self, item: Any) -> bool:
        """Returns False if the item was lost."""
        c = self.conditions
        self.submitted += 1
        if c.loss_rate > 0 and self._rng.random() < c.loss_rate:
            self.lost += 1
            return False
        if self._thread is None:
            self._deliver(item)
            self.delivered += 1
            return True
        delay = c.delay_ms
        if c.jitter_ms:
            delay = max(0.0, delay + self._rng.uniform(-c.jitter_ms, c.jitter_ms))
        due = time.monotonic() + delay / 1000.0
        with self._cv:
            if self._ordered:
                due = max(due, self._last_due)
                self._last_due = due
            while len(self._heap) >= self._capacity and not self._closed:
                if not self._block:
                    self.lost += 1
                    return False
                self._cv.wait(0.05)
            if self._closed:
                return False
            heapq.heappush(self._heap, (due, next(self._counter), item))
            self._cv.notify_all()
        return True

    def _run(self) -> None:
        while True:
            with self._cv:
                while not self._closed:
                    if self._heap:
                        wait = self._heap[0][0] - time.monotonic()
                        if wait <= 0:
                            break
                        self._cv.wait(wait)
                    else:
                        self._cv.wait()
                if self._closed:
                    return
                _, _, item = heapq.heappop(self._heap)
                self._cv.notify_all()
            try:
                self._deliver(item)
                self.delivered += 1
            except BaseException as exc:  # noqa: BLE001 - surfaced via .errors
                self.errors.append(exc)

    def pending(self) -> int:
        with self._cv:
            return len(self._heap)

    def drain(self, timeout: float = 5.0) -> None:
        """Wait until every delayed item has been delivered."""
        deadline = time.monotonic() + timeout
        while self.pending() and time.monotonic() < deadline:
            time.sleep(0.001)

    def close(self) -> None:
        with self._cv:
            self._closed = True
            self._cv.notify_all()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(timeout=1.0)


def inject_network_conditions(
    endpoint: Any,
    loss_rate: float = 0.0,
    delay_ms: float = 0.0,
    jitter_ms: float = 0.0,
    seed: int = 0,
) -> NetworkConditions:
    """Apply loss/delay to every frame ``endpoint`` sends from now on."""
    conditions = NetworkConditions(loss_rate, delay_ms, jitter_ms, seed)
    endpoint.set_conditions(conditions)
    return conditions
