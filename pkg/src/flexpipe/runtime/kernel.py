"""Kernel abstraction: ID, logger, frequency manager, step function, ports."""

from __future__ import annotations

import logging
import threading
import time
from typing import Any, ClassVar

from ..errors import ConfigError, EndOfStream
from .ports import KernelDescriptor, PortManager

# Returned from Kernel.step() to end the kernel's run loop.
STOP = "stop"


class FrequencyManager:
    """Keeps consecutive step starts at least ``1/target_hz`` apart."""

    def __init__(self, target_hz: float) -> None:
        if not target_hz or target_hz <= 0:
            raise ConfigError(f"target frequency must be positive, got {target_hz}")
        self.target_hz = float(target_hz)
        self.period = 1.0 / self.target_hz
        self._last_start: float | None = None

    def mark_start(self) -> None:
        self._last_start = time.monotonic()

    def regulate(self, stop: threading.Event | None = None) -> None:
        """Suspend until one period after the last step start (never earlier)."""
        if self._last_start is None:
            return
        remaining = self._last_start + self.period - time.monotonic()
        if remaining <= 0:
            return
        if stop is not None:
            stop.wait(remaining)
        else:
            time.sleep(remaining)


class Kernel:
    """Base class for pipeline kernels.

    Subclasses register their ports in ``__init__`` and implement ``step``,
    which is called repeatedly on the kernel's own thread. Returning
    ``STOP`` from ``step`` ends the kernel.
    """

    kernel_type: ClassVar[str] = ""

    def __init__(
        self,
        instance_id: str,
        *,
        frequency: float | None = None,
        stage: str | None = None,
        exec: list[str] | None = None,
    ) -> None:
        self.id = instance_id
        self.stage = stage or instance_id
        self.ports = PortManager(instance_id, stage_label=self.stage)
        self.log = logging.getLogger(f"flexpipe.kernel.{instance_id}")
        self.freq = FrequencyManager(frequency) if frequency is not None else None
        if exec is not None and (
            not isinstance(exec, list) or not all(isinstance(a, str) for a in exec)
        ):
            raise ConfigError("exec must be a list of strings")
        self.exec_cmd = exec
        # Sink record collector, attached by the deployer.
        self.metrics: Any = None
        self.steps = 0
        self.failure: BaseException | None = None
        self._stop = threading.Event()

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.id}>"

    @classmethod
    def type_name(cls) -> str:
        return cls.kernel_type or cls.__name__

    def step(self) -> Any:
        raise NotImplementedError

    def describe(self) -> KernelDescriptor:
        return self.ports.descriptor(self.type_name())

    @property
    def stopping(self) -> bool:
        return self._stop.is_set()

    def request_stop(self) -> None:
        self._stop.set()
        self.ports.interrupt()

    def sleep(self, seconds: float, busy: bool = False) -> None:
        """Stand-in for compute work; returns early if the kernel is stopped."""
        if seconds <= 0:
            return
        if not busy:
            self._stop.wait(seconds)
            return
        deadline = time.perf_counter() + seconds
        while time.perf_counter() < deadline and not self._stop.is_set():
            pass


def regulate_frequency(kernel: Kernel, target_hz: float) -> None:
    """Pace ``kernel`` to ``target_hz``; call at the end of a step."""
    if kernel.freq is None or kernel.freq.target_hz != float(target_hz):
        previous = kernel.freq
        kernel.freq = FrequencyManager(target_hz)
        if previous is not None:
            kernel.freq._last_start = previous._last_start
    kernel.freq.regulate(kernel._stop)


def run_kernel(kernel: Kernel) -> None:
    """Run ``kernel.step`` until it returns STOP, its input ends, or it is stopped.

    A step that raises records the exception on ``kernel.failure``. In every
    case the kernel's outputs are closed on exit so downstream kernels see
    end-of-stream.
    """
    try:
        while not kernel.stopping:
            if kernel.freq is not None:
                kernel.freq.mark_start()
            status = kernel.step()
            kernel.steps += 1
            if status == STOP:
                break
            if kernel.freq is not None:
                kernel.freq.regulate(kernel._stop)
    except EndOfStream:
        kernel.log.debug("input ended")
    except BaseException as exc:  # noqa: BLE001 - recorded, not swallowed silently
        if not kernel.stopping:
            kernel.failure = exc
            kernel.log.error("step failed: %r", exc)
    finally:
        kernel.ports.close_outputs()
