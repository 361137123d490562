"""Built-in synthetic kernels and the kernel registry.

The stubs stand in for the sensors, perception, codecs, renderer and
display of an XR pipeline. They model compute cost by sleeping (or by
spinning with ``busy: true``) and change payload sizes the way the real
components would, so any recipe topology can be exercised without real
algorithms.

Every kernel accepts three common parameters besides its own:
``frequency`` (Hz, paces the step loop), ``stage`` (the label stamped into
message hops, default: the instance id) and ``exec`` (a command started
alongside the kernel).
"""

from __future__ import annotations

import hashlib
import inspect
import math
import random
import threading
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError
from .message import Message, now_ns
from .runtime.kernel import STOP, Kernel
from .runtime.ports import BLOCKING, NONBLOCKING, KernelDescriptor


def _positive(name: str, value: Any) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if not value > 0 or math.isinf(value):
        raise ConfigError(f"{name} must be positive, got {value}")
    return value


def _non_negative(name: str, value: Any) -> float:
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a number, got {value!r}") from None
    if value < 0 or math.isnan(value) or math.isinf(value):
        raise ConfigError(f"{name} must be >= 0, got {value}")
    return value


def _count(name: str, value: Any, allow_none: bool = False) -> int | None:
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise ConfigError(f"{name} must be a non-negative integer, got {value!r}")
    return value


def _flag(name: str, value: Any) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{name} must be true or false, got {value!r}")
    return value


def _sized(data: bytes, size: int) -> bytes:
    """``data`` repeated or truncated to exactly ``size`` bytes."""
    if size <= 0:
        return b""
    if not data:
        return bytes(size)
    reps = -(-size // len(data))
    return (bytes(data) * reps)[:size]


# Collected sink records


@dataclass
class SinkRecord:
    sink: str
    seq: int
    ts_origin: int
    recv_ns: int
    payload_len: int
    hops: list[tuple[str, int]] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    payload: bytes | None = None

    @property
    def age_ns(self) -> int:
        return self.recv_ns - self.ts_origin

    def hop_deltas(self, final_label: str | None = None) -> list[tuple[str, int]]:
        """Per-stage time: origin to first hop, hop to hop, last hop to receipt."""
        out = []
        prev = self.ts_origin
        for label, ts in self.hops:
            out.append((label, ts - prev))
            prev = ts
        out.append((final_label or self.sink, self.recv_ns - prev))
        return out


class MetricsCollector:
    """Thread-safe sink for records produced by Sink kernels."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.records: list[SinkRecord] = []

    def record(self, rec: SinkRecord) -> None:
        with self._lock:
            self.records.append(rec)

    def snapshot(self) -> list[SinkRecord]:
        with self._lock:
            return list(self.records)

    def __len__(self) -> int:
        with self._lock:
            return len(self.records)


# Sources


class FrameSource(Kernel):
    """Camera stand-in: deterministic pseudo-random frames at ``hz``."""

    def __init__(self, instance_id: str, *, hz: float = 30.0, payload_bytes: int = 1024,
                 seed: int = 0, count: int | None = None, type_tag: str = "frame",
                 frequency: float | None = None, **common) -> None:
        hz = _positive("hz", hz)
        super().__init__(instance_id, frequency=frequency or hz, **common)
        self.payload_bytes = int(_count("payload_bytes", payload_bytes))
        if self.payload_bytes > 64 << 20:
            raise ConfigError("payload_bytes exceeds 64 MiB")
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        self.seed = seed
        self.count = _count("count", count, allow_none=True)
        self.type_tag = str(type_tag)
        self._pool: bytes | None = None
        self.ports.register_out_port("out")

    def frame(self, seq: int) -> memoryview:
        """Payload for ``seq``: a seq-dependent window into a seeded pool."""
        n = self.payload_bytes
        if self._pool is None:
            self._pool = random.Random(self.seed).randbytes(2 * n + 1)
        offset = (seq * 7919 + 1) % (n + 1)
        return memoryview(self._pool)[offset:offset + n]

    def step(self):
        if self.count is not None and self.steps >= self.count:
            return STOP
        msg = self.ports.get_output_placeholder("out")
        msg.type_tag = self.type_tag
        msg.payload = self.frame(msg.seq)
        self.ports.send_output("out", msg)
        return None


class EventSource(Kernel):
    """Keyboard stand-in: small events with exponential inter-arrival times."""

    def __init__(self, instance_id: str, *, mean_interval_ms: float = 1000.0, seed: int = 0,
                 payload_bytes: int = 16, count: int | None = None, **common) -> None:
        super().__init__(instance_id, **common)
        self.mean_interval_ms = _positive("mean_interval_ms", mean_interval_ms)
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        self.payload_bytes = int(_count("payload_bytes", payload_bytes))
        self.count = _count("count", count, allow_none=True)
        self.rng = random.Random(seed)
        self.ports.register_out_port("out")

    def next_interval_s(self) -> float:
        return self.rng.expovariate(1000.0 / self.mean_interval_ms)

    def step(self):
        if self.count is not None and self.steps >= self.count:
            return STOP
        self.sleep(self.next_interval_s())
        if self.stopping:
            return STOP
        msg = self.ports.get_output_placeholder("out")
        msg.type_tag = "event"
        msg.payload = _sized(msg.seq.to_bytes(8, "little"), self.payload_bytes)
        self.ports.send_output("out", msg)
        return None


# Transforms


class _Worker(Kernel):
    def __init__(self, instance_id: str, *, compute_ms: float = 0.0, busy: bool = False,
                 **common) -> None:
        super().__init__(instance_id, **common)
        self.compute_ms = _non_negative("compute_ms", compute_ms)
        self.busy = _flag("busy", busy)

    def work(self) -> None:
        self.sleep(self.compute_ms / 1000.0, busy=self.busy)


class DetectorStub(_Worker):
    """Object detector stand-in: frame in, small result out."""

    def __init__(self, instance_id: str, *, result_bytes: int = 64, **kw) -> None:
        super().__init__(instance_id, **kw)
        self.result_bytes = int(_count("result_bytes", result_bytes))
        self.ports.register_in_port("in", BLOCKING)
        self.ports.register_out_port("out")

    def step(self):
        frame = self.ports.get_input("in")
        self.work()
        out = self.ports.get_output_placeholder("out")
        out.inherit(frame)
        out.type_tag = "detection"
        out.attrs["origin_seq"] = frame.seq
        out.payload = _sized(hashlib.sha256(frame.payload).digest(), self.result_bytes)
        self.ports.send_output("out", out)


class CodecStub(_Worker):
    """Encoder/decoder stand-in: scales payload size by ``ratio``."""

    def __init__(self, instance_id: str, *, mode: str = "encode", ratio: float | None = None,
                 **kw) -> None:
        super().__init__(instance_id, **kw)
        if mode not in ("encode", "decode"):
            raise ConfigError(f"mode must be encode or decode, got {mode!r}")
        self.mode = mode
        if ratio is None:
            ratio = 0.05 if mode == "encode" else 20.0
        ratio = _positive("ratio", ratio)
        if mode == "encode" and ratio > 1:
            raise ConfigError(f"encode ratio must be in (0, 1], got {ratio}")
        if mode == "decode" and ratio < 1:
            raise ConfigError(f"decode ratio must be >= 1, got {ratio}")
        self.ratio = ratio
        self.ports.register_in_port("in", BLOCKING)
        self.ports.register_out_port("out")

    def transform(self, payload) -> Any:
        size = round(len(payload) * self.ratio)
        if self.mode == "encode":
            return payload[:size]
        return _sized(payload, size)

    def step(self):
        msg = self.ports.get_input("in")
        self.work()
        out = self.ports.get_output_placeholder("out")
        out.inherit(msg)
        out.type_tag = msg.type_tag
        out.attrs = dict(msg.attrs)
        out.attrs.setdefault("origin_seq", msg.seq)
        out.payload = self.transform(msg.payload)
        self.ports.send_output("out", out)


class RendererStub(_Worker):
    """Renderer stand-in.

    ``bg`` (the background frame) is a hard dependency; ``det`` and ``key``
    are optional. Each step renders one bg frame with the most recent
    detection and key event seen so far. The output carries the lineage of
    the latest detection it incorporated (the freshest sensor context it
    reflects), or of the bg frame before any detection has arrived.
    """

    DET_SEMANTICS = NONBLOCKING

    def __init__(self, instance_id: str, *, output_bytes: int = 1024, **kw) -> None:
        super().__init__(instance_id, **kw)
        self.output_bytes = int(_count("output_bytes", output_bytes))
        self.ports.register_in_port("bg", BLOCKING)
        self.ports.register_in_port("det", self.DET_SEMANTICS)
        self.ports.register_in_port("key", NONBLOCKING)
        self.ports.register_out_port("out")
        self.last_det: Message | None = None
        self.last_key: Message | None = None

    def _latest(self, tag: str) -> Message | None:
        port = self.ports.in_ports[tag]
        if port.semantics is BLOCKING:
            return self.ports.get_input(tag)
        newest = None
        while True:
            msg = self.ports.get_input(tag)
            if msg is None:
                return newest
            newest = msg

    def step(self):
        bg = self.ports.get_input("bg")
        det = self._latest("det")
        if det is not None:
            self.last_det = det
        key = self._latest("key")
        if key is not None:
            self.last_key = key
        self.work()
        out = self.ports.get_output_placeholder("out")
        out.inherit(self.last_det if self.last_det is not None else bg)
        out.type_tag = "scene"
        out.attrs = {"bg_seq": bg.seq, "bg_ts_origin": bg.ts_origin}
        if self.last_det is not None:
            out.attrs["det_seq"] = self.last_det.seq
            if "origin_seq" in self.last_det.attrs:
                out.attrs["det_origin_seq"] = self.last_det.attrs["origin_seq"]
        if self.last_key is not None:
            out.attrs["key_seq"] = self.last_key.seq
        seed = hashlib.sha256(bg.seq.to_bytes(8, "little") + bytes(bg.payload[:64])).digest()
        out.payload = _sized(seed, self.output_bytes)
        self.ports.send_output("out", out)


class BlockingRendererStub(RendererStub):
    """Renderer that waits for a detection result on every step."""

    DET_SEMANTICS = BLOCKING


class PoseEstimatorStub(_Worker):
    """SLAM pose estimator stand-in: IMU is required, camera is optional."""

    def __init__(self, instance_id: str, *, pose_bytes: int = 64, **kw) -> None:
        super().__init__(instance_id, **kw)
        self.pose_bytes = int(_count("pose_bytes", pose_bytes))
        self.ports.register_in_port("imu", BLOCKING)
        self.ports.register_in_port("cam", NONBLOCKING)
        self.ports.register_out_port("out")
        self.last_cam: Message | None = None

    def step(self):
        imu = self.ports.get_input("imu")
        cam = self.ports.get_input("cam")
        if cam is not None:
            self.last_cam = cam
        self.work()
        out = self.ports.get_output_placeholder("out")
        out.inherit(imu)
        out.type_tag = "pose"
        out.attrs = {"imu_seq": imu.seq}
        if self.last_cam is not None:
            out.attrs["cam_seq"] = self.last_cam.seq
        out.payload = _sized(hashlib.sha256(bytes(imu.payload)).digest(), self.pose_bytes)
        self.ports.send_output("out", out)


# Sinks


class Sink(_Worker):
    """Display stand-in; records every message it receives."""

    IN_TAG = "in"

    def __init__(self, instance_id: str, *, log_every: int = 0, keep_payloads: bool = False,
                 **kw) -> None:
        super().__init__(instance_id, **kw)
        self.log_every = int(_count("log_every", log_every))
        self.keep_payloads = _flag("keep_payloads", keep_payloads)
        self.metrics = MetricsCollector()
        self.ports.register_in_port(self.IN_TAG, BLOCKING)
        self.received = 0

    @property
    def records(self) -> list[SinkRecord]:
        return self.metrics.snapshot()

    def step(self):
        msg = self.ports.get_input(self.IN_TAG)
        recv = now_ns()
        self.work()
        self.metrics.record(SinkRecord(
            sink=self.stage, seq=msg.seq, ts_origin=msg.ts_origin, recv_ns=recv,
            payload_len=len(msg.payload), hops=list(msg.hops), attrs=dict(msg.attrs),
            payload=bytes(msg.payload) if self.keep_payloads else None,
        ))
        self.received += 1
        if self.log_every and self.received % self.log_every == 0:
            self.log.info("received %d messages (last seq %d)", self.received, msg.seq)


class ExampleKernel(Kernel):
    """The two-input, one-output kernel used in the documentation."""

    def __init__(self, instance_id: str, **common) -> None:
        super().__init__(instance_id, **common)
        self.ports.register_in_port("in1", BLOCKING)
        self.ports.register_in_port("in2", NONBLOCKING)
        self.ports.register_out_port("out")

    def step(self):
        in1 = self.ports.get_input("in1")
        in2 = self.ports.get_input("in2")
        out = self.ports.get_output_placeholder("out")
        out.inherit(in1)
        out.type_tag = in1.type_tag
        out.payload = in1.payload
        if in2 is not None:
            out.attrs["in2_seq"] = in2.seq
        self.ports.send_output("out", out)


class ExampleSink(Sink):
    IN_TAG = "input"


# Registry


class KernelRegistry:
    """Kernel types available to recipes, by type name."""

    def __init__(self, kernels=()) -> None:
        self._types: dict[str, type[Kernel]] = {}
        for cls in kernels:
            self.register(cls)

    def register(self, cls: type[Kernel], name: str | None = None) -> type[Kernel]:
        self._types[name or cls.type_name()] = cls
        return cls

    def __contains__(self, name: str) -> bool:
        return name in self._types

    def names(self) -> list[str]:
        return sorted(self._types)

    def get(self, name: str) -> type[Kernel]:
        try:
            return self._types[name]
        except KeyError:
            raise ConfigError(f"unknown kernel type {name!r}") from None

    def create(self, name: str, instance_id: str, params: dict | None = None) -> Kernel:
        cls = self.get(name)
        params = dict(params or {})
        try:
            inspect.signature(cls).bind(instance_id, **params)
            # Keyword arguments passed through **kw are only checked by the base class.
            return cls(instance_id, **params)
        except TypeError as exc:
            raise ConfigError(f"{name}: {exc}") from None

    def descriptor(self, name: str, instance_id: str = "", params: dict | None = None
                   ) -> KernelDescriptor:
        kernel = self.create(name, instance_id or name, params)
        desc = kernel.describe()
        return desc

    def fingerprint(self) -> str:
        """Hash of every registered kernel's source code."""
        h = hashlib.sha256()
        for name in self.names():
            cls = self._types[name]
            h.update(name.encode())
            for klass in cls.__mro__:
                if klass is object:
                    continue
                try:
                    h.update(inspect.getsource(klass).encode())
                except (OSError, TypeError):
                    h.update(klass.__qualname__.encode())
        return h.hexdigest()


BUILTIN_KERNELS = (
    FrameSource,
    EventSource,
    DetectorStub,
    CodecStub,
    RendererStub,
    BlockingRendererStub,
    PoseEstimatorStub,
    Sink,
    ExampleKernel,
    ExampleSink,
)


def default_registry() -> KernelRegistry:
    return KernelRegistry(BUILTIN_KERNELS)
