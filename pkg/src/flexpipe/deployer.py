"""Pipeline manager: instantiate kernels from metadata, wire their ports, and
run them; plus the request-listener daemon and distributed deployment.

Control protocol (daemon port, reliable transport): each request and reply
is one serialized Message whose ``type_tag`` is DEPLOY, TEARDOWN, STATUS or
REPLY and whose payload is a UTF-8 JSON object.

    DEPLOY    {"uuid", "recipe": YAML text of one host part, "hosts": {label: address}}
    TEARDOWN  {"uuid"}
    STATUS    {}
    REPLY     {"accepted", "violations": [...], "ready_ports": [[instance, port, bound]], ...}
"""

from __future__ import annotations

import enum
import json
import logging
import subprocess
import threading
import time
import uuid as uuidlib
from dataclasses import dataclass, field
from typing import Any

from .errors import (
    ActivationError,
    ConfigError,
    DecodeError,
    DeploymentError,
    EndOfStream,
    FlexpipeError,
    RecipeError,
    TransportError,
)
from .kernels import KernelRegistry, Sink, SinkRecord, default_registry
from .message import Message, now_ns
from .recipe import (
    LOCAL_HOST,
    PipelineMetadata,
    PipelineRecipe,
    emit_recipe,
    parse_recipe,
    resolve_target,
    split_recipe,
    validate,
)
from .runtime.channel import LocalChannel
from .runtime.kernel import Kernel, run_kernel
from .runtime.ports import Direction, Local, RemoteDatagram, RemoteReliable
from .transport.adapters import TransportOptions
from .transport.reliable import ReliableEndpoint, reliable_connect, reliable_listen

log = logging.getLogger("flexpipe.deployer")

DEFAULT_GRACE_S = 5.0
CONTROL_TAGS = ("DEPLOY", "TEARDOWN", "STATUS")


class RunState(enum.Enum):
    CREATED = "created"
    RUNNING = "running"
    STOPPED = "stopped"
    FAILED = "failed"


class PipelineState(enum.Enum):
    CREATED = "created"
    RUNNING = "running"
    PARTIAL = "partial"
    STOPPED = "stopped"
    FAILED = "failed"


class EventLog:
    """Timestamped deployment events, in the order they happened."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.events: list[tuple[int, str, str]] = []

    def add(self, event: str, detail: str = "") -> None:
        with self._lock:
            self.events.append((time.monotonic_ns(), event, detail))
        log.debug("%s %s", event, detail)

    def of(self, event: str) -> list[tuple[int, str, str]]:
        with self._lock:
            return [e for e in self.events if e[1] == event]

    def first(self, event: str) -> int | None:
        found = self.of(event)
        return found[0][0] if found else None

    def last(self, event: str) -> int | None:
        found = self.of(event)
        return found[-1][0] if found else None


@dataclass
class KernelRun:
    kernel: Kernel | None
    instance_id: str
    kernel_type: str
    state: RunState = RunState.CREATED
    cause: str | None = None
    thread: threading.Thread | None = None
    process: subprocess.Popen | None = None

    def describe(self) -> str:
        return f"{self.state.value}({self.cause})" if self.cause else self.state.value


class PipelineHandle:
    """Controls the kernels of one instantiated pipeline (or pipeline part)."""

    def __init__(self, uuid: str | None = None, events: EventLog | None = None) -> None:
        self.uuid = uuid or uuidlib.uuid4().hex
        self.events = events or EventLog()
        self.runs: dict[str, KernelRun] = {}
        self.metadata: PipelineMetadata | None = None
        self._lock = threading.Lock()
        self._stopped = False
        self._started = False
        self.started_ns: int | None = None

    def __repr__(self) -> str:
        return f"<PipelineHandle {self.uuid[:8]} {self.state.value} kernels={len(self.runs)}>"

    # introspection

    @property
    def instance_ids(self) -> list[str]:
        return list(self.runs)

    @property
    def instance_count(self) -> int:
        return len(self.runs)

    def kernel(self, instance_id: str) -> Kernel:
        return self.runs[instance_id].kernel

    @property
    def kernels(self) -> list[Kernel]:
        return [r.kernel for r in self.runs.values() if r.kernel is not None]

    def kernel_states(self) -> dict[str, str]:
        self._refresh()
        return {kid: run.describe() for kid, run in self.runs.items()}

    @property
    def failures(self) -> dict[str, str]:
        self._refresh()
        return {kid: run.cause or "failed" for kid, run in self.runs.items()
                if run.state is RunState.FAILED}

    @property
    def state(self) -> PipelineState:
        self._refresh()
        states = [r.state for r in self.runs.values()]
        if not states:
            return PipelineState.FAILED if self.failures else PipelineState.CREATED
        if any(s is RunState.FAILED for s in states):
            return PipelineState.FAILED
        if all(s is RunState.RUNNING for s in states):
            return PipelineState.RUNNING
        if all(s is RunState.CREATED for s in states):
            return PipelineState.CREATED
        if all(s is RunState.STOPPED for s in states):
            return PipelineState.STOPPED
        return PipelineState.PARTIAL

    def _refresh(self) -> None:
        for run in self.runs.values():
            if run.state is RunState.RUNNING and run.thread is not None and not run.thread.is_alive():
                self._finish(run)

    def _finish(self, run: KernelRun) -> None:
        failure = run.kernel.failure if run.kernel is not None else None
        if failure is not None:
            run.state = RunState.FAILED
            run.cause = f"{type(failure).__name__}: {failure}"
        elif run.state is not RunState.FAILED:
            run.state = RunState.STOPPED

    def sinks(self) -> list[Sink]:
        return [k for k in self.kernels if isinstance(k, Sink)]

    def records(self) -> list[SinkRecord]:
        out: list[SinkRecord] = []
        for sink in self.sinks():
            out.extend(sink.metrics.snapshot())
        out.sort(key=lambda r: r.recv_ns)
        return out

    def ready_ports(self) -> list[tuple[str, str, int]]:
        """(instance, port, bound listen port) for every remote input."""
        out = []
        for kid, run in self.runs.items():
            if run.kernel is None:
                continue
            for tag, port in run.kernel.ports.in_ports.items():
                bound = getattr(port.channel, "bound_port", None)
                if bound is not None:
                    out.append((kid, tag, bound))
        return out

    # lifecycle

    def start(self) -> None:
        with self._lock:
            if self.state is PipelineState.FAILED:
                raise DeploymentError(f"cannot start a failed pipeline: {self.failures}")
            if self._started:
                return
            self._started = True
            self.started_ns = now_ns()
            for kid, run in self.runs.items():
                kernel = run.kernel
                if kernel.exec_cmd:
                    try:
                        run.process = subprocess.Popen(kernel.exec_cmd)
                        self.events.add("exec_started", f"{kid}: {' '.join(kernel.exec_cmd)}")
                    except OSError as exc:
                        self.events.add("exec_failed", f"{kid}: {exc}")
                run.thread = threading.Thread(target=run_kernel, args=(kernel,),
                                              name=f"kernel:{kid}", daemon=True)
                run.state = RunState.RUNNING
            for kid, run in self.runs.items():
                run.thread.start()
                self.events.add("kernel_started", kid)

    def wait(self, timeout: float | None = None) -> bool:
        """Wait for every kernel to finish on its own. True if all did."""
        deadline = None if timeout is None else time.monotonic() + timeout
        for run in self.runs.values():
            if run.thread is None:
                continue
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            run.thread.join(remaining)
            if run.thread.is_alive():
                return False
        self._refresh()
        return True

    def stop(self, grace: float = DEFAULT_GRACE_S) -> None:
        """Stop all kernels; idempotent. Stragglers after ``grace`` are marked failed."""
        with self._lock:
            if self._stopped:
                return
            self._stopped = True
        for run in self.runs.values():
            if run.kernel is not None:
                run.kernel.request_stop()
        deadline = time.monotonic() + grace
        for kid, run in self.runs.items():
            if run.thread is not None:
                run.thread.join(max(0.0, deadline - time.monotonic()))
                if run.thread.is_alive():
                    run.state = RunState.FAILED
                    run.cause = f"did not stop within {grace:g} s grace"
                    self.events.add("kernel_detached", kid)
                    continue
            if run.state is RunState.RUNNING:
                self._finish(run)
            elif run.state is RunState.CREATED:
                run.state = RunState.STOPPED
            if run.process is not None and run.process.poll() is None:
                run.process.terminate()
                try:
                    run.process.wait(1.0)
                except subprocess.TimeoutExpired:
                    run.process.kill()
        for run in self.runs.values():
            if run.kernel is not None:
                run.kernel.ports.shutdown()
        self.events.add("pipeline_stopped", self.uuid)

    def __enter__(self) -> "PipelineHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def _fail_all(handle: PipelineHandle, kid: str | None, cause: str) -> PipelineHandle:
    if kid is not None and kid in handle.runs:
        handle.runs[kid].state = RunState.FAILED
        handle.runs[kid].cause = cause
    for run in handle.runs.values():
        if run.kernel is not None:
            run.kernel.ports.shutdown()
    handle._stopped = True
    handle.events.add("instantiate_failed", f"{kid}: {cause}")
    return handle


def instantiate(
    metadata: PipelineMetadata,
    registry: KernelRegistry | None = None,
    *,
    options: TransportOptions | None = None,
    hosts: dict[str, str] | None = None,
    uuid: str | None = None,
    events: EventLog | None = None,
) -> PipelineHandle:
    """Construct kernels and activate their ports; nothing runs yet.

    Remote inputs are bound first, then local queues, then remote
    connectors. On any failure every opened port is released and the
    returned handle is in the FAILED state with the cause recorded on the
    offending kernel.
    """
    registry = registry or default_registry()
    handle = PipelineHandle(uuid, events)
    handle.metadata = metadata
    base = options or TransportOptions()
    opts = TransportOptions(**{**base.__dict__, "on_event": handle.events.add})

    for plan in metadata.kernels:
        run = KernelRun(None, plan.instance_id, plan.kernel_type)
        handle.runs[plan.instance_id] = run
        try:
            run.kernel = registry.create(plan.kernel_type, plan.instance_id, plan.params)
        except (ConfigError, TypeError, ValueError) as exc:
            cause = f"unknown kernel type {plan.kernel_type!r}" if plan.kernel_type not in registry \
                else f"{type(exc).__name__}: {exc}"
            return _fail_all(handle, plan.instance_id, cause)
        handle.events.add("kernel_created", plan.instance_id)

    def ports_of(kid: str):
        return handle.runs[kid].kernel.ports

    try:
        # 1. listeners
        current = None
        for plan in metadata.kernels:
            current = plan.instance_id
            for p in plan.ports:
                if p.direction is Direction.INPUT and isinstance(p.state, (RemoteReliable, RemoteDatagram)):
                    ports_of(plan.instance_id).activate_port(p.tag, p.state, queue_size=p.queue_size,
                                                             options=opts)
                elif p.direction is Direction.INPUT and p.unconnected:
                    ports_of(plan.instance_id).mark_unconnected(p.tag)
        # 2. local queues
        for edge in metadata.local_edges:
            current = edge.send_kernel
            channel = LocalChannel(edge.capacity,
                                   name=f"{edge.send_kernel}.{edge.send_port}->{edge.recv_kernel}.{edge.recv_port}")
            state = Local(edge.capacity)
            sender = metadata.kernel(edge.send_kernel).port(edge.send_port)
            sp = ports_of(edge.send_kernel)
            if sender.branched_from is None:
                sp.activate_port(edge.send_port, state, sender.semantics, channel=channel)
            else:
                sp.branch_output(sender.branched_from, edge.send_port, state, sender.semantics,
                                 channel=channel)
            current = edge.recv_kernel
            ports_of(edge.recv_kernel).activate_port(edge.recv_port, state, channel=channel)
        # 3. connectors
        for plan in metadata.kernels:
            current = plan.instance_id
            for p in plan.ports:
                if p.direction is not Direction.OUTPUT or isinstance(p.state, Local):
                    continue
                address = resolve_target(p.target_host, hosts)
                state = type(p.state)(address, p.state.port)
                pm = ports_of(plan.instance_id)
                if p.branched_from is None:
                    pm.activate_port(p.tag, state, p.semantics, options=opts)
                else:
                    pm.branch_output(p.branched_from, p.tag, state, p.semantics, options=opts)
    except (ActivationError, ConfigError, TransportError) as exc:
        return _fail_all(handle, current, f"{type(exc).__name__}: {exc}")
    handle.events.add("instantiated", handle.uuid)
    return handle


def deploy_local(recipe: PipelineRecipe, registry: KernelRegistry | None = None,
                 **kw) -> PipelineHandle:
    """Validate ``recipe`` and instantiate it in this process (all placements)."""
    registry = registry or default_registry()
    metadata = validate(recipe, registry, check_placement=False)
    handle = instantiate(metadata, registry, **kw)
    if handle.state is PipelineState.FAILED:
        raise DeploymentError(f"instantiation failed: {handle.failures}")
    return handle


# Control protocol


def _control_message(tag: str, body: dict) -> Message:
    return Message(type_tag=tag, ts_origin=now_ns(), payload=json.dumps(body).encode())


def _decode_body(msg: Message) -> dict:
    try:
        body = json.loads(bytes(msg.payload).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise DecodeError(f"request body is not JSON: {exc}", 0) from None
    if not isinstance(body, dict):
        raise DecodeError("request body must be a JSON object", 0)
    return body


class Daemon:
    """Request listener hosting pipeline parts deployed by remote clients."""

    def __init__(self, port: int, registry: KernelRegistry | None = None, host: str = "0.0.0.0",
                 options: TransportOptions | None = None) -> None:
        self.registry = registry or default_registry()
        self.listener = reliable_listen(port, host)
        self.port = self.listener.port
        self.options = options or TransportOptions()
        self.pipelines: dict[str, PipelineHandle] = {}
        self._lock = threading.Lock()
        self._uuid_locks: dict[str, threading.Lock] = {}
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._thread: threading.Thread | None = None

    def start(self) -> "Daemon":
        self._thread = threading.Thread(target=self.serve_forever, name="daemon", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        log.info("daemon listening on %d", self.port)
        while not self._stop.is_set():
            endpoint = self.listener.accept(timeout=0.2)
            if endpoint is None:
                continue
            t = threading.Thread(target=self._session, args=(endpoint,), name="daemon-session",
                                 daemon=True)
            self._threads.append(t)
            t.start()

    def _session(self, endpoint: ReliableEndpoint) -> None:
        try:
            while not self._stop.is_set():
                try:
                    msg = endpoint.recv(timeout=0.2)
                except DecodeError as exc:
                    endpoint.send(_control_message("REPLY", {"accepted": False, "error": f"decode error: {exc}"}))
                    continue
                if msg is None:
                    continue
                reply = self.handle(msg)
                endpoint.send(_control_message("REPLY", reply))
        except (EndOfStream, TransportError):
            pass
        finally:
            endpoint.close()

    def handle(self, msg: Message) -> dict:
        tag = msg.type_tag
        if tag not in CONTROL_TAGS:
            return {"accepted": False, "error": f"unknown request {tag!r}"}
        try:
            body = _decode_body(msg)
        except DecodeError as exc:
            return {"accepted": False, "error": f"decode error: {exc}"}
        if tag == "STATUS":
            with self._lock:
                return {"accepted": True,
                        "pipelines": {u: h.state.value for u, h in self.pipelines.items()}}
        uuid = body.get("uuid")
        if not isinstance(uuid, str) or not uuid:
            return {"accepted": False, "error": "request needs a uuid"}
        if tag == "TEARDOWN":
            return {"accepted": self.teardown(uuid)}
        return self.deploy(uuid, body)

    def deploy(self, uuid: str, body: dict) -> dict:
        with self._lock:
            lock = self._uuid_locks.setdefault(uuid, threading.Lock())
        with lock:
            with self._lock:
                if uuid in self.pipelines:
                    return {"accepted": False, "violations": ["duplicate pipeline"], "error": "duplicate pipeline"}
            text = body.get("recipe")
            hosts = body.get("hosts") or {}
            if not isinstance(text, str) or not isinstance(hosts, dict):
                return {"accepted": False, "error": "DEPLOY needs a recipe string and a hosts map"}
            try:
                metadata = validate(parse_recipe(text), self.registry, check_placement=False,
                                    labels=hosts)
            except RecipeError as exc:
                return {"accepted": False, "violations": [str(v) for v in exc.violations]}
            opts = TransportOptions(**{**self.options.__dict__, "wait_connected": False})
            handle = instantiate(metadata, self.registry, options=opts, hosts=hosts, uuid=uuid)
            if handle.state is PipelineState.FAILED:
                return {"accepted": False,
                        "violations": [f"{k}: {v}" for k, v in handle.failures.items()]}
            handle.start()
            with self._lock:
                self.pipelines[uuid] = handle
            return {"accepted": True, "violations": [],
                    "ready_ports": [list(p) for p in handle.ready_ports()],
                    "instances": handle.instance_ids}

    def teardown(self, uuid: str) -> bool:
        with self._lock:
            handle = self.pipelines.pop(uuid, None)
        if handle is None:
            return False
        handle.stop()
        return True

    def close(self) -> None:
        self._stop.set()
        with self._lock:
            uuids = list(self.pipelines)
        for uuid in uuids:
            self.teardown(uuid)
        self.listener.close()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(2.0)


def serve(port: int, registry: KernelRegistry | None = None, stop: threading.Event | None = None,
          host: str = "0.0.0.0") -> None:
    """Run a daemon until ``stop`` is set (or forever)."""
    daemon = Daemon(port, registry, host).start()
    try:
        (stop or threading.Event()).wait()
    finally:
        daemon.close()


class DaemonClient:
    def __init__(self, host: str, port: int, timeout: float = 5.0, attempts: int = 1) -> None:
        self.host, self.port = host, port
        self.endpoint = reliable_connect(host, port, timeout=timeout, attempts=attempts)
        self.local_address = self.endpoint._sock.getsockname()[0]

    def request(self, tag: str, body: dict | None = None, timeout: float = 30.0) -> dict:
        self.endpoint.send(_control_message(tag, body or {}))
        reply = self.endpoint.recv(timeout=timeout)
        if reply is None:
            raise TransportError(f"no reply from daemon {self.host}:{self.port} within {timeout} s")
        return _decode_body(reply)

    def send_raw(self, data: bytes) -> None:
        self.endpoint._write([data])

    def close(self) -> None:
        self.endpoint.close()


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 1 <= int(port) <= 65535:
        raise ConfigError(f"expected host:port, got {text!r}")
    return host, int(port)


@dataclass
class RemotePart:
    label: str
    address: tuple[str, int]
    uuid: str
    ready_ports: list = field(default_factory=list)
    instances: list = field(default_factory=list)


class DistributedHandle(PipelineHandle):
    """Local pipeline part plus the remote parts deployed for it."""

    def __init__(self, uuid: str, events: EventLog) -> None:
        super().__init__(uuid, events)
        self.remote: list[RemotePart] = []

    @property
    def instance_count(self) -> int:
        return len(self.runs) + sum(len(part.instances) for part in self.remote)

    def stop(self, grace: float = DEFAULT_GRACE_S) -> None:
        first = not self._stopped
        super().stop(grace)
        if first:
            _teardown_remote(self.remote, self.events)


def _teardown_remote(parts: list[RemotePart], events: EventLog) -> None:
    for part in parts:
        try:
            client = DaemonClient(*part.address)
            try:
                client.request("TEARDOWN", {"uuid": part.uuid})
            finally:
                client.close()
            events.add("remote_teardown", part.label)
        except (TransportError, DecodeError) as exc:
            log.warning("teardown of %s on %s failed: %s", part.uuid, part.label, exc)


def deploy_distributed(
    recipe: PipelineRecipe,
    registry: KernelRegistry | None = None,
    servers: dict[str, str] | None = None,
    *,
    options: TransportOptions | None = None,
    uuid: str | None = None,
) -> DistributedHandle:
    """Deploy remote parts to their daemons first, then the local part.

    ``servers`` maps placement labels to daemon ``host:port`` addresses. Any
    rejection tears down the parts already deployed and raises
    DeploymentError; the local part is never instantiated in that case.
    """
    registry = registry or default_registry()
    servers = dict(servers or {})
    metadata = validate(recipe, registry)
    parts = split_recipe(recipe)
    missing = [h for h in parts if h != LOCAL_HOST and h not in servers]
    if missing:
        raise DeploymentError(f"no server address for placement(s): {', '.join(missing)}")
    addresses = {label: parse_address(servers[label]) for label in parts if label != LOCAL_HOST}
    uuid = uuid or uuidlib.uuid4().hex
    handle = DistributedHandle(uuid, EventLog())
    handle.metadata = metadata
    hosts = {label: addr[0] for label, addr in addresses.items()}

    for label, address in addresses.items():
        try:
            client = DaemonClient(*address)
        except TransportError as exc:
            _teardown_remote(handle.remote, handle.events)
            raise DeploymentError(f"cannot reach daemon for {label!r} at {address}: {exc}") from exc
        try:
            part_hosts = dict(hosts)
            part_hosts[LOCAL_HOST] = client.local_address
            handle.events.add("remote_deploy", label)
            reply = client.request("DEPLOY", {"uuid": uuid, "recipe": emit_recipe(parts[label]),
                                              "hosts": part_hosts})
        except (TransportError, DecodeError) as exc:
            _teardown_remote(handle.remote, handle.events)
            raise DeploymentError(f"deploy to {label!r} failed: {exc}") from exc
        finally:
            client.close()
        if not reply.get("accepted"):
            _teardown_remote(handle.remote, handle.events)
            reasons = reply.get("violations") or [reply.get("error", "rejected")]
            raise DeploymentError(f"{label!r} rejected the pipeline: {'; '.join(map(str, reasons))}")
        part = RemotePart(label, address, uuid, reply.get("ready_ports", []), reply.get("instances", []))
        handle.remote.append(part)
        for kid, tag, bound in part.ready_ports:
            handle.events.add("listen_bound", f"{label}:{kid}.{tag} :{bound}")

    local = parts.get(LOCAL_HOST)
    if local is not None:
        local_meta = validate(local, registry, check_placement=False, labels=hosts)
        opts = options or TransportOptions()
        part_handle = instantiate(local_meta, registry, options=opts, hosts=hosts, uuid=uuid,
                                  events=handle.events)
        if part_handle.state is PipelineState.FAILED:
            _teardown_remote(handle.remote, handle.events)
            raise DeploymentError(f"local part failed: {part_handle.failures}")
        handle.runs = part_handle.runs
    return handle


def deploy(recipe: PipelineRecipe, registry: KernelRegistry | None = None,
           servers: dict[str, str] | None = None, **kw) -> PipelineHandle:
    """Deploy in-process when every placement is local, else distribute."""
    if all(h == LOCAL_HOST for h in recipe.hosts()):
        return deploy_local(recipe, registry, **kw)
    return deploy_distributed(recipe, registry, servers, **kw)


__all__ = [
    "Daemon",
    "DaemonClient",
    "DistributedHandle",
    "EventLog",
    "KernelRun",
    "PipelineHandle",
    "PipelineState",
    "RunState",
    "deploy",
    "deploy_distributed",
    "deploy_local",
    "instantiate",
    "parse_address",
    "serve",
]
