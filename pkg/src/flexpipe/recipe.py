"""Pipeline recipes: YAML parsing, validation into metadata, and splitting.

A recipe lists kernel instances with the attributes of each port
(connection type, output semantics, remote endpoint, branching), the local
connections between them, and where each instance runs. Two layouts are
accepted. The list layout writes kernels as top-level list items, with the
connections in a ``- local_connections:`` item and placements in a
``- placements:`` item. The mapping layout uses the keys ``kernels``,
``local_connections`` and ``placements``. ``emit_recipe`` always writes
the mapping layout.

Parsing is structural (types, required and unknown keys). ``validate``
checks the recipe against the registered kernel types and produces the
metadata the deployer instantiates from.
"""

from __future__ import annotations

import ipaddress
import re
import socket
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any

import yaml

from .errors import ConfigError, RecipeError
from .kernels import KernelRegistry, default_registry
from .runtime.ports import (
    BLOCKING,
    NONBLOCKING,
    ConnectionState,
    Direction,
    KernelDescriptor,
    Local,
    PortSemantics,
    RemoteDatagram,
    RemoteReliable,
)

LOCAL_HOST = "local"
DEFAULT_QUEUE_SIZE = 8
DEFAULT_REMOTE_QUEUE = {"RTP": 1, "TCP": 8}
PROTOCOLS = ("TCP", "RTP")
CONNECTION_TYPES = ("local", "remote")


@dataclass(frozen=True)
class Violation:
    path: str
    message: str
    line: int | None = None

    def __str__(self) -> str:
        where = f"line {self.line}: " if self.line else ""
        return f"{where}{self.path}: {self.message}" if self.path else f"{where}{self.message}"


# Recipe model


@dataclass
class InputSpec:
    port_name: str
    connection_type: str = "local"
    # (protocol, listen_port) for remote inputs
    remote_info: tuple[str, int] | None = None
    queue_size: int | None = None


@dataclass
class OutputSpec:
    port_name: str
    connection_type: str = "local"
    semantics: str | None = None
    # (host, port, protocol) for remote outputs
    remote_info: tuple[str, int, str] | None = None
    branched_from: str | None = None


@dataclass
class KernelEntry:
    kernel: str
    id: str
    frequency: float | None = None
    params: dict[str, Any] = field(default_factory=dict)
    input: list[InputSpec] = field(default_factory=list)
    output: list[OutputSpec] = field(default_factory=list)


@dataclass
class LocalConnection:
    send_kernel: str
    send_port_name: str
    recv_kernel: str
    recv_port_name: str
    queue_size: int | None = None

    @property
    def capacity(self) -> int:
        return self.queue_size if self.queue_size is not None else DEFAULT_QUEUE_SIZE


@dataclass
class PipelineRecipe:
    kernels: list[KernelEntry] = field(default_factory=list)
    local_connections: list[LocalConnection] = field(default_factory=list)
    placements: dict[str, str] = field(default_factory=dict)
    # YAML line numbers by recipe path; not part of equality.
    lines: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def kernel(self, instance_id: str) -> KernelEntry | None:
        for entry in self.kernels:
            if entry.id == instance_id:
                return entry
        return None

    def placement(self, instance_id: str) -> str:
        return self.placements.get(instance_id, LOCAL_HOST)

    def hosts(self) -> list[str]:
        seen = []
        for entry in self.kernels:
            host = self.placement(entry.id)
            if host not in seen:
                seen.append(host)
        return seen

    def line_of(self, path: str) -> int | None:
        while path:
            if path in self.lines:
                return self.lines[path]
            parent = re.sub(r"(\.[^.\[]+|\[\d+\])$", "", path)
            if parent == path:
                break
            path = parent
        return None


# Parsing


class _Builder:
    """Converts composed YAML nodes to plain values, remembering line numbers."""

    def __init__(self) -> None:
        self.lines: dict[str, int] = {}
        self.violations: list[Violation] = []
        self._scalars = yaml.constructor.SafeConstructor()

    def error(self, path: str, message: str, line: int | None = None) -> None:
        if line is None:
            line = self.lines.get(path)
        self.violations.append(Violation(path, message, line))

    def value(self, node: yaml.Node, path: str) -> Any:
        self.lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            out = {}
            for key_node, value_node in node.value:
                key = self._scalar(key_node)
                if not isinstance(key, str):
                    self.error(path, f"mapping key {key!r} is not a string", key_node.start_mark.line + 1)
                    continue
                sub = f"{path}.{key}" if path else key
                if key in out:
                    self.error(sub, "duplicate key", key_node.start_mark.line + 1)
                    continue
                self.lines[sub] = key_node.start_mark.line + 1
                out[key] = self.value(value_node, sub)
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self.value(item, f"{path}[{i}]") for i, item in enumerate(node.value)]
        return self._scalar(node)

    def _scalar(self, node: yaml.Node) -> Any:
        if not isinstance(node, yaml.ScalarNode):
            return node
        return self._scalars.construct_object(node, deep=True)


def _compose(text: str | bytes) -> yaml.Node | None:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise RecipeError([Violation("", f"recipe is not UTF-8: {exc}")]) from None
    try:
        return yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise RecipeError([Violation("", f"YAML syntax error: {exc}", line)]) from None


def _split_list_layout(b: _Builder, node: yaml.SequenceNode) -> dict:
    doc: dict[str, Any] = {"kernels": []}
    for i, item in enumerate(node.value):
        line = item.start_mark.line + 1
        keys = []
        if isinstance(item, yaml.MappingNode):
            keys = [k.value for k, _ in item.value if isinstance(k, yaml.ScalarNode)]
        if keys in (["local_connections"], ["placements"]):
            key = keys[0]
            if key in doc:
                b.error(key, f"more than one {key} item", line)
                continue
            b.lines[key] = line
            doc[key] = b.value(item.value[0][1], key)
        else:
            k = len(doc["kernels"])
            doc["kernels"].append(b.value(item, f"kernels[{k}]"))
    return doc


def _check_keys(b: _Builder, raw: dict, path: str, required: tuple, optional: tuple) -> bool:
    ok = True
    for key in raw:
        if key not in required and key not in optional:
            b.error(f"{path}.{key}", f"unknown key {key!r}")
            ok = False
    for key in required:
        if key not in raw:
            b.error(path, f"missing required key {key!r}")
            ok = False
    return ok


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _string(b: _Builder, raw: dict, key: str, path: str) -> str | None:
    value = raw.get(key)
    if not isinstance(value, str) or not value:
        b.error(f"{path}.{key}", f"{key} must be a non-empty string, got {value!r}")
        return None
    return value


def _queue_size(b: _Builder, raw: dict, path: str) -> int | None:
    if "queue_size" not in raw or raw["queue_size"] is None:
        return None
    value = raw["queue_size"]
    if not _is_int(value) or value < 1:
        b.error(f"{path}.queue_size", f"queue_size must be an integer >= 1, got {value!r}")
        return None
    return value


def _protocol(b: _Builder, value: Any, path: str) -> str | None:
    if isinstance(value, str) and value.upper() in PROTOCOLS:
        return value.upper()
    b.error(path, f"protocol must be TCP or RTP, got {value!r}")
    return None


def _port_number(b: _Builder, value: Any, path: str) -> int | None:
    if _is_int(value) and 1 <= value <= 65535:
        return value
    b.error(path, f"port must be an integer in 1..65535, got {value!r}")
    return None


def _connection_type(b: _Builder, raw: dict, path: str) -> str | None:
    value = raw.get("connection_type")
    if value not in CONNECTION_TYPES:
        b.error(f"{path}.connection_type", f"connection_type must be local or remote, got {value!r}")
        return None
    return value


def _parse_input(b: _Builder, raw: Any, path: str) -> InputSpec | None:
    if not isinstance(raw, dict):
        b.error(path, "input entry must be a mapping")
        return None
    if "semantics" in raw:
        b.error(f"{path}.semantics", "input semantics are set by the kernel, not the recipe")
        raw = {k: v for k, v in raw.items() if k != "semantics"}
    ok = _check_keys(b, raw, path, ("port_name", "connection_type"), ("remote_info", "queue_size"))
    name = _string(b, raw, "port_name", path) if "port_name" in raw else None
    ctype = _connection_type(b, raw, path) if "connection_type" in raw else None
    queue = _queue_size(b, raw, path)
    if raw.get("queue_size") is not None and queue is None:
        ok = False
    info = None
    ipath = f"{path}.remote_info"
    if ctype == "remote":
        value = raw.get("remote_info")
        if not isinstance(value, list) or len(value) != 2:
            b.error(ipath if "remote_info" in raw else path,
                    f"remote input needs remote_info: [protocol, listen_port], got {value!r}")
            ok = False
        else:
            proto = _protocol(b, value[0], f"{ipath}[0]")
            port = _port_number(b, value[1], f"{ipath}[1]")
            if proto is None or port is None:
                ok = False
            else:
                info = (proto, port)
    elif ctype == "local" and raw.get("remote_info") is not None:
        b.error(ipath, "remote_info is only valid for remote connections")
        ok = False
    if not ok or name is None or ctype is None:
        return None
    return InputSpec(name, ctype, info, queue)


def _parse_output(b: _Builder, raw: Any, path: str, earlier: list[str]) -> OutputSpec | None:
    if not isinstance(raw, dict):
        b.error(path, "output entry must be a mapping")
        return None
    ok = _check_keys(b, raw, path, ("port_name", "connection_type"),
                     ("semantics", "remote_info", "branched_from"))
    name = _string(b, raw, "port_name", path) if "port_name" in raw else None
    ctype = _connection_type(b, raw, path) if "connection_type" in raw else None
    semantics = raw.get("semantics")
    if semantics is not None:
        try:
            semantics = PortSemantics.parse(semantics).value
        except ConfigError as exc:
            b.error(f"{path}.semantics", str(exc))
            ok = False
    info = None
    ipath = f"{path}.remote_info"
    if ctype == "remote":
        value = raw.get("remote_info")
        if not isinstance(value, list) or len(value) != 3:
            b.error(ipath if "remote_info" in raw else path,
                    f"remote output needs remote_info: [host, port, protocol], got {value!r}")
            ok = False
        else:
            host = value[0]
            if not isinstance(host, str) or not host:
                b.error(f"{ipath}[0]", f"host must be a non-empty string, got {host!r}")
                ok = False
            port = _port_number(b, value[1], f"{ipath}[1]")
            proto = _protocol(b, value[2], f"{ipath}[2]")
            if ok and port is not None and proto is not None:
                info = (host, port, proto)
            else:
                ok = False
    elif ctype == "local" and raw.get("remote_info") is not None:
        b.error(ipath, "remote_info is only valid for remote connections")
        ok = False
    branched = raw.get("branched_from")
    if branched is not None:
        if not isinstance(branched, str) or branched not in earlier:
            b.error(f"{path}.branched_from",
                    f"branched_from must name an output declared earlier on this kernel, got {branched!r}")
            ok = False
    if not ok or name is None or ctype is None:
        return None
    return OutputSpec(name, ctype, semantics, info, branched)


def _parse_kernel(b: _Builder, raw: Any, path: str) -> KernelEntry | None:
    if not isinstance(raw, dict):
        b.error(path, "kernel entry must be a mapping")
        return None
    ok = _check_keys(b, raw, path, ("kernel", "id"), ("frequency", "params", "input", "output"))
    ktype = _string(b, raw, "kernel", path) if "kernel" in raw else None
    kid = _string(b, raw, "id", path) if "id" in raw else None
    freq = raw.get("frequency")
    if freq is not None and (isinstance(freq, bool) or not isinstance(freq, (int, float)) or not freq > 0):
        b.error(f"{path}.frequency", f"frequency must be a positive number, got {freq!r}")
        ok = False
    params = raw.get("params") or {}
    if not isinstance(params, dict):
        b.error(f"{path}.params", "params must be a mapping")
        ok, params = False, {}
    inputs, outputs = [], []
    # Output names seen so far, including entries that had other errors,
    # so one bad entry does not also fail every branch declared after it.
    declared: list[str] = []
    for key in ("input", "output"):
        items = raw.get(key) or []
        if not isinstance(items, list):
            b.error(f"{path}.{key}", f"{key} must be a list")
            ok = False
            continue
        for i, item in enumerate(items):
            ipath = f"{path}.{key}[{i}]"
            if key == "input":
                spec = _parse_input(b, item, ipath)
                if spec is not None:
                    inputs.append(spec)
            else:
                spec = _parse_output(b, item, ipath, declared)
                if isinstance(item, dict) and isinstance(item.get("port_name"), str):
                    declared.append(item["port_name"])
                if spec is not None:
                    outputs.append(spec)
            ok = ok and spec is not None
    if not ok or ktype is None or kid is None:
        return None
    return KernelEntry(ktype, kid, freq, dict(params), inputs, outputs)


def _parse_connection(b: _Builder, raw: Any, path: str) -> LocalConnection | None:
    if not isinstance(raw, dict):
        b.error(path, "local connection must be a mapping")
        return None
    keys = ("send_kernel", "send_port_name", "recv_kernel", "recv_port_name")
    ok = _check_keys(b, raw, path, keys, ("queue_size",))
    values = [_string(b, raw, k, path) if k in raw else None for k in keys]
    queue = _queue_size(b, raw, path)
    if raw.get("queue_size") is not None and queue is None:
        ok = False
    if not ok or None in values:
        return None
    return LocalConnection(*values, queue_size=queue)


def parse_recipe(text: str | bytes) -> PipelineRecipe:
    """Parse recipe YAML. Raises RecipeError listing every structural problem."""
    node = _compose(text)
    b = _Builder()
    if node is None:
        raise RecipeError([Violation("", "empty recipe")])
    if isinstance(node, yaml.SequenceNode):
        doc = _split_list_layout(b, node)
    elif isinstance(node, yaml.MappingNode):
        doc = b.value(node, "")
        for key in doc:
            if key not in ("kernels", "local_connections", "placements"):
                b.error(key, f"unknown key {key!r}")
    else:
        raise RecipeError([Violation("", "recipe must be a list or a mapping", node.start_mark.line + 1)])

    recipe = PipelineRecipe(lines=b.lines)
    kernels = doc.get("kernels")
    if not isinstance(kernels, list) or not kernels:
        b.error("kernels", "at least one kernel is required")
        kernels = []
    for i, raw in enumerate(kernels):
        entry = _parse_kernel(b, raw, f"kernels[{i}]")
        if entry is not None:
            recipe.kernels.append(entry)

    conns = doc.get("local_connections") or []
    if not isinstance(conns, list):
        b.error("local_connections", "local_connections must be a list")
        conns = []
    for i, raw in enumerate(conns):
        conn = _parse_connection(b, raw, f"local_connections[{i}]")
        if conn is not None:
            recipe.local_connections.append(conn)

    placements = doc.get("placements") or {}
    if not isinstance(placements, dict):
        b.error("placements", "placements must map instance ids to host labels")
        placements = {}
    for kid, host in placements.items():
        if not isinstance(host, str) or not host:
            b.error(f"placements.{kid}", f"host label must be a non-empty string, got {host!r}")
        else:
            recipe.placements[kid] = host

    if b.violations:
        raise RecipeError(b.violations)
    return recipe


def load_recipe(path) -> PipelineRecipe:
    with open(path, "rb") as fh:
        return parse_recipe(fh.read())


# Emitting


def recipe_to_dict(recipe: PipelineRecipe) -> dict:
    kernels = []
    for entry in recipe.kernels:
        item: dict[str, Any] = {"kernel": entry.kernel, "id": entry.id}
        if entry.frequency is not None:
            item["frequency"] = entry.frequency
        if entry.params:
            item["params"] = dict(entry.params)
        if entry.input:
            item["input"] = []
            for spec in entry.input:
                d: dict[str, Any] = {"port_name": spec.port_name, "connection_type": spec.connection_type}
                if spec.remote_info is not None:
                    d["remote_info"] = list(spec.remote_info)
                if spec.queue_size is not None:
                    d["queue_size"] = spec.queue_size
                item["input"].append(d)
        if entry.output:
            item["output"] = []
            for spec in entry.output:
                d = {"port_name": spec.port_name, "connection_type": spec.connection_type}
                if spec.semantics is not None:
                    d["semantics"] = spec.semantics
                if spec.remote_info is not None:
                    d["remote_info"] = list(spec.remote_info)
                if spec.branched_from is not None:
                    d["branched_from"] = spec.branched_from
                item["output"].append(d)
        kernels.append(item)
    doc: dict[str, Any] = {"kernels": kernels}
    if recipe.local_connections:
        doc["local_connections"] = []
        for c in recipe.local_connections:
            d = {"send_kernel": c.send_kernel, "send_port_name": c.send_port_name,
                 "recv_kernel": c.recv_kernel, "recv_port_name": c.recv_port_name}
            if c.queue_size is not None:
                d["queue_size"] = c.queue_size
            doc["local_connections"].append(d)
    if recipe.placements:
        doc["placements"] = dict(recipe.placements)
    return doc


def emit_recipe(recipe: PipelineRecipe) -> str:
    """Canonical YAML text; ``parse_recipe(emit_recipe(r)) == r``."""
    return yaml.safe_dump(recipe_to_dict(recipe), sort_keys=False, default_flow_style=None,
                          allow_unicode=True)


# Validation into metadata


@dataclass
class PortPlan:
    tag: str
    direction: Direction
    state: ConnectionState
    semantics: PortSemantics | None
    queue_size: int | None = None
    branched_from: str | None = None
    unconnected: bool = False
    # Host as written in the recipe for remote outputs (may be a placement label).
    target_host: str | None = None
    protocol: str | None = None


@dataclass
class KernelPlan:
    instance_id: str
    kernel_type: str
    host: str
    params: dict
    descriptor: KernelDescriptor
    ports: list[PortPlan] = field(default_factory=list)

    def port(self, tag: str) -> PortPlan | None:
        for plan in self.ports:
            if plan.tag == tag:
                return plan
        return None


@dataclass(frozen=True)
class LocalEdge:
    send_kernel: str
    send_port: str
    recv_kernel: str
    recv_port: str
    capacity: int


@dataclass(frozen=True)
class RemoteEdge:
    protocol: str
    port: int
    # (instance_id, tag); None when that end lies outside the recipe.
    sender: tuple[str, str] | None
    receiver: tuple[str, str] | None
    target_host: str | None = None


@dataclass
class PipelineMetadata:
    recipe: PipelineRecipe
    kernels: list[KernelPlan]
    local_edges: list[LocalEdge]
    remote_edges: list[RemoteEdge]

    def kernel(self, instance_id: str) -> KernelPlan:
        for plan in self.kernels:
            if plan.instance_id == instance_id:
                return plan
        raise KeyError(instance_id)

    def hosts(self) -> list[str]:
        return self.recipe.hosts()

    def remote_inputs(self) -> list[tuple[str, PortPlan]]:
        return [(k.instance_id, p) for k in self.kernels for p in k.ports
                if p.direction is Direction.INPUT and isinstance(p.state, (RemoteReliable, RemoteDatagram))]


def kernel_params(entry: KernelEntry) -> dict:
    params = dict(entry.params)
    if entry.frequency is not None:
        params["frequency"] = entry.frequency
    return params


@lru_cache(maxsize=256)
def _resolvable(host: str) -> bool:
    try:
        ipaddress.ip_address(host)
        return True
    except ValueError:
        pass
    if host == "localhost":
        return True
    try:
        socket.gethostbyname(host)
        return True
    except OSError:
        return False


def _default_out_semantics(spec: OutputSpec) -> PortSemantics:
    if spec.semantics is not None:
        return PortSemantics.parse(spec.semantics)
    if spec.connection_type == "remote" and spec.remote_info and spec.remote_info[2] == "RTP":
        return NONBLOCKING
    return BLOCKING


def _state_for(protocol: str, host: str, port: int) -> ConnectionState:
    if protocol == "TCP":
        return RemoteReliable(host, port)
    return RemoteDatagram(host, port)


def validate(recipe: PipelineRecipe, registry: KernelRegistry | None = None,
             *, check_placement: bool = True, labels: Any = ()) -> PipelineMetadata:
    """Check ``recipe`` against the registry; return metadata or raise RecipeError.

    Remote output hosts may name any placement label used in the recipe,
    ``local``, or one of the extra ``labels`` (used when validating one part
    of a split recipe).
    """
    registry = registry or default_registry()
    out: list[Violation] = []

    def err(path: str, message: str) -> None:
        out.append(Violation(path, message, recipe.line_of(path)))

    ids: dict[str, int] = {}
    for i, entry in enumerate(recipe.kernels):
        if entry.id in ids:
            err(f"kernels[{i}].id", f"duplicate instance id {entry.id!r}")
        else:
            ids[entry.id] = i

    labels = set(recipe.placements.values()) | {LOCAL_HOST} | set(labels)
    for kid in recipe.placements:
        if kid not in ids:
            err(f"placements.{kid}", f"placement for undeclared kernel {kid!r}")

    plans: dict[str, KernelPlan] = {}
    # (instance, tag) -> path of the recipe entry for each local endpoint
    local_outs: dict[tuple[str, str], str] = {}
    local_ins: dict[tuple[str, str], str] = {}
    listen: dict[tuple[str, str, int], str] = {}

    for i, entry in enumerate(recipe.kernels):
        path = f"kernels[{i}]"
        if ids.get(entry.id) != i:
            continue
        if entry.kernel not in registry:
            err(f"{path}.kernel", f"unknown kernel type {entry.kernel!r}")
            continue
        params = kernel_params(entry)
        try:
            desc = registry.descriptor(entry.kernel, entry.id, params)
        except (ConfigError, TypeError, ValueError) as exc:
            err(f"{path}.params", f"invalid parameters for {entry.kernel}: {exc}")
            continue
        host = recipe.placement(entry.id)
        plan = KernelPlan(entry.id, entry.kernel, host, params, desc)
        registered_in = dict(desc.in_ports)
        seen: set[str] = set()

        for j, spec in enumerate(entry.input):
            ipath = f"{path}.input[{j}]"
            if spec.port_name not in registered_in:
                err(ipath, f"unregistered port {spec.port_name} on {entry.kernel}")
                continue
            if spec.port_name in seen:
                err(ipath, f"port {spec.port_name} configured more than once")
                continue
            seen.add(spec.port_name)
            sem = registered_in[spec.port_name]
            if spec.connection_type == "local":
                if spec.queue_size is not None:
                    err(f"{ipath}.queue_size", "set queue_size on the local connection instead")
                    continue
                local_ins[(entry.id, spec.port_name)] = ipath
                plan.ports.append(PortPlan(spec.port_name, Direction.INPUT, Local(1), None))
            else:
                proto, port = spec.remote_info
                key = (host, proto, port)
                if key in listen:
                    err(f"{ipath}.remote_info",
                        f"remote port collision: {proto} {port} on host {host!r} already used by {listen[key]}")
                    continue
                listen[key] = f"{entry.id}.{spec.port_name}"
                queue = spec.queue_size or DEFAULT_REMOTE_QUEUE[proto]
                plan.ports.append(PortPlan(spec.port_name, Direction.INPUT, _state_for(proto, "*", port),
                                           None, queue_size=queue, protocol=proto))

        for tag, sem in desc.in_ports:
            if tag in seen:
                continue
            if sem is BLOCKING:
                err(path, f"hard dependency unconnected: blocking input {entry.id}.{tag}")
            else:
                plan.ports.append(PortPlan(tag, Direction.INPUT, Local(1), None, unconnected=True))

        outputs_seen: set[str] = set()
        for j, spec in enumerate(entry.output):
            opath = f"{path}.output[{j}]"
            is_registered = spec.port_name in desc.out_ports
            if spec.branched_from is None and not is_registered:
                err(opath, f"unregistered port {spec.port_name} on {entry.kernel}")
                continue
            if spec.branched_from is not None:
                if is_registered or spec.port_name in registered_in:
                    err(opath, f"branch name {spec.port_name} collides with a registered port")
                    continue
                if spec.branched_from not in desc.out_ports:
                    err(f"{opath}.branched_from",
                        f"{spec.branched_from} is not a registered output of {entry.kernel}")
                    continue
            if spec.port_name in outputs_seen:
                err(opath, f"port {spec.port_name} configured more than once")
                continue
            outputs_seen.add(spec.port_name)
            sem = _default_out_semantics(spec)
            if spec.connection_type == "local":
                local_outs[(entry.id, spec.port_name)] = opath
                state: ConnectionState = Local(1)
                plan.ports.append(PortPlan(spec.port_name, Direction.OUTPUT, state, sem,
                                           branched_from=spec.branched_from))
            else:
                target, port, proto = spec.remote_info
                if target not in labels and not _resolvable(target):
                    err(f"{opath}.remote_info[0]", f"cannot resolve host {target!r}")
                    continue
                plan.ports.append(PortPlan(spec.port_name, Direction.OUTPUT, _state_for(proto, target, port),
                                           sem, branched_from=spec.branched_from,
                                           target_host=target, protocol=proto))

        for tag in desc.out_ports:
            if tag not in outputs_seen:
                err(path, f"output port {entry.id}.{tag} is not connected")
        plans[entry.id] = plan

    # Local connections
    local_edges: list[LocalEdge] = []
    used_out: dict[tuple[str, str], str] = {}
    used_in: dict[tuple[str, str], str] = {}
    for i, conn in enumerate(recipe.local_connections):
        path = f"local_connections[{i}]"
        ok = True
        for kid, tag, table, used, side in (
            (conn.send_kernel, conn.send_port_name, local_outs, used_out, "send"),
            (conn.recv_kernel, conn.recv_port_name, local_ins, used_in, "recv"),
        ):
            if kid not in ids:
                err(f"{path}.{side}_kernel", f"undeclared kernel {kid!r}")
                ok = False
            elif (kid, tag) not in table:
                if kid in plans or kid not in ids:
                    err(f"{path}.{side}_port_name",
                        f"{kid}.{tag} is not declared as a local {'output' if side == 'send' else 'input'}")
                ok = False
            elif (kid, tag) in used:
                err(path, f"{kid}.{tag} already used by {used[(kid, tag)]}")
                ok = False
        if not ok:
            continue
        if check_placement and recipe.placement(conn.send_kernel) != recipe.placement(conn.recv_kernel):
            err(path, f"local connection crosses hosts "
                      f"({recipe.placement(conn.send_kernel)} -> {recipe.placement(conn.recv_kernel)})")
            continue
        used_out[(conn.send_kernel, conn.send_port_name)] = path
        used_in[(conn.recv_kernel, conn.recv_port_name)] = path
        local_edges.append(LocalEdge(conn.send_kernel, conn.send_port_name,
                                     conn.recv_kernel, conn.recv_port_name, conn.capacity))
        for kid, tag in ((conn.send_kernel, conn.send_port_name), (conn.recv_kernel, conn.recv_port_name)):
            port = plans[kid].port(tag)
            port.state = Local(conn.capacity)

    for key, path in local_outs.items():
        if key not in used_out and key[0] in plans:
            err(path, f"local output {key[0]}.{key[1]} has no local connection")
    for key, path in local_ins.items():
        if key not in used_in and key[0] in plans:
            err(path, f"local input {key[0]}.{key[1]} has no local connection")

    remote_edges = _match_remote(plans, labels, err) if not out else []
    if out:
        raise RecipeError(out)
    kernels = [plans[e.id] for e in recipe.kernels if e.id in plans]
    return PipelineMetadata(recipe, kernels, local_edges, remote_edges)


def _match_remote(plans: dict[str, KernelPlan], labels: set[str], err) -> list[RemoteEdge]:
    """Pair remote outputs with the remote inputs they target, where both are in the recipe."""
    inputs: dict[tuple[str, int], list[tuple[str, str, str]]] = {}
    for plan in plans.values():
        for p in plan.ports:
            if p.direction is Direction.INPUT and p.protocol is not None:
                inputs.setdefault((p.protocol, p.state.port), []).append((plan.host, plan.instance_id, p.tag))
    edges = []
    matched: set[tuple[str, str]] = set()
    for plan in plans.values():
        for p in plan.ports:
            if p.direction is not Direction.OUTPUT or p.protocol is None:
                continue
            port = p.state.port
            candidates = inputs.get((p.protocol, port), [])
            if p.target_host in labels:
                candidates = [c for c in candidates if c[0] == p.target_host]
            other = "RTP" if p.protocol == "TCP" else "TCP"
            mismatch = [c for c in inputs.get((other, port), [])
                        if p.target_host not in labels or c[0] == p.target_host]
            if not candidates and mismatch:
                err(f"kernels.{plan.instance_id}.{p.tag}",
                    f"protocol mismatch: {p.protocol} output targets {other} input "
                    f"{mismatch[0][1]}.{mismatch[0][2]}")
                continue
            receiver = None
            if len(candidates) == 1:
                receiver = (candidates[0][1], candidates[0][2])
                if receiver in matched:
                    err(f"kernels.{plan.instance_id}.{p.tag}",
                        f"remote input {receiver[0]}.{receiver[1]} already has a sender")
                    continue
                matched.add(receiver)
            edges.append(RemoteEdge(p.protocol, port, (plan.instance_id, p.tag), receiver, p.target_host))
    for (proto, port), items in inputs.items():
        for _, kid, tag in items:
            if (kid, tag) not in matched:
                edges.append(RemoteEdge(proto, port, None, (kid, tag)))
    return edges


# Splitting


def split_recipe(recipe: PipelineRecipe) -> dict[str, PipelineRecipe]:
    """Partition ``recipe`` by placement into one recipe part per host label."""
    problems = []
    for i, conn in enumerate(recipe.local_connections):
        a, b = recipe.placement(conn.send_kernel), recipe.placement(conn.recv_kernel)
        if a != b:
            path = f"local_connections[{i}]"
            problems.append(Violation(path, f"local connection crosses hosts ({a} -> {b})",
                                      recipe.line_of(path)))
    if problems:
        raise RecipeError(problems)
    parts: dict[str, PipelineRecipe] = {}
    for entry in recipe.kernels:
        host = recipe.placement(entry.id)
        part = parts.setdefault(host, PipelineRecipe())
        part.kernels.append(entry)
        if entry.id in recipe.placements:
            part.placements[entry.id] = recipe.placements[entry.id]
    for conn in recipe.local_connections:
        parts[recipe.placement(conn.send_kernel)].local_connections.append(conn)
    return parts


def merge_parts(parts: dict[str, PipelineRecipe]) -> PipelineRecipe:
    merged = PipelineRecipe()
    for part in parts.values():
        merged.kernels.extend(part.kernels)
        merged.local_connections.extend(part.local_connections)
        merged.placements.update(part.placements)
    return merged


def edge_multiset(recipe: PipelineRecipe) -> list[tuple]:
    """Every connection in ``recipe`` with its attributes, sorted."""
    edges = [("local", c.send_kernel, c.send_port_name, c.recv_kernel, c.recv_port_name, c.capacity)
             for c in recipe.local_connections]
    for entry in recipe.kernels:
        for spec in entry.output:
            if spec.remote_info is not None:
                edges.append(("remote-out", entry.id, spec.port_name, *spec.remote_info,
                              spec.semantics or "", spec.branched_from or ""))
        for spec in entry.input:
            if spec.remote_info is not None:
                edges.append(("remote-in", entry.id, spec.port_name, *spec.remote_info,
                              spec.queue_size or 0))
    return sorted(edges, key=repr)


def resolve_target(host: str, hosts: dict[str, str] | None) -> str:
    """Map a placement label to an address using ``hosts``; other names pass through."""
    if hosts and host in hosts:
        return hosts[host]
    if host == LOCAL_HOST:
        return "127.0.0.1"
    return host


def bundled_recipe_path(name: str):
    """Path of a recipe shipped with the package, e.g. ``ar1_perception``."""
    from importlib import resources

    if not name.endswith(".yaml"):
        name += ".yaml"
    return resources.files("flexpipe") / "recipes" / name
