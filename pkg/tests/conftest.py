import socket
import threading
import time

import pytest

from flexpipe.message import Message, now_ns

# criterion number -> list of (test id, passed)
_CRITERIA: dict[int, list[tuple[str, bool]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA.setdefault(n, []).append((item.nodeid, rep.passed))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        ok = all(passed for _, passed in results)
        terminalreporter.write_line(
            f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} ({sum(p for _, p in results)}/{len(results)} checks)")


def free_port(kind=socket.SOCK_STREAM) -> int:
    with socket.socket(socket.AF_INET, kind) as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def free_ports(n: int) -> list[int]:
    """Ports free for both TCP and UDP right now."""
    out = []
    while len(out) < n:
        port = free_port()
        try:
            with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
                s.bind(("0.0.0.0", port))
        except OSError:
            continue
        if port not in out:
            out.append(port)
    return out


@pytest.fixture
def ports():
    return free_ports


def msg(seq=0, payload=b"x", tag="t", hops=None, attrs=None) -> Message:
    return Message(type_tag=tag, seq=seq, ts_origin=now_ns(), hops=list(hops or []),
                   payload=payload, attrs=dict(attrs or {}))


def timed(fn, *args, **kw):
    """Run ``fn`` and return (result, elapsed seconds)."""
    t0 = time.perf_counter()
    result = fn(*args, **kw)
    return result, time.perf_counter() - t0


def later(delay: float, fn, *args):
    """Call ``fn(*args)`` on a helper thread after ``delay`` seconds; returns the thread."""
    t = threading.Thread(target=lambda: (time.sleep(delay), fn(*args)), daemon=True)
    t.start()
    return t


def wait_until(predicate, timeout=5.0, interval=0.01) -> bool:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return True
        time.sleep(interval)
    return predicate()


def local_recipe(kernels, edges, placements=None) -> str:
    """YAML recipe text from compact kernel and edge lists.

    ``kernels`` holds ``(type, id, params)`` tuples; ``edges`` holds
    ``("a.out", "b.in", queue_size, semantics)`` tuples (the last two
    optional). Every port named by an edge is declared as a local port.
    """
    import yaml

    entries = {kid: {"kernel": ktype, "id": kid, "params": dict(params or {}), "input": [], "output": []}
               for ktype, kid, params in kernels}
    conns = []
    for edge in edges:
        src, dst = edge[0], edge[1]
        queue = edge[2] if len(edge) > 2 else None
        sem = edge[3] if len(edge) > 3 else "blocking"
        (skid, sport), (rkid, rport) = src.split("."), dst.split(".")
        entries[skid]["output"].append({"port_name": sport, "connection_type": "local", "semantics": sem})
        entries[rkid]["input"].append({"port_name": rport, "connection_type": "local"})
        conn = {"send_kernel": skid, "send_port_name": sport, "recv_kernel": rkid, "recv_port_name": rport}
        if queue is not None:
            conn["queue_size"] = queue
        conns.append(conn)
    doc = {"kernels": list(entries.values()), "local_connections": conns}
    if placements:
        doc["placements"] = placements
    return yaml.safe_dump(doc, sort_keys=False)


def spawn_daemon(port: int, timeout: float = 15.0):
    """Start ``python3 -m flexpipe serve`` in its own process; returns the Popen
    once it reports that it is listening."""
    import subprocess
    import sys

    proc = subprocess.Popen([sys.executable, "-m", "flexpipe", "serve", "--port", str(port),
                             "--host", "127.0.0.1"],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    if not line.startswith("listening on"):
        proc.kill()
        raise RuntimeError(f"daemon did not start: {line!r} {proc.stderr.read()}")
    return proc


def stop_daemon(proc, timeout: float = 10.0) -> str:
    """SIGTERM the daemon and return the rest of its stdout."""
    import signal

    if proc.poll() is None:
        proc.send_signal(signal.SIGTERM)
    out, _ = proc.communicate(timeout=timeout)
    return out


@pytest.fixture
def daemon_proc():
    """A loopback daemon in a separate process, stopped after the test."""
    port = free_ports(1)[0]
    proc = spawn_daemon(port)
    proc.port = port
    yield proc
    stop_daemon(proc)
