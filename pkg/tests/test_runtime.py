"""Messages, local channels, ports and the kernel run loop."""

import threading
import time

import pytest
from conftest import later, msg, timed

from flexpipe.errors import (
    ActivationError,
    ChannelClosed,
    ConfigError,
    EndOfStream,
    PortUsageError,
    RegistrationError,
)
from flexpipe.message import MAX_PAYLOAD, Message, now_ns
from flexpipe.runtime import (
    BLOCKING,
    NONBLOCKING,
    STOP,
    Direction,
    FrequencyManager,
    Kernel,
    Local,
    LocalChannel,
    OverflowPolicy,
    PortManager,
    RemoteDatagram,
    RemoteReliable,
    regulate_frequency,
    run_kernel,
)


# Message


def test_message_fork_shares_payload_but_not_hops():
    m = msg(payload=bytearray(b"abc"), hops=[("a", 1)])
    f = m.fork()
    assert f.payload is m.payload
    f.hops.append(("b", 2))
    assert m.hops == [("a", 1)]


def test_message_rejects_oversized_payload():
    with pytest.raises(ValueError):
        Message(payload=memoryview(bytearray(MAX_PAYLOAD + 1)))


def test_message_invariants():
    m = Message(ts_origin=10, hops=[("a", 10), ("b", 12)])
    m.check_invariants()
    with pytest.raises(AssertionError):
        Message(ts_origin=10, hops=[("a", 9)]).check_invariants()


def test_now_ns_is_monotonic():
    a = now_ns()
    b = now_ns()
    assert b >= a


# LocalChannel


def test_channel_capacity_must_be_positive():
    with pytest.raises(ConfigError):
        LocalChannel(0)


def test_channel_fifo_and_by_reference():
    ch = LocalChannel(4)
    items = [msg(i, payload=bytearray(10)) for i in range(3)]
    for m in items:
        assert ch.put(m)
    out = [ch.get() for _ in range(3)]
    assert [m.seq for m in out] == [0, 1, 2]
    assert all(a is b for a, b in zip(items, out))
    assert ch.stats.copies == 0


def test_channel_nonblocking_put_drops_new():
    ch = LocalChannel(1)
    ch.put(msg(1))
    assert ch.put(msg(2), block=False) is False
    assert ch.get().seq == 1
    assert ch.stats.dropped == 1


def test_channel_drop_oldest_policy():
    ch = LocalChannel(1, OverflowPolicy.DROP_OLDEST)
    ch.put(msg(1))
    assert ch.put(msg(2), block=False)
    assert ch.get().seq == 2


def test_channel_blocking_put_resumes_after_get():
    ch = LocalChannel(1)
    ch.put(msg(1))
    later(0.05, ch.get)
    ok, elapsed = timed(ch.put, msg(2))
    assert ok
    assert 0.04 <= elapsed < 0.5


def test_channel_timed_put_and_get():
    ch = LocalChannel(1)
    assert ch.get(timeout=0.02) is None
    ch.put(msg(1))
    assert ch.put(msg(2), timeout=0.02) is False


def test_channel_close_semantics():
    ch = LocalChannel(2)
    ch.put(msg(1))
    ch.close()
    with pytest.raises(ChannelClosed):
        ch.put(msg(2))
    assert ch.get().seq == 1
    with pytest.raises(EndOfStream):
        ch.get()
    with pytest.raises(EndOfStream):
        ch.get(block=False)


def test_channel_close_wakes_blocked_reader():
    ch = LocalChannel(1)
    later(0.05, ch.close)
    with pytest.raises(EndOfStream):
        ch.get()


def test_channel_never_exceeds_capacity_under_load():
    ch = LocalChannel(3)
    high = []
    stop = threading.Event()

    def producer():
        for i in range(2000):
            ch.put(msg(i), block=i % 2 == 0)
        stop.set()

    def watcher():
        while not stop.is_set():
            high.append(len(ch))

    threads = [threading.Thread(target=producer), threading.Thread(target=watcher)]
    for t in threads:
        t.start()
    got = 0
    while not (stop.is_set() and len(ch) == 0):
        if ch.get(timeout=0.01) is not None:
            got += 1
    for t in threads:
        t.join()
    assert max(high) <= 3
    assert ch.stats.high_water <= 3
    assert got + ch.stats.dropped == 2000


# Ports: registration


def test_register_ports_like_the_example_kernel():
    pm = PortManager("k")
    pm.register_in_port("in1", BLOCKING)
    pm.register_in_port("in2", "nonblocking")
    pm.register_out_port("out")
    pm.register_out_port("out2")
    d = pm.descriptor("ExampleKernel")
    assert d.in_ports == (("in1", BLOCKING), ("in2", NONBLOCKING))
    assert d.out_ports == ("out", "out2")
    assert pm.port("out").semantics is None
    assert not pm.port("in1").activated


@pytest.mark.parametrize("first,second", [("in", "in"), ("out", "out"), ("in", "out")])
def test_duplicate_registration(first, second):
    pm = PortManager("k")
    pm.register_in_port("p", BLOCKING) if first == "in" else pm.register_out_port("p")
    with pytest.raises(RegistrationError, match="'p'"):
        pm.register_in_port("p", BLOCKING) if second == "in" else pm.register_out_port("p")


def test_bad_semantics_value():
    with pytest.raises(ConfigError):
        PortManager("k").register_in_port("a", "sometimes")


# Ports: activation


def _pair(capacity=1, in_sem=BLOCKING, out_sem=BLOCKING):
    a, b = PortManager("a"), PortManager("b")
    a.register_out_port("out")
    b.register_in_port("in", in_sem)
    ch = LocalChannel(capacity)
    a.activate_port("out", Local(capacity), out_sem, channel=ch)
    b.activate_port("in", Local(capacity), channel=ch)
    return a, b, ch


def test_activate_local_output():
    pm = PortManager("k")
    pm.register_out_port("out")
    port = pm.activate_port("out", Local(1), BLOCKING)
    assert port.activated and port.channel.capacity == 1
    assert port.semantics is BLOCKING


def test_activation_errors():
    pm = PortManager("k")
    pm.register_in_port("in", BLOCKING)
    pm.register_out_port("out")
    with pytest.raises(ActivationError):
        pm.activate_port("nope", Local(1))
    with pytest.raises(ActivationError):
        pm.activate_port("in", Local(1), BLOCKING)
    with pytest.raises(ActivationError):
        pm.activate_port("out", Local(1))
    pm.activate_port("out", Local(1), NONBLOCKING)
    with pytest.raises(ActivationError):
        pm.activate_port("out", Local(1), NONBLOCKING)


def test_connection_state_checks():
    with pytest.raises(ConfigError):
        Local(0)
    with pytest.raises(ConfigError):
        RemoteReliable("127.0.0.1", 0)
    with pytest.raises(ConfigError):
        RemoteDatagram("127.0.0.1", 70000)


def test_activate_remote_datagram_input(ports):
    (port,) = ports(1)
    pm = PortManager("k")
    pm.register_in_port("in2", NONBLOCKING)
    p = pm.activate_port("in2", RemoteDatagram("*", port))
    try:
        assert p.channel.bound_port == port
        assert pm.get_input("in2") is None
    finally:
        pm.shutdown()


def test_unresolvable_host_is_an_activation_error():
    pm = PortManager("k")
    pm.register_out_port("out")
    with pytest.raises(ActivationError):
        pm.activate_port("out", RemoteDatagram("no-such-host.invalid", 9999), NONBLOCKING)


def test_unactivated_port_rejects_data_operations():
    pm = PortManager("k")
    pm.register_in_port("in", BLOCKING)
    pm.register_out_port("out")
    with pytest.raises(PortUsageError):
        pm.get_input("in")
    with pytest.raises(PortUsageError):
        pm.get_output_placeholder("out")
    with pytest.raises(PortUsageError):
        pm.send_output("out", Message())


def test_wrong_direction_usage():
    a, b, _ = _pair()
    with pytest.raises(PortUsageError):
        a.get_input("out")
    with pytest.raises(PortUsageError):
        b.get_output_placeholder("in")
    with pytest.raises(PortUsageError):
        b.send_output("in", Message())


def test_mark_unconnected_only_for_nonblocking():
    pm = PortManager("k")
    pm.register_in_port("hard", BLOCKING)
    pm.register_in_port("soft", NONBLOCKING)
    with pytest.raises(ActivationError, match="hard dependency"):
        pm.mark_unconnected("hard")
    pm.mark_unconnected("soft")
    assert pm.get_input("soft") is None


# Ports: data operations


def test_placeholder_seq_and_timestamp():
    a, b, _ = _pair(capacity=4)
    p1 = a.get_output_placeholder("out")
    p2 = a.get_output_placeholder("out")
    assert p2.seq == p1.seq + 1
    stamp = p1.ts_origin
    a.send_output("out", p1)
    got = b.get_input("in")
    assert got.ts_origin == stamp
    assert got.hops[-1][0] == "a"
    got.check_invariants()


def test_send_foreign_message_restamps_seq():
    a, b, _ = _pair(capacity=4)
    a.get_output_placeholder("out")
    m = Message(seq=999, ts_origin=now_ns())
    a.send_output("out", m)
    assert b.get_input("in").seq == 1


def test_seq_strictly_increasing_on_delivery():
    a, b, _ = _pair(capacity=64)
    for _ in range(50):
        a.send_output("out", a.get_output_placeholder("out"))
    seqs = [b.get_input("in").seq for _ in range(50)]
    assert seqs == sorted(set(seqs))


def test_stage_label_used_for_hops():
    pm = PortManager("id7", stage_label="encode")
    pm.register_out_port("out")
    ch = LocalChannel(1)
    pm.activate_port("out", Local(1), BLOCKING, channel=ch)
    pm.send_output("out", pm.get_output_placeholder("out"))
    assert ch.get().hops[0][0] == "encode"


def test_nonblocking_send_keeps_older_message():
    a, b, _ = _pair(out_sem=NONBLOCKING)
    first = a.get_output_placeholder("out")
    a.send_output("out", first)
    _, elapsed = timed(a.send_output, "out", a.get_output_placeholder("out"))
    assert elapsed < 0.001 + 0.01
    assert b.get_input("in").seq == first.seq
    assert a.port("out").stats.dropped == 1


def test_blocking_receive_waits_for_delayed_producer():
    a, b, _ = _pair()
    later(0.05, lambda: a.send_output("out", a.get_output_placeholder("out")))
    got, elapsed = timed(b.get_input, "in")
    assert got is not None
    assert 0.045 <= elapsed < 0.06 + 0.05


def test_branch_fanout_delivers_to_every_branch():
    a = PortManager("a")
    a.register_out_port("out")
    main = LocalChannel(4)
    a.activate_port("out", Local(4), BLOCKING, channel=main)
    branches = [LocalChannel(4), LocalChannel(4)]
    a.branch_output("out", "b1", Local(4), BLOCKING, channel=branches[0])
    a.branch_output("out", "b2", Local(4), NONBLOCKING, channel=branches[1])
    payload = bytearray(b"payload")
    m = a.get_output_placeholder("out")
    m.payload = payload
    a.send_output("out", m)
    got = [main.get(), branches[0].get(), branches[1].get()]
    assert all(g.payload is payload for g in got)
    assert len({id(g) for g in got}) == 3
    assert all(g.seq == m.seq for g in got)
    assert a.port("b2").direction is Direction.OUTPUT
    assert a.port("b2").semantics is NONBLOCKING


def test_branch_errors():
    a = PortManager("a")
    a.register_in_port("in", BLOCKING)
    a.register_out_port("out")
    with pytest.raises(ActivationError, match="input"):
        a.branch_output("in", "b", Local(1), BLOCKING)
    with pytest.raises(ActivationError):
        a.branch_output("missing", "b", Local(1), BLOCKING)
    a.branch_output("out", "b", Local(1), BLOCKING)
    with pytest.raises(ActivationError, match="duplicate"):
        a.branch_output("out", "b", Local(1), BLOCKING)


def test_nonblocking_branch_sees_subset_of_seqs():
    a = PortManager("a")
    a.register_out_port("out")
    main = LocalChannel(100)
    slow = LocalChannel(2)
    a.activate_port("out", Local(100), BLOCKING, channel=main)
    a.branch_output("out", "slow", Local(2), NONBLOCKING, channel=slow)
    for _ in range(10):
        a.send_output("out", a.get_output_placeholder("out"))
    sent = [main.get().seq for _ in range(10)]
    seen = [slow.get().seq for _ in range(len(slow))]
    assert sent == list(range(10))
    assert set(seen) <= set(sent) and seen == sorted(seen) and len(seen) == 2


def test_send_to_closed_downstream_retires_branch():
    a, b, ch = _pair()
    ch.close()
    a.send_output("out", a.get_output_placeholder("out"))
    assert a.port("out").dead


def test_nonblocking_receive_on_ended_channel_returns_none():
    a, b, ch = _pair(in_sem=NONBLOCKING)
    ch.close()
    assert b.get_input("in") is None
    assert b.is_closed("in")


# Kernel loop


class Counter(Kernel):
    def __init__(self, instance_id, limit=None, work=0.0, **kw):
        super().__init__(instance_id, **kw)
        self.ports.register_out_port("out")
        self.limit = limit
        self.work = work
        self.starts = []

    def step(self):
        self.starts.append(time.monotonic())
        if self.limit is not None and self.steps >= self.limit:
            return STOP
        if self.work:
            time.sleep(self.work)
        self.ports.send_output("out", self.ports.get_output_placeholder("out"))


class Reader(Kernel):
    def __init__(self, instance_id, **kw):
        super().__init__(instance_id, **kw)
        self.ports.register_in_port("in", BLOCKING)
        self.seen = []

    def step(self):
        self.seen.append(self.ports.get_input("in").seq)


def _wire(src, dst, capacity=16):
    ch = LocalChannel(capacity)
    src.ports.activate_port("out", Local(capacity), BLOCKING, channel=ch)
    dst.ports.activate_port("in", Local(capacity), channel=ch)
    return ch


def test_step_returning_stop_after_five():
    src, dst = Counter("src", limit=5), Reader("dst")
    _wire(src, dst)
    threads = [threading.Thread(target=run_kernel, args=(k,)) for k in (src, dst)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(2)
    assert dst.seen == [0, 1, 2, 3, 4]
    assert dst.failure is None and src.failure is None


def test_failure_stops_kernel_and_ends_downstream():
    class Boom(Counter):
        def step(self):
            if self.steps == 2:
                raise RuntimeError("boom")
            return super().step()

    src, dst = Boom("src"), Reader("dst")
    _wire(src, dst)
    threads = [threading.Thread(target=run_kernel, args=(k,)) for k in (src, dst)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(2)
    assert isinstance(src.failure, RuntimeError)
    assert dst.seen == [0, 1]
    assert dst.failure is None


def test_end_of_stream_is_distinct_from_absent():
    src, dst = Counter("src", limit=1), Reader("dst")
    _wire(src, dst)
    run_kernel(src)
    assert dst.ports.get_input("in").seq == 0
    with pytest.raises(EndOfStream):
        dst.ports.get_input("in")


def test_frequency_30hz_for_one_second():
    k = Counter("src", frequency=30)
    k.ports.activate_port("out", Local(1), NONBLOCKING)
    t = threading.Thread(target=run_kernel, args=(k,))
    t.start()
    time.sleep(1.0)
    k.request_stop()
    t.join(1)
    assert 29 <= len(k.starts) <= 32


def _periods(k):
    return [b - a for a, b in zip(k.starts, k.starts[1:])]


def test_regulate_100hz_with_short_work():
    k = Counter("src", frequency=100, work=0.001, limit=50)
    k.ports.activate_port("out", Local(1), NONBLOCKING)
    run_kernel(k)
    periods = _periods(k)[1:]
    mean = sum(periods) / len(periods)
    assert abs(mean - 0.010) <= 0.002


def test_regulate_does_not_add_delay_to_slow_steps():
    k = Counter("src", frequency=10, work=0.2, limit=4)
    k.ports.activate_port("out", Local(1), NONBLOCKING)
    run_kernel(k)
    for p in _periods(k)[:3]:
        assert 0.19 <= p < 0.24


def test_frequency_must_be_positive():
    with pytest.raises(ConfigError):
        FrequencyManager(0)
    with pytest.raises(ConfigError):
        Counter("x", frequency=-1)
    k = Counter("x")
    with pytest.raises(ConfigError):
        regulate_frequency(k, 0)


def test_regulate_frequency_helper():
    k = Counter("x")
    k.freq = FrequencyManager(50)
    k.freq.mark_start()
    _, elapsed = timed(regulate_frequency, k, 50)
    assert 0.015 <= elapsed < 0.04


def test_request_stop_wakes_blocked_reader():
    src, dst = Counter("src"), Reader("dst")
    _wire(src, dst)
    t = threading.Thread(target=run_kernel, args=(dst,))
    t.start()
    time.sleep(0.05)
    dst.request_stop()
    t.join(1)
    assert not t.is_alive()
    assert dst.failure is None


def test_sleep_returns_early_when_stopped():
    k = Counter("x")
    later(0.05, k.request_stop)
    _, elapsed = timed(k.sleep, 2.0)
    assert elapsed < 0.5
    k2 = Counter("y")
    _, elapsed = timed(k2.sleep, 0.02, True)
    assert elapsed >= 0.02


def test_exec_must_be_a_list_of_strings():
    with pytest.raises(ConfigError):
        Counter("x", exec="echo hi")
