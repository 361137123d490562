"""Built-in synthetic kernels and the kernel registry."""

import threading
import time

import pytest
from conftest import local_recipe
from oracles import (
    DETECTOR_RATE_50MS_HZ,
    ENCODED_1080P_RATIO_005,
    FRAME_1080P_BYTES,
    FRAMES_30HZ_2S_RANGE,
    POISSON_100MS_5S_RANGE,
)

from flexpipe.deployer import deploy_local
from flexpipe.errors import ConfigError
from flexpipe.kernels import (
    CodecStub,
    EventSource,
    FrameSource,
    KernelRegistry,
    MetricsCollector,
    SinkRecord,
    default_registry,
)
from flexpipe.message import Message
from flexpipe.recipe import parse_recipe
from flexpipe.runtime import BLOCKING, NONBLOCKING, Local, LocalChannel, run_kernel


def run_for(text, seconds):
    handle = deploy_local(parse_recipe(text))
    with handle:
        handle.start()
        time.sleep(seconds)
    return handle


def src_sink(params, seconds):
    return run_for(local_recipe([("FrameSource", "cam", params), ("Sink", "display", {})],
                                [("cam.out", "display.in", 64)]), seconds)


def _drain_source(kernel, n):
    ch = LocalChannel(n + 1)
    kernel.ports.activate_port("out", Local(n + 1), BLOCKING, channel=ch)
    kernel.count = n
    run_kernel(kernel)
    return [ch.get() for _ in range(n)]


# Sources


def test_frame_source_rate():
    handle = src_sink({"hz": 30, "payload_bytes": 64}, 2.0)
    lo, hi = FRAMES_30HZ_2S_RANGE
    assert lo <= handle.kernel("display").received <= hi


def test_frame_source_1080p_payload_length():
    msgs = _drain_source(FrameSource("cam", hz=1000, payload_bytes=FRAME_1080P_BYTES), 3)
    assert all(len(m.payload) == FRAME_1080P_BYTES for m in msgs)


def test_frame_source_is_deterministic_and_varies_by_seq():
    a = _drain_source(FrameSource("a", hz=1000, payload_bytes=256, seed=5), 5)
    b = _drain_source(FrameSource("b", hz=1000, payload_bytes=256, seed=5), 5)
    c = _drain_source(FrameSource("c", hz=1000, payload_bytes=256, seed=6), 5)
    assert [bytes(m.payload) for m in a] == [bytes(m.payload) for m in b]
    assert [bytes(m.payload) for m in a] != [bytes(m.payload) for m in c]
    assert len({bytes(m.payload) for m in a}) == 5


@pytest.mark.parametrize("params", [{"hz": 0}, {"payload_bytes": -1}, {"seed": "x"},
                                    {"payload_bytes": 65 << 20}])
def test_frame_source_param_checks(params):
    with pytest.raises(ConfigError):
        FrameSource("cam", **params)


def test_event_source_poisson_count():
    k = EventSource("keys", mean_interval_ms=100, seed=3)
    intervals = [k.next_interval_s() for _ in range(2000)]
    # count of arrivals in the first 5 s of the seeded schedule
    t, n = 0.0, 0
    for dt in intervals:
        t += dt
        if t > 5.0:
            break
        n += 1
    lo, hi = POISSON_100MS_5S_RANGE
    assert lo <= n <= hi


def test_event_source_live_count():
    handle = run_for(local_recipe(
        [("EventSource", "keys", {"mean_interval_ms": 100, "seed": 1}), ("Sink", "display", {})],
        [("keys.out", "display.in")]), 5.0)
    lo, hi = POISSON_100MS_5S_RANGE
    assert lo <= handle.kernel("display").received <= hi


def test_event_source_seeded_and_checked():
    a = [EventSource("a", seed=4).next_interval_s() for _ in range(1)]
    x, y = EventSource("x", seed=4), EventSource("y", seed=4)
    assert [x.next_interval_s() for _ in range(10)] == [y.next_interval_s() for _ in range(10)]
    assert a
    with pytest.raises(ConfigError):
        EventSource("k", mean_interval_ms=0)


# Detector


def detect(ms):
    return local_recipe(
        [("FrameSource", "cam", {"hz": 30, "payload_bytes": 128}),
         ("DetectorStub", "det", {"compute_ms": ms}), ("Sink", "display", {})],
        [("cam.out", "det.in", 1, "nonblocking"), ("det.out", "display.in", 8)])


def test_detector_rate_bound_by_compute():
    handle = run_for(detect(50), 3.0)
    rate = handle.kernel("display").received / 3.0
    assert abs(rate - DETECTOR_RATE_50MS_HZ) <= 0.1 * DETECTOR_RATE_50MS_HZ
    assert handle.kernel("cam").ports.port("out").stats.dropped > 0


def test_detector_zero_compute_follows_input_rate():
    handle = run_for(detect(0), 2.0)
    assert 56 <= handle.kernel("display").received <= 62


def test_detector_result_carries_frame_lineage():
    handle = run_for(detect(10), 0.5)
    recs = handle.records()
    assert recs
    for r in recs:
        assert r.attrs["origin_seq"] == r.seq or r.attrs["origin_seq"] >= 0
        assert [h[0] for h in r.hops] == ["cam", "det"]
        assert r.payload_len == 64


# Codec


def test_codec_sizes():
    enc = CodecStub("e", mode="encode", ratio=0.05)
    out = enc.transform(memoryview(bytes(FRAME_1080P_BYTES)))
    assert len(out) == ENCODED_1080P_RATIO_005
    dec = CodecStub("d", mode="decode", ratio=20)
    assert abs(len(dec.transform(out)) - FRAME_1080P_BYTES) <= 20


@pytest.mark.parametrize("params", [{"ratio": 0}, {"ratio": -1}, {"mode": "encode", "ratio": 2},
                                    {"mode": "decode", "ratio": 0.5}, {"mode": "zip"},
                                    {"compute_ms": -1}, {"busy": "yes"}])
def test_codec_param_checks(params):
    with pytest.raises(ConfigError):
        CodecStub("c", **params)


def test_codec_preserves_origin():
    handle = run_for(local_recipe(
        [("FrameSource", "cam", {"hz": 50, "payload_bytes": 1000, "count": 5}),
         ("CodecStub", "enc", {"mode": "encode", "ratio": 0.1, "stage": "encode"}),
         ("CodecStub", "dec", {"mode": "decode", "ratio": 10, "stage": "decode"}),
         ("Sink", "display", {})],
        [("cam.out", "enc.in"), ("enc.out", "dec.in"), ("dec.out", "display.in")]), 0.5)
    recs = handle.records()
    assert [r.seq for r in recs] == list(range(5))
    assert all(r.payload_len == 1000 for r in recs)
    assert all([h[0] for h in r.hops] == ["cam", "encode", "decode"] for r in recs)


# Renderer


def render(renderer):
    return local_recipe(
        [("FrameSource", "cam", {"hz": 30, "payload_bytes": 64}),
         ("FrameSource", "slow", {"hz": 5, "payload_bytes": 8, "type_tag": "det"}),
         (renderer, "renderer", {"compute_ms": 2}), ("Sink", "display", {})],
        [("cam.out", "renderer.bg", 1), ("slow.out", "renderer.det", 1, "nonblocking"),
         ("renderer.out", "display.in")])


def test_renderer_runs_at_bg_rate_with_slow_detections():
    handle = run_for(render("RendererStub"), 2.0)
    assert handle.kernel("display").received >= 54
    recs = handle.records()
    cited = [r for r in recs if "det_seq" in r.attrs]
    assert cited
    assert all("key_seq" not in r.attrs for r in recs)


def test_blocking_renderer_is_held_to_detection_rate():
    handle = run_for(render("BlockingRendererStub"), 2.0)
    assert handle.kernel("display").received <= 12


def test_pose_estimator_without_camera():
    handle = run_for(local_recipe(
        [("FrameSource", "imu", {"hz": 200, "payload_bytes": 32}),
         ("PoseEstimatorStub", "pose", {"compute_ms": 10}), ("Sink", "display", {})],
        [("imu.out", "pose.imu", 1), ("pose.out", "display.in")]), 1.0)
    n = handle.kernel("display").received
    assert 80 <= n <= 105
    assert all("cam_seq" not in r.attrs for r in handle.records())


def test_pose_estimator_cites_camera():
    handle = run_for(local_recipe(
        [("FrameSource", "imu", {"hz": 200, "payload_bytes": 32}),
         ("FrameSource", "cam", {"hz": 30, "payload_bytes": 64}),
         ("PoseEstimatorStub", "pose", {"compute_ms": 10}), ("Sink", "display", {})],
        [("imu.out", "pose.imu", 1), ("cam.out", "pose.cam", 1, "nonblocking"),
         ("pose.out", "display.in")]), 1.0)
    recs = handle.records()
    assert 80 <= len(recs) <= 105
    assert any("cam_seq" in r.attrs for r in recs)


# Sink and records


def test_sink_records_every_message_with_hops():
    handle = src_sink({"hz": 200, "payload_bytes": 10, "count": 100}, 1.0)
    recs = handle.records()
    assert len(recs) == 100
    for r in recs:
        assert r.age_ns >= 0
        deltas = r.hop_deltas()
        assert [d[0] for d in deltas] == ["cam", "display"]
        assert sum(d[1] for d in deltas) == r.age_ns


def test_sink_record_hop_deltas():
    r = SinkRecord(sink="display", seq=1, ts_origin=100, recv_ns=190, payload_len=0,
                   hops=[("cam", 110), ("det", 150)], attrs={}, payload=None)
    assert r.hop_deltas() == [("cam", 10), ("det", 40), ("display", 40)]
    assert r.hop_deltas("screen")[-1] == ("screen", 40)
    assert r.age_ns == 90


def test_metrics_collector_is_thread_safe():
    c = MetricsCollector()
    rec = SinkRecord("s", 0, 0, 1, 0, [], {}, None)
    threads = [threading.Thread(target=lambda: [c.record(rec) for _ in range(500)]) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(c.snapshot()) == 2000


# Registry


def test_registry_lookup_and_create():
    reg = default_registry()
    assert "DetectorStub" in reg and "ExampleKernel" in reg
    k = reg.create("DetectorStub", "det", {"compute_ms": 5})
    assert k.id == "det" and k.compute_ms == 5
    with pytest.raises(ConfigError, match="unknown kernel type"):
        reg.get("Nope")
    with pytest.raises(ConfigError):
        reg.create("DetectorStub", "det", {"bogus": 1})


def test_registry_descriptor_matches_example_kernel():
    d = default_registry().descriptor("ExampleKernel", "example_kernel1")
    assert d.kernel_type == "ExampleKernel"
    assert d.in_ports == (("in1", BLOCKING), ("in2", NONBLOCKING))
    assert d.out_ports == ("out",)


def test_registry_fingerprint_is_stable_and_content_based():
    a, b = default_registry().fingerprint(), default_registry().fingerprint()
    assert a == b
    small = KernelRegistry([FrameSource])
    assert small.fingerprint() != a


def test_busy_compute_spins():
    k = CodecStub("c", compute_ms=20, busy=True)
    t0 = time.process_time()
    k.work()
    assert time.process_time() - t0 >= 0.015


def test_stage_param_sets_hop_label():
    k = CodecStub("enc1", stage="encode")
    assert k.stage == "encode" and k.ports.stage_label == "encode"
    assert Message().hops == []
