"""Benchmark harness: latency breakdown, throughput, staleness, reports.

End-to-end latency of a sink record is its receive time minus the origin
timestamp of the sensor message it derives from. The per-stage breakdown
splits that interval at every hop timestamp the record carries: the time
from the origin (or previous hop) to a kernel's emission is charged to
that kernel's stage label, network arrival hops are charged to
``transport``, and the final stretch to the sink's own label. Stage deltas
of one record therefore add up to its end-to-end latency exactly.

When a label occurs more than once along a path (two network legs, two
encoders), each occurrence is its own stage row, in path order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError, DeploymentError
from .kernels import KernelRegistry, SinkRecord, default_registry
from .message import now_ns
from .recipe import PipelineRecipe

P99_MIN_SAMPLES = 200
CSV_COLUMNS = ("scenario", "stage", "mean_ms", "p50_ms", "p99_ms", "count")
END_TO_END = "end_to_end"


@dataclass
class StageStats:
    stage: str
    mean_ms: float
    p50_ms: float
    p99_ms: float | None
    count: int


@dataclass
class MetricsReport:
    scenario: str
    workload: str = ""
    duration_s: float = 0.0
    warmup_s: float = 0.0
    stages: list[StageStats] = field(default_factory=list)
    end_to_end: StageStats | None = None
    throughput: float = 0.0
    sink_count: int = 0
    transport: dict[str, dict[str, int]] = field(default_factory=dict)
    staleness: dict[str, float | None] = field(default_factory=dict)
    degenerate: bool = False
    instance_count: int = 0

    def stage_labels(self) -> list[str]:
        return [s.stage for s in self.stages]

    def stage_mean_sum(self) -> float:
        return sum(s.mean_ms for s in self.stages)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        data = dict(data)
        data["stages"] = [StageStats(**s) for s in data.get("stages", [])]
        if data.get("end_to_end") is not None:
            data["end_to_end"] = StageStats(**data["end_to_end"])
        return cls(**data)


def percentile(values: list[float], q: float) -> float:
    """Linear-interpolated percentile, ``q`` in [0, 100]."""
    if not values:
        raise ValueError("percentile of no values")
    ordered = sorted(values)
    pos = (len(ordered) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = math.ceil(pos)
    if lo == hi:
        return ordered[lo]
    return ordered[lo] + (ordered[hi] - ordered[lo]) * (pos - lo)


def summarize(stage: str, values_ms: list[float]) -> StageStats:
    return StageStats(
        stage=stage,
        mean_ms=statistics.fmean(values_ms),
        p50_ms=percentile(values_ms, 50),
        p99_ms=percentile(values_ms, 99) if len(values_ms) >= P99_MIN_SAMPLES else None,
        count=len(values_ms),
    )


def stage_breakdown(records: list[SinkRecord]) -> list[StageStats]:
    """Per-stage latency stats, one row per (label, occurrence) along the path."""
    samples: dict[tuple[str, int], list[float]] = {}
    order: list[tuple[str, int]] = []
    for rec in records:
        seen: dict[str, int] = {}
        for label, delta in rec.hop_deltas():
            k = seen.get(label, 0)
            seen[label] = k + 1
            key = (label, k)
            if key not in samples:
                samples[key] = []
                order.append(key)
            samples[key].append(delta / 1e6)
    return [summarize(label, samples[(label, k)]) for label, k in order]


def end_to_end(records: list[SinkRecord]) -> StageStats | None:
    if not records:
        return None
    return summarize(END_TO_END, [r.age_ns / 1e6 for r in records])


def build_report(scenario: str, records: list[SinkRecord], duration_s: float, *,
                 workload: str = "", warmup_s: float = 0.0, transport: dict | None = None,
                 staleness: dict | None = None, instance_count: int = 0) -> MetricsReport:
    if duration_s <= 0:
        raise ConfigError("duration must be positive")
    return MetricsReport(
        scenario=scenario,
        workload=workload,
        duration_s=duration_s,
        warmup_s=warmup_s,
        stages=stage_breakdown(records),
        end_to_end=end_to_end(records),
        throughput=len(records) / duration_s,
        sink_count=len(records),
        transport=dict(transport or {}),
        staleness=dict(staleness or {}),
        degenerate=not records,
        instance_count=instance_count,
    )


# Running a benchmark


def _port_snapshot(handle) -> dict[str, tuple[int, int]]:
    snap = {}
    for kernel in handle.kernels:
        for tag, port in kernel.ports.in_ports.items():
            if port.activated and not port.unconnected:
                snap[f"{kernel.id}.{tag}"] = (port.stats.received, port.stats.age_total_ns)
    return snap


def _transport_stats(handle) -> dict[str, dict[str, int]]:
    out = {}
    for kernel in handle.kernels:
        for port in kernel.ports.all_ports():
            if port.direction.value == "output" and port.activated:
                s = port.stats
                out[f"{kernel.id}.{port.tag}"] = {"sent": s.sent, "delivered": s.delivered,
                                                  "dropped": s.dropped}
    return out


def bench(
    recipe: PipelineRecipe,
    duration_s: float,
    warmup_s: float = 0.0,
    *,
    servers: dict[str, str] | None = None,
    registry: KernelRegistry | None = None,
    scenario: str = "",
    workload: str = "",
    options=None,
) -> MetricsReport:
    """Deploy ``recipe``, discard ``warmup_s`` of output, measure ``duration_s``, tear down."""
    from .deployer import deploy

    if not duration_s or duration_s <= 0:
        raise ConfigError("duration must be positive")
    if warmup_s < 0:
        raise ConfigError("warmup must be non-negative")
    registry = registry or default_registry()
    kw = {"options": options} if options is not None else {}
    handle = deploy(recipe, registry, servers, **kw)
    try:
        handle.start()
        time.sleep(warmup_s)
        start_ns = now_ns()
        before = _port_snapshot(handle)
        time.sleep(duration_s)
        end_ns = now_ns()
        after = _port_snapshot(handle)
        records = [r for r in handle.records() if start_ns <= r.recv_ns < end_ns]
        transport = _transport_stats(handle)
        count = handle.instance_count
        failures = handle.failures
    finally:
        handle.stop()
    if failures:
        raise DeploymentError(f"kernels failed during the run: {failures}")
    staleness = {}
    for key, (n1, a1) in after.items():
        n0, a0 = before.get(key, (0, 0))
        staleness[key] = (a1 - a0) / (n1 - n0) / 1e6 if n1 > n0 else None
    return build_report(scenario or "pipeline", records, duration_s, workload=workload,
                        warmup_s=warmup_s, transport=transport, staleness=staleness,
                        instance_count=count)


# Comparing


@dataclass
class ComparisonRow:
    workload: str
    scenario: str
    latency_ms: float | None
    throughput: float
    best_latency: bool = False
    best_throughput: bool = False


def compare(reports: list[MetricsReport]) -> list[ComparisonRow]:
    """One row per report, grouped by workload, flagging the best of each group."""
    groups: dict[str, list[ComparisonRow]] = {}
    for rep in reports:
        lat = rep.end_to_end.mean_ms if rep.end_to_end is not None else None
        groups.setdefault(rep.workload, []).append(
            ComparisonRow(rep.workload, rep.scenario, lat, rep.throughput))
    rows = []
    for workload in sorted(groups):
        group = groups[workload]
        timed = [r for r in group if r.latency_ms is not None]
        if timed:
            min(timed, key=lambda r: r.latency_ms).best_latency = True
        max(group, key=lambda r: r.throughput).best_throughput = True
        rows.extend(group)
    return rows


def render_comparison(rows: list[ComparisonRow]) -> str:
    header = ("workload", "scenario", "latency_ms", "throughput_hz", "best")
    lines = []
    for r in rows:
        flags = ",".join(f for f, on in (("latency", r.best_latency),
                                         ("throughput", r.best_throughput)) if on)
        lat = f"{r.latency_ms:.2f}" if r.latency_ms is not None else "-"
        lines.append((r.workload or "-", r.scenario, lat, f"{r.throughput:.2f}", flags))
    widths = [max(len(h), *(len(line[i]) for line in lines)) if lines else len(h)
              for i, h in enumerate(header)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return "\n".join([fmt.format(*header)] + [fmt.format(*line) for line in lines])


# Files


def report_to_csv(report: MetricsReport) -> str:
    """CSV text: ``# report:`` JSON preamble, then the header and one row per stage.

    The preamble carries the non-tabular fields so the file reads back into
    an equal report.
    """
    meta = report.to_dict()
    meta.pop("stages")
    buf = io.StringIO()
    buf.write("# report: " + json.dumps(meta, sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for s in report.stages:
        writer.writerow([report.scenario, s.stage, repr(s.mean_ms), repr(s.p50_ms),
                         "" if s.p99_ms is None else repr(s.p99_ms), s.count])
    return buf.getvalue()


def report_from_csv(text: str) -> MetricsReport:
    meta: dict[str, Any] = {}
    body = []
    for line in text.splitlines():
        if line.startswith("# report: "):
            meta = json.loads(line[len("# report: "):])
        elif not line.startswith("#"):
            body.append(line)
    rows = list(csv.reader(body))
    if not rows or tuple(rows[0]) != CSV_COLUMNS:
        raise ValueError(f"expected CSV header {','.join(CSV_COLUMNS)}")
    stages = []
    for row in rows[1:]:
        scenario, stage, mean, p50, p99, count = row
        meta.setdefault("scenario", scenario)
        stages.append(StageStats(stage, float(mean), float(p50), float(p99) if p99 else None,
                                 int(count)))
    meta["stages"] = [asdict(s) for s in stages]
    return MetricsReport.from_dict(meta)


def emit_csv(report: MetricsReport, path) -> None:
    Path(path).write_text(report_to_csv(report))


def emit_json(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report(path) -> MetricsReport:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return MetricsReport.from_dict(json.loads(text))
    return report_from_csv(text)


__all__ = [
    "CSV_COLUMNS",
    "ComparisonRow",
    "MetricsReport",
    "StageStats",
    "bench",
    "build_report",
    "compare",
    "emit_csv",
    "emit_json",
    "end_to_end",
    "percentile",
    "read_report",
    "render_comparison",
    "report_from_csv",
    "report_to_csv",
    "stage_breakdown",
    "summarize",
]
