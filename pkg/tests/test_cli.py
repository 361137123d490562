"""Command-line behaviour and exit codes."""

import subprocess
import sys

import pytest
from conftest import free_ports, spawn_daemon, stop_daemon

from flexpipe.cli import main
from flexpipe.metrics import CSV_COLUMNS, read_report


def run_cli(*args, timeout=60):
    return subprocess.run([sys.executable, "-m", "flexpipe", *args], capture_output=True, text=True,
                          timeout=timeout)


def test_validate_ok_and_failures(tmp_path, capsys):
    assert main(["validate", "--recipe", "example_pipeline"]) == 0
    assert "ok: 3 kernels" in capsys.readouterr().out
    assert main(["validate", "--recipe", str(tmp_path / "absent.yaml")]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("kernels:\n  - {kernel: Teapot, id: t}\n")
    assert main(["validate", "--recipe", str(bad)]) == 1
    assert "Teapot" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["validate"], ["serve"],
                                  ["bench", "--recipe", "ar1_local", "--duration-s", "1", "--warmup-s", "2"],
                                  ["bench", "--recipe", "ar1_local", "--duration-s", "0"],
                                  ["bench", "--recipe", "ar1_local", "--format", "xml"],
                                  ["scenarios"], ["--log-level", "chatty", "validate", "--recipe", "example_pipeline"],
                                  ["run", "--recipe", "ar1_local", "--server", "nonsense"]])
def test_usage_errors_exit_64(argv):
    assert main(argv) == 64


def test_run_local_for_a_fixed_duration():
    r = run_cli("run", "--recipe", "ar1_local", "--duration-s", "1.5")
    assert r.returncode == 0, r.stderr
    assert "display:" in r.stdout and "5 kernels" in r.stdout


def test_run_split_without_server_is_a_runtime_error():
    r = run_cli("run", "--recipe", "ar1_perception", "--duration-s", "1")
    assert r.returncode == 2
    assert "no server address" in r.stderr


def test_serve_prints_port_and_stops_on_sigterm():
    (port,) = free_ports(1)
    proc = spawn_daemon(port)
    assert proc.poll() is None
    out = stop_daemon(proc)
    assert proc.returncode == 0 and "stopped" in out


def test_serve_on_busy_port_fails(daemon_proc):
    r = run_cli("serve", "--port", str(daemon_proc.port), "--host", "127.0.0.1", timeout=20)
    assert r.returncode == 2 and "cannot listen" in r.stderr


def test_bench_then_scenarios(tmp_path, daemon_proc):
    local_csv, split_json = tmp_path / "local.csv", tmp_path / "perception.json"
    r = run_cli("bench", "--recipe", "ar1_local", "--duration-s", "2", "--warmup-s", "0.5",
                "--out", str(local_csv), "--workload", "ar")
    assert r.returncode == 0, r.stderr
    header = [line for line in local_csv.read_text().splitlines() if not line.startswith("#")][0]
    assert header == ",".join(CSV_COLUMNS)
    rep = read_report(local_csv)
    assert rep.scenario == "ar1_local" and rep.sink_count > 0
    r = run_cli("bench", "--recipe", "ar1_perception", "--server", f"server=127.0.0.1:{daemon_proc.port}",
                "--duration-s", "2", "--warmup-s", "1", "--out", str(split_json), "--format", "json",
                "--workload", "ar", "--scenario", "perception")
    assert r.returncode == 0, r.stderr
    assert read_report(split_json).instance_count == 7
    r = run_cli("scenarios", str(local_csv), str(split_json))
    assert r.returncode == 0, r.stderr
    lines = r.stdout.splitlines()
    assert lines[0].split()[:2] == ["workload", "scenario"]
    assert {line.split()[1] for line in lines[1:]} == {"ar1_local", "perception"}


def test_scenarios_missing_report_is_error(tmp_path):
    assert main(["scenarios", str(tmp_path / "none.csv")]) == 1
    junk = tmp_path / "junk.csv"
    junk.write_text("a,b\n")
    assert main(["scenarios", str(junk)]) == 2


def test_bench_unwritable_output(tmp_path):
    out = tmp_path / "no" / "such" / "dir.csv"
    assert main(["bench", "--recipe", "ar1_local", "--duration-s", "0.5", "--warmup-s", "0",
                 "--out", str(out)]) == 2
