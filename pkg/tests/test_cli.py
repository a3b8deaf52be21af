import json
import socket
import subprocess
import sys
import time

import pytest

from cfattest.cli import main
from cfattest.measurements import MeasurementDB


@pytest.fixture
def key_file(tmp_path):
    path = tmp_path / "key.bin"
    path.write_bytes(bytes(range(32)))
    return str(path)


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_analyze_json(capsys):
    code, out, _ = run_cli(capsys, "analyze", "fig4", "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["branch_table"] == {"2": 12, "5": 8, "7": 10, "11": 1}
    assert [lp["header"] for lp in doc["loops"]] == [1]


def test_analyze_text(capsys):
    code, out, _ = run_cli(capsys, "analyze", "fig3")
    assert code == 0
    assert "nodes (7)" in out and "edges (7)" in out


def test_enumerate_to_file(capsys, tmp_path):
    path = tmp_path / "db.json"
    code, _, _ = run_cli(capsys, "enumerate", "fig3", "--format", "json", "-o", str(path))
    assert code == 0
    db = MeasurementDB.from_json(json.loads(path.read_text()))
    assert len(db.final) == 2 and db.complete


def test_enumerate_region(capsys):
    code, out, _ = run_cli(capsys, "enumerate", "pump", "--region", "54:30", "--format", "json")
    assert code == 0
    assert json.loads(out)["region"] == [54, 30]


def test_profile_and_targets(capsys, tmp_path):
    db_path = tmp_path / "dispatch.json"
    code, _, _ = run_cli(
        capsys, "profile", "dispatch", "--input", "0,4", "--input", "1,4", "--format", "json", "-o", str(db_path)
    )
    assert code == 0
    doc = json.loads(db_path.read_text())
    assert doc["complete"] and doc["indirect_targets"] == {"7": [10, 12]}
    code, out, _ = run_cli(capsys, "analyze", "dispatch", "--targets", str(db_path))
    assert code == 0 and "0 -> 10 Indirect #1" in out and "10 -> 8 Return #1" in out


def test_profile_requires_inputs(capsys):
    code, _, err = run_cli(capsys, "profile", "fig3")
    assert code == 2 and "input" in err


def test_run(capsys, key_file):
    code, out, _ = run_cli(capsys, "run", "pump", "--input", "30,3", "--key-file", key_file, "--format", "json",
                           "--nonce", "00" * 16)
    assert code == 0
    doc = json.loads(out)
    assert doc["output"] == [1, 1, 1]
    counts = {r["header"]: sum(p["count"] for p in r["paths"]) for r in doc["records"]}
    assert counts[56] == 3


def test_run_faulting_program_exits_nonzero(capsys, key_file):
    code, out, _ = run_cli(capsys, "run", "fig4", "--input", "2", "--key-file", key_file)
    assert code == 1
    assert "record fault" in out


def test_missing_key(capsys, monkeypatch):
    monkeypatch.delenv("CFA_KEY_FILE", raising=False)
    code, _, err = run_cli(capsys, "run", "fig3", "--input", "1")
    assert code == 2 and "key" in err


def test_short_key_rejected(capsys, tmp_path):
    bad = tmp_path / "short.bin"
    bad.write_bytes(b"abc")
    code, _, err = run_cli(capsys, "run", "fig3", "--input", "1", "--key-file", str(bad))
    assert code == 2 and "32 bytes" in err


def test_bad_assembly_reports_line(capsys, tmp_path):
    src = tmp_path / "bad.asm"
    src.write_text("MOV r0, 1\nJUMP 0\n")
    code, _, err = run_cli(capsys, "analyze", str(src))
    assert code == 2 and "line 2" in err


@pytest.mark.parametrize("scenario", ["hijack-return", "loop-count", "keymap"])
def test_attack_scenarios(capsys, scenario):
    code, out, _ = run_cli(capsys, "attack", "--scenario", scenario, "--format", "json")
    assert code == 0
    doc = json.loads(out)
    assert doc["passed"] and all(c["matched"] for c in doc["cases"])


def test_attest_without_prover_is_transport_error(capsys, tmp_path, key_file):
    db = tmp_path / "db.json"
    run_cli(capsys, "enumerate", "fig3", "--format", "json", "-o", str(db))
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    code, _, err = run_cli(capsys, "attest", "--port", str(port), "--db", str(db), "--key-file", key_file,
                           "--timeout", "1")
    assert code == 2 and "transport" in err


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_serve_and_attest_processes(capsys, tmp_path, key_file):
    db = tmp_path / "db.json"
    policy = tmp_path / "policy.json"
    run_cli(capsys, "enumerate", "pump", "--format", "json", "-o", str(db))
    policy.write_text(json.dumps({"loops": {"dispense_loop": {"param": "quantity"}}}))
    port = _free_port()
    server = subprocess.Popen(
        [sys.executable, "-m", "cfattest", "serve", "pump", "--port", str(port), "--input", "30,6",
         "--key-file", key_file],
        stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True,
    )
    try:
        assert "serving pump" in server.stdout.readline()
        for _ in range(50):
            try:
                socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
                break
            except OSError:
                time.sleep(0.05)
        base = ["attest", "--port", str(port), "--db", str(db), "--policy", str(policy), "--key-file", key_file,
                "--format", "json"]
        code, out, _ = run_cli(capsys, *base, "--param", "quantity=6")
        assert code == 0
        assert json.loads(out)["loop_counts"]["dispense_loop"] == [6]
        code, out, _ = run_cli(capsys, *base, "--param", "quantity=2")
        assert code == 1
        assert json.loads(out) == {"verdict": "PolicyViolation", "loop": "dispense_loop", "observed": 6, "allowed": "2"}
    finally:
        server.terminate()
        server.wait(timeout=10)
