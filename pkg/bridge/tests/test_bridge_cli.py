"""The bridge command line: argument handling and the stdio session."""

import io
import json
import subprocess
import sys

from grounder_bridge.cli import build_parser, main


def test_version_flag_exits_zero():
    proc = subprocess.run(
        [sys.executable, "-m", "grounder_bridge", "--version"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert "grounder-bridge" in proc.stdout


def test_serve_parses_backend_and_limits():
    args = build_parser().parse_args([
        "serve", "--backend", "pkg.mod:make", "--checkpoint", "w.pt",
        "--device", "cuda:0", "--score-floor", "0.5", "--max-detections", "7",
    ])
    assert args.backend == "pkg.mod:make"
    assert args.checkpoint == "w.pt"
    assert args.device == "cuda:0"
    assert args.score_floor == 0.5
    assert args.max_detections == 7


def test_stub_flag_overrides_backend():
    args = build_parser().parse_args(["serve", "--backend", "x:y", "--stub"])
    assert args.backend == "stub"


def test_extra_pairs_coerce_numbers():
    args = build_parser().parse_args([
        "serve", "--extra", "lr=0.001", "--extra", "warmup=10",
        "--extra", "schedule=cosine",
    ])
    assert args.extra == [("lr", 0.001), ("warmup", 10), ("schedule", "cosine")]


def test_bad_extra_pair_is_an_argument_error(capsys):
    try:
        build_parser().parse_args(["serve", "--extra", "no_equals"])
    except SystemExit as exc:
        assert exc.code == 2
    else:
        raise AssertionError("parser accepted a pair without '='")
    assert "key=value" in capsys.readouterr().err


def test_out_of_range_floor_fails_with_config_error(capsys, monkeypatch):
    monkeypatch.setattr(sys, "stdin", io.StringIO(""))
    assert main(["serve", "--score-floor", "1.5"]) == 2
    assert "config error" in capsys.readouterr().err


def test_unloadable_backend_fails_with_config_error(capsys, monkeypatch):
    monkeypatch.setattr(sys, "stdin", io.StringIO(""))
    assert main(["serve", "--backend", "definitely_not_real:make"]) == 2
    assert "config error" in capsys.readouterr().err


def test_serve_session_over_stdio(monkeypatch, capsys):
    request = json.dumps({"v": 1, "id": 6, "op": "detect", "model": "m0",
                          "requests": []})
    monkeypatch.setattr(sys, "stdin", io.StringIO(request + "\n"))
    assert main(["serve", "--stub"]) == 0
    lines = [json.loads(raw) for raw in capsys.readouterr().out.splitlines()]
    assert lines == [{"v": 1, "id": 6, "ok": True, "groups": []}]


def test_subprocess_session_roundtrip():
    request = json.dumps({"v": 1, "id": 1, "op": "detect", "model": "m0",
                          "requests": []})
    proc = subprocess.run(
        [sys.executable, "-m", "grounder_bridge", "serve", "--stub"],
        input=request + "\n", capture_output=True, text=True, timeout=60,
    )
    assert proc.returncode == 0
    reply = json.loads(proc.stdout.splitlines()[0])
    assert reply == {"v": 1, "id": 1, "ok": True, "groups": []}
