"""Conformance suite any protocol adapter must pass.

The packaged fixture (``fixtures/conformance.jsonl``) holds one case per
line: a message to send (or a deliberately broken raw line) and structural
expectations on the response. Expectations are adapter-agnostic: they check
protocol behavior (ids echoed, error kinds, group counts, box validity),
never specific box geometry, so the same suite runs against the scripted
mock and against real adapter processes.

Case schema::

    {"name": "...",
     "send": {...} | "send_raw": "...",
     "expect": {"ok": true, "groups_len": 2, "boxes_valid": true,
                "same_groups_as": "other_case", "new_model": true}
               | {"ok": false, "kind": "bad_request", "id": -1}}

Placeholders ``{IMG1}``, ``{IMG2}``, ``{DATASET}`` are replaced with paths
the runner materializes in its workdir; ``{NEW_MODEL}`` is replaced with the
model id returned by the most recent successful finetune case.
"""

from __future__ import annotations

import io
import json
import struct
import subprocess
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from ..errors import ConfigError, TransportError
from . import server, wire

FIXTURE_NAME = "conformance.jsonl"
IMAGE_SIZE = (64, 48)


@dataclass(frozen=True)
class CaseResult:
    name: str
    passed: bool
    detail: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        suffix = f": {self.detail}" if self.detail else ""
        return f"{status} {self.name}{suffix}"


def load_cases(path: str | Path | None = None) -> list[dict]:
    """Read conformance cases; defaults to the packaged fixture."""
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
    else:
        text = (
            resources.files("grounder.protocol")
            .joinpath("fixtures", FIXTURE_NAME)
            .read_text(encoding="utf-8")
        )
    cases = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            case = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"conformance fixture line {line_no} is not JSON: {exc}")
        if "name" not in case or ("send" not in case and "send_raw" not in case):
            raise ConfigError(f"conformance fixture line {line_no} lacks name/send")
        cases.append(case)
    return cases


def write_blank_png(path: Path, width: int, height: int, rgb=(240, 240, 240)) -> None:
    """A minimal valid RGB PNG, written with the standard library only."""

    def chunk(tag: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + tag
            + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    row = b"\x00" + bytes(rgb) * width
    body = zlib.compress(row * height)
    path.write_bytes(
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", body)
        + chunk(b"IEND", b"")
    )


def materialize_workdir(workdir: str | Path) -> dict[str, str]:
    """Create the images and dataset the fixture placeholders refer to."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    width, height = IMAGE_SIZE
    img1 = workdir / "conformance_img1.png"
    img2 = workdir / "conformance_img2.png"
    write_blank_png(img1, width, height)
    write_blank_png(img2, width, height)
    dataset = workdir / "conformance_dataset.json"
    doc = {
        "categories": [{"id": 1, "name": "target object"}],
        "images": [
            {"id": 1, "file_name": str(img1), "width": width, "height": height},
            {"id": 2, "file_name": str(img2), "width": width, "height": height},
        ],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1,
             "bbox": [8.0, 8.0, 24.0, 16.0], "area": 384.0, "iscrowd": 0},
        ],
    }
    dataset.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return {"IMG1": str(img1), "IMG2": str(img2), "DATASET": str(dataset)}


def _substitute(value, mapping: Mapping[str, str]):
    if isinstance(value, str):
        for key, replacement in mapping.items():
            value = value.replace("{" + key + "}", replacement)
        return value
    if isinstance(value, list):
        return [_substitute(v, mapping) for v in value]
    if isinstance(value, dict):
        return {k: _substitute(v, mapping) for k, v in value.items()}
    return value


class _StdioSession:
    """Raw line-level session with an adapter child process."""

    def __init__(self, argv: Sequence[str]):
        try:
            self._proc = subprocess.Popen(
                list(argv),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"could not start adapter {argv!r}: {exc}", retriable=False)

    def exchange(self, raw_line: str) -> dict:
        self._proc.stdin.write(raw_line.rstrip("\n") + "\n")
        self._proc.stdin.flush()
        while True:
            raw = self._proc.stdout.readline()
            if raw == "":
                raise TransportError("adapter closed stdout mid-conformance")
            if not raw.strip():
                continue
            msg = json.loads(raw)
            if wire.is_progress(msg):
                continue
            return msg

    def close(self) -> None:
        try:
            self._proc.stdin.close()
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
        except OSError:
            pass


class _InProcessSession:
    """Feeds raw lines through the stdio serve loop of an adapter object."""

    def __init__(self, adapter):
        self.adapter = adapter

    def exchange(self, raw_line: str) -> dict:
        out = io.StringIO()
        server.serve_stdio(self.adapter, stdin=io.StringIO(raw_line.rstrip("\n") + "\n"), stdout=out)
        for line in out.getvalue().splitlines():
            msg = json.loads(line)
            if wire.is_progress(msg):
                continue
            return msg
        raise TransportError("serve loop produced no response line")

    def close(self) -> None:
        pass


def _check_case(case: dict, response: dict, state: dict) -> str:
    """Empty string when the response satisfies the case, else the failure."""
    expect = case.get("expect", {})
    sent = case.get("send")
    if response.get("v") != wire.PROTOCOL_VERSION:
        return f"response version is {response.get('v')!r}, not {wire.PROTOCOL_VERSION}"
    expected_id = expect.get("id", sent.get("id") if isinstance(sent, dict) else -1)
    if response.get("id") != expected_id:
        return f"response id is {response.get('id')!r}, expected {expected_id}"
    if expect.get("ok") is True:
        if response.get("ok") is not True:
            return f"expected ok response, got {response.get('error')!r}"
        if "groups_len" in expect:
            groups = response.get("groups")
            if not isinstance(groups, list) or len(groups) != expect["groups_len"]:
                n = len(groups) if isinstance(groups, list) else None
                return f"expected {expect['groups_len']} groups, got {n}"
        if expect.get("boxes_valid"):
            try:
                wire.parse_detect_response(response, len(sent.get("requests", [])))
            except Exception as exc:
                return f"detect response failed validation: {exc}"
        if "same_groups_as" in expect:
            other = state["groups"].get(expect["same_groups_as"])
            if other is None:
                return f"no recorded groups for case {expect['same_groups_as']!r}"
            if response.get("groups") != other:
                return "groups differ from the earlier identical request"
        if expect.get("new_model"):
            model = response.get("model")
            if not isinstance(model, str) or not model:
                return f"expected a new model id, got {model!r}"
            if isinstance(sent, dict) and model == sent.get("model"):
                return "finetune returned the base model id unchanged"
            state["placeholders"]["NEW_MODEL"] = model
    else:
        if response.get("ok") is not False:
            return "expected an error response, got ok"
        error = response.get("error")
        if not isinstance(error, dict):
            return "error response lacks an 'error' object"
        if "kind" in expect and error.get("kind") != expect["kind"]:
            return f"expected error kind {expect['kind']!r}, got {error.get('kind')!r}"
        if not isinstance(error.get("message"), str) or not error["message"]:
            return "error object lacks a message"
    if isinstance(sent, dict) and "groups" in response:
        state["groups"][case["name"]] = response["groups"]
    return ""


def run_conformance(
    target,
    workdir: str | Path,
    cases: Sequence[dict] | None = None,
) -> list[CaseResult]:
    """Run the suite against ``target`` and report one result per case.

    ``target`` is either an argv list (the adapter runs as a child process)
    or an adapter object (served in-process). The workdir receives the
    images and dataset file the cases reference.
    """
    cases = list(cases) if cases is not None else load_cases()
    placeholders = materialize_workdir(workdir)
    state = {"placeholders": placeholders, "groups": {}}
    if isinstance(target, (list, tuple)):
        session = _StdioSession(target)
    else:
        session = _InProcessSession(target)
    results: list[CaseResult] = []
    try:
        for case in cases:
            if "send_raw" in case:
                raw_line = case["send_raw"]
                case = dict(case)
                case["send"] = None
            else:
                case = dict(case)
                case["send"] = _substitute(case["send"], state["placeholders"])
                raw_line = wire.dump_line(case["send"]).rstrip("\n")
            try:
                response = session.exchange(raw_line)
            except Exception as exc:
                results.append(CaseResult(case["name"], False, f"no response: {exc}"))
                continue
            detail = _check_case(case, response, state)
            results.append(CaseResult(case["name"], detail == "", detail))
    finally:
        session.close()
    return results


def format_results(results: Sequence[CaseResult]) -> str:
    lines = [str(r) for r in results]
    failed = sum(1 for r in results if not r.passed)
    lines.append(f"{len(results) - failed}/{len(results)} conformance cases passed")
    return "\n".join(lines)
