"""Client side of the detector protocol.

:class:`DetectorClient` turns typed :class:`~grounder.protocol.types.DetectRequest`
batches into wire messages, validates what comes back, and converts boxes to
corner form. It is transport-agnostic: the same client runs an adapter as a
child process, over HTTP, or in-process (tests).

Adapter specs, as accepted by :func:`transport_from_spec` and the CLI::

    exec:python -m grounder mock-detector --script script.json
    http://127.0.0.1:8940
    mock:script.json
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
import time
from pathlib import Path
from typing import Mapping, Sequence

import requests as requests_lib

from ..errors import (
    AdapterError,
    ConfigError,
    GrounderError,
    PartialBatchError,
    ProtocolError,
    TransportError,
)
from ..geometry import BBox
from . import server, wire
from .mock import mock_detector
from .types import DetectRequest, Detection, FinetuneConfig, ModelHandle, ModelLineage

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 32
INITIAL_MODEL_ID = "m0"


class SubprocessTransport:
    """Runs the adapter as a child process speaking NDJSON on stdio."""

    def __init__(self, argv: Sequence[str], *, env: Mapping[str, str] | None = None):
        if not argv:
            raise ConfigError("subprocess transport needs a non-empty argv")
        self.argv = list(argv)
        self.env = dict(env) if env is not None else None
        self._proc: subprocess.Popen | None = None

    def _ensure_proc(self) -> subprocess.Popen:
        proc = self._proc
        if proc is not None and proc.poll() is None:
            return proc
        if proc is not None:
            raise TransportError(
                f"adapter process exited with code {proc.returncode}", retriable=False
            )
        try:
            self._proc = subprocess.Popen(
                self.argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                env=self.env,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"could not start adapter {self.argv!r}: {exc}", retriable=False)
        return self._proc

    def call(self, msg: Mapping) -> dict:
        proc = self._ensure_proc()
        line = wire.dump_line(msg)
        try:
            proc.stdin.write(line)
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"adapter stdin closed: {exc}")
        while True:
            raw = proc.stdout.readline()
            if raw == "":
                raise TransportError("adapter closed its stdout mid-request")
            if not raw.strip():
                continue
            try:
                response = wire.parse_message(raw)
            except ProtocolError as exc:
                raise ProtocolError(f"adapter wrote a non-JSON line: {exc}")
            if wire.is_progress(response):
                log.debug("adapter progress: %s", response.get("progress"))
                continue
            return response

    def close(self) -> None:
        proc, self._proc = self._proc, None
        if proc is None:
            return
        try:
            if proc.stdin:
                proc.stdin.close()
            proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait(timeout=5)
        except OSError:
            pass


class HttpTransport:
    """POSTs each message to the adapter's /detect or /finetune endpoint."""

    _paths = {wire.OP_DETECT: "/detect", wire.OP_FINETUNE: "/finetune"}

    def __init__(
        self,
        base_url: str,
        *,
        timeout: float = 120.0,
        retries: int = 2,
        backoff: float = 0.25,
        session: requests_lib.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._session = session if session is not None else requests_lib.Session()

    def call(self, msg: Mapping) -> dict:
        op = msg.get("op")
        path = self._paths.get(op)
        if path is None:
            raise ProtocolError(f"no HTTP binding for op {op!r}")
        url = self.base_url + path
        attempts = 0
        while True:
            attempts += 1
            try:
                http_response = self._session.post(url, json=dict(msg), timeout=self.timeout)
            except requests_lib.RequestException as exc:
                if attempts <= self.retries:
                    log.warning("adapter unreachable (%s), retrying", exc)
                    time.sleep(self.backoff * attempts)
                    continue
                raise TransportError(
                    f"adapter unreachable after {attempts} attempts: {exc}",
                    attempts=attempts,
                )
            try:
                return http_response.json()
            except ValueError:
                raise TransportError(
                    f"adapter answered HTTP {http_response.status_code} with a non-JSON body",
                    retriable=False,
                    attempts=attempts,
                )

    def close(self) -> None:
        self._session.close()


class InProcessTransport:
    """Dispatches against an adapter object directly; no serialization gaps.

    Messages still pass through the same encode/parse path as the other
    transports, so protocol validation stays in force.
    """

    def __init__(self, adapter):
        self.adapter = adapter

    def call(self, msg: Mapping) -> dict:
        return server.dispatch(self.adapter, json.loads(wire.dump_line(msg)))

    def close(self) -> None:
        pass


def transport_from_spec(spec: str):
    """Build a transport from a one-line adapter spec (see module docstring)."""
    if not spec or not spec.strip():
        raise ConfigError("adapter spec is empty")
    spec = spec.strip()
    if spec.startswith("exec:"):
        return SubprocessTransport(shlex.split(spec[len("exec:"):]))
    if spec.startswith("http://") or spec.startswith("https://"):
        return HttpTransport(spec)
    if spec.startswith("mock:"):
        return InProcessTransport(mock_detector(Path(spec[len("mock:"):])))
    raise ConfigError(
        f"unrecognized adapter spec {spec!r}; expected exec:..., http(s)://..., or mock:..."
    )


class DetectorClient:
    """Typed facade over a transport, with model lineage bookkeeping.

    The pre-trained model every adapter exposes is registered as the lineage
    root at construction time; handles returned by :meth:`finetune` descend
    from it. Finetuning from an id this client never saw is refused before
    any wire traffic happens.
    """

    def __init__(
        self,
        transport,
        *,
        initial_model_id: str = INITIAL_MODEL_ID,
        batch_size: int = DEFAULT_BATCH_SIZE,
    ):
        if batch_size < 1:
            raise ConfigError("batch_size must be positive")
        self.transport = transport
        self.batch_size = batch_size
        self.initial_model_id = initial_model_id
        self.lineage = ModelLineage()
        self.lineage.register(ModelHandle(id=initial_model_id))
        self._next_request_id = 1

    @classmethod
    def from_spec(cls, spec: str, **kwargs) -> "DetectorClient":
        return cls(transport_from_spec(spec), **kwargs)

    def _take_request_id(self) -> int:
        request_id = self._next_request_id
        self._next_request_id += 1
        return request_id

    def _call(self, msg: dict) -> dict:
        response = self.transport.call(msg)
        if not isinstance(response, dict):
            raise ProtocolError(f"adapter answered with {type(response).__name__}, not an object")
        response_id = response.get("id")
        if response_id != msg["id"] and response_id != -1:
            raise ProtocolError(
                f"adapter answered request {msg['id']} with id {response_id!r}"
            )
        if response.get("ok") is False:
            kind, message = wire.parse_error(response)
            if kind in wire.PROTOCOL_ERROR_KINDS:
                raise ProtocolError(f"adapter rejected the request ({kind}): {message}")
            raise AdapterError(message, kind=kind)
        return response

    def detect(
        self,
        model_id: str,
        requests: Sequence[DetectRequest],
        *,
        batch_size: int | None = None,
    ) -> list[list[Detection]]:
        """Run every request, returning one detection list per request, in order.

        Requests go out in batches; if a later batch fails after earlier ones
        succeeded, a :class:`PartialBatchError` carries the completed groups
        so callers can keep or discard them deliberately.
        """
        batch_size = batch_size if batch_size is not None else self.batch_size
        completed: list[list[Detection]] = []
        for start in range(0, len(requests), batch_size):
            chunk = list(requests[start:start + batch_size])
            try:
                completed.extend(self._detect_chunk(model_id, chunk))
            except GrounderError as exc:
                if completed:
                    raise PartialBatchError(
                        f"detect failed after {len(completed)} of {len(requests)} requests: {exc}",
                        completed=completed,
                        cause=exc,
                    )
                raise
        return completed

    def _detect_chunk(
        self, model_id: str, chunk: Sequence[DetectRequest]
    ) -> list[list[Detection]]:
        if not chunk:
            return []
        msg = wire.encode_detect_request(self._take_request_id(), model_id, chunk)
        response = self._call(msg)
        raw_groups = wire.parse_detect_response(response, expected_requests=len(chunk))
        groups: list[list[Detection]] = []
        for request, raw_group in zip(chunk, raw_groups):
            group = [
                Detection(
                    image_id=request.image_id,
                    bbox=BBox.from_xywh(*xywh),
                    score=score,
                    expression=request.expression,
                    category_id=request.category_id,
                )
                for xywh, score in raw_group
            ]
            group.sort(key=lambda d: -d.score)
            groups.append(group)
        return groups

    def finetune(
        self,
        model_id: str,
        dataset_path: str | Path,
        config: FinetuneConfig | None = None,
    ) -> ModelHandle:
        if self.lineage.get(model_id) is None:
            raise ProtocolError(
                f"cannot finetune from {model_id!r}: not a model this client has seen"
            )
        if not Path(dataset_path).is_file():
            raise ConfigError(f"finetune dataset does not exist: {dataset_path}")
        config = config if config is not None else FinetuneConfig()
        msg = wire.encode_finetune_request(
            self._take_request_id(), model_id, str(dataset_path), config
        )
        response = self._call(msg)
        new_id = wire.parse_finetune_response(response)
        handle = ModelHandle(id=new_id, parent=model_id, created_from=str(dataset_path))
        return self.lineage.register(handle)

    def close(self) -> None:
        self.transport.close()

    def __enter__(self) -> "DetectorClient":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()
