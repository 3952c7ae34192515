"""Server side of the detector protocol: dispatch plus stdio and HTTP bindings.

An adapter is any object with::

    detect(model_id, requests) -> list of per-request lists of (xywh, score)
    finetune(model_id, dataset_path, config_mapping) -> new model id

Adapters signal caller-visible failures by raising
:class:`~grounder.errors.AdapterError` with a ``kind`` from the wire
vocabulary; anything else is reported as kind ``internal``. The serve loops
never let an exception escape: every inbound line or request produces exactly
one response line, well-formed or not.
"""

from __future__ import annotations

import json
import logging
import sys
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Mapping, TextIO

from ..errors import AdapterError, ProtocolError
from . import wire

log = logging.getLogger(__name__)


def dispatch(adapter, msg: Mapping) -> dict:
    """Answer one parsed request message; always returns a response object."""
    request_id = msg.get("id") if isinstance(msg.get("id"), int) else -1
    try:
        call = wire.parse_request(msg)
    except ProtocolError as exc:
        return wire.encode_error_response(request_id, wire.error_kind_for(exc), str(exc))
    try:
        if isinstance(call, wire.DetectCall):
            groups = adapter.detect(call.model, call.requests)
            return wire.encode_detect_response(call.request_id, groups)
        new_id = adapter.finetune(call.model, call.dataset, call.config)
        return wire.encode_finetune_response(call.request_id, new_id)
    except AdapterError as exc:
        return wire.encode_error_response(call.request_id, exc.kind, str(exc))
    except Exception as exc:  # adapter bug; report, do not crash the server
        log.exception("adapter raised an unexpected error")
        return wire.encode_error_response(
            call.request_id, wire.ERR_INTERNAL, f"{type(exc).__name__}: {exc}"
        )


def serve_stdio(adapter, stdin: TextIO | None = None, stdout: TextIO | None = None) -> None:
    """Run the newline-delimited JSON loop until stdin closes."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        if not line.strip():
            continue
        try:
            msg = wire.parse_message(line)
        except ProtocolError as exc:
            response = wire.encode_error_response(-1, wire.ERR_PARSE, str(exc))
        else:
            response = dispatch(adapter, msg)
        stdout.write(wire.dump_line(response))
        stdout.flush()


class _Handler(BaseHTTPRequestHandler):
    adapter = None
    _paths = {"/detect": wire.OP_DETECT, "/finetune": wire.OP_FINETUNE}

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        if self.path not in self._paths:
            self._reply(404, wire.encode_error_response(-1, wire.ERR_BAD_REQUEST, f"no such path {self.path}"))
            return
        length = int(self.headers.get("Content-Length", 0))
        body = self.rfile.read(length).decode("utf-8", errors="replace")
        try:
            msg = wire.parse_message(body)
        except ProtocolError as exc:
            self._reply(200, wire.encode_error_response(-1, wire.ERR_PARSE, str(exc)))
            return
        if isinstance(msg, dict):
            msg.setdefault("op", self._paths[self.path])
        self._reply(200, dispatch(self.adapter, msg))

    def _reply(self, status: int, payload: dict) -> None:
        data = json.dumps(payload, separators=(",", ":")).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, format: str, *args) -> None:
        log.debug("http: " + format, *args)


def make_http_server(adapter, host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    """An HTTP server exposing POST /detect and /finetune for ``adapter``.

    ``port=0`` binds an ephemeral port; read it back from
    ``server.server_address``. Call ``serve_forever`` (typically on a
    daemon thread) and ``shutdown`` to stop.
    """
    handler = type("BoundHandler", (_Handler,), {"adapter": adapter})
    return ThreadingHTTPServer((host, port), handler)


def serve_http(adapter, host: str = "127.0.0.1", port: int = 8940) -> None:
    server = make_http_server(adapter, host, port)
    log.info("serving detector protocol on http://%s:%d", *server.server_address)
    try:
        server.serve_forever()
    finally:
        server.server_close()


def serve_http_background(adapter, host: str = "127.0.0.1") -> tuple[ThreadingHTTPServer, str]:
    """Start an ephemeral-port HTTP server on a daemon thread; returns (server, base_url)."""
    server = make_http_server(adapter, host, 0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    bound_host, bound_port = server.server_address[:2]
    return server, f"http://{bound_host}:{bound_port}"
