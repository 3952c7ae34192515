"""The bridge server: newline-delimited JSON v1 in front of a model backend.

One JSON object per inbound line, at least one per outbound. Detect
requests fan out to ``backend.detect`` per item and come back as one group
of ``{"bbox": [x, y, w, h], "score": s}`` objects per item, cleaned up so
the caller never sees out-of-frame geometry or out-of-range scores.
Finetune requests train synchronously through ``backend.finetune`` and
answer with a fresh model id; progress notices keep the line warm while
training runs. Every failure becomes an error response. The serve loop
never dies on input.
"""

from __future__ import annotations

import json
import logging
import sys
import threading
from typing import Any, Callable, Sequence, TextIO

from .config import BridgeConfig
from .model import ModelBackend, resolve_backend

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1

# Loss weights and schedule used when a finetune request leaves them out.
DEFAULT_TRAINING = {"focal": 1.0, "l1": 5.0, "giou": 2.0, "epochs": 1}

Emit = Callable[[dict], None]


class _Fault(Exception):
    """Internal signal that a request must be answered with an error."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _error(request_id: int, kind: str, message: str) -> dict:
    return {
        "v": PROTOCOL_VERSION,
        "id": request_id,
        "ok": False,
        "error": {"kind": kind, "message": message},
    }


def _notice(request_id: int, payload: dict) -> dict:
    return {"v": PROTOCOL_VERSION, "id": request_id, "progress": payload}


def _require(condition: bool, kind: str, message: str) -> None:
    if not condition:
        raise _Fault(kind, message)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _finite(value: float) -> bool:
    return value == value and abs(value) != float("inf")


class BridgeServer:
    """Owns the model registry and answers wire messages.

    ``handle_line`` maps one raw input line to the full ordered list of
    output messages (progress notices, then exactly one final response).
    Passing ``emit`` streams each message the moment it exists, which the
    stdio loop uses so heartbeats reach the peer while training is still
    running.
    """

    heartbeat_interval = 2.0

    def __init__(self, config: BridgeConfig, backend: ModelBackend | None = None):
        self.config = config
        self.backend = backend if backend is not None else resolve_backend(config)
        self.models = {"m0"}

    # -- message handling ------------------------------------------------

    def handle_line(self, raw: str, emit: Emit | None = None) -> list[dict]:
        out: list[dict] = []

        def push(message: dict) -> None:
            out.append(message)
            if emit is not None:
                emit(message)

        if not raw.strip():
            return out
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError as exc:
            push(_error(-1, "parse", f"line is not valid JSON: {exc}"))
            return out
        if not isinstance(msg, dict):
            push(_error(-1, "parse", "message must be a JSON object"))
            return out

        request_id = msg.get("id") if _is_int(msg.get("id")) else -1
        try:
            _require(msg.get("v") == PROTOCOL_VERSION, "version",
                     f"unsupported protocol version {msg.get('v')!r}")
            _require(_is_int(msg.get("id")), "bad_request",
                     "request needs an integer 'id'")
            op = msg.get("op")
            if op == "detect":
                push(self._detect(request_id, msg))
            elif op == "finetune":
                self._finetune(request_id, msg, push)
            elif isinstance(op, str):
                raise _Fault("unsupported_op", f"unsupported op {op!r}")
            else:
                raise _Fault("unsupported_op", "request needs a string 'op'")
        except _Fault as exc:
            push(_error(request_id, exc.kind, str(exc)))
        except Exception as exc:  # backend bug; answer, do not crash
            log.exception("unexpected error handling a request")
            push(_error(request_id, "internal", f"{type(exc).__name__}: {exc}"))
        return out

    def _checked_model(self, msg: dict, op: str) -> str:
        model = msg.get("model")
        _require(isinstance(model, str) and model != "", "bad_request",
                 f"{op} needs a 'model' id")
        return model

    def _detect(self, request_id: int, msg: dict) -> dict:
        model = self._checked_model(msg, "detect")
        requests = msg.get("requests")
        _require(isinstance(requests, list), "bad_request",
                 "detect needs a 'requests' list")
        for i, req in enumerate(requests):
            _require(isinstance(req, dict), "bad_request",
                     f"request #{i} must be an object")
            _require(isinstance(req.get("image"), str), "bad_request",
                     f"request #{i} needs string 'image'")
            expression = req.get("expression")
            _require(isinstance(expression, str) and expression.strip() != "",
                     "bad_request", f"request #{i} needs a non-blank 'expression'")
            _require(_is_int(req.get("category_id")), "bad_request",
                     f"request #{i} needs integer 'category_id'")
        _require(model in self.models, "unknown_model", f"no model {model!r}")

        groups = []
        for req in requests:
            try:
                result = self.backend.detect(req["image"], req["expression"])
            except (FileNotFoundError, OSError, ValueError) as exc:
                raise _Fault("image_load",
                             f"could not read {req['image']!r}: {exc}")
            groups.append(self._clean(result.width, result.height,
                                      result.detections))
        return {"v": PROTOCOL_VERSION, "id": request_id, "ok": True,
                "groups": groups}

    def _clean(self, width: int, height: int,
               detections: Sequence[tuple[float, float, float, float, float]]) -> list[dict]:
        """Clamp raw detections into frame and policy, highest score first."""
        kept = []
        for x, y, w, h, score in detections:
            if not all(_finite(v) for v in (x, y, w, h, score)):
                continue
            x0 = min(max(float(x), 0.0), float(width))
            y0 = min(max(float(y), 0.0), float(height))
            x1 = min(max(float(x) + float(w), 0.0), float(width))
            y1 = min(max(float(y) + float(h), 0.0), float(height))
            if x1 <= x0 or y1 <= y0:
                continue
            score = min(max(float(score), 0.0), 1.0)
            if score < self.config.score_floor:
                continue
            kept.append({"bbox": [x0, y0, x1 - x0, y1 - y0], "score": score})
        kept.sort(key=lambda det: det["score"], reverse=True)
        return kept[: self.config.max_detections]

    def _finetune(self, request_id: int, msg: dict, push: Emit) -> None:
        model = self._checked_model(msg, "finetune")
        dataset = msg.get("dataset")
        _require(isinstance(dataset, str) and dataset != "", "bad_request",
                 "finetune needs a 'dataset' path")
        config = msg.get("config", {})
        _require(isinstance(config, dict), "bad_request",
                 "finetune 'config' must be an object")
        _require(model in self.models, "unknown_model", f"no model {model!r}")

        training = {**DEFAULT_TRAINING, **self.config.extra, **config}
        push(_notice(request_id, {"stage": "finetune", "base": model,
                                  "epochs": training["epochs"]}))
        stop = threading.Event()

        def beat() -> None:
            count = 0
            while not stop.wait(self.heartbeat_interval):
                count += 1
                push(_notice(request_id, {"stage": "finetune",
                                          "heartbeat": count}))

        ticker = threading.Thread(target=beat, daemon=True)
        ticker.start()
        try:
            self.backend.finetune(dataset, training)
        except Exception as exc:
            raise _Fault("train", f"finetune on {dataset!r} failed: {exc}")
        finally:
            stop.set()
            ticker.join()
        new_id = self._new_model_id()
        push({"v": PROTOCOL_VERSION, "id": request_id, "ok": True,
              "model": new_id})

    def _new_model_id(self) -> str:
        n = len(self.models)
        while f"m{n}" in self.models:
            n += 1
        model_id = f"m{n}"
        self.models.add(model_id)
        return model_id

    # -- transport ---------------------------------------------------------

    def serve(self, stdin: TextIO | None = None, stdout: TextIO | None = None) -> None:
        """Answer lines until the input closes. Never raises on input."""
        stdin = stdin if stdin is not None else sys.stdin
        stdout = stdout if stdout is not None else sys.stdout
        lock = threading.Lock()

        def emit(message: dict) -> None:
            with lock:
                stdout.write(json.dumps(message, separators=(",", ":")) + "\n")
                stdout.flush()

        for line in stdin:
            if not line.strip():
                continue
            try:
                self.handle_line(line, emit)
            except Exception as exc:  # absolute backstop
                log.exception("serve loop caught an escaped error")
                emit(_error(-1, "internal", f"{type(exc).__name__}: {exc}"))
