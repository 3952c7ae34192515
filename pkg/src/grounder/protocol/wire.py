"""Wire protocol v1: newline-delimited JSON messages between the toolkit
and a detector adapter.

One JSON object per line. Requests:

    {"v": 1, "id": 7, "op": "detect", "model": "m0",
     "requests": [{"image": "img.jpg", "expression": "traffic cone",
                   "category_id": 17}]}

    {"v": 1, "id": 8, "op": "finetune", "model": "m0",
     "dataset": "iter_0/dataset.json",
     "config": {"focal": 1.0, "l1": 5.0, "giou": 2.0, "epochs": 1}}

Responses echo ``v`` and ``id``:

    {"v": 1, "id": 7, "ok": true,
     "groups": [[{"bbox": [x, y, w, h], "score": 0.9}]]}
    {"v": 1, "id": 8, "ok": true, "model": "m1"}
    {"v": 1, "id": 7, "ok": false,
     "error": {"kind": "unknown_model", "message": "..."}}

Boxes travel in COCO (x, y, w, h) order; corner-form conversion happens in
the client. Adapters may interleave progress notices
``{"v": 1, "id": 8, "progress": {...}}`` before a final reply; clients skip
them. An unparseable line is answered with ``"id": -1``. Adapters expose
their pre-trained weights under the model id ``"m0"`` at startup.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from ..errors import ProtocolError
from .types import DetectRequest, FinetuneConfig

PROTOCOL_VERSION = 1

OP_DETECT = "detect"
OP_FINETUNE = "finetune"

# Standard error kinds for v1. Adapters should prefer these so clients can
# tell configuration mistakes from operational failures.
ERR_PARSE = "parse"
ERR_VERSION = "version"
ERR_UNSUPPORTED_OP = "unsupported_op"
ERR_BAD_REQUEST = "bad_request"
ERR_UNKNOWN_MODEL = "unknown_model"
ERR_IMAGE_LOAD = "image_load"
ERR_TRAIN = "train"
ERR_INTERNAL = "internal"

# Kinds that mean "the caller sent something wrong"; the rest are adapter
# operational failures.
PROTOCOL_ERROR_KINDS = frozenset(
    {ERR_PARSE, ERR_VERSION, ERR_UNSUPPORTED_OP, ERR_BAD_REQUEST, ERR_UNKNOWN_MODEL}
)


@dataclass(frozen=True)
class DetectCall:
    """Server-side view of a detect request."""

    request_id: int
    model: str
    requests: tuple[dict, ...]


@dataclass(frozen=True)
class FinetuneCall:
    """Server-side view of a finetune request."""

    request_id: int
    model: str
    dataset: str
    config: dict


def encode_detect_request(
    request_id: int, model_id: str, requests: Sequence[DetectRequest]
) -> dict:
    return {
        "v": PROTOCOL_VERSION,
        "id": request_id,
        "op": OP_DETECT,
        "model": model_id,
        "requests": [
            {"image": r.image_ref, "expression": r.expression, "category_id": r.category_id}
            for r in requests
        ],
    }


def encode_finetune_request(
    request_id: int, model_id: str, dataset: str, config: FinetuneConfig
) -> dict:
    wire_config: dict[str, Any] = {
        "focal": config.focal_loss_weight,
        "l1": config.box_l1_weight,
        "giou": config.giou_weight,
        "epochs": config.epochs,
    }
    for key, value in config.extra.items():
        wire_config.setdefault(key, value)
    return {
        "v": PROTOCOL_VERSION,
        "id": request_id,
        "op": OP_FINETUNE,
        "model": model_id,
        "dataset": dataset,
        "config": wire_config,
    }


def finetune_config_from_wire(config: Mapping[str, Any]) -> FinetuneConfig:
    """Inverse of the config mapping in :func:`encode_finetune_request`."""
    known = {"focal", "l1", "giou", "epochs"}
    return FinetuneConfig(
        focal_loss_weight=float(config.get("focal", 1.0)),
        box_l1_weight=float(config.get("l1", 5.0)),
        giou_weight=float(config.get("giou", 2.0)),
        epochs=int(config.get("epochs", 1)),
        extra={k: v for k, v in config.items() if k not in known},
    )


def encode_detect_response(request_id: int, groups: Sequence[Sequence[tuple[list[float], float]]]) -> dict:
    return {
        "v": PROTOCOL_VERSION,
        "id": request_id,
        "ok": True,
        "groups": [
            [{"bbox": [float(v) for v in bbox], "score": float(score)} for bbox, score in group]
            for group in groups
        ],
    }


def encode_finetune_response(request_id: int, model_id: str) -> dict:
    return {"v": PROTOCOL_VERSION, "id": request_id, "ok": True, "model": model_id}


def encode_error_response(request_id: int, kind: str, message: str) -> dict:
    return {
        "v": PROTOCOL_VERSION,
        "id": request_id,
        "ok": False,
        "error": {"kind": kind, "message": message},
    }


def encode_progress_notice(request_id: int, payload: Mapping[str, Any]) -> dict:
    return {"v": PROTOCOL_VERSION, "id": request_id, "progress": dict(payload)}


def is_progress(msg: Mapping[str, Any]) -> bool:
    return "progress" in msg and "ok" not in msg


def dump_line(msg: Mapping[str, Any]) -> str:
    return json.dumps(msg, separators=(",", ":")) + "\n"


def parse_message(line: str) -> dict:
    """Parse one wire line into a JSON object, or raise :class:`ProtocolError`."""
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"wire line is not valid JSON: {exc}")
    if not isinstance(msg, dict):
        raise ProtocolError("wire message must be a JSON object")
    return msg


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ProtocolError(message)


def _check_version(msg: Mapping[str, Any]) -> None:
    _require(msg.get("v") == PROTOCOL_VERSION,
             f"unsupported protocol version {msg.get('v')!r}")


def parse_request(msg: Mapping[str, Any]) -> DetectCall | FinetuneCall:
    """Validate and type a request message (server side)."""
    _check_version(msg)
    request_id = msg.get("id")
    _require(isinstance(request_id, int) and not isinstance(request_id, bool),
             "request needs an integer 'id'")
    op = msg.get("op")
    if op == OP_DETECT:
        _require(isinstance(msg.get("model"), str) and msg["model"] != "",
                 "detect needs a 'model' id")
        requests = msg.get("requests")
        _require(isinstance(requests, list), "detect needs a 'requests' list")
        for i, req in enumerate(requests):
            _require(isinstance(req, dict), f"request #{i} must be an object")
            _require(isinstance(req.get("image"), str), f"request #{i} needs string 'image'")
            _require(
                isinstance(req.get("expression"), str) and req["expression"].strip() != "",
                f"request #{i} needs a non-blank 'expression'",
            )
            _require(
                isinstance(req.get("category_id"), int)
                and not isinstance(req["category_id"], bool),
                f"request #{i} needs integer 'category_id'",
            )
        return DetectCall(request_id=request_id, model=msg["model"],
                          requests=tuple(requests))
    if op == OP_FINETUNE:
        _require(isinstance(msg.get("model"), str) and msg["model"] != "",
                 "finetune needs a 'model' id")
        _require(isinstance(msg.get("dataset"), str) and msg["dataset"] != "",
                 "finetune needs a 'dataset' path")
        config = msg.get("config", {})
        _require(isinstance(config, dict), "finetune 'config' must be an object")
        return FinetuneCall(request_id=request_id, model=msg["model"],
                            dataset=msg["dataset"], config=dict(config))
    if not isinstance(op, str):
        raise ProtocolError("request needs a string 'op'")
    raise ProtocolError(f"unsupported op {op!r}")


def error_kind_for(exc: ProtocolError) -> str:
    """Classify a parse_request failure into a wire error kind."""
    text = str(exc)
    if "version" in text:
        return ERR_VERSION
    if "unsupported op" in text or "string 'op'" in text:
        return ERR_UNSUPPORTED_OP
    return ERR_BAD_REQUEST


def parse_detect_response(
    msg: Mapping[str, Any], expected_requests: int
) -> list[list[tuple[list[float], float]]]:
    """Validate a detect response, returning (xywh bbox, score) per group.

    Raises :class:`ProtocolError` on any shape or range violation so bad
    geometry never propagates past the client.
    """
    _check_version(msg)
    _require(msg.get("ok") is True, "expected an ok response")
    groups = msg.get("groups")
    _require(isinstance(groups, list), "detect response needs a 'groups' list")
    _require(
        len(groups) == expected_requests,
        f"adapter returned {len(groups)} groups for {expected_requests} requests",
    )
    out: list[list[tuple[list[float], float]]] = []
    for gi, group in enumerate(groups):
        _require(isinstance(group, list), f"group #{gi} must be a list")
        parsed_group: list[tuple[list[float], float]] = []
        for di, det in enumerate(group):
            where = f"group #{gi} detection #{di}"
            _require(isinstance(det, dict), f"{where} must be an object")
            bbox = det.get("bbox")
            _require(
                isinstance(bbox, list)
                and len(bbox) == 4
                and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox),
                f"{where} needs a 4-number 'bbox'",
            )
            bbox = [float(v) for v in bbox]
            _require(all(math.isfinite(v) for v in bbox), f"{where} bbox must be finite")
            _require(bbox[2] >= 0 and bbox[3] >= 0,
                     f"{where} has negative width/height {bbox}")
            score = det.get("score")
            _require(
                isinstance(score, (int, float))
                and not isinstance(score, bool)
                and math.isfinite(score)
                and 0.0 <= float(score) <= 1.0,
                f"{where} needs a score in [0, 1], got {score!r}",
            )
            parsed_group.append((bbox, float(score)))
        out.append(parsed_group)
    return out


def parse_finetune_response(msg: Mapping[str, Any]) -> str:
    _check_version(msg)
    _require(msg.get("ok") is True, "expected an ok response")
    model = msg.get("model")
    _require(isinstance(model, str) and model != "", "finetune response needs a 'model' id")
    return model


def parse_error(msg: Mapping[str, Any]) -> tuple[str, str]:
    """Extract (kind, message) from an ok:false response."""
    error = msg.get("error")
    if not isinstance(error, dict):
        raise ProtocolError("error response carries no 'error' object")
    kind = error.get("kind")
    message = error.get("message")
    if not isinstance(kind, str) or not isinstance(message, str):
        raise ProtocolError("error object needs string 'kind' and 'message'")
    return kind, message
