"""Detector wire protocol: typed client, server bindings, scripted mock."""

from .types import (
    DetectRequest,
    Detection,
    FinetuneConfig,
    ModelHandle,
    ModelLineage,
)
from .client import (
    DetectorClient,
    HttpTransport,
    InProcessTransport,
    SubprocessTransport,
    transport_from_spec,
)
from .mock import MockDetector, MockPolicy, MockRule, MockScript, mock_detector
from .server import dispatch, make_http_server, serve_http, serve_stdio
from . import conformance, wire

__all__ = [
    "DetectRequest",
    "Detection",
    "DetectorClient",
    "FinetuneConfig",
    "HttpTransport",
    "InProcessTransport",
    "MockDetector",
    "MockPolicy",
    "MockRule",
    "MockScript",
    "ModelHandle",
    "ModelLineage",
    "SubprocessTransport",
    "conformance",
    "dispatch",
    "make_http_server",
    "mock_detector",
    "serve_http",
    "serve_stdio",
    "transport_from_spec",
    "wire",
]
