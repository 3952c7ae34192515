"""Protocol adapter around a text-grounded detection model.

The bridge speaks wire protocol v1 (newline-delimited JSON over stdio) on
behalf of whatever model backend it is configured with, so the toolkit
driving it never needs to know how the model loads images, formats prompts,
or runs training. A deterministic stub backend ships alongside for
desk-scale testing without any model weights.
"""

__version__ = "0.1.0"

from .config import BridgeConfig
from .model import DetectResult, ModelBackend, StubModel, resolve_backend
from .server import BridgeServer

__all__ = [
    "BridgeConfig",
    "BridgeServer",
    "DetectResult",
    "ModelBackend",
    "StubModel",
    "resolve_backend",
    "__version__",
]
