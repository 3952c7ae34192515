"""Model backends: the interface the server drives, plus the stub.

A backend answers two calls. ``detect`` loads one image and returns raw
detections for one expression; ``finetune`` runs a training pass over a
COCO-style annotation file with the given loss configuration. The server
handles everything else: validation, clamping, filtering, model-id
bookkeeping, and error reporting.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import import_module
from typing import Protocol, Sequence, runtime_checkable

from .config import BridgeConfig
from .images import read_png

# One raw detection: x, y, width, height, score.
RawBox = tuple[float, float, float, float, float]


@dataclass(frozen=True)
class DetectResult:
    """What a backend saw in one image: its size and the raw detections."""

    width: int
    height: int
    detections: tuple[RawBox, ...]


@runtime_checkable
class ModelBackend(Protocol):
    def detect(self, image_path: str, expression: str) -> DetectResult:
        """Run inference for one expression on one image."""

    def finetune(self, dataset_path: str, config: dict) -> None:
        """Train on the annotation file with the given loss configuration."""


@dataclass
class StubModel:
    """Deterministic rectangle finder standing in for a real detector.

    It reports the bounding box of every pixel that differs from the
    top-left background color, scored by how densely that box is filled.
    A blank image therefore yields no detections at all, and identical
    inputs always yield identical outputs. Training runs are recorded,
    not performed.
    """

    tolerance: int = 48
    finetunes: list[tuple[str, dict]] = field(default_factory=list)

    def detect(self, image_path: str, expression: str) -> DetectResult:
        width, height, rows = read_png(image_path)
        background = rows[0][0]
        xs: list[int] = []
        ys: list[int] = []
        filled = 0
        for y, row in enumerate(rows):
            for x, pixel in enumerate(row):
                if sum(abs(a - b) for a, b in zip(pixel, background)) > self.tolerance:
                    xs.append(x)
                    ys.append(y)
                    filled += 1
        if not xs:
            return DetectResult(width, height, ())
        x0, x1 = min(xs), max(xs) + 1
        y0, y1 = min(ys), max(ys) + 1
        coverage = filled / ((x1 - x0) * (y1 - y0))
        score = 0.5 + 0.5 * coverage
        return DetectResult(
            width, height,
            ((float(x0), float(y0), float(x1 - x0), float(y1 - y0), score),),
        )

    def finetune(self, dataset_path: str, config: dict) -> None:
        import json
        from pathlib import Path

        json.loads(Path(dataset_path).read_text(encoding="utf-8"))
        self.finetunes.append((dataset_path, dict(config)))


def resolve_backend(config: BridgeConfig) -> ModelBackend:
    """Build the configured backend.

    ``stub`` (or empty) selects :class:`StubModel`; anything else names a
    factory as ``package.module:attribute`` that is called with the bridge
    configuration and must return a :class:`ModelBackend`.
    """
    spec = config.backend or "stub"
    if spec == "stub":
        return StubModel()
    module_name, _, attribute = spec.partition(":")
    if not module_name or not attribute:
        raise ValueError(
            f"backend spec {spec!r} must look like 'package.module:factory'"
        )
    try:
        factory = getattr(import_module(module_name), attribute)
    except (ImportError, AttributeError) as exc:
        raise ValueError(f"could not load backend {spec!r}: {exc}")
    try:
        backend = factory(config)
    except Exception as exc:
        raise ValueError(f"backend factory {spec!r} failed: {exc}")
    if not isinstance(backend, ModelBackend):
        raise ValueError(
            f"backend factory {spec!r} returned {type(backend).__name__}, "
            "which lacks detect/finetune"
        )
    return backend
