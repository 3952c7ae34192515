"""Domain types shared by the detector protocol client and adapters."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

from ..errors import ProtocolError
from ..geometry import BBox


@dataclass(frozen=True)
class Detection:
    """One predicted box, as returned through the wire protocol."""

    image_id: int
    bbox: BBox
    score: float
    expression: str
    category_id: int | None = None

    def __post_init__(self) -> None:
        if not (isinstance(self.score, (int, float)) and math.isfinite(self.score)):
            raise ValueError(f"detection score must be finite, got {self.score!r}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "score", float(self.score))


@dataclass(frozen=True)
class DetectRequest:
    """One text-conditioned detection query.

    ``image_id`` is client-side bookkeeping for correlating results with
    dataset records; only ``image_ref``, ``expression`` and ``category_id``
    travel on the wire.
    """

    image_id: int
    image_ref: str
    expression: str
    category_id: int

    def __post_init__(self) -> None:
        if not self.expression or not self.expression.strip():
            raise ValueError("detect request needs a non-blank expression")


@dataclass(frozen=True)
class FinetuneConfig:
    """Loss weights and schedule passed through to the training side."""

    focal_loss_weight: float = 1.0
    box_l1_weight: float = 5.0
    giou_weight: float = 2.0
    epochs: int = 1
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("focal_loss_weight", "box_l1_weight", "giou_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be a positive integer")
        object.__setattr__(self, "extra", dict(self.extra))


@dataclass(frozen=True)
class ModelHandle:
    """Identity for one set of model parameters held by an adapter."""

    id: str
    parent: str | None = None
    created_from: str = ""

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("model handle needs a non-empty id")


class ModelLineage:
    """Registry of handles a run has seen; finetune lineage must form a tree."""

    def __init__(self) -> None:
        self._handles: dict[str, ModelHandle] = {}

    def register(self, handle: ModelHandle) -> ModelHandle:
        if handle.id in self._handles:
            existing = self._handles[handle.id]
            if existing != handle:
                raise ProtocolError(f"model id {handle.id!r} reused with different lineage")
            return existing
        if handle.parent is not None and self.is_descendant(handle.parent, handle.id):
            raise ProtocolError(f"model {handle.id!r} would be its own ancestor")
        self._handles[handle.id] = handle
        return handle

    def get(self, model_id: str) -> ModelHandle | None:
        return self._handles.get(model_id)

    def is_descendant(self, model_id: str, ancestor_id: str) -> bool:
        """True iff ancestor_id appears on model_id's parent chain (inclusive)."""
        seen: set[str] = set()
        current: str | None = model_id
        while current is not None and current not in seen:
            if current == ancestor_id:
                return True
            seen.add(current)
            handle = self._handles.get(current)
            current = handle.parent if handle else None
        return False

    def chain(self, model_id: str) -> list[str]:
        """Ids from model_id up to its root, for run manifests."""
        out: list[str] = []
        seen: set[str] = set()
        current: str | None = model_id
        while current is not None and current not in seen:
            out.append(current)
            seen.add(current)
            handle = self._handles.get(current)
            current = handle.parent if handle else None
        return out
