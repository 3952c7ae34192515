"""Bridge configuration: which model to run and how to police its output."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping


@dataclass(frozen=True)
class BridgeConfig:
    """Everything the serving loop needs to know about the wrapped model.

    ``extra`` holds training hyperparameters (learning rate, warmup, and so
    on) forwarded into every finetune run unless the incoming message sets
    the same key itself; the bridge takes no position on their values.
    """

    backend: str = "stub"
    checkpoint: str = ""
    device: str = "cpu"
    score_floor: float = 0.3
    max_detections: int = 10
    extra: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (0.0 <= self.score_floor <= 1.0):
            raise ValueError(f"score_floor must lie in [0, 1], got {self.score_floor}")
        if self.max_detections < 1:
            raise ValueError(f"max_detections must be >= 1, got {self.max_detections}")
        object.__setattr__(self, "extra", dict(self.extra))
