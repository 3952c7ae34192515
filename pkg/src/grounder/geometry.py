"""Axis-aligned bounding-box arithmetic in pixel coordinates.

Boxes live in corner form (x_min, y_min, x_max, y_max). The COCO
(x, y, width, height) convention is converted at the I/O boundary, never
here. All arithmetic is plain 64-bit floats; every function is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle. Zero-area boxes are allowed, negative extents are not."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        for name in ("x_min", "y_min", "x_max", "y_max"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"BBox.{name} must be a number, got {value!r}")
            if not math.isfinite(value):
                raise ValueError(f"BBox.{name} must be finite, got {value!r}")
            object.__setattr__(self, name, float(value))
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(
                f"BBox has negative extent: ({self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """Build from COCO (x, y, width, height)."""
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.width, self.height]

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clamp(self, width: float, height: float) -> "BBox":
        """Clip to the image rectangle [0, width] x [0, height]."""
        return BBox(
            min(max(self.x_min, 0.0), width),
            min(max(self.y_min, 0.0), height),
            min(max(self.x_max, 0.0), width),
            min(max(self.y_max, 0.0), height),
        )


def area(b: BBox) -> float:
    return b.width * b.height


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def union_area(a: BBox, b: BBox) -> float:
    return area(a) + area(b) - intersection_area(a, b)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union in [0, 1]; defined as 0 when both boxes are degenerate.

    Degenerate-over-degenerate returns 0 rather than raising so downstream
    indicator logic never throws on malformed detector output.
    """
    inter = intersection_area(a, b)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def enclosing(a: BBox, b: BBox) -> BBox:
    """Smallest box containing both inputs."""
    return BBox(
        min(a.x_min, b.x_min),
        min(a.y_min, b.y_min),
        max(a.x_max, b.x_max),
        max(a.y_max, b.y_max),
    )


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: iou minus the enclosing-box penalty. Lies in (-1, 1].

    Requires at least one non-degenerate box; the penalty ratio is undefined
    when both are degenerate.
    """
    if area(a) == 0.0 and area(b) == 0.0:
        raise ValueError("giou is undefined when both boxes are degenerate")
    inter = intersection_area(a, b)
    union = area(a) + area(b) - inter
    hull = area(enclosing(a, b))
    return inter / union - (hull - union) / hull
