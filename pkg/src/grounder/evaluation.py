"""COCO-style detection evaluation with federated-annotation awareness.

Matching follows the standard convention: within each category and IoU
threshold, detections are visited in descending score order and greedily
claim the unmatched ground-truth box on the same image with the highest IoU,
provided that IoU reaches the threshold. Average precision interpolates the
precision-recall curve at 101 evenly spaced recall levels.

Federated datasets only verify some categories per image. Detections for an
unverified (image, category) pair are ignored outright rather than counted
as false positives, since nobody checked whether the object is there.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .dataset import GroundTruthBox, ImageRecord
from .errors import ParseError
from .geometry import BBox, iou
from .protocol.types import Detection

RECALL_LEVELS = 101
MATCHING_TAG = "greedy highest-IoU, 101-point interpolated AP"


def coco_iou_thresholds() -> tuple[float, ...]:
    """The standard 0.50:0.05:0.95 threshold sweep."""
    return tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class PRPoint:
    """One cumulative point on a precision-recall curve."""

    recall: float
    precision: float
    score: float

    def __post_init__(self) -> None:
        for name in ("recall", "precision"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0 + 1e-12):
                raise ValueError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class CategoryEval:
    """Evaluation of one category at one IoU threshold."""

    category_id: int
    iou_threshold: float
    ap: float | None
    num_gt: int
    num_detections: int
    curve: tuple[PRPoint, ...] = ()


@dataclass(frozen=True)
class EvalReport:
    """Per-category APs across an IoU threshold sweep."""

    iou_thresholds: tuple[float, ...]
    per_threshold: Mapping[float, Mapping[int, CategoryEval]]
    ignored_detections: int = 0

    def ap(self, category_id: int, iou_threshold: float) -> float | None:
        return self.per_threshold[iou_threshold][category_id].ap

    def category_ap(self, category_id: int) -> float | None:
        """AP for one category, averaged over the threshold sweep."""
        values = [
            cats[category_id].ap
            for cats in self.per_threshold.values()
            if category_id in cats and cats[category_id].ap is not None
        ]
        return sum(values) / len(values) if values else None

    def mean_ap_at(self, iou_threshold: float) -> float | None:
        values = [c.ap for c in self.per_threshold[iou_threshold].values() if c.ap is not None]
        return sum(values) / len(values) if values else None

    @property
    def mean_ap(self) -> float | None:
        """Mean over categories with ground truth, then over thresholds."""
        per_threshold = [self.mean_ap_at(t) for t in self.iou_thresholds]
        values = [v for v in per_threshold if v is not None]
        return sum(values) / len(values) if values else None

    def to_json_obj(self) -> dict:
        categories = sorted({cid for cats in self.per_threshold.values() for cid in cats})
        return {
            "matching": MATCHING_TAG,
            "iou_thresholds": list(self.iou_thresholds),
            "mean_ap": self.mean_ap,
            "mean_ap_by_threshold": {
                f"{t:.2f}": self.mean_ap_at(t) for t in self.iou_thresholds
            },
            "categories": {
                str(cid): {
                    "ap": self.category_ap(cid),
                    "by_threshold": {
                        f"{t:.2f}": self.per_threshold[t][cid].ap for t in self.iou_thresholds
                    },
                    "num_gt": self.per_threshold[self.iou_thresholds[0]][cid].num_gt,
                    "num_detections": self.per_threshold[self.iou_thresholds[0]][cid].num_detections,
                }
                for cid in categories
            },
            "ignored_detections": self.ignored_detections,
        }


def match_detections(
    detections: Sequence[Detection],
    gt_boxes: Sequence[GroundTruthBox],
    iou_threshold: float,
) -> list[tuple[Detection, bool]]:
    """Greedy match; returns (detection, is_true_positive) in score order.

    Ties in score keep input order, so callers that need reproducible curves
    should provide deterministic input order.
    """
    gt_by_image: dict[int, list[tuple[int, BBox]]] = {}
    for index, gt in enumerate(gt_boxes):
        gt_by_image.setdefault(gt.image_id, []).append((index, gt.bbox))
    matched_gt: set[int] = set()
    ordered = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    out: list[tuple[Detection, bool]] = []
    for i in ordered:
        det = detections[i]
        best_index = -1
        best_iou = 0.0
        for gt_index, gt_box in gt_by_image.get(det.image_id, ()):
            if gt_index in matched_gt:
                continue
            value = iou(det.bbox, gt_box)
            if value >= iou_threshold and value > best_iou:
                best_iou = value
                best_index = gt_index
        if best_index >= 0:
            matched_gt.add(best_index)
            out.append((det, True))
        else:
            out.append((det, False))
    return out


def pr_curve(matches: Sequence[tuple[Detection, bool]], num_gt: int) -> list[PRPoint]:
    """Cumulative precision/recall after each detection, best score first."""
    if num_gt <= 0:
        return []
    points: list[PRPoint] = []
    tp = 0
    for rank, (det, is_tp) in enumerate(matches, start=1):
        tp += 1 if is_tp else 0
        points.append(PRPoint(recall=tp / num_gt, precision=tp / rank, score=det.score))
    return points


def interpolated_ap(curve: Sequence[PRPoint]) -> float:
    """Mean of the best precision at or beyond each of 101 recall levels."""
    if not curve:
        return 0.0
    pairs = sorted((p.recall, p.precision) for p in curve)
    recalls = [r for r, _ in pairs]
    suffix_best: list[float] = [0.0] * len(pairs)
    best = 0.0
    for i in range(len(pairs) - 1, -1, -1):
        best = max(best, pairs[i][1])
        suffix_best[i] = best
    total = 0.0
    for level_index in range(RECALL_LEVELS):
        level = level_index / (RECALL_LEVELS - 1)
        j = bisect.bisect_left(recalls, level - 1e-12)
        if j < len(recalls):
            total += suffix_best[j]
    return total / RECALL_LEVELS


def evaluate_category(
    detections: Sequence[Detection],
    gt_boxes: Sequence[GroundTruthBox],
    category_id: int,
    iou_threshold: float,
) -> CategoryEval:
    """AP for one category; ``ap`` is None when the category has no ground truth."""
    dets = [d for d in detections if d.category_id == category_id]
    gts = [g for g in gt_boxes if g.category_id == category_id]
    if not gts:
        return CategoryEval(category_id, iou_threshold, None, 0, len(dets))
    matches = match_detections(dets, gts, iou_threshold)
    curve = pr_curve(matches, len(gts))
    return CategoryEval(
        category_id,
        iou_threshold,
        interpolated_ap(curve),
        len(gts),
        len(dets),
        tuple(curve),
    )


def _verified_lookup(images: Mapping[int, ImageRecord]) -> Mapping[int, frozenset]:
    return {image_id: rec.verified_categories for image_id, rec in images.items()}


def evaluate(
    detections: Sequence[Detection],
    gt_boxes: Sequence[GroundTruthBox],
    images: Mapping[int, ImageRecord],
    category_ids: Iterable[int] | None = None,
    iou_thresholds: Sequence[float] | None = None,
) -> EvalReport:
    """Full evaluation across categories and an IoU threshold sweep.

    Detections (and, defensively, ground truth) on unverified (image,
    category) pairs are dropped before matching. Pass a single-element
    ``iou_thresholds`` such as ``(0.5,)`` for fixed-threshold scoring.
    """
    thresholds = tuple(iou_thresholds) if iou_thresholds is not None else coco_iou_thresholds()
    if not thresholds:
        raise ValueError("need at least one IoU threshold")
    verified = _verified_lookup(images)

    def pair_verified(image_id: int, category_id: int | None) -> bool:
        if image_id not in verified:
            return False
        return category_id in verified[image_id]

    kept_dets = [d for d in detections if pair_verified(d.image_id, d.category_id)]
    kept_gts = [g for g in gt_boxes if pair_verified(g.image_id, g.category_id)]
    ignored = len(detections) - len(kept_dets)
    if category_ids is None:
        category_ids = sorted(
            {g.category_id for g in kept_gts} | {d.category_id for d in kept_dets}
        )
    else:
        category_ids = sorted(set(category_ids))
    per_threshold: dict[float, dict[int, CategoryEval]] = {}
    for threshold in thresholds:
        per_threshold[threshold] = {
            cid: evaluate_category(kept_dets, kept_gts, cid, threshold)
            for cid in category_ids
        }
    return EvalReport(
        iou_thresholds=thresholds,
        per_threshold=per_threshold,
        ignored_detections=ignored,
    )


def load_results(path: str | Path) -> list[Detection]:
    """Read a COCO-format results array into typed detections."""
    path = Path(path)
    try:
        items = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"results file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"results file is not valid JSON: {path}: {exc}")
    if not isinstance(items, list):
        raise ParseError(f"results file must hold a JSON array: {path}")
    out: list[Detection] = []
    for i, item in enumerate(items):
        try:
            x, y, w, h = (float(v) for v in item["bbox"])
            out.append(
                Detection(
                    image_id=int(item["image_id"]),
                    bbox=BBox.from_xywh(x, y, w, h),
                    score=float(item["score"]),
                    expression=str(item.get("expression", "")),
                    category_id=int(item["category_id"]),
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"results entry #{i} is malformed: {exc}") from exc
    return out
