"""COCO-format ingestion, few-shot assembly, and merged annotation output.

Two sidecar conventions are understood on top of stock COCO:

* annotation objects may carry ``"source": "pseudo"`` plus ``"score"`` for
  detector predictions promoted to training labels;
* an optional federated-metadata JSON maps image id to the list of category
  ids that were exhaustively verified on that image. When the sidecar is
  absent every image counts as verified for every category.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import IntegrityError, ParseError
from .geometry import BBox, iou

log = logging.getLogger(__name__)

SOURCE_HUMAN = "human"
SOURCE_PSEUDO = "pseudo"

# Tolerance for "inside the image" checks on data we wrote ourselves.
_BOUNDS_EPS = 1e-9


@dataclass(frozen=True)
class CategoryDef:
    id: int
    name: str

    def __post_init__(self) -> None:
        if not isinstance(self.id, int) or isinstance(self.id, bool) or self.id <= 0:
            raise ValueError(f"category id must be a positive integer, got {self.id!r}")
        if not isinstance(self.name, str) or not self.name.strip():
            raise ValueError(f"category {self.id} has a blank name")


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    verified_categories: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image {self.id} has non-positive dimensions")
        object.__setattr__(self, "verified_categories", frozenset(self.verified_categories))


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: int
    category_id: int
    bbox: BBox
    source: str = SOURCE_HUMAN
    score: float | None = None

    def __post_init__(self) -> None:
        if self.source not in (SOURCE_HUMAN, SOURCE_PSEUDO):
            raise ValueError(f"unknown box source {self.source!r}")
        if self.source == SOURCE_HUMAN and self.score is not None:
            raise ValueError("human boxes must not carry a score")
        if self.source == SOURCE_PSEUDO:
            if self.score is None or not (0.0 < self.score <= 1.0):
                raise ValueError(f"pseudo boxes need a score in (0, 1], got {self.score!r}")


@dataclass(frozen=True)
class FewShotSet:
    """Per-category list of (image, ground-truth box) shot pairs."""

    category_id: int
    shots: tuple[tuple[ImageRecord, GroundTruthBox], ...]
    short: bool = False

    def __post_init__(self) -> None:
        for _, gt in self.shots:
            if gt.category_id != self.category_id:
                raise ValueError(
                    f"shot of category {gt.category_id} in set for {self.category_id}"
                )

    @property
    def multi_instance_image_ids(self) -> tuple[int, ...]:
        """Images that contribute more than one shot (multiple instances).

        Shot semantics for such images are ambiguous, so they are surfaced
        for reporting instead of being silently resolved.
        """
        counts = Counter(img.id for img, _ in self.shots)
        return tuple(sorted(i for i, n in counts.items() if n > 1))


def _require(condition: bool, message: str, error=ParseError) -> None:
    if not condition:
        raise error(message)


def load_federated_metadata(path: str | Path) -> dict[int, set[int]]:
    """Load the sidecar map image_id -> verified category ids."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"federated metadata file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"federated metadata is not valid JSON: {path}: {exc}")
    _require(isinstance(raw, dict), f"federated metadata must be a JSON object: {path}")
    out: dict[int, set[int]] = {}
    for key, value in raw.items():
        try:
            image_id = int(key)
        except ValueError:
            raise ParseError(f"federated metadata key {key!r} is not an image id")
        _require(
            isinstance(value, list) and all(isinstance(c, int) for c in value),
            f"federated metadata for image {key} must be a list of category ids",
        )
        out[image_id] = set(value)
    return out


def load_coco(
    path: str | Path,
    federated_path: str | Path | None = None,
) -> tuple[list[CategoryDef], list[ImageRecord], list[GroundTruthBox]]:
    """Load a COCO annotation document into domain records.

    Bboxes are converted from (x, y, w, h) to corner form. Boxes that spill
    past image bounds are clamped with a warning; dangling cross-references
    raise :class:`IntegrityError` naming the offending record.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"annotation file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path} is not valid JSON: {exc}")
    _require(isinstance(doc, dict), f"{path}: top level must be a JSON object")
    for key in ("images", "annotations", "categories"):
        _require(isinstance(doc.get(key), list), f"{path}: missing or non-list {key!r}")

    categories: list[CategoryDef] = []
    for i, rec in enumerate(doc["categories"]):
        _require(isinstance(rec, dict), f"category #{i} is not an object")
        _require(
            isinstance(rec.get("id"), int) and isinstance(rec.get("name"), str),
            f"category #{i} needs integer 'id' and string 'name'",
        )
        try:
            categories.append(CategoryDef(id=rec["id"], name=rec["name"]))
        except ValueError as exc:
            raise ParseError(f"category #{i}: {exc}")
    ids = [c.id for c in categories]
    _require(len(set(ids)) == len(ids), "duplicate category ids", IntegrityError)
    category_ids = set(ids)

    verified: Mapping[int, set[int]] | None = None
    if federated_path is not None:
        verified = load_federated_metadata(federated_path)

    images: list[ImageRecord] = []
    for i, rec in enumerate(doc["images"]):
        _require(isinstance(rec, dict), f"image #{i} is not an object")
        for key, kind in (("id", int), ("file_name", str), ("width", int), ("height", int)):
            _require(isinstance(rec.get(key), kind), f"image #{i} needs {kind.__name__} {key!r}")
        if verified is None:
            image_verified = frozenset(category_ids)
        else:
            image_verified = frozenset(verified.get(rec["id"], set()))
            unknown = image_verified - category_ids
            if unknown:
                raise IntegrityError(
                    f"federated metadata for image {rec['id']} names unknown "
                    f"categories {sorted(unknown)}"
                )
        try:
            images.append(
                ImageRecord(
                    id=rec["id"],
                    file_name=rec["file_name"],
                    width=rec["width"],
                    height=rec["height"],
                    verified_categories=image_verified,
                )
            )
        except ValueError as exc:
            raise ParseError(f"image #{i} (id={rec.get('id')}): {exc}")
    image_ids = [img.id for img in images]
    _require(len(set(image_ids)) == len(image_ids), "duplicate image ids", IntegrityError)
    images_by_id = {img.id: img for img in images}
    if verified is not None:
        dangling = set(verified) - set(image_ids)
        if dangling:
            raise IntegrityError(
                f"federated metadata references unknown image ids {sorted(dangling)}"
            )

    annotations: list[GroundTruthBox] = []
    for i, rec in enumerate(doc["annotations"]):
        label = f"annotation #{i}" + (f" (id={rec.get('id')})" if isinstance(rec, dict) else "")
        _require(isinstance(rec, dict), f"{label} is not an object")
        _require(isinstance(rec.get("image_id"), int), f"{label} needs integer 'image_id'")
        _require(isinstance(rec.get("category_id"), int), f"{label} needs integer 'category_id'")
        bbox_raw = rec.get("bbox")
        _require(
            isinstance(bbox_raw, list)
            and len(bbox_raw) == 4
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in bbox_raw),
            f"{label} needs a 4-number 'bbox'",
        )
        if rec["image_id"] not in images_by_id:
            raise IntegrityError(f"{label} references missing image_id={rec['image_id']}")
        if rec["category_id"] not in category_ids:
            raise IntegrityError(f"{label} references missing category_id={rec['category_id']}")
        x, y, w, h = (float(v) for v in bbox_raw)
        if w < 0 or h < 0:
            raise ParseError(f"{label} has negative bbox extent {bbox_raw}")
        image = images_by_id[rec["image_id"]]
        box = BBox.from_xywh(x, y, w, h)
        clamped = box.clamp(image.width, image.height)
        if clamped != box:
            log.warning(
                "%s: bbox %s exceeds image %s bounds (%dx%d); clamped",
                label, bbox_raw, image.id, image.width, image.height,
            )
            box = clamped
        source = rec.get("source", SOURCE_HUMAN)
        score = rec.get("score")
        try:
            annotations.append(
                GroundTruthBox(
                    image_id=rec["image_id"],
                    category_id=rec["category_id"],
                    bbox=box,
                    source=source,
                    score=float(score) if score is not None else None,
                )
            )
        except ValueError as exc:
            raise ParseError(f"{label}: {exc}")

    return categories, images, annotations


def write_coco(
    categories: Sequence[CategoryDef],
    images: Sequence[ImageRecord],
    annotations: Sequence[GroundTruthBox],
    path: str | Path,
) -> Path:
    """Write domain records back out as a COCO document.

    Refuses to write structures that would not survive a round-trip through
    :func:`load_coco`: dangling references, duplicate ids, out-of-bounds
    boxes. Pseudo boxes carry the ``source``/``score`` extension keys.
    """
    category_ids = {c.id for c in categories}
    if len(category_ids) != len(categories):
        raise IntegrityError("duplicate category ids")
    images_by_id = {img.id: img for img in images}
    if len(images_by_id) != len(images):
        raise IntegrityError("duplicate image ids")
    for i, ann in enumerate(annotations):
        if ann.image_id not in images_by_id:
            raise IntegrityError(f"annotation #{i} references missing image_id={ann.image_id}")
        if ann.category_id not in category_ids:
            raise IntegrityError(
                f"annotation #{i} references missing category_id={ann.category_id}"
            )
        image = images_by_id[ann.image_id]
        b = ann.bbox
        if (
            b.x_min < -_BOUNDS_EPS
            or b.y_min < -_BOUNDS_EPS
            or b.x_max > image.width + _BOUNDS_EPS
            or b.y_max > image.height + _BOUNDS_EPS
        ):
            raise IntegrityError(
                f"annotation #{i} bbox exceeds image {image.id} bounds; clamp before writing"
            )

    doc = {
        "categories": [{"id": c.id, "name": c.name} for c in categories],
        "images": [
            {"id": img.id, "file_name": img.file_name, "width": img.width, "height": img.height}
            for img in images
        ],
        "annotations": [],
    }
    for i, ann in enumerate(annotations, start=1):
        x, y, w, h = ann.bbox.to_xywh()
        rec = {
            "id": i,
            "image_id": ann.image_id,
            "category_id": ann.category_id,
            "bbox": [x, y, w, h],
            "area": w * h,
            "iscrowd": 0,
        }
        if ann.source == SOURCE_PSEUDO:
            rec["source"] = SOURCE_PSEUDO
            rec["score"] = ann.score
        doc["annotations"].append(rec)

    path = Path(path)
    try:
        path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot write {path}: {exc}")
    return path


def write_federated_metadata(images: Sequence[ImageRecord], path: str | Path) -> Path:
    """Write the sidecar map for the given images."""
    doc = {str(img.id): sorted(img.verified_categories) for img in images}
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return path


def build_few_shot_sets(
    annotations: Sequence[GroundTruthBox],
    images: Sequence[ImageRecord],
    k: int = 10,
    seed: int = 0,
    categories: Sequence[CategoryDef] | None = None,
) -> dict[int, FewShotSet]:
    """Assemble k shots per category from human-labeled annotations.

    Selection is seeded-random over each category's annotations, so runs are
    repeatable without assuming any particular file order. Categories with
    fewer than k boxes come back flagged short; categories with none (known
    via ``categories``) come back as explicit empty sets.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    images_by_id = {img.id: img for img in images}
    per_category: dict[int, list[GroundTruthBox]] = {}
    for ann in annotations:
        if ann.source != SOURCE_HUMAN:
            continue
        if ann.image_id not in images_by_id:
            raise IntegrityError(f"annotation references missing image_id={ann.image_id}")
        per_category.setdefault(ann.category_id, []).append(ann)

    category_ids = sorted(per_category)
    if categories is not None:
        category_ids = sorted({c.id for c in categories} | set(per_category))

    out: dict[int, FewShotSet] = {}
    for category_id in category_ids:
        candidates = per_category.get(category_id, [])
        # Per-category generator: adding a category never reshuffles others.
        rng = random.Random(f"{seed}:{category_id}")
        if len(candidates) > k:
            chosen = rng.sample(candidates, k)
        else:
            chosen = list(candidates)
        shots = tuple((images_by_id[ann.image_id], ann) for ann in chosen)
        out[category_id] = FewShotSet(
            category_id=category_id,
            shots=shots,
            short=len(shots) < k,
        )
        if not shots:
            log.warning("category %d has no annotations; empty few-shot set", category_id)
    return out


def merge_annotations(
    human: Sequence[GroundTruthBox],
    pseudo: Sequence[GroundTruthBox],
    dedup_iou: float = 0.5,
) -> list[GroundTruthBox]:
    """Merge pseudo-labels into human ground truth.

    Every human box survives. A pseudo box is dropped iff some human box of
    the same category on the same image overlaps it with iou >= dedup_iou;
    survivors keep their scores.
    """
    for p in pseudo:
        if p.source != SOURCE_PSEUDO:
            raise ValueError("merge_annotations got a non-pseudo box in the pseudo list")
    by_image_cat: dict[tuple[int, int], list[GroundTruthBox]] = {}
    for h in human:
        by_image_cat.setdefault((h.image_id, h.category_id), []).append(h)

    merged = list(human)
    for p in pseudo:
        rivals = by_image_cat.get((p.image_id, p.category_id), ())
        if any(iou(h.bbox, p.bbox) >= dedup_iou for h in rivals):
            continue
        merged.append(p)
    return merged
