"""Pseudo-label generation and the iterative self-training loop.

One iteration: prompt the current model with each category's selected
expression on every verified (image, category) pair, keep detections whose
confidence strictly exceeds the threshold as pseudo ground truth, merge them
with the human labels, and finetune. The loop repeats until validation mAP
plateaus or the iteration budget runs out.

Artifacts land under ``workdir/iter_<k>/`` as ``dataset.json`` (merged
training set), ``pseudo_labels.json`` (the batch, with provenance), and
``metrics.json`` (validation score for the model that produced the batch).
Iteration 0 is the pre-finetune state, so a run with ``max_iterations`` N
leaves N+1 iteration directories and N finetuned models behind.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .dataset import (
    SOURCE_PSEUDO,
    CategoryDef,
    GroundTruthBox,
    ImageRecord,
    merge_annotations,
    write_coco,
)
from .errors import AdapterError, ConfigError, ProtocolError, TransportError
from .evaluation import evaluate
from .geometry import BBox
from .protocol.types import DetectRequest, Detection, FinetuneConfig

log = logging.getLogger(__name__)

DEFAULT_SCORE_THRESHOLD = 0.3


def effective_threshold(
    category_id: int,
    base: float,
    overrides: Mapping[int, float] | None,
) -> float:
    value = base if overrides is None else overrides.get(category_id, base)
    if not (0.0 <= value <= 1.0):
        raise ConfigError(f"score threshold for category {category_id} must lie in [0, 1]")
    return value


@dataclass(frozen=True)
class PseudoLabelBatch:
    """Labels one model produced in one pass, plus enough provenance to audit."""

    model_id: str
    threshold: float
    labels: tuple[GroundTruthBox, ...]
    queried_pairs: int
    expressions: Mapping[int, str] = field(default_factory=dict)
    per_category_thresholds: Mapping[int, float] = field(default_factory=dict)
    iteration: int = 0

    def __post_init__(self) -> None:
        if self.iteration < 0:
            raise ValueError("batch iteration must be >= 0")
        for label in self.labels:
            if label.source != SOURCE_PSEUDO:
                raise ValueError("pseudo-label batch got a non-pseudo box")
        object.__setattr__(self, "expressions", dict(self.expressions))
        object.__setattr__(self, "per_category_thresholds", dict(self.per_category_thresholds))

    def labels_per_category(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for label in self.labels:
            counts[label.category_id] = counts.get(label.category_id, 0) + 1
        return counts

    def to_json_obj(self) -> dict:
        return {
            "iteration": self.iteration,
            "model": self.model_id,
            "threshold": self.threshold,
            "per_category_thresholds": {
                str(cid): value for cid, value in sorted(self.per_category_thresholds.items())
            },
            "expressions": {str(cid): text for cid, text in sorted(self.expressions.items())},
            "queried_pairs": self.queried_pairs,
            "labels": [
                {
                    "image_id": label.image_id,
                    "category_id": label.category_id,
                    "bbox": label.bbox.to_xywh(),
                    "score": label.score,
                }
                for label in self.labels
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "PseudoLabelBatch":
        labels = tuple(
            GroundTruthBox(
                image_id=int(rec["image_id"]),
                category_id=int(rec["category_id"]),
                bbox=BBox.from_xywh(*(float(v) for v in rec["bbox"])),
                source=SOURCE_PSEUDO,
                score=float(rec["score"]),
            )
            for rec in obj["labels"]
        )
        return cls(
            model_id=obj["model"],
            threshold=float(obj["threshold"]),
            labels=labels,
            queried_pairs=int(obj.get("queried_pairs", 0)),
            expressions={int(k): v for k, v in obj.get("expressions", {}).items()},
            per_category_thresholds={
                int(k): float(v) for k, v in obj.get("per_category_thresholds", {}).items()
            },
            iteration=int(obj.get("iteration", 0)),
        )


def _query_pairs(
    images: Sequence[ImageRecord],
    expressions: Mapping[int, str],
    annotations: Sequence[GroundTruthBox],
    include_labeled: bool,
) -> list[tuple[ImageRecord, int]]:
    """Verified (image, category) pairs eligible for pseudo-labeling."""
    human_pairs = {
        (ann.image_id, ann.category_id)
        for ann in annotations
        if ann.source != SOURCE_PSEUDO
    }
    missing: set[int] = set()
    pairs: list[tuple[ImageRecord, int]] = []
    for image in images:
        for category_id in sorted(image.verified_categories):
            if category_id not in expressions:
                missing.add(category_id)
                continue
            if not include_labeled and (image.id, category_id) in human_pairs:
                continue
            pairs.append((image, category_id))
    for category_id in sorted(missing):
        log.warning("no selected expression for category %d; skipping its pairs", category_id)
    return pairs


def generate_pseudo_labels(
    client,
    model_id: str,
    images: Sequence[ImageRecord],
    annotations: Sequence[GroundTruthBox],
    expressions: Mapping[int, str],
    *,
    threshold: float = DEFAULT_SCORE_THRESHOLD,
    per_category_thresholds: Mapping[int, float] | None = None,
    include_labeled: bool = False,
    iteration: int = 0,
) -> PseudoLabelBatch:
    """Harvest confident detections as pseudo ground truth.

    Only verified (image, category) pairs are queried; by default pairs that
    already carry a human box are left alone, self-training targets the
    unlabeled remainder. A detection survives iff its score strictly exceeds
    the category's threshold. Boxes are clamped to image bounds; anything
    degenerate after clamping is dropped.
    """
    effective_threshold(0, threshold, None)
    pairs = _query_pairs(images, expressions, annotations, include_labeled)
    requests = [
        DetectRequest(
            image_id=image.id,
            image_ref=image.file_name,
            expression=expressions[category_id],
            category_id=category_id,
        )
        for image, category_id in pairs
    ]
    groups = client.detect(model_id, requests) if requests else []
    labels: list[GroundTruthBox] = []
    dropped_degenerate = 0
    for (image, category_id), group in zip(pairs, groups):
        cutoff = effective_threshold(category_id, threshold, per_category_thresholds)
        for detection in group:
            if not detection.score > cutoff:
                continue
            box = detection.bbox.clamp(image.width, image.height)
            if box.width <= 0.0 or box.height <= 0.0:
                dropped_degenerate += 1
                continue
            labels.append(
                GroundTruthBox(
                    image_id=image.id,
                    category_id=category_id,
                    bbox=box,
                    source=SOURCE_PSEUDO,
                    score=detection.score,
                )
            )
    if dropped_degenerate:
        log.warning("dropped %d degenerate boxes after clamping", dropped_degenerate)
    return PseudoLabelBatch(
        model_id=model_id,
        threshold=threshold,
        labels=tuple(labels),
        queried_pairs=len(pairs),
        expressions=dict(expressions),
        per_category_thresholds=dict(per_category_thresholds or {}),
        iteration=iteration,
    )


def refine_batch(
    client,
    previous: PseudoLabelBatch,
    new_model_id: str,
    images: Sequence[ImageRecord],
    annotations: Sequence[GroundTruthBox],
    *,
    include_labeled: bool = False,
) -> PseudoLabelBatch:
    """Regenerate a batch with a model descended from the one that made it.

    Refinement is a clean re-query, not an edit: the previous labels are
    discarded wholesale and the new model answers from scratch, so each
    batch's provenance is exactly one model. The new model must sit on the
    finetune chain below (or at) the previous batch's model; handing in an
    unrelated model is a caller mistake, not something to silently accept.
    """
    if not client.lineage.is_descendant(new_model_id, previous.model_id):
        raise ConfigError(
            f"model {new_model_id!r} does not descend from {previous.model_id!r}; "
            "refinement must follow the finetune chain"
        )
    return generate_pseudo_labels(
        client,
        new_model_id,
        images,
        annotations,
        previous.expressions,
        threshold=previous.threshold,
        per_category_thresholds=previous.per_category_thresholds,
        include_labeled=include_labeled,
        iteration=previous.iteration + 1,
    )


def validation_map(
    client,
    model_id: str,
    images: Sequence[ImageRecord],
    annotations: Sequence[GroundTruthBox],
    expressions: Mapping[int, str],
    *,
    iou_threshold: float = 0.5,
) -> float:
    """Holdout mAP at one IoU threshold for the current model.

    Every verified (image, category) pair with a selected expression is
    queried, labeled or not; this is evaluation, not harvesting.
    """
    pairs = _query_pairs(images, expressions, annotations, include_labeled=True)
    requests = [
        DetectRequest(
            image_id=image.id,
            image_ref=image.file_name,
            expression=expressions[category_id],
            category_id=category_id,
        )
        for image, category_id in pairs
    ]
    groups = client.detect(model_id, requests) if requests else []
    detections: list[Detection] = [d for group in groups for d in group]
    human = [a for a in annotations if a.source != SOURCE_PSEUDO]
    report = evaluate(
        detections,
        human,
        {img.id: img for img in images},
        iou_thresholds=(iou_threshold,),
    )
    value = report.mean_ap_at(iou_threshold)
    return 0.0 if value is None else value


@dataclass(frozen=True)
class StoppingRule:
    """When to stop finetuning: budget exhausted or validation plateaued."""

    max_iterations: int = 3
    epsilon: float = 1e-3
    patience: int = 1

    def __post_init__(self) -> None:
        if self.max_iterations < 0:
            raise ConfigError("max_iterations must be >= 0")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")

    def should_stop(self, history: Sequence[float]) -> str | None:
        """Reason to stop given the validation history so far, else None.

        ``history`` holds one entry per completed iteration, so entry k is
        the score after k finetunes.
        """
        finetunes_done = len(history) - 1
        if finetunes_done >= self.max_iterations:
            return "max_iterations"
        if finetunes_done >= self.patience:
            recent = [
                history[i + 1] - history[i]
                for i in range(finetunes_done - self.patience, finetunes_done)
            ]
            if all(delta < self.epsilon for delta in recent):
                return "plateau"
        return None


@dataclass
class IterationState:
    """Where a self-training run ended up; everything a caller needs to resume.

    ``history`` is the bare validation series the stopping rule consumes;
    ``records`` holds the full per-iteration metrics dicts as written to the
    ``metrics.json`` artifacts.
    """

    model_id: str
    history: list[float] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    model_chain: list[str] = field(default_factory=list)
    iteration_dirs: list[Path] = field(default_factory=list)
    stop_reason: str | None = None
    error: str | None = None

    @property
    def finetunes_completed(self) -> int:
        return len(self.model_chain) - 1 if self.model_chain else 0

    def to_json_obj(self) -> dict:
        return {
            "model": self.model_id,
            "val_history": list(self.history),
            "history": [dict(record) for record in self.records],
            "model_chain": list(self.model_chain),
            "iterations": [str(p) for p in self.iteration_dirs],
            "stop_reason": self.stop_reason,
            "error": self.error,
        }


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


def run_iteration_loop(
    client,
    *,
    categories: Sequence[CategoryDef],
    train_images: Sequence[ImageRecord],
    train_annotations: Sequence[GroundTruthBox],
    val_images: Sequence[ImageRecord],
    val_annotations: Sequence[GroundTruthBox],
    expressions: Mapping[int, str],
    workdir: str | Path,
    stopping: StoppingRule | None = None,
    finetune_config: FinetuneConfig | None = None,
    threshold: float = DEFAULT_SCORE_THRESHOLD,
    per_category_thresholds: Mapping[int, float] | None = None,
    include_labeled: bool = False,
    initial_model_id: str = "m0",
) -> IterationState:
    """Run the self-training loop end to end; never raises for adapter faults.

    Each iteration writes its artifacts before the stopping rule or the
    finetune runs, so whatever happens, the directory tree documents how far
    the run got. Adapter and transport failures stop the loop and land in
    ``state.error``; the artifacts written so far stay put.
    """
    stopping = stopping if stopping is not None else StoppingRule()
    finetune_config = finetune_config if finetune_config is not None else FinetuneConfig()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    human = [a for a in train_annotations if a.source != SOURCE_PSEUDO]
    state = IterationState(model_id=initial_model_id, model_chain=[initial_model_id])

    iteration = 0
    while True:
        iter_dir = workdir / f"iter_{iteration}"
        iter_dir.mkdir(parents=True, exist_ok=True)
        try:
            batch = generate_pseudo_labels(
                client,
                state.model_id,
                train_images,
                human,
                expressions,
                threshold=threshold,
                per_category_thresholds=per_category_thresholds,
                include_labeled=include_labeled,
                iteration=iteration,
            )
            merged = merge_annotations(human, batch.labels)
            dataset_path = iter_dir / "dataset.json"
            write_coco(categories, train_images, merged, dataset_path)
            _write_json(iter_dir / "pseudo_labels.json", batch.to_json_obj())
            score = validation_map(
                client, state.model_id, val_images, val_annotations, expressions
            )
        except (AdapterError, TransportError, ProtocolError) as exc:
            state.error = f"iteration {iteration}: {exc}"
            log.error("self-training stopped: %s", state.error)
            break
        state.history.append(score)
        state.iteration_dirs.append(iter_dir)
        metrics = {
            "iteration": iteration,
            "model": state.model_id,
            "val_map_50": score,
            "num_pseudo_labels": len(batch.labels),
            "labels_per_category": {
                str(cid): count for cid, count in sorted(batch.labels_per_category().items())
            },
            "queried_pairs": batch.queried_pairs,
            "num_train_boxes": len(merged),
        }
        state.records.append(metrics)
        _write_json(iter_dir / "metrics.json", metrics)
        reason = stopping.should_stop(state.history)
        if reason is not None:
            state.stop_reason = reason
            break
        try:
            handle = client.finetune(state.model_id, dataset_path, finetune_config)
        except (AdapterError, TransportError, ProtocolError) as exc:
            state.error = f"finetune after iteration {iteration}: {exc}"
            log.error("self-training stopped: %s", state.error)
            break
        state.model_id = handle.id
        state.model_chain.append(handle.id)
        iteration += 1

    _write_json(workdir / "summary.json", state.to_json_obj())
    return state
