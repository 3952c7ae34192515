"""Candidate referential expressions: generation, scoring, and selection.

A category's candidates are the raw class name (index 0) plus seeded-random
combinations of its descriptive terms. Each candidate is scored by how often
the detector recovers the few-shot ground truth when prompted with it, and
the highest-accuracy candidate wins.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .dataset import FewShotSet, GroundTruthBox, ImageRecord
from .errors import ParseError
from .geometry import BBox, iou
from .protocol.types import Detection

log = logging.getLogger(__name__)

TERMS_FROM_FILE = "file"
TERMS_FROM_LLM = "llm_client"

# Sent verbatim to whichever multimodal client produces the term sets.
DESCRIPTIVE_TERMS_PROMPT = (
    "Please provide five descriptive terms for the object within the red box."
)

# All non-empty subsets of a five-term set.
DEFAULT_CANDIDATE_COUNT = 31


@dataclass(frozen=True)
class LlmRequest:
    """One term-generation request for a multimodal client to fulfil."""

    image_ref: str
    box: BBox
    prompt: str


@dataclass(frozen=True)
class PromptTermSet:
    category_id: int
    terms: tuple[str, ...]
    source: str = TERMS_FROM_FILE

    def __post_init__(self) -> None:
        object.__setattr__(self, "terms", tuple(self.terms))
        if not self.terms:
            raise ValueError(f"category {self.category_id}: term set is empty")
        for t in self.terms:
            if not isinstance(t, str) or not t.strip():
                raise ValueError(f"category {self.category_id}: blank term {t!r}")
        if len(set(self.terms)) != len(self.terms):
            raise ValueError(f"category {self.category_id}: duplicate terms")
        if self.source not in (TERMS_FROM_FILE, TERMS_FROM_LLM):
            raise ValueError(f"unknown term source {self.source!r}")


@dataclass(frozen=True)
class CandidateExpression:
    """One expression tried for a category; index 0 is the raw class name."""

    category_id: int
    index: int
    text: str
    term_indices: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.text or self.text != self.text.strip():
            raise ValueError(f"candidate text {self.text!r} must be non-blank and stripped")
        if self.index == 0 and self.term_indices:
            raise ValueError("candidate 0 is the raw class name and has no term indices")


@dataclass(frozen=True)
class ExpressionScore:
    candidate: CandidateExpression
    per_shot_hit: tuple[bool, ...]
    acc: float

    @classmethod
    def from_hits(cls, candidate: CandidateExpression, hits: Sequence[bool]) -> "ExpressionScore":
        hits = tuple(bool(h) for h in hits)
        acc = (sum(hits) / len(hits)) if hits else 0.0
        return cls(candidate=candidate, per_shot_hit=hits, acc=acc)


@dataclass(frozen=True)
class SelectionResult:
    category_id: int
    best: CandidateExpression
    acc_before: float
    acc_after: float
    all_scores: tuple[ExpressionScore, ...]

    def __post_init__(self) -> None:
        if self.acc_after < self.acc_before:
            raise ValueError("selection cannot regress below the class-name accuracy")


def build_llm_request(shot: tuple[ImageRecord, GroundTruthBox]) -> LlmRequest:
    """Build the term-generation request for one few-shot pair.

    Rendering the highlighted box onto pixels is the client's concern; the
    request only references the image and carries the box in corner form.
    """
    image, gt = shot
    b = gt.bbox
    if b.x_min < 0 or b.y_min < 0 or b.x_max > image.width or b.y_max > image.height:
        raise ValueError(
            f"shot box {b} lies outside image {image.id} ({image.width}x{image.height})"
        )
    return LlmRequest(image_ref=image.file_name, box=b, prompt=DESCRIPTIVE_TERMS_PROMPT)


def generate_candidates(
    category_id: int,
    class_name: str,
    terms: PromptTermSet | None,
    n: int = DEFAULT_CANDIDATE_COUNT,
    seed: int = 0,
) -> list[CandidateExpression]:
    """Generate candidate expressions for one category.

    Candidate 0 is always the unmodified class name. The rest are seeded
    random picks among the distinct non-empty subsets of the term set, each
    joined with spaces in a seeded random order. Duplicate texts are dropped,
    so the result has at most 1 + min(n, 2^|terms| - 1) entries.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    name = class_name.strip()
    candidates = [CandidateExpression(category_id=category_id, index=0, text=name)]
    if terms is None:
        log.warning("category %d (%s): no term set, trying the class name only",
                    category_id, name)
        return candidates

    rng = random.Random(seed)
    m = len(terms.terms)
    subsets = [
        tuple(i for i in range(m) if mask >> i & 1)
        for mask in range(1, 1 << m)
    ]
    if n < len(subsets):
        chosen = rng.sample(subsets, n)
    else:
        chosen = list(subsets)
        rng.shuffle(chosen)

    seen = {name}
    index = 1
    for subset in chosen:
        order = list(subset)
        rng.shuffle(order)
        text = " ".join(terms.terms[i] for i in order)
        if text in seen:
            continue
        seen.add(text)
        candidates.append(
            CandidateExpression(
                category_id=category_id, index=index, text=text, term_indices=tuple(order)
            )
        )
        index += 1
    return candidates


def score_candidate(
    candidate: CandidateExpression,
    shots: FewShotSet,
    detections: Mapping[int, Sequence[Detection]],
    iou_threshold: float = 0.5,
) -> ExpressionScore:
    """Score one candidate against the few-shot ground truth.

    A shot is a hit iff the best predicted box beats the IoU threshold
    strictly; an empty prediction list is a miss. Detector confidences are
    ignored here, ranking plays no part in the indicator.
    """
    hits: list[bool] = []
    for j, (_, gt) in enumerate(shots.shots):
        if j not in detections:
            raise ValueError(f"no detections provided for shot {j}")
        best = max((iou(d.bbox, gt.bbox) for d in detections[j]), default=0.0)
        hits.append(best > iou_threshold)
    return ExpressionScore.from_hits(candidate, hits)


def select_best(scores: Sequence[ExpressionScore]) -> SelectionResult:
    """Pick the highest-accuracy candidate.

    Ties prefer the raw class name, then the lowest candidate index, which
    keeps prompts as close to the original vocabulary as the scores allow.
    """
    if not scores:
        raise ValueError("select_best needs at least one score")
    baseline = next((s for s in scores if s.candidate.index == 0), None)
    if baseline is None:
        raise ValueError("scores must include candidate index 0 (the class name)")
    best = min(scores, key=lambda s: (-s.acc, s.candidate.index))
    return SelectionResult(
        category_id=best.candidate.category_id,
        best=best.candidate,
        acc_before=baseline.acc,
        acc_after=best.acc,
        all_scores=tuple(scores),
    )


def load_term_sets(path: str | Path) -> dict[int, PromptTermSet]:
    """Load the per-category term file: JSON map category_id -> list of terms."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"term file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ParseError(f"term file is not valid JSON: {path}: {exc}")
    if not isinstance(raw, dict):
        raise ParseError(f"term file must be a JSON object: {path}")
    out: dict[int, PromptTermSet] = {}
    for key, terms in raw.items():
        try:
            category_id = int(key)
        except ValueError:
            raise ParseError(f"term file key {key!r} is not a category id")
        if not isinstance(terms, list) or not all(isinstance(t, str) for t in terms):
            raise ParseError(f"terms for category {key} must be a list of strings")
        try:
            out[category_id] = PromptTermSet(
                category_id=category_id, terms=tuple(terms), source=TERMS_FROM_FILE
            )
        except ValueError as exc:
            raise ParseError(str(exc))
    return out


def selection_to_json_obj(
    results: Sequence[SelectionResult],
    *,
    model_id: str,
    seed: int,
    iou_threshold: float,
    class_names: Mapping[int, str] | None = None,
) -> dict:
    """Machine-readable selection document (stable key order for reproducible bytes)."""
    return {
        "model": model_id,
        "seed": seed,
        "iou_threshold": iou_threshold,
        "results": [
            {
                "category_id": r.category_id,
                "class_name": (class_names or {}).get(r.category_id),
                "best": {
                    "index": r.best.index,
                    "text": r.best.text,
                    "term_indices": list(r.best.term_indices),
                },
                "acc_before": r.acc_before,
                "acc_after": r.acc_after,
                "scores": [
                    {
                        "index": s.candidate.index,
                        "text": s.candidate.text,
                        "acc": s.acc,
                        "hits": list(s.per_shot_hit),
                    }
                    for s in r.all_scores
                ],
            }
            for r in sorted(results, key=lambda r: r.category_id)
        ],
    }


def selection_from_json_obj(obj: Mapping) -> list[SelectionResult]:
    """Rebuild selection results from the document written by the align command."""
    if not isinstance(obj, Mapping) or "results" not in obj:
        raise ParseError("selection document must be an object with a 'results' list")
    results = []
    for rec in obj["results"]:
        scores = tuple(
            ExpressionScore(
                candidate=CandidateExpression(
                    category_id=rec["category_id"],
                    index=s["index"],
                    text=s["text"],
                ),
                per_shot_hit=tuple(bool(h) for h in s["hits"]),
                acc=float(s["acc"]),
            )
            for s in rec["scores"]
        )
        best = next(
            (s.candidate for s in scores if s.candidate.index == rec["best"]["index"]),
            None,
        )
        if best is None:
            best = CandidateExpression(
                category_id=rec["category_id"],
                index=rec["best"]["index"],
                text=rec["best"]["text"],
                term_indices=tuple(rec["best"].get("term_indices", ())),
            )
        results.append(
            SelectionResult(
                category_id=rec["category_id"],
                best=best,
                acc_before=float(rec["acc_before"]),
                acc_after=float(rec["acc_after"]),
                all_scores=scores,
            )
        )
    return results


def run_selection(
    client,
    model_id: str,
    shots_by_category: Mapping[int, FewShotSet],
    term_sets: Mapping[int, PromptTermSet] | None,
    class_names: Mapping[int, str],
    *,
    n: int = DEFAULT_CANDIDATE_COUNT,
    seed: int = 0,
    iou_threshold: float = 0.5,
) -> list[SelectionResult]:
    """Score every candidate of every category and pick the winners.

    ``client`` is anything with ``detect(model_id, requests)`` returning one
    detection list per request (the protocol client). All candidate/shot
    pairs of a category go out as one batch; the selection model itself is
    never finetuned here. Categories with an empty few-shot set are skipped
    with a warning, there is nothing to score against.
    """
    from .protocol.types import DetectRequest

    results: list[SelectionResult] = []
    for category_id in sorted(shots_by_category):
        shots = shots_by_category[category_id]
        if not shots.shots:
            log.warning("category %d has no shots; skipping selection", category_id)
            continue
        if category_id not in class_names:
            raise ValueError(f"no class name for category {category_id}")
        terms = (term_sets or {}).get(category_id)
        candidates = generate_candidates(
            category_id, class_names[category_id], terms, n=n, seed=seed
        )
        requests = [
            DetectRequest(
                image_id=shot_index,
                image_ref=image.file_name,
                expression=candidate.text,
                category_id=category_id,
            )
            for candidate in candidates
            for shot_index, (image, _) in enumerate(shots.shots)
        ]
        groups = client.detect(model_id, requests)
        num_shots = len(shots.shots)
        scores = []
        for ci, candidate in enumerate(candidates):
            per_shot = {
                j: groups[ci * num_shots + j] for j in range(num_shots)
            }
            scores.append(score_candidate(candidate, shots, per_shot, iou_threshold))
        results.append(select_best(scores))
    return results
