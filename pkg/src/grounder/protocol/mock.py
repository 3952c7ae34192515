"""Deterministic, scriptable stand-in for a real grounding detector.

A mock script declares the ground truth each image holds and, per stage, how
the detector answers a (category, expression) query: echo the ground truth,
echo it with bounded jitter, stay silent, or emit seeded random boxes. Each
finetune call advances the stage, which is how tests model "the detector got
better after training".

Script JSON schema::

    {
      "seed": 7,
      "images": {
        "img_001.jpg": {"width": 640, "height": 480,
                        "boxes": [{"category_id": 1, "bbox": [x, y, w, h]}]}
      },
      "default_policy": {"kind": "silent"},
      "stages": [
        {"rules": [
          {"category_id": 1, "expression": "small kick scooter",
           "policy": {"kind": "jittered_oracle", "iou_floor": 0.7, "score": 0.9}}
        ]}
      ]
    }

Policies: ``oracle`` (ground truth back, score 0.99 unless overridden),
``jittered_oracle`` (ground truth perturbed, IoU to the source never below
``iou_floor``), ``silent`` (nothing), ``random_boxes`` (``count`` seeded
boxes, scores uniform in ``score`` = [lo, hi]). A rule matches when its
``category_id``/``expression`` fields (each optional) equal the request's.

Responses are a pure function of (script, seed, stage, request), so repeated
identical queries return identical boxes regardless of call order.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from ..errors import AdapterError, ConfigError
from ..geometry import BBox, iou
from . import wire

POLICY_ORACLE = "oracle"
POLICY_JITTERED = "jittered_oracle"
POLICY_SILENT = "silent"
POLICY_RANDOM = "random_boxes"

_DEFAULT_IMAGE_SIZE = (640, 480)


@dataclass(frozen=True)
class MockPolicy:
    kind: str
    iou_floor: float = 0.7
    score: tuple[float, float] = (0.9, 0.9)
    count: int = 1

    def __post_init__(self) -> None:
        if self.kind not in (POLICY_ORACLE, POLICY_JITTERED, POLICY_SILENT, POLICY_RANDOM):
            raise ConfigError(f"unknown mock policy kind {self.kind!r}")
        if not (0.0 <= self.iou_floor <= 1.0):
            raise ConfigError("iou_floor must lie in [0, 1]")
        lo, hi = self.score
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"score range {self.score} must satisfy 0 <= lo <= hi <= 1")

    @classmethod
    def from_json(cls, obj: Mapping) -> "MockPolicy":
        if not isinstance(obj, Mapping) or "kind" not in obj:
            raise ConfigError(f"policy must be an object with a 'kind': {obj!r}")
        score = obj.get("score", 0.99 if obj["kind"] == POLICY_ORACLE else 0.9)
        if isinstance(score, (int, float)):
            score = (float(score), float(score))
        elif isinstance(score, (list, tuple)) and len(score) == 2:
            score = (float(score[0]), float(score[1]))
        else:
            raise ConfigError(f"policy score must be a number or [lo, hi]: {score!r}")
        return cls(
            kind=obj["kind"],
            iou_floor=float(obj.get("iou_floor", 0.7)),
            score=score,
            count=int(obj.get("count", 1)),
        )


@dataclass(frozen=True)
class MockRule:
    policy: MockPolicy
    category_id: int | None = None
    expression: str | None = None

    def matches(self, category_id: int, expression: str) -> bool:
        if self.category_id is not None and self.category_id != category_id:
            return False
        if self.expression is not None and self.expression != expression:
            return False
        return True


@dataclass(frozen=True)
class MockImage:
    width: int
    height: int
    boxes: tuple[tuple[int, BBox], ...] = ()


@dataclass(frozen=True)
class MockScript:
    seed: int = 0
    images: Mapping[str, MockImage] = field(default_factory=dict)
    stages: tuple[tuple[MockRule, ...], ...] = ((),)
    default_policy: MockPolicy = MockPolicy(kind=POLICY_SILENT)

    def __post_init__(self) -> None:
        if not self.stages:
            raise ConfigError("mock script needs at least one stage")
        known = {cid for image in self.images.values() for cid, _ in image.boxes}
        for stage in self.stages:
            for rule in stage:
                if rule.category_id is not None and rule.category_id not in known:
                    raise ConfigError(
                        f"mock rule references category {rule.category_id} "
                        "that no scripted image contains"
                    )

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "MockScript":
        if not isinstance(obj, Mapping):
            raise ConfigError("mock script must be a JSON object")
        images: dict[str, MockImage] = {}
        for ref, rec in obj.get("images", {}).items():
            boxes = []
            for b in rec.get("boxes", []):
                x, y, w, h = (float(v) for v in b["bbox"])
                boxes.append((int(b["category_id"]), BBox.from_xywh(x, y, w, h)))
            images[ref] = MockImage(
                width=int(rec.get("width", _DEFAULT_IMAGE_SIZE[0])),
                height=int(rec.get("height", _DEFAULT_IMAGE_SIZE[1])),
                boxes=tuple(boxes),
            )
        stages = []
        for stage in obj.get("stages", [{}]):
            rules = []
            for rule in stage.get("rules", []):
                rules.append(
                    MockRule(
                        policy=MockPolicy.from_json(rule.get("policy", {"kind": POLICY_SILENT})),
                        category_id=rule.get("category_id"),
                        expression=rule.get("expression"),
                    )
                )
            stages.append(tuple(rules))
        default = obj.get("default_policy", {"kind": POLICY_SILENT})
        return cls(
            seed=int(obj.get("seed", 0)),
            images=images,
            stages=tuple(stages) or ((),),
            default_policy=MockPolicy.from_json(default),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "MockScript":
        path = Path(path)
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"mock script not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"mock script is not valid JSON: {path}: {exc}")
        return cls.from_json_obj(obj)


def _derived_rng(seed: int, stage: int, image_ref: str, expression: str, category_id: int) -> random.Random:
    key = f"{seed}|{stage}|{image_ref}|{expression}|{category_id}".encode("utf-8")
    digest = hashlib.sha256(key).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _jittered(rng: random.Random, source: BBox, floor: float, width: float, height: float) -> BBox:
    """A seeded perturbation of ``source`` whose IoU with it stays >= floor."""
    w, h = source.width, source.height
    if w <= 0.0 or h <= 0.0:
        return source
    amplitude = max(1.0 - floor, 0.0)
    for _ in range(64):
        dx = rng.uniform(-amplitude, amplitude) * w * 0.5
        dy = rng.uniform(-amplitude, amplitude) * h * 0.5
        sw = 1.0 + rng.uniform(-amplitude, amplitude) * 0.3
        sh = 1.0 + rng.uniform(-amplitude, amplitude) * 0.3
        candidate = BBox(
            source.x_min + dx,
            source.y_min + dy,
            source.x_min + dx + w * sw,
            source.y_min + dy + h * sh,
        ).clamp(width, height)
        if candidate.width > 0 and candidate.height > 0 and iou(candidate, source) >= floor:
            return candidate
        amplitude *= 0.5
    return source


def _sample_score(rng: random.Random, score: tuple[float, float]) -> float:
    lo, hi = score
    return lo if lo == hi else rng.uniform(lo, hi)


class MockDetector:
    """Protocol adapter backed by a :class:`MockScript`.

    Exposes the server-level interface consumed by
    :mod:`grounder.protocol.server`: groups of (xywh bbox, score) tuples.
    Counters (`detect_calls`, `finetune_calls`) are kept for tests.
    """

    initial_model_id = "m0"

    def __init__(self, script: MockScript):
        self.script = script
        self.known_models: set[str] = {self.initial_model_id}
        self.detect_calls = 0
        self.finetune_calls: list[tuple[str, str, dict]] = []

    @property
    def stage_index(self) -> int:
        return min(len(self.finetune_calls), len(self.script.stages) - 1)

    def _policy_for(self, category_id: int, expression: str) -> MockPolicy:
        for rule in self.script.stages[self.stage_index]:
            if rule.matches(category_id, expression):
                return rule.policy
        return self.script.default_policy

    def detect(
        self, model_id: str, requests: Sequence[Mapping]
    ) -> list[list[tuple[list[float], float]]]:
        if model_id not in self.known_models:
            raise AdapterError(f"unknown model id {model_id!r}", kind=wire.ERR_UNKNOWN_MODEL)
        self.detect_calls += 1
        groups: list[list[tuple[list[float], float]]] = []
        for req in requests:
            image_ref = req["image"]
            expression = req["expression"]
            category_id = req["category_id"]
            image = self.script.images.get(image_ref)
            width, height = (
                (image.width, image.height) if image else _DEFAULT_IMAGE_SIZE
            )
            gt_boxes = [b for cid, b in (image.boxes if image else ()) if cid == category_id]
            policy = self._policy_for(category_id, expression)
            rng = _derived_rng(self.script.seed, self.stage_index, image_ref, expression, category_id)
            group: list[tuple[list[float], float]] = []
            if policy.kind == POLICY_ORACLE:
                for box in gt_boxes:
                    group.append((box.to_xywh(), _sample_score(rng, policy.score)))
            elif policy.kind == POLICY_JITTERED:
                for box in gt_boxes:
                    jit = _jittered(rng, box, policy.iou_floor, width, height)
                    group.append((jit.to_xywh(), _sample_score(rng, policy.score)))
            elif policy.kind == POLICY_RANDOM:
                for _ in range(policy.count):
                    x0, x1 = sorted(rng.uniform(0, width) for _ in range(2))
                    y0, y1 = sorted(rng.uniform(0, height) for _ in range(2))
                    group.append(([x0, y0, x1 - x0, y1 - y0], _sample_score(rng, policy.score)))
            group.sort(key=lambda item: -item[1])
            groups.append(group)
        return groups

    def finetune(self, model_id: str, dataset: str, config: Mapping) -> str:
        if model_id not in self.known_models:
            raise AdapterError(f"unknown model id {model_id!r}", kind=wire.ERR_UNKNOWN_MODEL)
        self.finetune_calls.append((model_id, dataset, dict(config)))
        new_id = f"m{len(self.finetune_calls)}"
        while new_id in self.known_models:
            new_id += "+"
        self.known_models.add(new_id)
        return new_id


def mock_detector(script: MockScript | Mapping | str | Path) -> MockDetector:
    """Build a mock adapter from a script object, JSON mapping, or file path."""
    if isinstance(script, MockScript):
        return MockDetector(script)
    if isinstance(script, (str, Path)):
        return MockDetector(MockScript.from_file(script))
    return MockDetector(MockScript.from_json_obj(script))
