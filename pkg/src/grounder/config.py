"""Run configuration: defaults, YAML files, environment, and flag overrides.

Precedence, lowest to highest: built-in defaults, config file, environment
variables, command-line flags. The resolved configuration is written into
run manifests verbatim so a run can be reproduced from its output directory
alone; manifests carry no timestamps or host details, reruns are
byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import yaml

from .errors import ConfigError
from .protocol.types import FinetuneConfig
from .pseudolabel import StoppingRule

ENV_ADAPTER = "GROUNDER_ADAPTER"
ENV_SEED = "GROUNDER_SEED"

EVAL_THRESHOLD_MODES = ("coco", "0.5")


@dataclass(frozen=True)
class RunConfig:
    adapter: str = ""
    model_id: str = "m0"
    seed: int = 0
    shots: int = 10
    candidate_count: int = 31
    iou_threshold: float = 0.5
    score_threshold: float = 0.3
    per_category_thresholds: Mapping[int, float] = field(default_factory=dict)
    include_labeled: bool = False
    max_iterations: int = 3
    epsilon: float = 1e-3
    patience: int = 1
    batch_size: int = 32
    focal_loss_weight: float = 1.0
    box_l1_weight: float = 5.0
    giou_weight: float = 2.0
    epochs: int = 1
    eval_thresholds: str = "coco"

    def __post_init__(self) -> None:
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")
        if self.candidate_count < 1:
            raise ConfigError("candidate_count must be >= 1")
        if not (0.0 <= self.iou_threshold <= 1.0):
            raise ConfigError("iou_threshold must lie in [0, 1]")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ConfigError("score_threshold must lie in [0, 1]")
        try:
            coerced = {
                int(k): float(v) for k, v in dict(self.per_category_thresholds).items()
            }
        except (TypeError, ValueError):
            raise ConfigError(
                "per_category_thresholds must map category ids to numbers, got "
                f"{self.per_category_thresholds!r}"
            )
        for cid, value in coerced.items():
            if not (0.0 <= value <= 1.0):
                raise ConfigError(f"threshold for category {cid} must lie in [0, 1]")
        object.__setattr__(self, "per_category_thresholds", coerced)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.eval_thresholds not in EVAL_THRESHOLD_MODES:
            raise ConfigError(
                f"eval_thresholds must be one of {EVAL_THRESHOLD_MODES}, "
                f"got {self.eval_thresholds!r}"
            )

    def stopping_rule(self) -> StoppingRule:
        return StoppingRule(
            max_iterations=self.max_iterations,
            epsilon=self.epsilon,
            patience=self.patience,
        )

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(
            focal_loss_weight=self.focal_loss_weight,
            box_l1_weight=self.box_l1_weight,
            giou_weight=self.giou_weight,
            epochs=self.epochs,
        )

    def to_json_obj(self) -> dict:
        obj = asdict(self)
        obj["per_category_thresholds"] = {
            str(k): v for k, v in sorted(self.per_category_thresholds.items())
        }
        return obj


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


def load_config_file(path: str | Path) -> dict:
    """Read a YAML config file; unknown keys are errors, not surprises."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file is not valid YAML: {path}: {exc}")
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file must hold a mapping: {path}")
    unknown = sorted(set(raw) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return raw


def _env_overrides(env: Mapping[str, str]) -> dict:
    out: dict = {}
    if env.get(ENV_ADAPTER):
        out["adapter"] = env[ENV_ADAPTER]
    if env.get(ENV_SEED):
        try:
            out["seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env[ENV_SEED]!r}")
    return out


def resolve_config(
    file_values: Mapping | None = None,
    env: Mapping[str, str] | None = None,
    flag_values: Mapping | None = None,
) -> RunConfig:
    """Merge the three override layers over the defaults.

    ``flag_values`` entries that are None mean "flag not given" and are
    skipped, which is how argparse defaults stay out of the way.
    """
    merged = asdict(RunConfig())
    for layer in (file_values or {}, _env_overrides(env or {}), flag_values or {}):
        for key, value in layer.items():
            if value is None:
                continue
            if key not in _FIELD_NAMES:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}")


def write_manifest(path: str | Path, config: RunConfig, **extra) -> Path:
    """Record what a run was asked to do; content depends only on inputs."""
    from . import __version__

    doc = {"tool_version": __version__, "config": config.to_json_obj()}
    for key, value in extra.items():
        if key in doc:
            raise ConfigError(f"manifest extra {key!r} collides with a reserved key")
        doc[key] = value
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True), encoding="utf-8")
    return path
