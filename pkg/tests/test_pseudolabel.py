"""Threshold filtering, refinement lineage, stopping rules, and the full loop."""

from __future__ import annotations

import json

import pytest

from grounder.dataset import SOURCE_PSEUDO, GroundTruthBox, ImageRecord, load_coco
from grounder.errors import AdapterError, ConfigError
from grounder.geometry import BBox
from grounder.protocol.client import DetectorClient, InProcessTransport
from grounder.protocol.mock import mock_detector
from grounder.pseudolabel import (
    DEFAULT_SCORE_THRESHOLD,
    IterationState,
    PseudoLabelBatch,
    StoppingRule,
    effective_threshold,
    generate_pseudo_labels,
    refine_batch,
    run_iteration_loop,
    validation_map,
)

import synth


class ScriptedScores:
    """Adapter answering every request with the same fixed-score detections."""

    def __init__(self, scores, box=(10.0, 10.0, 20.0, 20.0)):
        self.scores = list(scores)
        self.box = list(box)

    def detect(self, model_id, requests):
        return [[(list(self.box), s) for s in self.scores] for _ in requests]

    def finetune(self, model_id, dataset, config):
        return model_id + "+"


def _scripted_client(scores, box=(10.0, 10.0, 20.0, 20.0)) -> DetectorClient:
    return DetectorClient(InProcessTransport(ScriptedScores(scores, box)))


def _one_image_world():
    image = ImageRecord(
        id=1, file_name="a.png", width=200, height=200, verified_categories={1}
    )
    return [image], []


class TestEffectiveThreshold:
    def test_base_applies_without_override(self):
        assert effective_threshold(3, 0.3, None) == 0.3
        assert effective_threshold(3, 0.3, {}) == 0.3

    def test_override_wins_for_its_category(self):
        overrides = {3: 0.6}
        assert effective_threshold(3, 0.3, overrides) == 0.6
        assert effective_threshold(4, 0.3, overrides) == 0.3

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            effective_threshold(1, -0.1, None)
        with pytest.raises(ConfigError):
            effective_threshold(1, 0.3, {1: 1.5})

    def test_default_matches_documented_value(self):
        assert DEFAULT_SCORE_THRESHOLD == 0.3


class TestGeneratePseudoLabels:
    def test_strictly_above_threshold_kept(self):
        images, anns = _one_image_world()
        client = _scripted_client([0.95, 0.31, 0.30, 0.29])
        batch = generate_pseudo_labels(
            client, "m0", images, anns, {1: "thing"}, threshold=0.3
        )
        assert sorted(label.score for label in batch.labels) == [0.31, 0.95]
        assert batch.queried_pairs == 1

    def test_boundary_score_suppressed(self):
        images, anns = _one_image_world()
        client = _scripted_client([0.30])
        batch = generate_pseudo_labels(
            client, "m0", images, anns, {1: "thing"}, threshold=0.3
        )
        assert batch.labels == ()

    def test_zero_threshold_keeps_everything_returned(self):
        images, anns = _one_image_world()
        client = _scripted_client([0.1, 0.5])
        batch = generate_pseudo_labels(
            client, "m0", images, anns, {1: "thing"}, threshold=0.0
        )
        assert len(batch.labels) == 2

    def test_per_category_override(self):
        images = [
            ImageRecord(id=1, file_name="a.png", width=200, height=200,
                        verified_categories={1, 2}),
        ]
        client = _scripted_client([0.5])
        batch = generate_pseudo_labels(
            client, "m0", images, [], {1: "a", 2: "b"},
            threshold=0.3, per_category_thresholds={2: 0.8},
        )
        assert [label.category_id for label in batch.labels] == [1]

    def test_silent_detector_is_empty_batch_not_error(self):
        images, anns = _one_image_world()
        client = _scripted_client([])
        batch = generate_pseudo_labels(client, "m0", images, anns, {1: "thing"})
        assert batch.labels == ()
        assert batch.queried_pairs == 1

    def test_labels_carry_pseudo_source_and_category(self):
        images, anns = _one_image_world()
        client = _scripted_client([0.9])
        batch = generate_pseudo_labels(client, "m0", images, anns, {1: "thing"})
        [label] = batch.labels
        assert label.source == SOURCE_PSEUDO
        assert label.category_id == 1
        assert label.image_id == 1

    def test_unlabeled_pairs_only_by_default(self, world, client):
        _, images, anns = load_coco(world["train"])
        expressions = {1: "car", 2: "scooter", 3: "barrier"}
        batch = generate_pseudo_labels(client, "m0", images, anns, expressions)
        # 8 images x 3 categories, minus the 12 human-labeled pairs.
        assert batch.queried_pairs == 12
        labeled_pairs = {(a.image_id, a.category_id) for a in anns}
        assert all(
            (label.image_id, label.category_id) not in labeled_pairs
            for label in batch.labels
        )

    def test_include_labeled_queries_all_verified_pairs(self, world, client):
        _, images, anns = load_coco(world["train"])
        expressions = {1: "car", 2: "scooter", 3: "barrier"}
        batch = generate_pseudo_labels(
            client, "m0", images, anns, expressions, include_labeled=True
        )
        assert batch.queried_pairs == 24

    def test_category_without_expression_skipped(self, world, client):
        _, images, anns = load_coco(world["train"])
        batch = generate_pseudo_labels(client, "m0", images, anns, {1: "car"})
        assert batch.queried_pairs == 4
        assert all(label.category_id == 1 for label in batch.labels)

    def test_boxes_clamped_to_image(self):
        images, anns = _one_image_world()
        client = _scripted_client([0.9], box=(190.0, 190.0, 40.0, 40.0))
        batch = generate_pseudo_labels(client, "m0", images, anns, {1: "thing"})
        [label] = batch.labels
        assert label.bbox == BBox(190, 190, 200, 200)

    def test_degenerate_after_clamp_dropped(self):
        images, anns = _one_image_world()
        client = _scripted_client([0.9], box=(300.0, 300.0, 20.0, 20.0))
        batch = generate_pseudo_labels(client, "m0", images, anns, {1: "thing"})
        assert batch.labels == ()

    def test_batch_json_roundtrip(self):
        images, anns = _one_image_world()
        client = _scripted_client([0.9, 0.4])
        batch = generate_pseudo_labels(
            client, "m0", images, anns, {1: "thing"},
            per_category_thresholds={1: 0.35}, iteration=2,
        )
        back = PseudoLabelBatch.from_json_obj(json.loads(json.dumps(batch.to_json_obj())))
        assert back.model_id == batch.model_id
        assert back.iteration == 2
        assert back.per_category_thresholds == {1: 0.35}
        assert [l.bbox for l in back.labels] == [l.bbox for l in batch.labels]

    def test_labels_per_category_counts(self):
        images = [
            ImageRecord(id=1, file_name="a.png", width=200, height=200,
                        verified_categories={1, 2}),
        ]
        client = _scripted_client([0.9])
        batch = generate_pseudo_labels(client, "m0", images, [], {1: "a", 2: "b"})
        assert batch.labels_per_category() == {1: 1, 2: 1}

    def test_rejects_non_pseudo_label(self):
        with pytest.raises(ValueError):
            PseudoLabelBatch(
                model_id="m0", threshold=0.3,
                labels=(GroundTruthBox(image_id=1, category_id=1, bbox=BBox(0, 0, 5, 5)),),
                queried_pairs=1,
            )


class TestRefineBatch:
    def test_regenerates_under_descendant_model(self, world, tmp_path):
        _, images, anns = load_coco(world["train"])
        expressions = {1: "car", 2: "scooter", 3: "barrier"}
        with DetectorClient.from_spec(world["adapter"]) as client:
            before = generate_pseudo_labels(client, "m0", images, anns, expressions)
            handle = client.finetune("m0", world["train"])
            after = refine_batch(client, before, handle.id, images, anns)
        assert after.iteration == before.iteration + 1
        assert after.model_id == handle.id
        # Stage 1 answers every category, so refinement finds more.
        assert len(after.labels) > len(before.labels)

    def test_unrelated_model_rejected(self, world):
        _, images, anns = load_coco(world["train"])
        expressions = {1: "car"}
        with DetectorClient.from_spec(world["adapter"]) as client:
            batch = generate_pseudo_labels(client, "m0", images, anns, expressions)
            handle = client.finetune("m0", world["train"])
            child = refine_batch(client, batch, handle.id, images, anns)
            with pytest.raises(ConfigError):
                refine_batch(client, child, "m0", images, anns)

    def test_identical_model_behavior_identical_labels(self, world):
        _, images, anns = load_coco(world["train"])
        expressions = {1: "car", 2: "scooter", 3: "barrier"}

        def labels_once():
            with DetectorClient.from_spec(world["adapter"]) as client:
                batch = generate_pseudo_labels(client, "m0", images, anns, expressions)
                return [(l.image_id, l.category_id, l.bbox, l.score) for l in batch.labels]

        assert labels_once() == labels_once()


class TestValidationMap:
    def test_perfect_stage_scores_one(self, world):
        _, val_images, val_anns = load_coco(world["val"])
        expressions = {1: "car", 2: "scooter", 3: "barrier"}
        with DetectorClient.from_spec(world["adapter"]) as client:
            handle = client.finetune("m0", world["train"])
            score = validation_map(
                client, handle.id, val_images, val_anns, expressions
            )
        assert score == pytest.approx(1.0)

    def test_partial_stage_scores_fraction(self, world, client):
        _, val_images, val_anns = load_coco(world["val"])
        expressions = {1: "car", 2: "scooter", 3: "barrier"}
        score = validation_map(client, "m0", val_images, val_anns, expressions)
        # Stage 0 nails categories 1 and 2 and misses 3 entirely.
        assert score == pytest.approx(2 / 3)


class TestStoppingRule:
    def test_max_iterations_cap(self):
        rule = StoppingRule(max_iterations=2, epsilon=0.0, patience=1)
        assert rule.should_stop([0.1]) is None
        assert rule.should_stop([0.1, 0.2]) is None
        assert rule.should_stop([0.1, 0.2, 0.9]) == "max_iterations"

    def test_zero_iterations_stops_immediately(self):
        rule = StoppingRule(max_iterations=0)
        assert rule.should_stop([0.5]) == "max_iterations"

    def test_plateau_after_patience_flat_steps(self):
        rule = StoppingRule(max_iterations=10, epsilon=1e-3, patience=2)
        assert rule.should_stop([0.5, 0.5]) is None
        assert rule.should_stop([0.5, 0.5, 0.5]) == "plateau"

    def test_improvement_resets_plateau(self):
        rule = StoppingRule(max_iterations=10, epsilon=1e-3, patience=2)
        assert rule.should_stop([0.5, 0.5, 0.9]) is None

    def test_zero_epsilon_never_plateaus(self):
        rule = StoppingRule(max_iterations=10, epsilon=0.0, patience=1)
        assert rule.should_stop([0.5, 0.5, 0.5]) is None

    def test_epsilon_is_strict_improvement_bound(self):
        rule = StoppingRule(max_iterations=10, epsilon=0.01, patience=1)
        assert rule.should_stop([0.5, 0.509]) == "plateau"
        assert rule.should_stop([0.5, 0.511]) is None

    def test_invalid_fields_rejected(self):
        with pytest.raises(ConfigError):
            StoppingRule(max_iterations=-1)
        with pytest.raises(ConfigError):
            StoppingRule(epsilon=-0.5)
        with pytest.raises(ConfigError):
            StoppingRule(patience=0)


def _loop_inputs(world):
    categories, train_images, train_annotations = load_coco(world["train"])
    _, val_images, val_annotations = load_coco(world["val"])
    return dict(
        categories=categories,
        train_images=train_images,
        train_annotations=train_annotations,
        val_images=val_images,
        val_annotations=val_annotations,
        expressions={1: "car", 2: "scooter", 3: "barrier"},
    )


class TestIterationLoop:
    def test_plateau_run_shape(self, world, client, tmp_path):
        state = run_iteration_loop(
            client, workdir=tmp_path / "run", **_loop_inputs(world)
        )
        assert state.history == pytest.approx([2 / 3, 1.0, 1.0])
        assert state.stop_reason == "plateau"
        assert state.error is None
        assert state.model_chain == ["m0", "m1", "m2"]
        assert state.finetunes_completed == 2

    def test_cap_forces_exact_finetune_count(self, world, client, tmp_path):
        state = run_iteration_loop(
            client,
            workdir=tmp_path / "run",
            stopping=StoppingRule(max_iterations=3, epsilon=0.0, patience=1),
            **_loop_inputs(world),
        )
        assert state.stop_reason == "max_iterations"
        assert len(state.history) == 4
        assert state.model_chain == ["m0", "m1", "m2", "m3"]

    def test_artifacts_written_per_iteration(self, world, client, tmp_path):
        workdir = tmp_path / "run"
        state = run_iteration_loop(client, workdir=workdir, **_loop_inputs(world))
        for k in range(len(state.history)):
            iter_dir = workdir / f"iter_{k}"
            assert (iter_dir / "dataset.json").is_file()
            assert (iter_dir / "pseudo_labels.json").is_file()
            assert (iter_dir / "metrics.json").is_file()
            metrics = json.loads((iter_dir / "metrics.json").read_text())
            assert metrics["iteration"] == k
            assert set(metrics) >= {
                "model", "val_map_50", "num_pseudo_labels", "labels_per_category",
            }
            batch_obj = json.loads((iter_dir / "pseudo_labels.json").read_text())
            assert batch_obj["iteration"] == k
        summary = json.loads((workdir / "summary.json").read_text())
        assert summary["val_history"] == pytest.approx(state.history)
        assert [r["iteration"] for r in summary["history"]] == list(range(len(state.history)))

    def test_every_label_in_every_batch_beats_threshold(self, world, client, tmp_path):
        workdir = tmp_path / "run"
        run_iteration_loop(client, workdir=workdir, **_loop_inputs(world))
        for batch_path in workdir.glob("iter_*/pseudo_labels.json"):
            obj = json.loads(batch_path.read_text())
            assert all(label["score"] > obj["threshold"] for label in obj["labels"])

    def test_human_labels_survive_every_merged_dataset(self, world, client, tmp_path):
        workdir = tmp_path / "run"
        run_iteration_loop(client, workdir=workdir, **_loop_inputs(world))
        original = {
            (a.image_id, a.category_id, a.bbox)
            for a in world["train_human"]
        }
        for dataset_path in workdir.glob("iter_*/dataset.json"):
            _, _, anns = load_coco(dataset_path)
            human = {
                (a.image_id, a.category_id, a.bbox)
                for a in anns
                if a.source != SOURCE_PSEUDO
            }
            assert human == original

    def test_loop_is_reproducible(self, world, tmp_path):
        def run_once(name: str):
            with DetectorClient.from_spec(world["adapter"]) as client:
                state = run_iteration_loop(
                    client, workdir=tmp_path / name, **_loop_inputs(world)
                )
            files = {}
            for path in sorted((tmp_path / name).glob("iter_*/*.json")):
                files[f"{path.parent.name}/{path.name}"] = path.read_bytes()
            return state.history, files

        history_a, files_a = run_once("a")
        history_b, files_b = run_once("b")
        assert history_a == history_b
        assert files_a == files_b

    def test_finetune_failure_recorded_not_raised(self, world, tmp_path):
        class TrainCrash:
            def __init__(self, inner):
                self.inner = inner

            def detect(self, model_id, requests):
                return self.inner.detect(model_id, requests)

            def finetune(self, model_id, dataset, config):
                raise AdapterError("optimizer diverged", kind="train")

        adapter = TrainCrash(mock_detector(world["script"]))
        client = DetectorClient(InProcessTransport(adapter))
        workdir = tmp_path / "run"
        state = run_iteration_loop(client, workdir=workdir, **_loop_inputs(world))
        assert state.error is not None
        assert "finetune after iteration 0" in state.error
        assert state.history == pytest.approx([2 / 3])
        assert (workdir / "iter_0" / "dataset.json").is_file()
        summary = json.loads((workdir / "summary.json").read_text())
        assert summary["error"] == state.error

    def test_detect_failure_mid_loop_recorded(self, world, tmp_path):
        class DetectCrash:
            def __init__(self, inner, budget: int):
                self.inner = inner
                self.budget = budget

            def detect(self, model_id, requests):
                self.budget -= 1
                if self.budget < 0:
                    raise AdapterError("image store offline", kind="image_load")
                return self.inner.detect(model_id, requests)

            def finetune(self, model_id, dataset, config):
                return self.inner.finetune(model_id, dataset, config)

        # Two wire calls happen per iteration (harvest, then holdout), so a
        # budget of three dies during iteration 1.
        adapter = DetectCrash(mock_detector(world["script"]), budget=3)
        client = DetectorClient(InProcessTransport(adapter), batch_size=64)
        workdir = tmp_path / "run"
        state = run_iteration_loop(client, workdir=workdir, **_loop_inputs(world))
        assert state.error is not None and "iteration 1" in state.error
        assert state.history == pytest.approx([2 / 3])
        assert (workdir / "summary.json").is_file()

    def test_state_json_shape(self):
        state = IterationState(model_id="m2", history=[0.5, 0.8], model_chain=["m0", "m1", "m2"])
        obj = state.to_json_obj()
        assert obj["model"] == "m2"
        assert obj["val_history"] == [0.5, 0.8]
        assert obj["stop_reason"] is None
