"""The bridge server: validation, sanitation, model registry, and the loop."""

import io
import json
import time
from dataclasses import dataclass, field

import pytest

from grounder_bridge.config import BridgeConfig
from grounder_bridge.model import DetectResult, StubModel
from grounder_bridge.server import DEFAULT_TRAINING, BridgeServer

from pngs import write_box_png


@dataclass
class CannedBackend:
    """Returns a fixed detect result; records every call."""

    result: DetectResult = DetectResult(100, 80, ())
    detects: list = field(default_factory=list)
    finetunes: list = field(default_factory=list)

    def detect(self, image_path, expression):
        self.detects.append((image_path, expression))
        return self.result

    def finetune(self, dataset_path, config):
        self.finetunes.append((dataset_path, dict(config)))


class CrashingBackend(CannedBackend):
    def detect(self, image_path, expression):
        raise RuntimeError("weights corrupted")

    def finetune(self, dataset_path, config):
        raise RuntimeError("optimizer diverged")


def line(obj) -> str:
    return json.dumps(obj)


def detect_msg(request_id=1, model="m0", requests=()):
    return {"v": 1, "id": request_id, "op": "detect", "model": model,
            "requests": list(requests)}


def finetune_msg(request_id=1, model="m0", dataset="ds.json", config=None):
    msg = {"v": 1, "id": request_id, "op": "finetune", "model": model,
           "dataset": dataset}
    if config is not None:
        msg["config"] = config
    return msg


def request_for(path, expression="target", category_id=1):
    return {"image": str(path), "expression": expression, "category_id": category_id}


def final(replies):
    assert replies, "no reply at all"
    closing = replies[-1]
    assert "ok" in closing, f"last message is not a final reply: {closing}"
    return closing


def notices(replies):
    return [r for r in replies if "progress" in r and "ok" not in r]


def server_with(backend, **config_kwargs) -> BridgeServer:
    return BridgeServer(BridgeConfig(**config_kwargs), backend)


class TestValidation:
    def test_empty_batch_answers_no_groups(self):
        reply = final(server_with(CannedBackend()).handle_line(line(detect_msg(5))))
        assert reply == {"v": 1, "id": 5, "ok": True, "groups": []}

    def test_unparseable_line_answers_id_minus_one(self):
        reply = final(server_with(CannedBackend()).handle_line("{{{nope"))
        assert reply["id"] == -1
        assert reply["ok"] is False
        assert reply["error"]["kind"] == "parse"
        assert reply["error"]["message"]

    def test_non_object_json_is_a_parse_error(self):
        reply = final(server_with(CannedBackend()).handle_line("[1, 2, 3]"))
        assert reply["id"] == -1
        assert reply["error"]["kind"] == "parse"

    def test_blank_line_produces_nothing(self):
        assert server_with(CannedBackend()).handle_line("   \n") == []

    def test_wrong_version_echoes_the_id(self):
        msg = detect_msg(9)
        msg["v"] = 2
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["id"] == 9
        assert reply["error"]["kind"] == "version"

    def test_missing_id_rejected(self):
        msg = detect_msg()
        del msg["id"]
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["id"] == -1
        assert reply["error"]["kind"] == "bad_request"

    def test_boolean_id_rejected(self):
        msg = detect_msg()
        msg["id"] = True
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["id"] == -1
        assert reply["error"]["kind"] == "bad_request"

    def test_unsupported_op(self):
        msg = detect_msg(3)
        msg["op"] = "segment"
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["error"]["kind"] == "unsupported_op"
        assert "segment" in reply["error"]["message"]

    def test_missing_op(self):
        msg = detect_msg(3)
        del msg["op"]
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["error"]["kind"] == "unsupported_op"

    def test_missing_model_rejected(self):
        msg = detect_msg(4)
        del msg["model"]
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["error"]["kind"] == "bad_request"

    def test_unknown_model_rejected(self):
        reply = final(server_with(CannedBackend()).handle_line(
            line(detect_msg(4, model="m99"))))
        assert reply["error"]["kind"] == "unknown_model"
        assert "m99" in reply["error"]["message"]

    def test_requests_must_be_a_list(self):
        msg = detect_msg(4)
        msg["requests"] = {"image": "x.png"}
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["error"]["kind"] == "bad_request"

    def test_blank_expression_rejected(self):
        msg = detect_msg(4, requests=[{"image": "x.png", "expression": "  ",
                                       "category_id": 1}])
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["error"]["kind"] == "bad_request"
        assert "expression" in reply["error"]["message"]

    def test_missing_category_id_rejected(self):
        msg = detect_msg(4, requests=[{"image": "x.png", "expression": "cone"}])
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["error"]["kind"] == "bad_request"

    def test_shape_checks_come_before_registry(self):
        msg = detect_msg(4, model="m99", requests="not a list")
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["error"]["kind"] == "bad_request"

    def test_every_reply_carries_version_one(self):
        server = server_with(CannedBackend())
        for raw in ("garbage", line(detect_msg(1)), line({"v": 3, "id": 2})):
            for reply in server.handle_line(raw):
                assert reply["v"] == 1


class TestDetect:
    def test_finds_the_planted_box(self, tmp_path):
        path = write_box_png(tmp_path / "box.png", 64, 48, box=(10, 12, 20, 8))
        server = BridgeServer(BridgeConfig(), StubModel())
        reply = final(server.handle_line(
            line(detect_msg(7, requests=[request_for(path)]))))
        assert reply["groups"] == [[{"bbox": [10.0, 12.0, 20.0, 8.0], "score": 1.0}]]

    def test_blank_image_with_default_floor_yields_empty_group(self, tmp_path):
        path = write_box_png(tmp_path / "blank.png", 64, 48)
        server = BridgeServer(BridgeConfig(score_floor=0.3), StubModel())
        reply = final(server.handle_line(
            line(detect_msg(7, requests=[request_for(path)]))))
        assert reply["groups"] == [[]]

    def test_one_group_per_request_in_order(self, tmp_path):
        boxed = write_box_png(tmp_path / "a.png", 64, 48, box=(4, 4, 6, 6))
        blank = write_box_png(tmp_path / "b.png", 64, 48)
        server = BridgeServer(BridgeConfig(), StubModel())
        reply = final(server.handle_line(line(detect_msg(7, requests=[
            request_for(blank, "first"), request_for(boxed, "second")]))))
        assert len(reply["groups"]) == 2
        assert reply["groups"][0] == []
        assert len(reply["groups"][1]) == 1

    def test_missing_image_reports_image_load(self, tmp_path):
        server = BridgeServer(BridgeConfig(), StubModel())
        reply = final(server.handle_line(line(detect_msg(7, requests=[
            request_for(tmp_path / "gone.png")]))))
        assert reply["error"]["kind"] == "image_load"
        assert "gone.png" in reply["error"]["message"]

    def test_undecodable_image_reports_image_load(self, tmp_path):
        path = tmp_path / "fake.png"
        path.write_bytes(b"not image data")
        server = BridgeServer(BridgeConfig(), StubModel())
        reply = final(server.handle_line(line(detect_msg(7, requests=[
            request_for(path)]))))
        assert reply["error"]["kind"] == "image_load"

    def test_backend_crash_reports_internal_and_server_survives(self):
        server = server_with(CrashingBackend())
        msg = detect_msg(7, requests=[{"image": "x.png", "expression": "e",
                                       "category_id": 1}])
        reply = final(server.handle_line(line(msg)))
        assert reply["error"]["kind"] == "internal"
        again = final(server.handle_line(line(detect_msg(8))))
        assert again["ok"] is True

    def test_boxes_clamped_scores_clamped_floor_applied_sorted(self):
        backend = CannedBackend(result=DetectResult(100, 80, (
            (-10.0, -5.0, 30.0, 20.0, 0.9),
            (90.0, 70.0, 30.0, 30.0, 2.0),
            (50.0, 40.0, 10.0, 10.0, float("nan")),
            (20.0, 10.0, 0.0, 5.0, 0.8),
            (10.0, 10.0, 5.0, 5.0, 0.1),
        )))
        server = server_with(backend, score_floor=0.3)
        msg = detect_msg(2, requests=[{"image": "x.png", "expression": "e",
                                       "category_id": 1}])
        reply = final(server.handle_line(line(msg)))
        assert reply["groups"] == [[
            {"bbox": [90.0, 70.0, 10.0, 10.0], "score": 1.0},
            {"bbox": [0.0, 0.0, 20.0, 15.0], "score": 0.9},
        ]]

    def test_fully_out_of_frame_box_dropped(self):
        backend = CannedBackend(result=DetectResult(100, 80, (
            (-50.0, -50.0, 20.0, 20.0, 0.9),
            (200.0, 10.0, 20.0, 20.0, 0.9),
        )))
        reply = final(server_with(backend).handle_line(line(detect_msg(
            2, requests=[{"image": "x", "expression": "e", "category_id": 1}]))))
        assert reply["groups"] == [[]]

    def test_negative_score_clamped_then_floored(self):
        backend = CannedBackend(result=DetectResult(100, 80, (
            (10.0, 10.0, 5.0, 5.0, -3.0),
        )))
        reply = final(server_with(backend, score_floor=0.0).handle_line(
            line(detect_msg(2, requests=[{"image": "x", "expression": "e",
                                          "category_id": 1}]))))
        assert reply["groups"] == [[{"bbox": [10.0, 10.0, 5.0, 5.0], "score": 0.0}]]

    def test_max_detections_caps_after_sorting(self):
        boxes = tuple((float(i * 10), 5.0, 8.0, 8.0, 0.5 + i * 0.1) for i in range(5))
        backend = CannedBackend(result=DetectResult(100, 80, boxes))
        server = server_with(backend, score_floor=0.0, max_detections=2)
        reply = final(server.handle_line(line(detect_msg(
            2, requests=[{"image": "x", "expression": "e", "category_id": 1}]))))
        scores = [det["score"] for det in reply["groups"][0]]
        assert scores == [pytest.approx(0.9), pytest.approx(0.8)]

    def test_zero_floor_keeps_everything_in_frame(self):
        boxes = tuple((float(i * 10), 5.0, 8.0, 8.0, 0.05) for i in range(3))
        backend = CannedBackend(result=DetectResult(100, 80, boxes))
        reply = final(server_with(backend, score_floor=0.0).handle_line(
            line(detect_msg(2, requests=[{"image": "x", "expression": "e",
                                          "category_id": 1}]))))
        assert len(reply["groups"][0]) == 3


class TestFinetune:
    def good_dataset(self, tmp_path):
        dataset = tmp_path / "train.json"
        dataset.write_text(json.dumps({"images": []}), encoding="utf-8")
        return str(dataset)

    def test_empty_config_uses_default_loss_weights(self, tmp_path):
        backend = CannedBackend()
        server = server_with(backend)
        reply = final(server.handle_line(line(finetune_msg(
            1, dataset=self.good_dataset(tmp_path), config={}))))
        assert reply == {"v": 1, "id": 1, "ok": True, "model": "m1"}
        assert backend.finetunes == [(self.good_dataset(tmp_path),
                                      {"focal": 1.0, "l1": 5.0, "giou": 2.0,
                                       "epochs": 1})]

    def test_missing_config_key_also_uses_defaults(self, tmp_path):
        backend = CannedBackend()
        server = server_with(backend)
        final(server.handle_line(line(finetune_msg(
            1, dataset=self.good_dataset(tmp_path)))))
        assert backend.finetunes[0][1] == DEFAULT_TRAINING

    def test_message_config_beats_bridge_extra_beats_defaults(self, tmp_path):
        backend = CannedBackend()
        server = server_with(backend, extra={"lr": 0.001, "epochs": 3})
        final(server.handle_line(line(finetune_msg(
            1, dataset=self.good_dataset(tmp_path),
            config={"epochs": 5, "giou": 1.5}))))
        assert backend.finetunes[0][1] == {"focal": 1.0, "l1": 5.0, "giou": 1.5,
                                           "epochs": 5, "lr": 0.001}

    def test_progress_notice_precedes_the_reply(self, tmp_path):
        server = server_with(CannedBackend())
        replies = server.handle_line(line(finetune_msg(
            4, dataset=self.good_dataset(tmp_path), config={})))
        assert len(notices(replies)) >= 1
        first = replies[0]
        assert first["id"] == 4 and first["v"] == 1
        assert "progress" in first and "ok" not in first
        assert replies[-1]["ok"] is True

    def test_heartbeats_keep_coming_while_training_runs(self, tmp_path):
        class SlowBackend(CannedBackend):
            def finetune(self, dataset_path, config):
                time.sleep(0.2)
                super().finetune(dataset_path, config)

        server = server_with(SlowBackend())
        server.heartbeat_interval = 0.05
        replies = server.handle_line(line(finetune_msg(
            4, dataset=self.good_dataset(tmp_path), config={})))
        beats = [n for n in notices(replies) if "heartbeat" in n["progress"]]
        assert len(beats) >= 1
        assert replies[-1]["ok"] is True

    def test_new_model_ids_count_up(self, tmp_path):
        server = server_with(CannedBackend())
        first = final(server.handle_line(line(finetune_msg(
            1, dataset=self.good_dataset(tmp_path)))))
        second = final(server.handle_line(line(finetune_msg(
            2, model=first["model"], dataset=self.good_dataset(tmp_path)))))
        assert (first["model"], second["model"]) == ("m1", "m2")

    def test_new_model_id_skips_occupied_names(self, tmp_path):
        server = server_with(CannedBackend())
        server.models.add("m1")
        reply = final(server.handle_line(line(finetune_msg(
            1, dataset=self.good_dataset(tmp_path)))))
        assert reply["model"] == "m2"

    def test_descendant_and_original_both_answer_detect(self, tmp_path):
        server = server_with(CannedBackend())
        new_model = final(server.handle_line(line(finetune_msg(
            1, dataset=self.good_dataset(tmp_path)))))["model"]
        for model in ("m0", new_model):
            reply = final(server.handle_line(line(detect_msg(2, model=model))))
            assert reply["ok"] is True

    def test_unknown_base_model_rejected(self, tmp_path):
        server = server_with(CannedBackend())
        reply = final(server.handle_line(line(finetune_msg(
            1, model="never-made", dataset=self.good_dataset(tmp_path)))))
        assert reply["error"]["kind"] == "unknown_model"

    def test_missing_dataset_field_rejected(self):
        msg = {"v": 1, "id": 1, "op": "finetune", "model": "m0"}
        reply = final(server_with(CannedBackend()).handle_line(line(msg)))
        assert reply["error"]["kind"] == "bad_request"

    def test_config_must_be_an_object(self, tmp_path):
        reply = final(server_with(CannedBackend()).handle_line(line(finetune_msg(
            1, dataset=self.good_dataset(tmp_path), config=[1, 2]))))
        assert reply["error"]["kind"] == "bad_request"

    def test_training_failure_reports_train_and_keeps_registry(self, tmp_path):
        server = server_with(CrashingBackend())
        reply = final(server.handle_line(line(finetune_msg(
            1, dataset=self.good_dataset(tmp_path)))))
        assert reply["error"]["kind"] == "train"
        assert "diverged" in reply["error"]["message"]
        assert server.models == {"m0"}

    def test_failed_training_does_not_burn_a_model_id(self, tmp_path):
        backend = CannedBackend()
        server = server_with(backend)
        server.backend = CrashingBackend()
        final(server.handle_line(line(finetune_msg(1, dataset="ds.json"))))
        server.backend = backend
        reply = final(server.handle_line(line(finetune_msg(
            2, dataset=self.good_dataset(tmp_path)))))
        assert reply["model"] == "m1"


class TestServeLoop:
    def run_loop(self, server, lines):
        stdout = io.StringIO()
        server.serve(stdin=io.StringIO("".join(l + "\n" for l in lines)),
                     stdout=stdout)
        return [json.loads(raw) for raw in stdout.getvalue().splitlines()]

    def test_loop_survives_garbage_and_answers_the_next_line(self):
        out = self.run_loop(server_with(CannedBackend()),
                            ["garbage", "", line(detect_msg(2))])
        assert len(out) == 2
        assert out[0]["error"]["kind"] == "parse"
        assert out[1] == {"v": 1, "id": 2, "ok": True, "groups": []}

    def test_loop_emits_progress_then_final_on_one_line_each(self, tmp_path):
        dataset = tmp_path / "d.json"
        dataset.write_text("{}", encoding="utf-8")
        out = self.run_loop(server_with(CannedBackend()),
                            [line(finetune_msg(3, dataset=str(dataset)))])
        assert "progress" in out[0]
        assert out[-1]["ok"] is True and out[-1]["model"] == "m1"

    def test_emit_callback_sees_messages_in_returned_order(self, tmp_path):
        dataset = tmp_path / "d.json"
        dataset.write_text("{}", encoding="utf-8")
        server = server_with(CannedBackend())
        seen = []
        replies = server.handle_line(line(finetune_msg(3, dataset=str(dataset))),
                                     emit=seen.append)
        assert seen == replies
