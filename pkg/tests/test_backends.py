from __future__ import annotations

import hashlib
import json
import random
import threading
import time

import httpx
import pytest

from failscope.backends import (
    AuthTokenMissingError,
    BackendKind,
    ImageTooLargeError,
    MalformedPayloadError,
    MissingFixtureError,
    MockDetector,
    ModelDescriptor,
    NetworkError,
    Prediction,
    RemoteDetector,
    ReplayDetector,
    StatusError,
    detect,
    parse_wire_prediction,
)

CLASSES = frozenset({"car", "person"})


def remote_descriptor(**overrides):
    fields = dict(
        model_id="m-remote",
        display_name="Remote",
        backend_kind=BackendKind.REMOTE,
        class_list=CLASSES,
        endpoint="http://detector.test/v1/predict",
    )
    fields.update(overrides)
    return ModelDescriptor(**fields)


def mock_descriptor():
    return ModelDescriptor(
        model_id="m-mock",
        display_name="Mock",
        backend_kind=BackendKind.MOCK,
        class_list=CLASSES,
    )


def wire_record(label="car", score=0.98, xmin=10, ymin=20, xmax=110, ymax=220):
    return {
        "label": label,
        "score": score,
        "box": {"xmin": xmin, "ymin": ymin, "xmax": xmax, "ymax": ymax},
    }


class TestModelDescriptor:
    def test_remote_requires_endpoint(self):
        with pytest.raises(ValueError):
            remote_descriptor(endpoint=None)

    def test_class_list_must_be_nonempty(self):
        with pytest.raises(ValueError):
            remote_descriptor(class_list=frozenset())

    def test_class_list_normalized(self):
        descriptor = remote_descriptor(class_list=frozenset({" Car ", "PERSON"}))
        assert descriptor.class_list == frozenset({"car", "person"})

    def test_mock_needs_no_endpoint(self):
        assert mock_descriptor().endpoint is None


class TestParseWirePrediction:
    def test_valid_single_record(self):
        payload = json.dumps([wire_record()]).encode()
        objects = parse_wire_prediction(payload, (200, 400))
        assert len(objects) == 1
        obj = objects[0]
        assert obj.id == "p0"
        assert obj.label == "car"
        assert obj.score == 0.98
        assert obj.box.x_min == pytest.approx(0.05, abs=1e-12)
        assert obj.box.y_min == pytest.approx(0.05, abs=1e-12)
        assert obj.box.x_max == pytest.approx(0.55, abs=1e-12)
        assert obj.box.y_max == pytest.approx(0.55, abs=1e-12)

    def test_empty_list(self):
        assert parse_wire_prediction(b"[]", (100, 100)) == []

    def test_score_out_of_range(self):
        payload = json.dumps([wire_record(score=1.2)]).encode()
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(payload, (200, 400))
        payload = json.dumps([wire_record(score=-0.1)]).encode()
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(payload, (200, 400))

    def test_inverted_box(self):
        payload = json.dumps([wire_record(xmin=110, xmax=10)]).encode()
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(payload, (200, 400))
        payload = json.dumps([wire_record(ymin=220, ymax=20)]).encode()
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(payload, (200, 400))

    def test_missing_fields(self):
        record = wire_record()
        del record["score"]
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(json.dumps([record]).encode(), (200, 400))
        record = wire_record()
        del record["box"]["ymax"]
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(json.dumps([record]).encode(), (200, 400))

    def test_box_outside_image(self):
        payload = json.dumps([wire_record(xmax=201)]).encode()
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(payload, (200, 400))
        payload = json.dumps([wire_record(xmin=-1)]).encode()
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(payload, (200, 400))

    def test_not_json(self):
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(b"\xff\xfe not json", (200, 400))

    def test_not_a_list(self):
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(b"{}", (200, 400))

    def test_bool_score_rejected(self):
        payload = json.dumps([wire_record(score=True)]).encode()
        with pytest.raises(MalformedPayloadError):
            parse_wire_prediction(payload, (200, 400))

    def test_round_trip_within_half_pixel(self):
        rng = random.Random(99)
        for _ in range(500):
            width = rng.randrange(16, 4000)
            height = rng.randrange(16, 4000)
            xmin = rng.randrange(0, width - 1)
            xmax = rng.randrange(xmin + 1, width + 1)
            ymin = rng.randrange(0, height - 1)
            ymax = rng.randrange(ymin + 1, height + 1)
            payload = json.dumps(
                [wire_record(xmin=xmin, ymin=ymin, xmax=xmax, ymax=ymax)]
            ).encode()
            (obj,) = parse_wire_prediction(payload, (width, height))
            assert abs(obj.box.x_min * width - xmin) <= 0.5
            assert abs(obj.box.x_max * width - xmax) <= 0.5
            assert abs(obj.box.y_min * height - ymin) <= 0.5
            assert abs(obj.box.y_max * height - ymax) <= 0.5


class TestMockDetector:
    def test_acceptance_fixture_normalization(self):
        image = b"image-bytes-for-a-200x400-photo"
        key = hashlib.sha256(image).hexdigest()
        backend = MockDetector({key: [wire_record()]})
        prediction = backend.detect(mock_descriptor(), image, (200, 400), image_id="img-7")
        assert prediction.image_id == "img-7"
        assert prediction.model_id == "m-mock"
        assert len(prediction.objects) == 1
        obj = prediction.objects[0]
        assert obj.box.x_min == pytest.approx(0.05, abs=1e-12)
        assert obj.box.y_min == pytest.approx(0.05, abs=1e-12)
        assert obj.box.x_max == pytest.approx(0.55, abs=1e-12)
        assert obj.box.y_max == pytest.approx(0.55, abs=1e-12)
        assert obj.score == 0.98

    def test_missing_fixture(self):
        backend = MockDetector({})
        with pytest.raises(MissingFixtureError):
            backend.detect(mock_descriptor(), b"unknown", (100, 100))

    def test_deterministic(self):
        image = b"same-image"
        key = hashlib.sha256(image).hexdigest()
        backend = MockDetector({key: [wire_record(), wire_record(label="person", xmin=120, xmax=180)]})
        first = backend.detect(mock_descriptor(), image, (200, 400))
        second = backend.detect(mock_descriptor(), image, (200, 400))
        assert first == second

    def test_sorting_by_score_then_label(self):
        image = b"three-objects"
        key = hashlib.sha256(image).hexdigest()
        records = [
            wire_record(label="person", score=0.5, xmin=0, xmax=10),
            wire_record(label="car", score=0.9, xmin=20, xmax=30),
            wire_record(label="car", score=0.5, xmin=40, xmax=50),
        ]
        backend = MockDetector({key: records})
        prediction = backend.detect(mock_descriptor(), image, (200, 400))
        assert [(o.label, o.score) for o in prediction.objects] == [
            ("car", 0.9),
            ("car", 0.5),
            ("person", 0.5),
        ]

    def test_equal_score_and_label_keeps_wire_order(self):
        image = b"tied-objects"
        key = hashlib.sha256(image).hexdigest()
        records = [
            wire_record(label="car", score=0.5, xmin=40, xmax=50),
            wire_record(label="car", score=0.5, xmin=0, xmax=10),
        ]
        backend = MockDetector({key: records})
        prediction = backend.detect(mock_descriptor(), image, (200, 400))
        assert [o.id for o in prediction.objects] == ["p0", "p1"]
        assert prediction.objects[0].box.x_min == pytest.approx(0.2)


class TestReplayDetector:
    def write_replay(self, tmp_path, image_id="img-1", width=200, height=400, objects=None):
        doc = {
            "image_id": image_id,
            "width": width,
            "height": height,
            "objects": objects if objects is not None else [wire_record()],
        }
        (tmp_path / f"{image_id}.json").write_text(json.dumps(doc), encoding="utf-8")

    def test_round_trip(self, tmp_path):
        self.write_replay(tmp_path)
        backend = ReplayDetector(tmp_path)
        descriptor = ModelDescriptor(
            model_id="m-replay",
            display_name="Replay",
            backend_kind="replay",
            class_list=CLASSES,
        )
        first = backend.detect(descriptor, b"", (200, 400), image_id="img-1")
        second = backend.detect(descriptor, b"", (200, 400), image_id="img-1")
        assert first == second
        assert first.objects[0].box.x_max == pytest.approx(0.55, abs=1e-12)

    def test_missing_file(self, tmp_path):
        backend = ReplayDetector(tmp_path)
        with pytest.raises(MissingFixtureError):
            backend.detect(mock_descriptor(), b"", (200, 400), image_id="nope")

    def test_dims_mismatch(self, tmp_path):
        self.write_replay(tmp_path)
        backend = ReplayDetector(tmp_path)
        with pytest.raises(MalformedPayloadError):
            backend.detect(mock_descriptor(), b"", (100, 100), image_id="img-1")

    def test_malformed_file(self, tmp_path):
        (tmp_path / "img-1.json").write_text("{", encoding="utf-8")
        backend = ReplayDetector(tmp_path)
        with pytest.raises(MalformedPayloadError):
            backend.detect(mock_descriptor(), b"", (200, 400), image_id="img-1")


class TestRemoteDetector:
    def test_success_posts_raw_bytes(self):
        seen = {}

        def handler(request):
            seen["body"] = request.content
            seen["content_type"] = request.headers["content-type"]
            return httpx.Response(200, json=[wire_record()])

        backend = RemoteDetector(transport=httpx.MockTransport(handler))
        prediction = backend.detect(remote_descriptor(), b"jpeg-bytes", (200, 400), image_id="i")
        assert seen["body"] == b"jpeg-bytes"
        assert seen["content_type"] == "application/octet-stream"
        assert len(prediction.objects) == 1
        assert prediction.latency_ms >= 0

    def test_empty_response_means_zero_objects(self):
        backend = RemoteDetector(transport=httpx.MockTransport(lambda r: httpx.Response(200, json=[])))
        prediction = backend.detect(remote_descriptor(), b"x", (100, 100))
        assert prediction.objects == ()

    def test_auth_header_from_env(self, monkeypatch):
        monkeypatch.setenv("DETECTOR_TOKEN", "sekrit")
        seen = {}

        def handler(request):
            seen["auth"] = request.headers.get("authorization")
            return httpx.Response(200, json=[])

        backend = RemoteDetector(transport=httpx.MockTransport(handler))
        backend.detect(remote_descriptor(auth_token_env="DETECTOR_TOKEN"), b"x", (100, 100))
        assert seen["auth"] == "Bearer sekrit"

    def test_auth_env_missing(self, monkeypatch):
        monkeypatch.delenv("DETECTOR_TOKEN", raising=False)
        backend = RemoteDetector(transport=httpx.MockTransport(lambda r: httpx.Response(200, json=[])))
        with pytest.raises(AuthTokenMissingError) as excinfo:
            backend.detect(remote_descriptor(auth_token_env="DETECTOR_TOKEN"), b"x", (100, 100))
        assert excinfo.value.retryable is False

    def test_status_errors_note_retryability(self):
        for status, retryable in ((404, False), (422, False), (429, True), (500, True), (503, True)):
            backend = RemoteDetector(
                transport=httpx.MockTransport(lambda r, s=status: httpx.Response(s))
            )
            with pytest.raises(StatusError) as excinfo:
                backend.detect(remote_descriptor(), b"x", (100, 100))
            assert excinfo.value.status == status
            assert excinfo.value.retryable is retryable

    def test_transient_failure_retried_once_then_raises(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            raise httpx.ConnectError("connection refused")

        backend = RemoteDetector(transport=httpx.MockTransport(handler))
        with pytest.raises(NetworkError) as excinfo:
            backend.detect(remote_descriptor(), b"x", (100, 100))
        assert calls["n"] == 2
        assert excinfo.value.retryable is True

    def test_retry_succeeds_on_second_attempt(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] == 1:
                raise httpx.ReadTimeout("slow")
            return httpx.Response(200, json=[])

        backend = RemoteDetector(transport=httpx.MockTransport(handler))
        prediction = backend.detect(remote_descriptor(), b"x", (100, 100))
        assert calls["n"] == 2
        assert prediction.objects == ()

    def test_image_too_large_rejected_before_send(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            return httpx.Response(200, json=[])

        backend = RemoteDetector(max_image_bytes=10, transport=httpx.MockTransport(handler))
        with pytest.raises(ImageTooLargeError) as excinfo:
            backend.detect(remote_descriptor(), b"x" * 11, (100, 100))
        assert calls["n"] == 0
        assert excinfo.value.retryable is False

    def test_malformed_remote_payload(self):
        backend = RemoteDetector(
            transport=httpx.MockTransport(lambda r: httpx.Response(200, content=b"oops"))
        )
        with pytest.raises(MalformedPayloadError):
            backend.detect(remote_descriptor(), b"x", (100, 100))

    def test_in_flight_cap(self):
        active = {"now": 0, "peak": 0}
        lock = threading.Lock()

        def handler(request):
            with lock:
                active["now"] += 1
                active["peak"] = max(active["peak"], active["now"])
            time.sleep(0.02)
            with lock:
                active["now"] -= 1
            return httpx.Response(200, json=[])

        backend = RemoteDetector(max_in_flight=2, transport=httpx.MockTransport(handler))
        descriptor = remote_descriptor()
        threads = [
            threading.Thread(target=backend.detect, args=(descriptor, b"x", (100, 100)))
            for _ in range(6)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert active["peak"] <= 2


class TestDetectDispatch:
    def test_mock_requires_instance(self):
        with pytest.raises(ValueError):
            detect(mock_descriptor(), b"x", (100, 100))

    def test_dispatch_to_mock_instance(self):
        image = b"img"
        key = hashlib.sha256(image).hexdigest()
        backend = MockDetector({key: []})
        prediction = detect(mock_descriptor(), image, (100, 100), image_id="i", backend=backend)
        assert prediction.objects == ()

    def test_prediction_latency_validated(self):
        with pytest.raises(ValueError):
            Prediction(image_id="i", model_id="m", objects=(), latency_ms=-1.0)
