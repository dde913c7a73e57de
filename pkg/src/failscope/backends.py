"""Pluggable object-detection backends: remote HTTP, mock, and replay.

Wire schema (version 1): the detection endpoint receives a POST whose body
is the raw image bytes and answers with a JSON list of records

    {"label": str, "score": float in [0, 1],
     "box": {"xmin": px, "ymin": px, "xmax": px, "ymax": px}}

Pixel boxes are normalized by the image dimensions on the way in. Every
error carries a `retryable` flag so callers can decide whether a retry is
worth attempting.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import httpx

from .classify import PredictedObject
from .geometry import BoundingBox, LabeledBox, normalize_label

REQUEST_TIMEOUT_SECONDS = 30.0
MAX_IN_FLIGHT = 4
MAX_IMAGE_BYTES = 10 * 1024 * 1024

WIRE_FIELDS = ("label", "score", "box")
WIRE_BOX_FIELDS = ("xmin", "ymin", "xmax", "ymax")


class BackendKind(str, Enum):
    REMOTE = "remote"
    MOCK = "mock"
    REPLAY = "replay"


class BackendError(Exception):
    """Base class for detection failures; `retryable` notes retry eligibility."""

    retryable = False


class NetworkError(BackendError):
    retryable = True


class StatusError(BackendError):
    """Non-2xx response. Retryable for throttling and server-side statuses."""

    def __init__(self, status: int, detail: str = "") -> None:
        super().__init__(f"backend returned status {status}" + (f": {detail}" if detail else ""))
        self.status = status
        self.retryable = status == 429 or status >= 500


class MalformedPayloadError(BackendError):
    pass


class ImageTooLargeError(BackendError):
    pass


class MissingFixtureError(BackendError):
    pass


class AuthTokenMissingError(BackendError):
    pass


@dataclass(frozen=True)
class ModelDescriptor:
    """Where a model lives and what it can detect."""

    model_id: str
    display_name: str
    backend_kind: BackendKind
    class_list: frozenset[str]
    endpoint: str | None = None
    auth_token_env: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "backend_kind", BackendKind(self.backend_kind))
        if not self.model_id:
            raise ValueError("model_id must be non-empty")
        normalized = frozenset(normalize_label(c) for c in self.class_list)
        if not normalized or "" in normalized:
            raise ValueError("class_list must contain non-empty labels")
        object.__setattr__(self, "class_list", normalized)
        if self.backend_kind is BackendKind.REMOTE and not self.endpoint:
            raise ValueError("remote backend requires an endpoint")


@dataclass(frozen=True)
class Prediction:
    image_id: str
    model_id: str
    objects: tuple[PredictedObject, ...]
    latency_ms: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "objects", tuple(self.objects))
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")


def parse_wire_prediction(
    payload: bytes, image_dims: tuple[int, int]
) -> list[PredictedObject]:
    """Validate a wire payload and normalize its pixel boxes.

    Objects come back in wire order with ids p0, p1, ... by wire position.
    """
    width, height = image_dims
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    try:
        records = json.loads(payload)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayloadError(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(records, list):
        raise MalformedPayloadError("payload must be a JSON list")

    objects: list[PredictedObject] = []
    for index, record in enumerate(records):
        if not isinstance(record, dict):
            raise MalformedPayloadError(f"record {index} is not an object")
        for name in WIRE_FIELDS:
            if name not in record:
                raise MalformedPayloadError(f"record {index} missing field '{name}'")
        label = record["label"]
        if not isinstance(label, str) or not normalize_label(label):
            raise MalformedPayloadError(f"record {index} label must be a non-empty string")
        score = record["score"]
        if not isinstance(score, (int, float)) or isinstance(score, bool):
            raise MalformedPayloadError(f"record {index} score must be a number")
        if not 0 <= score <= 1:
            raise MalformedPayloadError(f"record {index} score {score} outside [0, 1]")
        box = record["box"]
        if not isinstance(box, dict):
            raise MalformedPayloadError(f"record {index} box must be an object")
        for name in WIRE_BOX_FIELDS:
            if name not in box:
                raise MalformedPayloadError(f"record {index} box missing '{name}'")
            if not isinstance(box[name], (int, float)) or isinstance(box[name], bool):
                raise MalformedPayloadError(f"record {index} box '{name}' must be a number")
        xmin, ymin, xmax, ymax = (box[name] for name in WIRE_BOX_FIELDS)
        if xmin >= xmax or ymin >= ymax:
            raise MalformedPayloadError(f"record {index} box coordinates are inverted")
        if xmin < 0 or ymin < 0 or xmax > width or ymax > height:
            raise MalformedPayloadError(f"record {index} box lies outside the image")
        objects.append(
            PredictedObject(
                id=f"p{index}",
                labeled=LabeledBox(
                    label,
                    BoundingBox(xmin / width, ymin / height, xmax / width, ymax / height),
                ),
                score=float(score),
            )
        )
    return objects


def _sorted_objects(objects: Sequence[PredictedObject]) -> tuple[PredictedObject, ...]:
    # descending score, then label; stable, so wire position breaks ties
    return tuple(sorted(objects, key=lambda o: (-o.score, o.label)))


class MockDetector:
    """Deterministic fixture backend keyed by sha256 hexdigest of image bytes.

    Fixture values are wire-schema record lists (already in pixels).
    """

    def __init__(self, fixtures: Mapping[str, Sequence[Mapping]]) -> None:
        self._fixtures = {key: json.dumps(list(records)).encode() for key, records in fixtures.items()}

    def detect(
        self,
        descriptor: ModelDescriptor,
        image: bytes,
        dims: tuple[int, int],
        image_id: str = "",
    ) -> Prediction:
        key = hashlib.sha256(image).hexdigest()
        try:
            payload = self._fixtures[key]
        except KeyError:
            raise MissingFixtureError(f"no fixture for image {key[:12]}") from None
        objects = _sorted_objects(parse_wire_prediction(payload, dims))
        return Prediction(image_id=image_id, model_id=descriptor.model_id, objects=objects, latency_ms=0.0)


class ReplayDetector:
    """Replays stored predictions, one JSON file per image id under `root`.

    File schema: {"image_id": str, "width": px, "height": px,
    "objects": [wire records]}.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def detect(
        self,
        descriptor: ModelDescriptor,
        image: bytes,
        dims: tuple[int, int],
        image_id: str = "",
    ) -> Prediction:
        path = self.root / f"{image_id}.json"
        if not path.is_file():
            raise MissingFixtureError(f"no replay file for image '{image_id}'")
        try:
            stored = json.loads(path.read_text(encoding="utf-8"))
            width = stored["width"]
            height = stored["height"]
            payload = json.dumps(stored["objects"]).encode()
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MalformedPayloadError(f"replay file {path.name} is malformed") from exc
        if (width, height) != tuple(dims):
            raise MalformedPayloadError(
                f"replay file {path.name} stored dims {width}x{height} != given {dims[0]}x{dims[1]}"
            )
        objects = _sorted_objects(parse_wire_prediction(payload, (width, height)))
        return Prediction(image_id=image_id, model_id=descriptor.model_id, objects=objects, latency_ms=0.0)


class RemoteDetector:
    """POSTs raw image bytes to the descriptor's endpoint.

    One retry on transient transport failure; at most `max_in_flight`
    concurrent requests per detector instance.
    """

    def __init__(
        self,
        timeout: float = REQUEST_TIMEOUT_SECONDS,
        max_in_flight: int = MAX_IN_FLIGHT,
        max_image_bytes: int = MAX_IMAGE_BYTES,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.timeout = timeout
        self.max_image_bytes = max_image_bytes
        self._transport = transport
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def _headers(self, descriptor: ModelDescriptor) -> dict[str, str]:
        headers = {"content-type": "application/octet-stream"}
        if descriptor.auth_token_env:
            token = os.environ.get(descriptor.auth_token_env)
            if not token:
                raise AuthTokenMissingError(
                    f"environment variable '{descriptor.auth_token_env}' is not set"
                )
            headers["authorization"] = f"Bearer {token}"
        return headers

    def detect(
        self,
        descriptor: ModelDescriptor,
        image: bytes,
        dims: tuple[int, int],
        image_id: str = "",
    ) -> Prediction:
        if descriptor.backend_kind is not BackendKind.REMOTE or not descriptor.endpoint:
            raise ValueError("descriptor is not a remote model")
        if len(image) > self.max_image_bytes:
            raise ImageTooLargeError(
                f"image is {len(image)} bytes, cap is {self.max_image_bytes}"
            )
        headers = self._headers(descriptor)
        started = time.perf_counter()
        with self._slots:
            response = self._post_with_retry(descriptor.endpoint, image, headers)
        latency_ms = (time.perf_counter() - started) * 1000.0
        if not 200 <= response.status_code < 300:
            raise StatusError(response.status_code, response.text[:200])
        objects = _sorted_objects(parse_wire_prediction(response.content, dims))
        return Prediction(
            image_id=image_id,
            model_id=descriptor.model_id,
            objects=objects,
            latency_ms=latency_ms,
        )

    def _post_with_retry(
        self, endpoint: str, image: bytes, headers: dict[str, str]
    ) -> httpx.Response:
        last_error: httpx.TransportError | None = None
        for attempt in range(2):
            try:
                with httpx.Client(transport=self._transport, timeout=self.timeout) as client:
                    return client.post(endpoint, content=image, headers=headers)
            except httpx.TransportError as exc:
                last_error = exc
        raise NetworkError(f"request failed after retry: {last_error}") from last_error


def detect(
    descriptor: ModelDescriptor,
    image: bytes,
    dims: tuple[int, int],
    image_id: str = "",
    backend: MockDetector | ReplayDetector | RemoteDetector | None = None,
) -> Prediction:
    """Run detection with the given backend instance.

    Remote descriptors get a default RemoteDetector when none is passed;
    mock and replay need their fixture source, so the instance is required.
    """
    if backend is None:
        if descriptor.backend_kind is BackendKind.REMOTE:
            backend = RemoteDetector()
        else:
            raise ValueError(
                f"{descriptor.backend_kind.value} backend needs a configured instance"
            )
    return backend.detect(descriptor, image, dims, image_id=image_id)
