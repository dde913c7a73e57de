"""HTTP service exposing the exploration workflow to clients.

Orchestrates detector backends, the matching/classification pipeline, prompt
suggestions, metrics, and the project store behind a resource-oriented v1
endpoint catalog. Every JSON response carries `schema_version`; binary
responses carry it in an `X-Schema-Version` header. Errors use a uniform
envelope: {"error": {"code", "message", "retryable"}}.
"""

from __future__ import annotations

import json
import os
import re
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from io import BytesIO
from pathlib import Path
from typing import Any, Callable, Mapping

from fastapi import APIRouter, FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, ConfigDict
from pydantic import Field as PydanticField
from starlette.exceptions import HTTPException as StarletteHTTPException

from . import store as storage
from .assist import (
    AugmentationKind,
    AugmentationSpec,
    CaptionBackend,
    augment,
    bundled_lexicon,
    suggest_prompts,
)
from .backends import (
    BackendError,
    BackendKind,
    ImageTooLargeError,
    MockDetector,
    ModelDescriptor,
    RemoteDetector,
    ReplayDetector,
    detect,
)
from .catalog import SystemLevel, catalog_version, list_taxonomy, suggest_recoveries
from .classify import FailureReport, Thresholds, classify
from .geometry import BoundingBox, LabeledBox, MatchWeights, build_cost_matrix, optimal_assignment
from .metrics import MetricAxis, aggregate
from .store import (
    ImageSource,
    IntegrityError,
    NotFoundError,
    ProjectStore,
    SchemaVersionError,
    StoreBusyError,
    StoreError,
)

API_VERSION = 1
POLL_INTERVAL_MS = 500
_PROJECT_ID_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9_.-]{0,63}")

Detector = MockDetector | ReplayDetector | RemoteDetector


class ApiError(Exception):
    """Hand-raised request failure carrying its envelope fields."""

    def __init__(self, status: int, code: str, message: str, retryable: bool = False) -> None:
        super().__init__(message)
        self.status = status
        self.code = code
        self.retryable = retryable


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class BackendConfig:
    """One configured detector: descriptor plus its fixture source, if any."""

    descriptor: ModelDescriptor
    replay_root: Path | None = None
    fixture_file: Path | None = None


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8321
    project_root: Path = Path("projects")
    ui_origin: str | None = None
    caption_endpoint: str | None = None
    backends: tuple[BackendConfig, ...] = ()


def _backend_from_entry(entry: Mapping[str, Any], base_dir: Path) -> BackendConfig:
    descriptor = ModelDescriptor(
        model_id=entry["model_id"],
        display_name=entry.get("display_name") or entry["model_id"],
        backend_kind=BackendKind(entry["backend_kind"]),
        class_list=frozenset(entry["class_list"]),
        endpoint=entry.get("endpoint"),
        auth_token_env=entry.get("auth_token_env"),
    )

    def resolve(key: str) -> Path | None:
        value = entry.get(key)
        return (base_dir / value).resolve() if value is not None else None

    replay_root = resolve("replay_root")
    fixture_file = resolve("fixture_file")
    if descriptor.backend_kind is BackendKind.REPLAY and replay_root is None:
        raise ValueError(f"replay backend '{descriptor.model_id}' needs replay_root")
    if descriptor.backend_kind is BackendKind.MOCK and fixture_file is None:
        raise ValueError(f"mock backend '{descriptor.model_id}' needs fixture_file")
    return BackendConfig(descriptor=descriptor, replay_root=replay_root, fixture_file=fixture_file)


def load_config(
    path: str | Path | None = None, env: Mapping[str, str] | None = None
) -> ServiceConfig:
    """Build the service configuration from an optional JSON file plus env overrides.

    Recognized environment variables: FAILSCOPE_HOST, FAILSCOPE_PORT,
    FAILSCOPE_PROJECT_ROOT, FAILSCOPE_UI_ORIGIN, FAILSCOPE_CAPTION_ENDPOINT.
    Relative backend fixture paths resolve against the config file's directory.
    """
    if env is None:
        env = os.environ
    doc: dict[str, Any] = {}
    base_dir = Path.cwd()
    if path is not None:
        config_path = Path(path)
        try:
            doc = json.loads(config_path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValueError(f"cannot read config file {config_path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"config file {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValueError(f"config file {config_path} must hold a JSON object")
        base_dir = config_path.resolve().parent

    host = env.get("FAILSCOPE_HOST", doc.get("host", "127.0.0.1"))
    port_raw = env.get("FAILSCOPE_PORT", doc.get("port", 8321))
    try:
        port = int(port_raw)
    except (TypeError, ValueError):
        raise ValueError(f"port must be an integer, got {port_raw!r}") from None
    project_root = Path(env.get("FAILSCOPE_PROJECT_ROOT", doc.get("project_root", "projects")))
    ui_origin = env.get("FAILSCOPE_UI_ORIGIN", doc.get("ui_origin"))
    caption_endpoint = env.get("FAILSCOPE_CAPTION_ENDPOINT", doc.get("caption_endpoint"))
    backends = tuple(_backend_from_entry(entry, base_dir) for entry in doc.get("backends", []))
    return ServiceConfig(
        host=host,
        port=port,
        project_root=project_root,
        ui_origin=ui_origin,
        caption_endpoint=caption_endpoint,
        backends=backends,
    )


def build_detectors(config: ServiceConfig) -> dict[str, Detector]:
    """Instantiate one detector per configured backend; remote models share one client."""
    detectors: dict[str, Detector] = {}
    remote: RemoteDetector | None = None
    for backend in config.backends:
        kind = backend.descriptor.backend_kind
        if kind is BackendKind.MOCK:
            assert backend.fixture_file is not None
            fixtures = json.loads(backend.fixture_file.read_text(encoding="utf-8"))
            detectors[backend.descriptor.model_id] = MockDetector(fixtures)
        elif kind is BackendKind.REPLAY:
            assert backend.replay_root is not None
            detectors[backend.descriptor.model_id] = ReplayDetector(backend.replay_root)
        else:
            if remote is None:
                remote = RemoteDetector()
            detectors[backend.descriptor.model_id] = remote
    return detectors


# ---------------------------------------------------------------- error envelope


def _error_info(exc: Exception) -> tuple[int, str, bool]:
    """Map an exception to (http status, envelope code, retryable)."""
    if isinstance(exc, ApiError):
        return exc.status, exc.code, exc.retryable
    if isinstance(exc, StoreBusyError):
        return 409, "busy", True
    if isinstance(exc, NotFoundError):
        return 404, "not_found", False
    if isinstance(exc, IntegrityError):
        return 409, "integrity", False
    if isinstance(exc, SchemaVersionError):
        return 500, "schema_version", False
    if isinstance(exc, StoreError):
        return 500, "store_io", False
    if isinstance(exc, ImageTooLargeError):
        return 413, "image_too_large", False
    if isinstance(exc, BackendError):
        return 502, "backend", exc.retryable
    if isinstance(exc, ValueError):
        return 422, "invalid_request", False
    return 500, "internal", False


def _envelope(status: int, code: str, message: str, retryable: bool) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={
            "schema_version": API_VERSION,
            "error": {"code": code, "message": message, "retryable": retryable},
        },
    )


def _ok(payload: dict[str, Any]) -> dict[str, Any]:
    doc: dict[str, Any] = {"schema_version": API_VERSION}
    doc.update(payload)
    return doc


# ---------------------------------------------------------------- request bodies


class _Body(BaseModel):
    model_config = ConfigDict(protected_namespaces=())


class ProjectBody(_Body):
    project_id: str


class PersonaBody(_Body):
    name: str
    description: str = ""
    avatar_image_id: str | None = None


class PersonaPatch(_Body):
    name: str | None = None
    description: str | None = None
    avatar_image_id: str | None = None


class ScenarioBody(_Body):
    persona_id: str
    description: str = ""
    image_ids: list[str] = PydanticField(default_factory=list)


class ScenarioPatch(_Body):
    description: str | None = None


class AttachBody(_Body):
    image_id: str


class ModelBody(_Body):
    model_id: str
    display_name: str | None = None
    backend_kind: str | None = None
    class_list: list[str] | None = None
    endpoint: str | None = None
    auth_token_env: str | None = None


class BoxBody(_Body):
    x_min: float
    y_min: float
    x_max: float
    y_max: float


class AnnotationBody(_Body):
    label: str
    box: BoxBody


class WeightsBody(_Body):
    gamma_class: float = 0.5
    gamma_box: float = 0.5
    lambda_l1: float = 0.5
    lambda_iou: float = 0.5


class ThresholdsBody(_Body):
    confidence_floor: float = 0.95
    iou_floor: float = 0.7


class ExplorationBody(_Body):
    image_id: str
    model_id: str
    persona_id: str
    scenario_id: str
    annotations: list[AnnotationBody] = PydanticField(default_factory=list)
    weights: WeightsBody | None = None
    thresholds: ThresholdsBody | None = None


class SeverityBody(_Body):
    severity: int


class GroupBody(_Body):
    name: str


class GroupPatch(_Body):
    name: str | None = None
    recovery_note: str | None = None
    suggested_mechanisms: list[str] | None = None


class MemberBody(_Body):
    instance_id: str
    position: tuple[float, float] = (0.0, 0.0)


class PositionBody(_Body):
    x: float
    y: float


class AugmentBody(_Body):
    kind: str
    parameter: float


class PromptBody(_Body):
    image_id: str
    model_id: str


# ---------------------------------------------------------------- async jobs


class JobBoard:
    """In-memory registry of background exploration jobs."""

    def __init__(self, max_workers: int = 4) -> None:
        self._pool = ThreadPoolExecutor(max_workers=max_workers)
        self._futures: dict[str, Future] = {}
        self._lock = threading.Lock()
        self._seq = 0

    def submit(self, fn: Callable[[], dict[str, Any]]) -> str:
        with self._lock:
            self._seq += 1
            job_id = f"job-{self._seq:04d}"
            self._futures[job_id] = self._pool.submit(fn)
        return job_id

    def status(self, job_id: str) -> dict[str, Any]:
        with self._lock:
            future = self._futures.get(job_id)
        if future is None:
            raise ApiError(404, "not_found", f"unknown job '{job_id}'")
        if not future.done():
            return {"job_id": job_id, "status": "pending", "poll_interval_ms": POLL_INTERVAL_MS}
        exc = future.exception()
        if exc is not None:
            _, code, retryable = _error_info(exc)
            return {
                "job_id": job_id,
                "status": "failed",
                "error": {"code": code, "message": str(exc), "retryable": retryable},
            }
        return {"job_id": job_id, "status": "done", "response": future.result()}


# ---------------------------------------------------------------- doc helpers


def _suggestion_doc(s: Any) -> dict[str, Any]:
    return {
        "strategy": s.strategy.value,
        "text": s.text,
        "rationale": s.rationale,
        "annotation_id": s.annotation_id,
    }


def _project_doc(project: storage.Project) -> dict[str, Any]:
    return {
        "project_id": project.project_id,
        "counts": {
            "personas": len(project.personas),
            "scenarios": len(project.scenarios),
            "images": len(project.images),
            "annotations": len(project.annotations),
            "failure_instances": len(project.failure_instances),
            "groups": len(project.groups),
            "models": len(project.models),
        },
    }


def _metric_docs(project: storage.Project, axis: MetricAxis) -> list[dict[str, Any]]:
    instances = sorted(project.failure_instances.values(), key=lambda i: i.instance_id)
    records = [
        record
        for image_id in sorted(project.image_warnings)
        for _, record in sorted(project.image_warnings[image_id].items())
    ]
    return [storage._metric_doc(report) for report in aggregate(instances, records, axis)]


def _decode_dims(data: bytes) -> tuple[int, int]:
    try:
        with Image.open(BytesIO(data)) as im:
            im.load()
            return im.size
    except Exception:
        raise ApiError(422, "invalid_request", "uploaded bytes are not a decodable image") from None


# ---------------------------------------------------------------- exploration pipeline


def _resolve_context(
    project: storage.Project, body: ExplorationBody
) -> tuple[storage.ImageAsset, ModelDescriptor]:
    asset = project.images.get(body.image_id)
    if asset is None:
        raise NotFoundError(f"unknown image '{body.image_id}'")
    model = project.models.get(body.model_id)
    if model is None:
        raise NotFoundError(f"unknown model '{body.model_id}'")
    if body.persona_id not in project.personas:
        raise NotFoundError(f"unknown persona '{body.persona_id}'")
    if body.scenario_id not in project.scenarios:
        raise NotFoundError(f"unknown scenario '{body.scenario_id}'")
    return asset, model


def run_exploration(
    store: ProjectStore,
    body: ExplorationBody,
    detectors: Mapping[str, Detector],
    caption_backend: CaptionBackend | None = None,
) -> dict[str, Any]:
    """Detect, match, classify, persist, then suggest follow-up prompts.

    Detection runs before the store mutation, so a backend failure leaves the
    project untouched. The mutation persists annotations, the prediction, and
    the classified instances in one atomic save.
    """
    project = store.load()
    asset, model = _resolve_context(project, body)
    labeled = [
        LabeledBox(a.label, BoundingBox(a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max))
        for a in body.annotations
    ]
    weights = MatchWeights(**body.weights.model_dump()) if body.weights else None
    thresholds = Thresholds(**body.thresholds.model_dump()) if body.thresholds else None
    image_bytes = store.get_blob(asset.content_hash)

    prediction = detect(
        model,
        image_bytes,
        (asset.width, asset.height),
        image_id=body.image_id,
        backend=detectors.get(body.model_id),
    )

    def persist(fresh: storage.Project) -> tuple[list, FailureReport, list]:
        _resolve_context(fresh, body)
        live_model = fresh.models[body.model_id]
        anns = [storage.add_annotation(fresh, body.image_id, lb.label, lb.box) for lb in labeled]
        storage.record_prediction(fresh, prediction)
        matrix = build_cost_matrix(
            [a.labeled for a in anns], [o.labeled for o in prediction.objects], weights
        )
        assignment = optimal_assignment(matrix)
        report = classify(
            anns,
            list(prediction.objects),
            assignment,
            live_model.class_list,
            thresholds,
            image_id=body.image_id,
            model_id=body.model_id,
            persona_id=body.persona_id,
            scenario_id=body.scenario_id,
        )
        stored = storage.record_report(
            fresh,
            report,
            image_id=body.image_id,
            model_id=body.model_id,
            persona_id=body.persona_id,
            scenario_id=body.scenario_id,
        )
        return anns, report, stored

    anns, report, stored = store.mutate(persist)
    plan = suggest_prompts(
        report, anns, bundled_lexicon(), model.class_list, caption_backend, image_bytes
    )
    return {
        "prediction": storage._prediction_doc(prediction),
        "report": {
            "instances": [storage._instance_doc(i) for i in stored],
            "image_warnings": sorted(tag.value for tag in report.image_warnings),
        },
        "annotations": [storage._annotation_doc(a) for a in anns],
        "suggestions": [_suggestion_doc(s) for s in plan.suggestions],
        "notices": list(plan.notices),
        "instance_ids": [i.instance_id for i in stored],
    }


# ---------------------------------------------------------------- routes

router = APIRouter(prefix="/v1")


def _store_for(request: Request, project_id: str) -> ProjectStore:
    if not _PROJECT_ID_RE.fullmatch(project_id):
        raise ApiError(422, "invalid_request", f"invalid project id '{project_id}'")
    root: Path = request.app.state.project_root
    return ProjectStore(root / project_id)


@router.get("/meta")
def get_meta(request: Request) -> dict[str, Any]:
    config: ServiceConfig = request.app.state.config
    return _ok(
        {
            "catalog_version": catalog_version(),
            "backends": [b.descriptor.model_id for b in config.backends],
            "poll_interval_ms": POLL_INTERVAL_MS,
        }
    )


@router.get("/catalog/taxonomy")
def get_taxonomy(level: str | None = None) -> dict[str, Any]:
    chosen = SystemLevel(level) if level is not None else None
    entries = list_taxonomy(chosen)
    return _ok(
        {
            "catalog_version": catalog_version(),
            "entries": [
                {
                    "system_level": e.system_level.value,
                    "name": e.name,
                    "description": e.description,
                    "example": e.example,
                }
                for e in entries
            ],
        }
    )


@router.get("/catalog/recoveries")
def get_recoveries() -> dict[str, Any]:
    return _ok(
        {
            "catalog_version": catalog_version(),
            "mechanisms": [
                {"name": m.name, "description": m.description} for m in suggest_recoveries()
            ],
        }
    )


@router.get("/backends")
def list_backends(request: Request) -> dict[str, Any]:
    config: ServiceConfig = request.app.state.config
    return _ok({"backends": [storage._model_doc(b.descriptor) for b in config.backends]})


# -------- projects


@router.post("/projects", status_code=201)
def create_project(request: Request, body: ProjectBody) -> dict[str, Any]:
    store = _store_for(request, body.project_id)
    if store.exists():
        raise ApiError(409, "exists", f"project '{body.project_id}' already exists")
    project = store.initialize(body.project_id)
    return _ok({"project": _project_doc(project)})


@router.get("/projects")
def list_projects(request: Request) -> dict[str, Any]:
    root: Path = request.app.state.project_root
    ids: list[str] = []
    if root.is_dir():
        ids = sorted(d.name for d in root.iterdir() if (d / storage.MANIFEST_NAME).is_file())
    return _ok({"projects": ids})


@router.get("/projects/{project_id}")
def get_project(request: Request, project_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    return _ok({"project": _project_doc(project)})


# -------- personas


@router.post("/projects/{project_id}/personas", status_code=201)
def create_persona(request: Request, project_id: str, body: PersonaBody) -> dict[str, Any]:
    store = _store_for(request, project_id)
    persona = store.mutate(
        lambda p: storage.add_persona(
            p, name=body.name, description=body.description, avatar_image_id=body.avatar_image_id
        )
    )
    return _ok({"persona": storage._persona_doc(persona)})


@router.get("/projects/{project_id}/personas")
def list_personas(request: Request, project_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    docs = [storage._persona_doc(project.personas[pid]) for pid in sorted(project.personas)]
    return _ok({"personas": docs})


@router.get("/projects/{project_id}/personas/{persona_id}")
def get_persona(request: Request, project_id: str, persona_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    persona = project.personas.get(persona_id)
    if persona is None:
        raise NotFoundError(f"unknown persona '{persona_id}'")
    return _ok({"persona": storage._persona_doc(persona)})


@router.patch("/projects/{project_id}/personas/{persona_id}")
def patch_persona(
    request: Request, project_id: str, persona_id: str, body: PersonaPatch
) -> dict[str, Any]:
    def apply(project: storage.Project) -> storage.Persona:
        persona = project.personas.get(persona_id)
        if persona is None:
            raise NotFoundError(f"unknown persona '{persona_id}'")
        if body.name is not None:
            if not body.name.strip():
                raise ValueError("persona name must be non-empty")
            persona.name = body.name
        if body.description is not None:
            persona.description = body.description
        if body.avatar_image_id is not None:
            if body.avatar_image_id not in project.images:
                raise NotFoundError(f"unknown image '{body.avatar_image_id}'")
            persona.avatar_image_id = body.avatar_image_id
        return persona

    persona = _store_for(request, project_id).mutate(apply)
    return _ok({"persona": storage._persona_doc(persona)})


@router.delete("/projects/{project_id}/personas/{persona_id}")
def delete_persona(request: Request, project_id: str, persona_id: str) -> dict[str, Any]:
    def drop(project: storage.Project) -> None:
        if persona_id not in project.personas:
            raise NotFoundError(f"unknown persona '{persona_id}'")
        del project.personas[persona_id]

    _store_for(request, project_id).mutate(drop)
    return _ok({"deleted": persona_id})


# -------- scenarios


@router.post("/projects/{project_id}/scenarios", status_code=201)
def create_scenario(request: Request, project_id: str, body: ScenarioBody) -> dict[str, Any]:
    store = _store_for(request, project_id)
    scenario = store.mutate(
        lambda p: storage.add_scenario(
            p, persona_id=body.persona_id, description=body.description, image_ids=body.image_ids
        )
    )
    return _ok({"scenario": storage._scenario_doc(scenario)})


@router.get("/projects/{project_id}/scenarios")
def list_scenarios(request: Request, project_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    docs = [storage._scenario_doc(project.scenarios[sid]) for sid in sorted(project.scenarios)]
    return _ok({"scenarios": docs})


@router.get("/projects/{project_id}/scenarios/{scenario_id}")
def get_scenario(request: Request, project_id: str, scenario_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    scenario = project.scenarios.get(scenario_id)
    if scenario is None:
        raise NotFoundError(f"unknown scenario '{scenario_id}'")
    return _ok({"scenario": storage._scenario_doc(scenario)})


@router.patch("/projects/{project_id}/scenarios/{scenario_id}")
def patch_scenario(
    request: Request, project_id: str, scenario_id: str, body: ScenarioPatch
) -> dict[str, Any]:
    def apply(project: storage.Project) -> storage.Scenario:
        scenario = project.scenarios.get(scenario_id)
        if scenario is None:
            raise NotFoundError(f"unknown scenario '{scenario_id}'")
        if body.description is not None:
            scenario.description = body.description
        return scenario

    scenario = _store_for(request, project_id).mutate(apply)
    return _ok({"scenario": storage._scenario_doc(scenario)})


@router.delete("/projects/{project_id}/scenarios/{scenario_id}")
def delete_scenario(request: Request, project_id: str, scenario_id: str) -> dict[str, Any]:
    def drop(project: storage.Project) -> None:
        if scenario_id not in project.scenarios:
            raise NotFoundError(f"unknown scenario '{scenario_id}'")
        del project.scenarios[scenario_id]

    _store_for(request, project_id).mutate(drop)
    return _ok({"deleted": scenario_id})


@router.post("/projects/{project_id}/scenarios/{scenario_id}/images", status_code=201)
def attach_image(
    request: Request, project_id: str, scenario_id: str, body: AttachBody
) -> dict[str, Any]:
    def apply(project: storage.Project) -> storage.Scenario:
        storage.attach_image_to_scenario(project, scenario_id, body.image_id)
        return project.scenarios[scenario_id]

    scenario = _store_for(request, project_id).mutate(apply)
    return _ok({"scenario": storage._scenario_doc(scenario)})


# -------- images


@router.post("/projects/{project_id}/images", status_code=201)
async def upload_image(
    request: Request, project_id: str, source: str = "upload", prompt: str | None = None
) -> dict[str, Any]:
    data = await request.body()
    if not data:
        raise ApiError(422, "invalid_request", "empty image upload")
    src = ImageSource(source)
    if src is ImageSource.AUGMENTED:
        raise ApiError(
            422, "invalid_request", "augmented images are created via the augment endpoint"
        )
    width, height = _decode_dims(data)
    store = _store_for(request, project_id)
    store.load()
    content_hash = store.put_blob(data)
    asset = store.mutate(
        lambda p: storage.add_image(p, content_hash, width, height, source=src, prompt=prompt)
    )
    return _ok({"image": storage._image_doc(asset)})


@router.get("/projects/{project_id}/images")
def list_images(request: Request, project_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    docs = [storage._image_doc(project.images[iid]) for iid in sorted(project.images)]
    return _ok({"images": docs})


@router.get("/projects/{project_id}/images/{image_id}")
def get_image(request: Request, project_id: str, image_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    asset = project.images.get(image_id)
    if asset is None:
        raise NotFoundError(f"unknown image '{image_id}'")
    return _ok({"image": storage._image_doc(asset)})


@router.get("/projects/{project_id}/images/{image_id}/content")
def get_image_content(request: Request, project_id: str, image_id: str) -> Response:
    store = _store_for(request, project_id)
    project = store.load()
    asset = project.images.get(image_id)
    if asset is None:
        raise NotFoundError(f"unknown image '{image_id}'")
    data = store.get_blob(asset.content_hash)
    return Response(
        content=data,
        media_type="application/octet-stream",
        headers={"X-Schema-Version": str(API_VERSION)},
    )


@router.delete("/projects/{project_id}/images/{image_id}")
def delete_image(request: Request, project_id: str, image_id: str) -> dict[str, Any]:
    def drop(project: storage.Project) -> None:
        if image_id not in project.images:
            raise NotFoundError(f"unknown image '{image_id}'")
        del project.images[image_id]
        for scenario in project.scenarios.values():
            if image_id in scenario.image_ids:
                scenario.image_ids.remove(image_id)

    _store_for(request, project_id).mutate(drop)
    return _ok({"deleted": image_id})


@router.post("/projects/{project_id}/images/{image_id}/augment", status_code=201)
def augment_image(
    request: Request, project_id: str, image_id: str, body: AugmentBody
) -> dict[str, Any]:
    spec = AugmentationSpec(AugmentationKind(body.kind), body.parameter)
    store = _store_for(request, project_id)
    project = store.load()
    asset = project.images.get(image_id)
    if asset is None:
        raise NotFoundError(f"unknown image '{image_id}'")
    result = augment(store.get_blob(asset.content_hash), spec)
    content_hash = store.put_blob(result)
    width, height = _decode_dims(result)
    new_asset = store.mutate(
        lambda p: storage.add_image(
            p,
            content_hash,
            width,
            height,
            source=ImageSource.AUGMENTED,
            parent_image_id=image_id,
            augmentation=spec,
        )
    )
    return _ok({"image": storage._image_doc(new_asset)})


# -------- models


@router.post("/projects/{project_id}/models", status_code=201)
def register_model(request: Request, project_id: str, body: ModelBody) -> dict[str, Any]:
    if body.backend_kind is None:
        config: ServiceConfig = request.app.state.config
        by_id = {b.descriptor.model_id: b.descriptor for b in config.backends}
        descriptor = by_id.get(body.model_id)
        if descriptor is None:
            raise NotFoundError(f"no configured backend '{body.model_id}'")
    else:
        descriptor = ModelDescriptor(
            model_id=body.model_id,
            display_name=body.display_name or body.model_id,
            backend_kind=BackendKind(body.backend_kind),
            class_list=frozenset(body.class_list or ()),
            endpoint=body.endpoint,
            auth_token_env=body.auth_token_env,
        )
    store = _store_for(request, project_id)
    store.mutate(lambda p: storage.add_model(p, descriptor))
    return _ok({"model": storage._model_doc(descriptor)})


@router.get("/projects/{project_id}/models")
def list_models(request: Request, project_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    docs = [storage._model_doc(project.models[mid]) for mid in sorted(project.models)]
    return _ok({"models": docs})


# -------- explorations


@router.post("/projects/{project_id}/explorations")
def create_exploration(request: Request, project_id: str, body: ExplorationBody) -> Any:
    store = _store_for(request, project_id)
    detectors: Mapping[str, Detector] = request.app.state.detectors
    caption_backend = request.app.state.caption_backend
    project = store.load()
    _, model = _resolve_context(project, body)
    if model.backend_kind is BackendKind.REMOTE:
        jobs: JobBoard = request.app.state.jobs
        job_id = jobs.submit(lambda: run_exploration(store, body, detectors, caption_backend))
        return JSONResponse(
            status_code=202,
            content=_ok(
                {
                    "job_id": job_id,
                    "status": "pending",
                    "status_url": f"/v1/projects/{project_id}/explorations/{job_id}",
                    "poll_interval_ms": POLL_INTERVAL_MS,
                }
            ),
        )
    return _ok(run_exploration(store, body, detectors, caption_backend))


@router.get("/projects/{project_id}/explorations/{job_id}")
def exploration_status(request: Request, project_id: str, job_id: str) -> dict[str, Any]:
    jobs: JobBoard = request.app.state.jobs
    return _ok(jobs.status(job_id))


# -------- failure instances


@router.get("/projects/{project_id}/instances")
def list_instances(request: Request, project_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    docs = [
        storage._instance_doc(project.failure_instances[iid])
        for iid in sorted(project.failure_instances)
    ]
    return _ok({"instances": docs})


@router.patch("/projects/{project_id}/instances/{instance_id}/severity")
def patch_severity(
    request: Request, project_id: str, instance_id: str, body: SeverityBody
) -> dict[str, Any]:
    instance = _store_for(request, project_id).mutate(
        lambda p: storage.set_severity(p, instance_id, body.severity)
    )
    return _ok({"instance": storage._instance_doc(instance)})


# -------- groups


@router.post("/projects/{project_id}/groups", status_code=201)
def create_group(request: Request, project_id: str, body: GroupBody) -> dict[str, Any]:
    group = _store_for(request, project_id).mutate(lambda p: storage.create_group(p, body.name))
    return _ok({"group": storage._group_doc(group)})


@router.get("/projects/{project_id}/groups")
def list_groups(request: Request, project_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    docs = [storage._group_doc(project.groups[gid]) for gid in sorted(project.groups)]
    return _ok({"groups": docs})


@router.get("/projects/{project_id}/groups/{group_id}")
def get_group(request: Request, project_id: str, group_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    group = project.groups.get(group_id)
    if group is None:
        raise NotFoundError(f"unknown group '{group_id}'")
    return _ok({"group": storage._group_doc(group)})


@router.patch("/projects/{project_id}/groups/{group_id}")
def patch_group(request: Request, project_id: str, group_id: str, body: GroupPatch) -> dict[str, Any]:
    def apply(project: storage.Project) -> storage.FailureGroup:
        if body.name is not None:
            storage.rename_group(project, group_id, body.name)
        if body.recovery_note is not None or body.suggested_mechanisms is not None:
            storage.set_group_recovery(
                project,
                group_id,
                recovery_note=body.recovery_note,
                suggested_mechanisms=body.suggested_mechanisms,
            )
        group = project.groups.get(group_id)
        if group is None:
            raise NotFoundError(f"unknown group '{group_id}'")
        return group

    group = _store_for(request, project_id).mutate(apply)
    return _ok({"group": storage._group_doc(group)})


@router.delete("/projects/{project_id}/groups/{group_id}")
def delete_group(request: Request, project_id: str, group_id: str) -> dict[str, Any]:
    _store_for(request, project_id).mutate(lambda p: storage.delete_group(p, group_id))
    return _ok({"deleted": group_id})


@router.post("/projects/{project_id}/groups/{group_id}/members", status_code=201)
def add_member(
    request: Request, project_id: str, group_id: str, body: MemberBody
) -> dict[str, Any]:
    group = _store_for(request, project_id).mutate(
        lambda p: storage.add_group_member(p, group_id, body.instance_id, position=body.position)
    )
    return _ok({"group": storage._group_doc(group)})


@router.delete("/projects/{project_id}/groups/{group_id}/members/{instance_id}")
def remove_member(
    request: Request, project_id: str, group_id: str, instance_id: str
) -> dict[str, Any]:
    group = _store_for(request, project_id).mutate(
        lambda p: storage.remove_group_member(p, group_id, instance_id)
    )
    return _ok({"group": storage._group_doc(group)})


@router.patch("/projects/{project_id}/groups/{group_id}/members/{instance_id}/position")
def patch_position(
    request: Request, project_id: str, group_id: str, instance_id: str, body: PositionBody
) -> dict[str, Any]:
    group = _store_for(request, project_id).mutate(
        lambda p: storage.set_canvas_position(p, group_id, instance_id, body.x, body.y)
    )
    return _ok({"group": storage._group_doc(group)})


# -------- metrics, export, prompts


@router.get("/projects/{project_id}/metrics")
def get_metrics(request: Request, project_id: str, axis: str = "persona") -> dict[str, Any]:
    try:
        chosen = MetricAxis(axis)
    except ValueError:
        raise ApiError(422, "invalid_request", f"unknown axis '{axis}'") from None
    project = _store_for(request, project_id).load()
    return _ok({"axis": chosen.value, "reports": _metric_docs(project, chosen)})


@router.get("/projects/{project_id}/export")
def export_project(request: Request, project_id: str) -> dict[str, Any]:
    project = _store_for(request, project_id).load()
    return storage.export_board(project)


@router.post("/projects/{project_id}/prompts")
def make_prompts(request: Request, project_id: str, body: PromptBody) -> dict[str, Any]:
    store = _store_for(request, project_id)
    project = store.load()
    asset = project.images.get(body.image_id)
    if asset is None:
        raise NotFoundError(f"unknown image '{body.image_id}'")
    model = project.models.get(body.model_id)
    if model is None:
        raise NotFoundError(f"unknown model '{body.model_id}'")
    instances = sorted(
        (
            i
            for i in project.failure_instances.values()
            if i.image_id == body.image_id and i.model_id == body.model_id
        ),
        key=lambda i: i.instance_id,
    )
    record = project.image_warnings.get(body.image_id, {}).get(body.model_id)
    report = FailureReport(
        instances=tuple(instances),
        image_warnings=record.tags if record is not None else frozenset(),
    )
    anns = [
        project.annotations[i.annotation_id] for i in instances if i.annotation_id is not None
    ]
    plan = suggest_prompts(
        report,
        anns,
        bundled_lexicon(),
        model.class_list,
        request.app.state.caption_backend,
        store.get_blob(asset.content_hash),
    )
    return _ok(
        {
            "suggestions": [_suggestion_doc(s) for s in plan.suggestions],
            "notices": list(plan.notices),
        }
    )


# ---------------------------------------------------------------- app factory


def create_app(
    config: ServiceConfig | None = None,
    *,
    detectors: Mapping[str, Detector] | None = None,
    caption_backend: CaptionBackend | None = None,
) -> FastAPI:
    """Assemble the application; injected detectors override configured ones."""
    if config is None:
        config = ServiceConfig()
    app = FastAPI(title="failscope service", version=f"v{API_VERSION}")

    built = build_detectors(config)
    if detectors:
        built.update(detectors)
    if caption_backend is None and config.caption_endpoint:
        from .assist import HttpCaptionBackend

        caption_backend = HttpCaptionBackend(config.caption_endpoint)

    app.state.config = config
    app.state.project_root = Path(config.project_root)
    app.state.detectors = built
    app.state.caption_backend = caption_backend
    app.state.jobs = JobBoard()

    if config.ui_origin:
        app.add_middleware(
            CORSMiddleware,
            allow_origins=[config.ui_origin],
            allow_methods=["*"],
            allow_headers=["*"],
        )

    async def handle_api_error(request: Request, exc: ApiError) -> JSONResponse:
        return _envelope(exc.status, exc.code, str(exc), exc.retryable)

    async def handle_validation(request: Request, exc: RequestValidationError) -> JSONResponse:
        message = "; ".join(
            f"{'.'.join(str(part) for part in err['loc'])}: {err['msg']}" for err in exc.errors()
        )
        return _envelope(422, "invalid_request", message, False)

    async def handle_known(request: Request, exc: Exception) -> JSONResponse:
        status, code, retryable = _error_info(exc)
        return _envelope(status, code, str(exc), retryable)

    async def handle_http(request: Request, exc: StarletteHTTPException) -> JSONResponse:
        code = {404: "not_found", 405: "method_not_allowed"}.get(
            exc.status_code, f"http_{exc.status_code}"
        )
        return _envelope(exc.status_code, code, str(exc.detail), False)

    app.add_exception_handler(ApiError, handle_api_error)
    app.add_exception_handler(RequestValidationError, handle_validation)
    app.add_exception_handler(StarletteHTTPException, handle_http)
    app.add_exception_handler(StoreError, handle_known)
    app.add_exception_handler(BackendError, handle_known)
    app.add_exception_handler(ValueError, handle_known)

    app.include_router(router)
    return app


def serve(config: ServiceConfig) -> None:
    """Run the service with uvicorn (installed via the `server` extra)."""
    try:
        import uvicorn
    except ImportError as exc:
        raise RuntimeError("the server extra is required: pip install failscope[server]") from exc
    uvicorn.run(create_app(config), host=config.host, port=config.port)
