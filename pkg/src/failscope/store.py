"""Project persistence: one directory per project.

Layout:

    <root>/manifest.json   all structured state, schema_version 1
    <root>/blobs/<sha256>  image bytes, content-addressed
    <root>/.lock           writer lock; concurrent writers get a busy error

The manifest is serialized with sorted keys and a trailing newline, so
saving an unchanged project is byte-identical. Unknown manifest fields are
kept aside on load and merged back on save, which lets newer schema
revisions pass through older code unharmed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from filelock import FileLock, Timeout

from .assist import AugmentationKind, AugmentationSpec
from .backends import BackendKind, ModelDescriptor, Prediction
from .catalog import suggest_recoveries
from .classify import (
    AnnotatedObject,
    DistributionTag,
    FailureInstance,
    FailureMode,
    FailureReport,
    PredictedObject,
    WarningTag,
)
from .geometry import BoundingBox, LabeledBox
from .metrics import DisaggregatedReport, ImageWarningRecord, MetricAxis, aggregate

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_DIR = "blobs"
LOCK_NAME = ".lock"

SEVERITY_MIN = 1
SEVERITY_MAX = 7


class StoreError(Exception):
    pass


class StoreBusyError(StoreError):
    """Another writer holds the project lock."""


class SchemaVersionError(StoreError):
    pass


class IntegrityError(StoreError):
    pass


class NotFoundError(StoreError):
    pass


class ImageSource(str, Enum):
    UPLOAD = "upload"
    GENERATED = "generated"
    AUGMENTED = "augmented"


@dataclass
class Persona:
    persona_id: str
    name: str
    description: str = ""
    avatar_image_id: str | None = None

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValueError("persona name must be non-empty")


@dataclass
class Scenario:
    scenario_id: str
    persona_id: str
    description: str = ""
    image_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.persona_id:
            raise ValueError("scenario must belong to a persona")


@dataclass
class ImageAsset:
    image_id: str
    content_hash: str
    width: int
    height: int
    source: ImageSource = ImageSource.UPLOAD
    prompt: str | None = None
    parent_image_id: str | None = None
    augmentation: AugmentationSpec | None = None

    def __post_init__(self) -> None:
        self.source = ImageSource(self.source)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.source is ImageSource.GENERATED and not self.prompt:
            raise ValueError("generated images record the prompt that produced them")
        if self.source is ImageSource.AUGMENTED and (
            self.parent_image_id is None or self.augmentation is None
        ):
            raise ValueError("augmented images record their parent and transform")


@dataclass
class FailureGroup:
    group_id: str
    name: str
    member_instance_ids: list[str] = field(default_factory=list)
    recovery_note: str = ""
    suggested_mechanisms: list[str] = field(default_factory=list)
    canvas_positions: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class Project:
    project_id: str
    schema_version: int = SCHEMA_VERSION
    personas: dict[str, Persona] = field(default_factory=dict)
    scenarios: dict[str, Scenario] = field(default_factory=dict)
    images: dict[str, ImageAsset] = field(default_factory=dict)
    annotations: dict[str, AnnotatedObject] = field(default_factory=dict)
    predictions: dict[str, dict[str, Prediction]] = field(default_factory=dict)
    failure_instances: dict[str, FailureInstance] = field(default_factory=dict)
    groups: dict[str, FailureGroup] = field(default_factory=dict)
    models: dict[str, ModelDescriptor] = field(default_factory=dict)
    image_warnings: dict[str, dict[str, ImageWarningRecord]] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)
    # unknown manifest fields by record path, merged back verbatim on save
    reserved: dict[str, dict[str, Any]] = field(default_factory=dict)


def new_project(project_id: str) -> Project:
    if not project_id.strip():
        raise ValueError("project_id must be non-empty")
    return Project(project_id=project_id)


def _next_id(project: Project, kind: str, prefix: str) -> str:
    n = project.counters.get(kind, 0) + 1
    project.counters[kind] = n
    return f"{prefix}-{n:04d}"


def _utc_stamp(now: datetime | None) -> str:
    stamp = now if now is not None else datetime.now(timezone.utc)
    return stamp.astimezone(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------- factories


def add_persona(
    project: Project, name: str, description: str = "", avatar_image_id: str | None = None
) -> Persona:
    if avatar_image_id is not None and avatar_image_id not in project.images:
        raise NotFoundError(f"unknown image '{avatar_image_id}'")
    persona = Persona(
        persona_id=_next_id(project, "persona", "pe"),
        name=name,
        description=description,
        avatar_image_id=avatar_image_id,
    )
    project.personas[persona.persona_id] = persona
    return persona


def add_scenario(
    project: Project, persona_id: str, description: str = "", image_ids: Sequence[str] = ()
) -> Scenario:
    if persona_id not in project.personas:
        raise NotFoundError(f"unknown persona '{persona_id}'")
    for image_id in image_ids:
        if image_id not in project.images:
            raise NotFoundError(f"unknown image '{image_id}'")
    scenario = Scenario(
        scenario_id=_next_id(project, "scenario", "sc"),
        persona_id=persona_id,
        description=description,
        image_ids=list(image_ids),
    )
    project.scenarios[scenario.scenario_id] = scenario
    return scenario


def attach_image_to_scenario(project: Project, scenario_id: str, image_id: str) -> None:
    scenario = project.scenarios.get(scenario_id)
    if scenario is None:
        raise NotFoundError(f"unknown scenario '{scenario_id}'")
    if image_id not in project.images:
        raise NotFoundError(f"unknown image '{image_id}'")
    if image_id not in scenario.image_ids:
        scenario.image_ids.append(image_id)


def add_image(
    project: Project,
    content_hash: str,
    width: int,
    height: int,
    source: ImageSource = ImageSource.UPLOAD,
    prompt: str | None = None,
    parent_image_id: str | None = None,
    augmentation: AugmentationSpec | None = None,
) -> ImageAsset:
    if parent_image_id is not None and parent_image_id not in project.images:
        raise NotFoundError(f"unknown parent image '{parent_image_id}'")
    asset = ImageAsset(
        image_id=_next_id(project, "image", "img"),
        content_hash=content_hash,
        width=width,
        height=height,
        source=source,
        prompt=prompt,
        parent_image_id=parent_image_id,
        augmentation=augmentation,
    )
    project.images[asset.image_id] = asset
    return asset


def add_annotation(project: Project, image_id: str, label: str, box: BoundingBox) -> AnnotatedObject:
    if image_id not in project.images:
        raise NotFoundError(f"unknown image '{image_id}'")
    ann = AnnotatedObject(
        id=_next_id(project, "annotation", "ann"),
        labeled=LabeledBox(label, box),
        image_id=image_id,
    )
    project.annotations[ann.id] = ann
    return ann


def add_model(project: Project, descriptor: ModelDescriptor) -> ModelDescriptor:
    project.models[descriptor.model_id] = descriptor
    return descriptor


def record_prediction(project: Project, prediction: Prediction) -> Prediction:
    if prediction.image_id not in project.images:
        raise NotFoundError(f"unknown image '{prediction.image_id}'")
    if prediction.model_id not in project.models:
        raise NotFoundError(f"unknown model '{prediction.model_id}'")
    project.predictions.setdefault(prediction.image_id, {})[prediction.model_id] = prediction
    return prediction


def record_report(
    project: Project,
    report: FailureReport,
    *,
    image_id: str,
    model_id: str,
    persona_id: str,
    scenario_id: str,
) -> list[FailureInstance]:
    """Adopt a classification report: assign instance ids, keep warnings."""
    stored: list[FailureInstance] = []
    for instance in report.instances:
        assigned = replace(instance, instance_id=_next_id(project, "instance", "fi"))
        project.failure_instances[assigned.instance_id] = assigned
        stored.append(assigned)
    if report.image_warnings:
        record = ImageWarningRecord(
            image_id=image_id,
            model_id=model_id,
            persona_id=persona_id,
            scenario_id=scenario_id,
            tags=report.image_warnings,
        )
        project.image_warnings.setdefault(image_id, {})[model_id] = record
    return stored


# ---------------------------------------------------------------- mutations


def set_severity(
    project: Project, instance_id: str, severity: int, now: datetime | None = None
) -> FailureInstance:
    instance = project.failure_instances.get(instance_id)
    if instance is None:
        raise NotFoundError(f"unknown failure instance '{instance_id}'")
    if not isinstance(severity, int) or not SEVERITY_MIN <= severity <= SEVERITY_MAX:
        raise ValueError(
            f"severity must be an integer in {SEVERITY_MIN}..{SEVERITY_MAX}, got {severity!r}"
        )
    instance.severity = severity
    instance.last_modified = _utc_stamp(now)
    return instance


def create_group(project: Project, name: str) -> FailureGroup:
    group = FailureGroup(group_id=_next_id(project, "group", "grp"), name=name)
    project.groups[group.group_id] = group
    return group


def rename_group(project: Project, group_id: str, name: str) -> FailureGroup:
    group = _get_group(project, group_id)
    group.name = name
    return group


def add_group_member(
    project: Project,
    group_id: str,
    instance_id: str,
    position: tuple[float, float] = (0.0, 0.0),
) -> FailureGroup:
    """Add an instance to a group; if grouped elsewhere, it moves."""
    group = _get_group(project, group_id)
    if instance_id not in project.failure_instances:
        raise NotFoundError(f"unknown failure instance '{instance_id}'")
    for other in project.groups.values():
        if other.group_id != group_id and instance_id in other.member_instance_ids:
            other.member_instance_ids.remove(instance_id)
            other.canvas_positions.pop(instance_id, None)
    if instance_id not in group.member_instance_ids:
        group.member_instance_ids.append(instance_id)
    group.canvas_positions[instance_id] = (float(position[0]), float(position[1]))
    return group


def remove_group_member(project: Project, group_id: str, instance_id: str) -> FailureGroup:
    group = _get_group(project, group_id)
    if instance_id not in group.member_instance_ids:
        raise NotFoundError(f"instance '{instance_id}' is not in group '{group_id}'")
    group.member_instance_ids.remove(instance_id)
    group.canvas_positions.pop(instance_id, None)
    return group


def delete_group(project: Project, group_id: str) -> None:
    """Drop the group; member instances stay in the project."""
    _get_group(project, group_id)
    del project.groups[group_id]


def set_canvas_position(
    project: Project, group_id: str, instance_id: str, x: float, y: float
) -> FailureGroup:
    group = _get_group(project, group_id)
    if instance_id not in group.member_instance_ids:
        raise NotFoundError(f"instance '{instance_id}' is not in group '{group_id}'")
    group.canvas_positions[instance_id] = (float(x), float(y))
    return group


def set_group_recovery(
    project: Project,
    group_id: str,
    recovery_note: str | None = None,
    suggested_mechanisms: Sequence[str] | None = None,
) -> FailureGroup:
    group = _get_group(project, group_id)
    if recovery_note is not None:
        group.recovery_note = recovery_note
    if suggested_mechanisms is not None:
        known = {mech.name for mech in suggest_recoveries()}
        for name in suggested_mechanisms:
            if name not in known:
                raise NotFoundError(f"unknown recovery mechanism '{name}'")
        group.suggested_mechanisms = list(suggested_mechanisms)
    return group


def _get_group(project: Project, group_id: str) -> FailureGroup:
    group = project.groups.get(group_id)
    if group is None:
        raise NotFoundError(f"unknown group '{group_id}'")
    return group


# ---------------------------------------------------------------- validation


def validate_project(project: Project) -> list[str]:
    """Full-scan referential integrity check; returns problems, empty = ok."""
    problems: list[str] = []

    def check(condition: bool, message: str) -> None:
        if not condition:
            problems.append(message)

    for scenario in project.scenarios.values():
        check(
            scenario.persona_id in project.personas,
            f"scenario {scenario.scenario_id}: unknown persona {scenario.persona_id}",
        )
        for image_id in scenario.image_ids:
            check(
                image_id in project.images,
                f"scenario {scenario.scenario_id}: unknown image {image_id}",
            )

    for persona in project.personas.values():
        if persona.avatar_image_id is not None:
            check(
                persona.avatar_image_id in project.images,
                f"persona {persona.persona_id}: unknown avatar image {persona.avatar_image_id}",
            )

    for image in project.images.values():
        if image.parent_image_id is not None:
            check(
                image.parent_image_id in project.images,
                f"image {image.image_id}: unknown parent {image.parent_image_id}",
            )

    for ann in project.annotations.values():
        check(ann.image_id in project.images, f"annotation {ann.id}: unknown image {ann.image_id}")

    for image_id, by_model in project.predictions.items():
        check(image_id in project.images, f"prediction: unknown image {image_id}")
        for model_id in by_model:
            check(model_id in project.models, f"prediction {image_id}: unknown model {model_id}")

    prediction_object_ids = {
        (image_id, model_id, obj.id)
        for image_id, by_model in project.predictions.items()
        for model_id, prediction in by_model.items()
        for obj in prediction.objects
    }
    for instance in project.failure_instances.values():
        prefix = f"instance {instance.instance_id}"
        check(instance.image_id in project.images, f"{prefix}: unknown image {instance.image_id}")
        if instance.model_id:
            check(instance.model_id in project.models, f"{prefix}: unknown model {instance.model_id}")
        if instance.persona_id:
            check(
                instance.persona_id in project.personas,
                f"{prefix}: unknown persona {instance.persona_id}",
            )
        if instance.scenario_id:
            check(
                instance.scenario_id in project.scenarios,
                f"{prefix}: unknown scenario {instance.scenario_id}",
            )
        if instance.annotation_id is not None:
            check(
                instance.annotation_id in project.annotations,
                f"{prefix}: unknown annotation {instance.annotation_id}",
            )
        if instance.prediction_id is not None and instance.model_id:
            check(
                (instance.image_id, instance.model_id, instance.prediction_id)
                in prediction_object_ids,
                f"{prefix}: unknown predicted object {instance.prediction_id}",
            )

    seen_members: dict[str, str] = {}
    for group in project.groups.values():
        for member in group.member_instance_ids:
            check(
                member in project.failure_instances,
                f"group {group.group_id}: unknown member {member}",
            )
            if member in seen_members:
                problems.append(
                    f"instance {member} belongs to groups {seen_members[member]} and {group.group_id}"
                )
            seen_members[member] = group.group_id
        for positioned in group.canvas_positions:
            check(
                positioned in group.member_instance_ids,
                f"group {group.group_id}: position for non-member {positioned}",
            )

    return problems


# ---------------------------------------------------------------- board export


def export_board(project: Project) -> dict[str, Any]:
    """Self-contained board document: groups, members, notes, metric summary."""
    groups = []
    grouped: set[str] = set()
    for group_id in sorted(project.groups):
        group = project.groups[group_id]
        members = []
        for instance_id in group.member_instance_ids:
            grouped.add(instance_id)
            instance = project.failure_instances[instance_id]
            image = project.images.get(instance.image_id)
            position = group.canvas_positions.get(instance_id, (0.0, 0.0))
            members.append(
                {
                    "instance_id": instance_id,
                    "image_id": instance.image_id,
                    "thumbnail": image.content_hash if image else None,
                    "mode": instance.mode.value,
                    "severity": instance.severity,
                    "canvas": [position[0], position[1]],
                }
            )
        groups.append(
            {
                "group_id": group_id,
                "name": group.name,
                "recovery_note": group.recovery_note,
                "suggested_mechanisms": list(group.suggested_mechanisms),
                "members": members,
            }
        )

    instances = sorted(project.failure_instances.values(), key=lambda i: i.instance_id)
    warning_records = [
        record
        for image_id in sorted(project.image_warnings)
        for _, record in sorted(project.image_warnings[image_id].items())
    ]
    metrics = {
        axis.value: [
            _metric_doc(report) for report in aggregate(instances, warning_records, axis)
        ]
        for axis in MetricAxis
    }

    return {
        "schema_version": SCHEMA_VERSION,
        "project_id": project.project_id,
        "groups": groups,
        "ungrouped": sorted(set(project.failure_instances) - grouped),
        "metrics": metrics,
    }


def _metric_doc(report: DisaggregatedReport) -> dict[str, Any]:
    return {
        "axis": report.group_key[0].value,
        "group": report.group_key[1],
        "totals": dict(sorted(report.totals.items())),
        "mode_counts": {m.value: report.mode_counts[m] for m in FailureMode},
        "mode_percent": {m.value: report.mode_percent[m] for m in FailureMode},
        "distribution_counts": {t.value: report.dist_counts[t] for t in DistributionTag},
        "distribution_percent": {t.value: report.dist_percent[t] for t in DistributionTag},
        "warning_counts": {t.value: report.warning_counts[t] for t in WarningTag},
        "warning_percent": {t.value: report.warning_percent[t] for t in WarningTag},
    }


# ---------------------------------------------------------------- manifest


_TOP_LEVEL_FIELDS = frozenset(
    {
        "schema_version",
        "project_id",
        "counters",
        "personas",
        "scenarios",
        "images",
        "annotations",
        "predictions",
        "failure_instances",
        "groups",
        "models",
        "image_warnings",
    }
)


def _split_known(doc: dict[str, Any], known: Iterable[str]) -> tuple[dict[str, Any], dict[str, Any]]:
    known = set(known)
    main = {k: v for k, v in doc.items() if k in known}
    extra = {k: v for k, v in doc.items() if k not in known}
    return main, extra


def _box_doc(box: BoundingBox) -> list[float]:
    return [box.x_min, box.y_min, box.x_max, box.y_max]


def _box_from(doc: Sequence[float]) -> BoundingBox:
    return BoundingBox(*doc)


def _persona_doc(p: Persona) -> dict[str, Any]:
    return {
        "persona_id": p.persona_id,
        "name": p.name,
        "description": p.description,
        "avatar_image_id": p.avatar_image_id,
    }


def _scenario_doc(s: Scenario) -> dict[str, Any]:
    return {
        "scenario_id": s.scenario_id,
        "persona_id": s.persona_id,
        "description": s.description,
        "image_ids": list(s.image_ids),
    }


def _image_doc(a: ImageAsset) -> dict[str, Any]:
    return {
        "image_id": a.image_id,
        "content_hash": a.content_hash,
        "width": a.width,
        "height": a.height,
        "source": a.source.value,
        "prompt": a.prompt,
        "parent_image_id": a.parent_image_id,
        "augmentation": (
            {"kind": a.augmentation.kind.value, "parameter": a.augmentation.parameter}
            if a.augmentation is not None
            else None
        ),
    }


def _image_from(main: dict[str, Any]) -> ImageAsset:
    augmentation = main.get("augmentation")
    spec = (
        AugmentationSpec(AugmentationKind(augmentation["kind"]), augmentation["parameter"])
        if augmentation
        else None
    )
    return ImageAsset(
        image_id=main["image_id"],
        content_hash=main["content_hash"],
        width=main["width"],
        height=main["height"],
        source=ImageSource(main["source"]),
        prompt=main.get("prompt"),
        parent_image_id=main.get("parent_image_id"),
        augmentation=spec,
    )


def _annotation_doc(a: AnnotatedObject) -> dict[str, Any]:
    return {
        "id": a.id,
        "image_id": a.image_id,
        "label": a.label,
        "box": _box_doc(a.box),
    }


def _predicted_object_doc(o: PredictedObject) -> dict[str, Any]:
    return {"id": o.id, "label": o.label, "box": _box_doc(o.box), "score": o.score}


def _prediction_doc(p: Prediction) -> dict[str, Any]:
    return {
        "image_id": p.image_id,
        "model_id": p.model_id,
        "latency_ms": p.latency_ms,
        "objects": [_predicted_object_doc(o) for o in p.objects],
    }


def _prediction_from(main: dict[str, Any]) -> Prediction:
    objects = tuple(
        PredictedObject(
            id=o["id"],
            labeled=LabeledBox(o["label"], _box_from(o["box"])),
            score=o["score"],
        )
        for o in main["objects"]
    )
    return Prediction(
        image_id=main["image_id"],
        model_id=main["model_id"],
        objects=objects,
        latency_ms=main["latency_ms"],
    )


def _instance_doc(i: FailureInstance) -> dict[str, Any]:
    return {
        "instance_id": i.instance_id,
        "image_id": i.image_id,
        "mode": i.mode.value,
        "annotation_id": i.annotation_id,
        "prediction_id": i.prediction_id,
        "distribution": i.distribution.value if i.distribution else None,
        "warnings": sorted(tag.value for tag in i.warnings),
        "pair_iou": i.pair_iou,
        "severity": i.severity,
        "model_id": i.model_id,
        "persona_id": i.persona_id,
        "scenario_id": i.scenario_id,
        "last_modified": i.last_modified,
    }


def _instance_from(main: dict[str, Any]) -> FailureInstance:
    return FailureInstance(
        image_id=main["image_id"],
        mode=FailureMode(main["mode"]),
        annotation_id=main.get("annotation_id"),
        prediction_id=main.get("prediction_id"),
        distribution=(
            DistributionTag(main["distribution"]) if main.get("distribution") else None
        ),
        warnings=frozenset(WarningTag(tag) for tag in main.get("warnings", [])),
        pair_iou=main.get("pair_iou"),
        severity=main.get("severity", 1),
        model_id=main.get("model_id", ""),
        persona_id=main.get("persona_id", ""),
        scenario_id=main.get("scenario_id", ""),
        instance_id=main["instance_id"],
        last_modified=main.get("last_modified"),
    )


def _group_doc(g: FailureGroup) -> dict[str, Any]:
    return {
        "group_id": g.group_id,
        "name": g.name,
        "member_instance_ids": list(g.member_instance_ids),
        "recovery_note": g.recovery_note,
        "suggested_mechanisms": list(g.suggested_mechanisms),
        "canvas_positions": {
            member: [x, y] for member, (x, y) in sorted(g.canvas_positions.items())
        },
    }


def _group_from(main: dict[str, Any]) -> FailureGroup:
    return FailureGroup(
        group_id=main["group_id"],
        name=main["name"],
        member_instance_ids=list(main.get("member_instance_ids", [])),
        recovery_note=main.get("recovery_note", ""),
        suggested_mechanisms=list(main.get("suggested_mechanisms", [])),
        canvas_positions={
            member: (pos[0], pos[1])
            for member, pos in main.get("canvas_positions", {}).items()
        },
    )


def _model_doc(m: ModelDescriptor) -> dict[str, Any]:
    return {
        "model_id": m.model_id,
        "display_name": m.display_name,
        "backend_kind": m.backend_kind.value,
        "class_list": sorted(m.class_list),
        "endpoint": m.endpoint,
        "auth_token_env": m.auth_token_env,
    }


def _model_from(main: dict[str, Any]) -> ModelDescriptor:
    return ModelDescriptor(
        model_id=main["model_id"],
        display_name=main["display_name"],
        backend_kind=BackendKind(main["backend_kind"]),
        class_list=frozenset(main["class_list"]),
        endpoint=main.get("endpoint"),
        auth_token_env=main.get("auth_token_env"),
    )


def _warning_record_doc(r: ImageWarningRecord) -> dict[str, Any]:
    return {
        "image_id": r.image_id,
        "model_id": r.model_id,
        "persona_id": r.persona_id,
        "scenario_id": r.scenario_id,
        "tags": sorted(tag.value for tag in r.tags),
    }


def _warning_record_from(main: dict[str, Any]) -> ImageWarningRecord:
    return ImageWarningRecord(
        image_id=main["image_id"],
        model_id=main["model_id"],
        persona_id=main.get("persona_id", ""),
        scenario_id=main.get("scenario_id", ""),
        tags=frozenset(WarningTag(tag) for tag in main.get("tags", [])),
    )


_PERSONA_FIELDS = ("persona_id", "name", "description", "avatar_image_id")
_SCENARIO_FIELDS = ("scenario_id", "persona_id", "description", "image_ids")
_IMAGE_FIELDS = (
    "image_id",
    "content_hash",
    "width",
    "height",
    "source",
    "prompt",
    "parent_image_id",
    "augmentation",
)
_ANNOTATION_FIELDS = ("id", "image_id", "label", "box")
_PREDICTION_FIELDS = ("image_id", "model_id", "latency_ms", "objects")
_INSTANCE_FIELDS = (
    "instance_id",
    "image_id",
    "mode",
    "annotation_id",
    "prediction_id",
    "distribution",
    "warnings",
    "pair_iou",
    "severity",
    "model_id",
    "persona_id",
    "scenario_id",
    "last_modified",
)
_GROUP_FIELDS = (
    "group_id",
    "name",
    "member_instance_ids",
    "recovery_note",
    "suggested_mechanisms",
    "canvas_positions",
)
_MODEL_FIELDS = (
    "model_id",
    "display_name",
    "backend_kind",
    "class_list",
    "endpoint",
    "auth_token_env",
)
_WARNING_FIELDS = ("image_id", "model_id", "persona_id", "scenario_id", "tags")


def to_manifest(project: Project) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "schema_version": project.schema_version,
        "project_id": project.project_id,
        "counters": dict(sorted(project.counters.items())),
        "personas": {pid: _persona_doc(p) for pid, p in project.personas.items()},
        "scenarios": {sid: _scenario_doc(s) for sid, s in project.scenarios.items()},
        "images": {iid: _image_doc(a) for iid, a in project.images.items()},
        "annotations": {aid: _annotation_doc(a) for aid, a in project.annotations.items()},
        "predictions": {
            image_id: {model_id: _prediction_doc(p) for model_id, p in by_model.items()}
            for image_id, by_model in project.predictions.items()
        },
        "failure_instances": {
            iid: _instance_doc(i) for iid, i in project.failure_instances.items()
        },
        "groups": {gid: _group_doc(g) for gid, g in project.groups.items()},
        "models": {mid: _model_doc(m) for mid, m in project.models.items()},
        "image_warnings": {
            image_id: {model_id: _warning_record_doc(r) for model_id, r in by_model.items()}
            for image_id, by_model in project.image_warnings.items()
        },
    }
    for path, extra in project.reserved.items():
        target: Any = doc
        if path:
            for part in path.split("/"):
                if not isinstance(target, dict) or part not in target:
                    target = None  # record deleted since load; drop its extras
                    break
                target = target[part]
        if isinstance(target, dict):
            target.update(extra)
    return doc


def from_manifest(doc: dict[str, Any]) -> Project:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"manifest schema_version {version!r} is not supported (expected {SCHEMA_VERSION})"
        )
    project = Project(project_id=doc.get("project_id", ""), schema_version=version)
    reserved: dict[str, dict[str, Any]] = {}
    _, top_extra = _split_known(doc, _TOP_LEVEL_FIELDS)
    if top_extra:
        reserved[""] = top_extra

    def load_section(
        section: str, fields: tuple[str, ...], build: Callable[[dict[str, Any]], Any]
    ) -> dict[str, Any]:
        out = {}
        for rid, rdoc in doc.get(section, {}).items():
            main, extra = _split_known(rdoc, fields)
            out[rid] = build(main)
            if extra:
                reserved[f"{section}/{rid}"] = extra
        return out

    project.personas = load_section(
        "personas",
        _PERSONA_FIELDS,
        lambda m: Persona(
            persona_id=m["persona_id"],
            name=m["name"],
            description=m.get("description", ""),
            avatar_image_id=m.get("avatar_image_id"),
        ),
    )
    project.scenarios = load_section(
        "scenarios",
        _SCENARIO_FIELDS,
        lambda m: Scenario(
            scenario_id=m["scenario_id"],
            persona_id=m["persona_id"],
            description=m.get("description", ""),
            image_ids=list(m.get("image_ids", [])),
        ),
    )
    project.images = load_section("images", _IMAGE_FIELDS, _image_from)
    project.annotations = load_section(
        "annotations",
        _ANNOTATION_FIELDS,
        lambda m: AnnotatedObject(
            id=m["id"],
            labeled=LabeledBox(m["label"], _box_from(m["box"])),
            image_id=m["image_id"],
        ),
    )
    for image_id, by_model in doc.get("predictions", {}).items():
        for model_id, rdoc in by_model.items():
            main, extra = _split_known(rdoc, _PREDICTION_FIELDS)
            project.predictions.setdefault(image_id, {})[model_id] = _prediction_from(main)
            if extra:
                reserved[f"predictions/{image_id}/{model_id}"] = extra
    project.failure_instances = load_section(
        "failure_instances", _INSTANCE_FIELDS, _instance_from
    )
    project.groups = load_section("groups", _GROUP_FIELDS, _group_from)
    project.models = load_section("models", _MODEL_FIELDS, _model_from)
    for image_id, by_model in doc.get("image_warnings", {}).items():
        for model_id, rdoc in by_model.items():
            main, extra = _split_known(rdoc, _WARNING_FIELDS)
            project.image_warnings.setdefault(image_id, {})[model_id] = _warning_record_from(main)
            if extra:
                reserved[f"image_warnings/{image_id}/{model_id}"] = extra
    project.counters = {k: int(v) for k, v in doc.get("counters", {}).items()}
    project.reserved = reserved
    return project


def manifest_bytes(project: Project) -> bytes:
    doc = to_manifest(project)
    return (json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode("utf-8")


# ---------------------------------------------------------------- store


class ProjectStore:
    """Directory-backed store with single-writer locking.

    Reads are lock-free snapshots; `save` and `mutate` take the writer lock
    and raise StoreBusyError if another writer holds it.
    """

    def __init__(self, root: str | Path, lock_timeout: float = 0.0) -> None:
        self.root = Path(root)
        self.lock_timeout = lock_timeout
        self._lock = FileLock(str(self.root / LOCK_NAME))

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    @property
    def blob_dir(self) -> Path:
        return self.root / BLOB_DIR

    def exists(self) -> bool:
        return self.manifest_path.is_file()

    def initialize(self, project_id: str) -> Project:
        if self.exists():
            raise StoreError(f"project already exists at {self.root}")
        self.root.mkdir(parents=True, exist_ok=True)
        self.blob_dir.mkdir(exist_ok=True)
        project = new_project(project_id)
        self.save(project)
        return project

    def load(self) -> Project:
        if not self.exists():
            raise NotFoundError(f"no project manifest at {self.manifest_path}")
        try:
            doc = json.loads(self.manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise StoreError(f"manifest is not valid JSON: {exc}") from exc
        return from_manifest(doc)

    def save(self, project: Project) -> None:
        problems = validate_project(project)
        if problems:
            raise IntegrityError("; ".join(problems))
        self.root.mkdir(parents=True, exist_ok=True)
        self.blob_dir.mkdir(exist_ok=True)
        data = manifest_bytes(project)
        try:
            with self._lock.acquire(timeout=self.lock_timeout):
                tmp = self.manifest_path.with_suffix(".json.tmp")
                tmp.write_bytes(data)
                os.replace(tmp, self.manifest_path)
        except Timeout as exc:
            raise StoreBusyError(f"project at {self.root} is locked by another writer") from exc

    def mutate(self, fn: Callable[[Project], Any]) -> Any:
        """Load-modify-save under the writer lock; fn's return value passes through."""
        try:
            with self._lock.acquire(timeout=self.lock_timeout):
                project = self.load()
                result = fn(project)
                problems = validate_project(project)
                if problems:
                    raise IntegrityError("; ".join(problems))
                tmp = self.manifest_path.with_suffix(".json.tmp")
                tmp.write_bytes(manifest_bytes(project))
                os.replace(tmp, self.manifest_path)
                return result
        except Timeout as exc:
            raise StoreBusyError(f"project at {self.root} is locked by another writer") from exc

    # blobs are content-addressed, so writes are idempotent and safe without the lock

    def put_blob(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        path = self.blob_dir / digest
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return digest

    def get_blob(self, content_hash: str) -> bytes:
        path = self.blob_dir / content_hash
        if not path.is_file():
            raise NotFoundError(f"no blob {content_hash}")
        return path.read_bytes()

    def has_blob(self, content_hash: str) -> bool:
        return (self.blob_dir / content_hash).is_file()

    def verify_blobs(self, project: Project) -> list[str]:
        """Check that every referenced image blob exists and matches its hash."""
        problems = []
        for image in project.images.values():
            if not self.has_blob(image.content_hash):
                problems.append(f"image {image.image_id}: missing blob {image.content_hash}")
                continue
            actual = hashlib.sha256(self.get_blob(image.content_hash)).hexdigest()
            if actual != image.content_hash:
                problems.append(f"image {image.image_id}: blob hash mismatch")
        return problems
