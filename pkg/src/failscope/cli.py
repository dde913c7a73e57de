"""Batch command line front end.

Subcommands: analyze annotation/prediction file pairs, manage project
directories, export synthesis boards, list the failure catalog, apply image
augmentations, and run the HTTP service.

Exit codes:
  0  success
  1  validation problems found
  2  input parse or schema error
  3  detector backend failure
  4  I/O failure (missing or unwritable paths)

Report bodies never contain timestamps, so identical inputs give byte-identical
outputs; run metadata (which does carry a timestamp) goes to the optional
sidecar file instead.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from datetime import datetime, timezone
from io import BytesIO
from pathlib import Path
from typing import Any, Sequence

from PIL import Image

from . import store as storage
from .assist import AugmentationError, AugmentationKind, AugmentationSpec, augment
from .backends import (
    BackendError,
    BackendKind,
    MalformedPayloadError,
    ModelDescriptor,
    Prediction,
    _sorted_objects,
    detect,
    parse_wire_prediction,
)
from .catalog import SystemLevel, list_taxonomy, suggest_recoveries
from .classify import AnnotatedObject, FailureReport, Thresholds, classify
from .geometry import BoundingBox, LabeledBox, MatchWeights, build_cost_matrix, optimal_assignment
from .metrics import ImageWarningRecord, MetricAxis, aggregate
from .store import (
    NotFoundError,
    ProjectStore,
    SchemaVersionError,
    StoreError,
    export_board,
    validate_project,
)

EXIT_OK = 0
EXIT_PROBLEMS = 1
EXIT_PARSE = 2
EXIT_BACKEND = 3
EXIT_IO = 4

_EXIT_CODE_HELP = (
    "exit codes: 0 success, 1 validation problems, 2 parse error, "
    "3 backend failure, 4 I/O failure"
)

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp")


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- input parsing


def _read_json(path: Path, what: str) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {what} {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_PARSE, f"{what} {path} is not valid JSON: {exc}") from exc


def _write_bytes(path: Path, data: bytes, what: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {what} {path}: {exc}") from exc


def _parse_annotation_doc(path: Path, doc: Any) -> tuple[str, str, str, list[AnnotatedObject]]:
    """Annotation file: {image_id, persona_id?, scenario_id?, annotations: [...]}.

    Each record uses the manifest fragment shape: {id?, image_id?, label, box}.
    """
    if not isinstance(doc, dict):
        raise CliError(EXIT_PARSE, f"annotations file {path} must hold a JSON object")
    try:
        image_id = doc["image_id"]
        records = doc["annotations"]
    except KeyError as exc:
        raise CliError(EXIT_PARSE, f"annotations file {path} is missing field {exc}") from None
    if not isinstance(image_id, str) or not image_id:
        raise CliError(EXIT_PARSE, f"annotations file {path} has an invalid image_id")
    if not isinstance(records, list):
        raise CliError(EXIT_PARSE, f"annotations file {path}: 'annotations' must be a list")
    persona_id = doc.get("persona_id", "")
    scenario_id = doc.get("scenario_id", "")

    anns: list[AnnotatedObject] = []
    for index, record in enumerate(records):
        if not isinstance(record, dict):
            raise CliError(EXIT_PARSE, f"annotations file {path}: record {index} is not an object")
        try:
            label = record["label"]
            box = record["box"]
        except KeyError as exc:
            raise CliError(
                EXIT_PARSE, f"annotations file {path}: record {index} is missing field {exc}"
            ) from None
        record_image = record.get("image_id", image_id)
        if record_image != image_id:
            raise CliError(
                EXIT_PARSE,
                f"annotations file {path}: record {index} references image "
                f"'{record_image}', expected '{image_id}'",
            )
        if not isinstance(box, (list, tuple)) or len(box) != 4:
            raise CliError(
                EXIT_PARSE, f"annotations file {path}: record {index} box must be 4 numbers"
            )
        try:
            labeled = LabeledBox(label, BoundingBox(*(float(v) for v in box)))
        except (TypeError, ValueError) as exc:
            raise CliError(
                EXIT_PARSE, f"annotations file {path}: record {index}: {exc}"
            ) from exc
        anns.append(
            AnnotatedObject(id=record.get("id", f"a{index}"), labeled=labeled, image_id=image_id)
        )
    return image_id, persona_id, scenario_id, anns


def _parse_replay_doc(path: Path, doc: Any, model_id: str) -> tuple[Prediction, tuple[int, int]]:
    """Predictions file: the replay format {image_id, width, height, objects}."""
    if not isinstance(doc, dict):
        raise CliError(EXIT_PARSE, f"predictions file {path} must hold a JSON object")
    try:
        image_id = doc["image_id"]
        width = doc["width"]
        height = doc["height"]
        objects = doc["objects"]
    except KeyError as exc:
        raise CliError(EXIT_PARSE, f"predictions file {path} is missing field {exc}") from None
    try:
        parsed = parse_wire_prediction(json.dumps(objects).encode(), (width, height))
    except MalformedPayloadError as exc:
        raise CliError(EXIT_PARSE, f"predictions file {path}: {exc}") from exc
    prediction = Prediction(
        image_id=image_id, model_id=model_id, objects=_sorted_objects(parsed), latency_ms=0.0
    )
    return prediction, (width, height)


def _collect_annotation_files(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix == ".json")
        if not files:
            raise CliError(EXIT_IO, f"annotations directory {path} holds no .json files")
        return files
    if path.is_file():
        return [path]
    raise CliError(EXIT_IO, f"annotations path {path} does not exist")


def _load_classes(args: argparse.Namespace, descriptor: ModelDescriptor | None) -> frozenset[str]:
    if descriptor is not None:
        return descriptor.class_list
    doc = _read_json(Path(args.classes), "class list")
    if not isinstance(doc, list) or not all(isinstance(c, str) for c in doc):
        raise CliError(EXIT_PARSE, f"class list {args.classes} must be a JSON array of strings")
    try:
        return ModelDescriptor(
            model_id="classes", display_name="classes", backend_kind=BackendKind.MOCK,
            class_list=frozenset(doc),
        ).class_list
    except ValueError as exc:
        raise CliError(EXIT_PARSE, f"class list {args.classes}: {exc}") from exc


def _load_descriptor(path: Path) -> ModelDescriptor:
    doc = _read_json(path, "model descriptor")
    try:
        return ModelDescriptor(
            model_id=doc["model_id"],
            display_name=doc.get("display_name") or doc["model_id"],
            backend_kind=BackendKind(doc["backend_kind"]),
            class_list=frozenset(doc["class_list"]),
            endpoint=doc.get("endpoint"),
            auth_token_env=doc.get("auth_token_env"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_PARSE, f"model descriptor {path}: {exc}") from exc


def _find_image_file(images_dir: Path, image_id: str) -> Path:
    for suffix in _IMAGE_SUFFIXES:
        candidate = images_dir / f"{image_id}{suffix}"
        if candidate.is_file():
            return candidate
    raise CliError(EXIT_IO, f"no image file for '{image_id}' under {images_dir}")


# ---------------------------------------------------------------- analyze


def _config_defaults(args: argparse.Namespace) -> dict[str, Any]:
    if not args.config:
        return {}
    doc = _read_json(Path(args.config), "config file")
    if not isinstance(doc, dict):
        raise CliError(EXIT_PARSE, f"config file {args.config} must hold a JSON object")
    for key in ("annotations", "predictions", "model", "images", "classes",
                "model_id", "axis", "out", "sidecar"):
        if getattr(args, key) is None and key in doc:
            setattr(args, key, doc[key])
    return doc


def _weights_from(args: argparse.Namespace, config: dict[str, Any]) -> MatchWeights:
    values = dict(gamma_class=0.5, gamma_box=0.5, lambda_l1=0.5, lambda_iou=0.5)
    values.update(config.get("weights", {}))
    for name in values:
        flag = getattr(args, name)
        if flag is not None:
            values[name] = flag
    try:
        return MatchWeights(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_PARSE, f"invalid weights: {exc}") from exc


def _thresholds_from(args: argparse.Namespace, config: dict[str, Any]) -> Thresholds:
    values = dict(confidence_floor=0.95, iou_floor=0.7)
    values.update(config.get("thresholds", {}))
    if args.confidence_floor is not None:
        values["confidence_floor"] = args.confidence_floor
    if args.iou_floor is not None:
        values["iou_floor"] = args.iou_floor
    try:
        return Thresholds(**values)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_PARSE, f"invalid thresholds: {exc}") from exc


def _render_table(axis: MetricAxis, reports: list) -> str:
    header = ["group", "instances", "CD", "FD", "MD", "UD", "ID", "OOD", "FTD", "CQS", "CQB"]
    rows = [header]
    for report in reports:
        doc = storage._metric_doc(report)

        def cell(counts: dict, percents: dict, key: str) -> str:
            return f"{counts[key]} ({percents[key]}%)"

        rows.append(
            [
                report.group_key[1] or "(none)",
                str(doc["totals"]["instances"]),
                cell(doc["mode_counts"], doc["mode_percent"], "CD"),
                cell(doc["mode_counts"], doc["mode_percent"], "FD"),
                cell(doc["mode_counts"], doc["mode_percent"], "MD"),
                cell(doc["mode_counts"], doc["mode_percent"], "UD"),
                cell(doc["distribution_counts"], doc["distribution_percent"], "ID"),
                cell(doc["distribution_counts"], doc["distribution_percent"], "OOD"),
                cell(doc["warning_counts"], doc["warning_percent"], "FTD"),
                cell(doc["warning_counts"], doc["warning_percent"], "CQS"),
                cell(doc["warning_counts"], doc["warning_percent"], "CQB"),
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = [f"axis: {axis.value}", ""]
    for row in rows:
        lines.append("  ".join(value.ljust(width) for value, width in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def cmd_analyze(args: argparse.Namespace) -> int:
    config = _config_defaults(args)
    if args.annotations is None:
        raise CliError(EXIT_PARSE, "analyze requires --annotations (flag or config file)")
    if (args.predictions is None) == (args.model is None):
        raise CliError(EXIT_PARSE, "analyze needs exactly one of --predictions or --model")
    if args.model is None and args.classes is None:
        raise CliError(EXIT_PARSE, "file-based analyze requires --classes")
    if args.model is not None and args.images is None:
        raise CliError(EXIT_PARSE, "live analyze requires --images")
    try:
        axis = MetricAxis(args.axis or "persona")
    except ValueError:
        raise CliError(EXIT_PARSE, f"unknown axis '{args.axis}'") from None
    weights = _weights_from(args, config)
    thresholds = _thresholds_from(args, config)

    descriptor = _load_descriptor(Path(args.model)) if args.model else None
    if descriptor is not None and descriptor.backend_kind is not BackendKind.REMOTE:
        raise CliError(EXIT_PARSE, "live analyze supports remote model descriptors only")
    classes = _load_classes(args, descriptor)
    model_id = args.model_id or (descriptor.model_id if descriptor else "model")

    # parse every input before producing any output
    jobs = []
    seen: set[str] = set()
    for ann_path in _collect_annotation_files(Path(args.annotations)):
        image_id, persona_id, scenario_id, anns = _parse_annotation_doc(
            ann_path, _read_json(ann_path, "annotations file")
        )
        if image_id in seen:
            raise CliError(EXIT_PARSE, f"duplicate image id '{image_id}' in annotations")
        seen.add(image_id)
        jobs.append((image_id, persona_id, scenario_id, anns))
    jobs.sort(key=lambda job: job[0])

    predictions: dict[str, Prediction] = {}
    if descriptor is None:
        predictions_path = Path(args.predictions)
        for image_id, *_ in jobs:
            if predictions_path.is_dir():
                pred_file = predictions_path / f"{image_id}.json"
                if not pred_file.is_file():
                    raise CliError(EXIT_IO, f"no predictions file for '{image_id}' at {pred_file}")
            elif predictions_path.is_file():
                pred_file = predictions_path
            else:
                raise CliError(EXIT_IO, f"predictions path {predictions_path} does not exist")
            prediction, _dims = _parse_replay_doc(
                pred_file, _read_json(pred_file, "predictions file"), model_id
            )
            if prediction.image_id != image_id:
                raise CliError(
                    EXIT_PARSE,
                    f"predictions file {pred_file} is for image '{prediction.image_id}', "
                    f"expected '{image_id}'",
                )
            predictions[image_id] = prediction
    else:
        images_dir = Path(args.images)
        if not images_dir.is_dir():
            raise CliError(EXIT_IO, f"images path {images_dir} is not a directory")
        for image_id, *_ in jobs:
            image_file = _find_image_file(images_dir, image_id)
            try:
                data = image_file.read_bytes()
                with Image.open(BytesIO(data)) as im:
                    dims = im.size
            except OSError as exc:
                raise CliError(EXIT_IO, f"cannot read image {image_file}: {exc}") from exc
            try:
                raw = detect(descriptor, data, dims, image_id=image_id)
            except BackendError as exc:
                raise CliError(EXIT_BACKEND, f"detection failed for '{image_id}': {exc}") from exc
            predictions[image_id] = replace(raw, model_id=model_id)

    image_docs = []
    instances = []
    warning_records = []
    counter = 0
    for image_id, persona_id, scenario_id, anns in jobs:
        prediction = predictions[image_id]
        matrix = build_cost_matrix(
            [a.labeled for a in anns], [o.labeled for o in prediction.objects], weights
        )
        report: FailureReport = classify(
            anns,
            list(prediction.objects),
            optimal_assignment(matrix),
            classes,
            thresholds,
            image_id=image_id,
            model_id=model_id,
            persona_id=persona_id,
            scenario_id=scenario_id,
        )
        numbered = []
        for inst in report.instances:
            counter += 1
            inst.instance_id = f"fi-{counter:04d}"
            numbered.append(inst)
        instances.extend(numbered)
        if report.image_warnings:
            warning_records.append(
                ImageWarningRecord(
                    image_id=image_id,
                    model_id=model_id,
                    persona_id=persona_id,
                    scenario_id=scenario_id,
                    tags=report.image_warnings,
                )
            )
        image_docs.append(
            {
                "image_id": image_id,
                "persona_id": persona_id,
                "scenario_id": scenario_id,
                "image_warnings": sorted(tag.value for tag in report.image_warnings),
                "instances": [storage._instance_doc(i) for i in numbered],
            }
        )

    reports = aggregate(instances, warning_records, axis)
    doc = {
        "schema_version": storage.SCHEMA_VERSION,
        "axis": axis.value,
        "model_id": model_id,
        "images": image_docs,
        "metrics": [storage._metric_doc(r) for r in reports],
    }

    sys.stdout.write(_render_table(axis, reports))
    if args.out:
        payload = (json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n").encode(
            "utf-8"
        )
        _write_bytes(Path(args.out), payload, "report")
    if args.sidecar:
        sidecar = {
            "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "annotations": str(args.annotations),
            "predictions": str(args.predictions) if args.predictions else None,
            "model": str(args.model) if args.model else None,
        }
        _write_bytes(
            Path(args.sidecar),
            (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode("utf-8"),
            "sidecar",
        )
    return EXIT_OK


# ---------------------------------------------------------------- other commands


def cmd_project_init(args: argparse.Namespace) -> int:
    root = Path(args.path)
    store = ProjectStore(root)
    if store.exists():
        raise CliError(EXIT_IO, f"project already exists at {root}")
    try:
        store.initialize(args.id or root.name)
    except ValueError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    except (OSError, StoreError) as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    print(f"initialized project at {root}")
    return EXIT_OK


def cmd_project_validate(args: argparse.Namespace) -> int:
    store = ProjectStore(Path(args.path))
    try:
        project = store.load()
    except SchemaVersionError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    except NotFoundError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    except StoreError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    problems = validate_project(project) + store.verify_blobs(project)
    if problems:
        for problem in problems:
            print(problem)
        return EXIT_PROBLEMS
    print("ok")
    return EXIT_OK


def cmd_export_board(args: argparse.Namespace) -> int:
    store = ProjectStore(Path(args.path))
    try:
        project = store.load()
    except NotFoundError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    except StoreError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    payload = json.dumps(export_board(project), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    if args.out:
        _write_bytes(Path(args.out), payload.encode("utf-8"), "board export")
    else:
        sys.stdout.write(payload)
    return EXIT_OK


def cmd_catalog_list(args: argparse.Namespace) -> int:
    if args.recoveries:
        for mechanism in suggest_recoveries():
            print(f"{mechanism.name:<28} {mechanism.description}")
        return EXIT_OK
    level = SystemLevel(args.level) if args.level else None
    for entry in list_taxonomy(level):
        print(f"{entry.system_level.value:<12} {entry.name:<28} {entry.description}")
    return EXIT_OK


def cmd_augment(args: argparse.Namespace) -> int:
    try:
        spec = AugmentationSpec(AugmentationKind(args.kind), args.param)
    except ValueError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    source = Path(args.input)
    try:
        data = source.read_bytes()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read image {source}: {exc}") from exc
    try:
        result = augment(data, spec)
    except AugmentationError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    _write_bytes(Path(args.output), result, "augmented image")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import load_config, serve

    try:
        config = load_config(args.config)
    except ValueError as exc:
        raise CliError(EXIT_PARSE, str(exc)) from exc
    try:
        serve(config)
    except RuntimeError as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="failscope",
        description="Failure exploration for object detection models, headless.",
        epilog=_EXIT_CODE_HELP,
    )
    commands = parser.add_subparsers(dest="command", required=True)

    analyze = commands.add_parser(
        "analyze",
        help="classify annotation/prediction pairs and print disaggregated metrics",
        epilog=_EXIT_CODE_HELP,
    )
    analyze.add_argument("--annotations", help="annotations file or directory")
    analyze.add_argument("--predictions", help="predictions file or directory (replay format)")
    analyze.add_argument("--model", help="model descriptor JSON for live remote detection")
    analyze.add_argument("--images", help="directory of image files for live detection")
    analyze.add_argument("--classes", help="JSON array of the model's class labels")
    analyze.add_argument("--model-id", dest="model_id", help="model id stamped on the report")
    analyze.add_argument("--axis", choices=[a.value for a in MetricAxis], default=None)
    analyze.add_argument("--out", help="write the structured JSON report here")
    analyze.add_argument("--sidecar", help="write run metadata (with timestamp) here")
    analyze.add_argument("--config", help="JSON config file; flags override its values")
    for flag in ("gamma-class", "gamma-box", "lambda-l1", "lambda-iou"):
        analyze.add_argument(f"--{flag}", type=float, default=None)
    analyze.add_argument("--confidence-floor", type=float, default=None)
    analyze.add_argument("--iou-floor", type=float, default=None)
    analyze.set_defaults(handler=cmd_analyze)

    project = commands.add_parser("project", help="manage project directories")
    project_commands = project.add_subparsers(dest="project_command", required=True)
    init = project_commands.add_parser("init", help="create an empty project")
    init.add_argument("path")
    init.add_argument("--id", default=None, help="project id (defaults to the directory name)")
    init.set_defaults(handler=cmd_project_init)
    validate = project_commands.add_parser(
        "validate", help="run the referential integrity scan", epilog=_EXIT_CODE_HELP
    )
    validate.add_argument("path")
    validate.set_defaults(handler=cmd_project_validate)

    export = commands.add_parser("export-board", help="emit the synthesis board document")
    export.add_argument("path")
    export.add_argument("--out", help="output file (defaults to stdout)")
    export.set_defaults(handler=cmd_export_board)

    catalog = commands.add_parser("catalog", help="inspect the failure catalog")
    catalog_commands = catalog.add_subparsers(dest="catalog_command", required=True)
    catalog_list = catalog_commands.add_parser("list", help="list taxonomy entries")
    catalog_list.add_argument("--level", choices=[level.value for level in SystemLevel])
    catalog_list.add_argument(
        "--recoveries", action="store_true", help="list recovery mechanisms instead"
    )
    catalog_list.set_defaults(handler=cmd_catalog_list)

    augment_cmd = commands.add_parser("augment", help="apply one augmentation to an image file")
    augment_cmd.add_argument("input")
    augment_cmd.add_argument("output")
    augment_cmd.add_argument(
        "--kind", required=True, choices=[kind.value for kind in AugmentationKind]
    )
    augment_cmd.add_argument("--param", required=True, type=float)
    augment_cmd.set_defaults(handler=cmd_augment)

    serve = commands.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--config", default=None, help="service config JSON file")
    serve.set_defaults(handler=cmd_serve)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
