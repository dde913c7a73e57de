"""Failure classification: turn a matching into tagged failure instances.

Rule table, applied to an assignment between M annotations and N predictions:

    matched pair, labels equal     -> CD (correct detection)
    matched pair, labels differ    -> FD (false detection)
    unmatched annotation           -> MD (missing detection)
    unmatched prediction           -> UD (unnecessary detection)

Every instance referencing an annotation also carries an ID/OOD tag telling
whether the expected label lies inside the model's known class list. Three
warning kinds are checked: FTD (image level, zero predictions), CQS (per
prediction, confidence strictly below the floor), and CQB (per matched pair,
plain IoU strictly below the floor).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .geometry import Assignment, BoundingBox, LabeledBox, iou, normalize_label


class FailureMode(str, Enum):
    CD = "CD"
    FD = "FD"
    MD = "MD"
    UD = "UD"


class WarningTag(str, Enum):
    FTD = "FTD"
    CQS = "CQS"
    CQB = "CQB"


class DistributionTag(str, Enum):
    ID = "ID"
    OOD = "OOD"


class ClassListUnavailableError(Exception):
    """The model's class list is required but missing."""


class InconsistentAssignmentError(Exception):
    """Assignment indices do not fit the given annotation/prediction sets."""


@dataclass(frozen=True)
class AnnotatedObject:
    """A designer-drawn expectation: labeled box tied to an image."""

    id: str
    labeled: LabeledBox
    image_id: str

    @property
    def label(self) -> str:
        return self.labeled.label

    @property
    def box(self) -> BoundingBox:
        return self.labeled.box


@dataclass(frozen=True)
class PredictedObject:
    """A detector output: labeled box plus a confidence score."""

    id: str
    labeled: LabeledBox
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")

    @property
    def label(self) -> str:
        return self.labeled.label

    @property
    def box(self) -> BoundingBox:
        return self.labeled.box


@dataclass(frozen=True)
class Thresholds:
    """Warning floors; comparisons are strict ("below" triggers)."""

    confidence_floor: float = 0.95
    iou_floor: float = 0.7

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence_floor <= 1.0):
            raise ValueError(f"confidence_floor must be in [0, 1], got {self.confidence_floor}")
        if not (0.0 <= self.iou_floor <= 1.0):
            raise ValueError(f"iou_floor must be in [0, 1], got {self.iou_floor}")


@dataclass
class FailureInstance:
    """One classified (mis)match, mutable only for severity edits in the store."""

    image_id: str
    mode: FailureMode
    annotation_id: str | None = None
    prediction_id: str | None = None
    distribution: DistributionTag | None = None
    warnings: frozenset[WarningTag] = field(default_factory=frozenset)
    pair_iou: float | None = None
    severity: int = 1
    model_id: str = ""
    persona_id: str = ""
    scenario_id: str = ""
    instance_id: str = ""
    last_modified: str | None = None

    def __post_init__(self) -> None:
        if self.mode in (FailureMode.CD, FailureMode.FD):
            if self.annotation_id is None or self.prediction_id is None:
                raise ValueError(f"{self.mode.value} instance requires both object ids")
        elif self.mode is FailureMode.MD:
            if self.annotation_id is None or self.prediction_id is not None:
                raise ValueError("MD instance carries only an annotation id")
        elif self.mode is FailureMode.UD:
            if self.prediction_id is None or self.annotation_id is not None:
                raise ValueError("UD instance carries only a prediction id")
        if self.annotation_id is not None and self.distribution is None:
            raise ValueError("instances referencing an annotation carry a distribution tag")
        if self.annotation_id is None and self.distribution is not None:
            raise ValueError("UD instances carry no distribution tag")
        if not (1 <= self.severity <= 7):
            raise ValueError(f"severity must be in 1..7, got {self.severity}")

    @property
    def is_failure(self) -> bool:
        """CD records are kept for metrics but are not failures."""
        return self.mode is not FailureMode.CD


@dataclass(frozen=True)
class FailureReport:
    """All instances for one exploration plus image-level warnings."""

    instances: tuple[FailureInstance, ...]
    image_warnings: frozenset[WarningTag]

    def by_mode(self, mode: FailureMode) -> list[FailureInstance]:
        return [inst for inst in self.instances if inst.mode is mode]


def check_distribution(label: str, model_classes: set[str] | frozenset[str] | None) -> DistributionTag:
    """ID iff the normalized label is one of the model's known classes.

    Raises ClassListUnavailableError when no class list is provided; a missing
    list must never silently read as in-distribution.
    """
    if model_classes is None:
        raise ClassListUnavailableError("model class list is not available")
    normalized = normalize_label(label)
    if not normalized:
        raise ValueError("label is empty after normalization")
    return DistributionTag.ID if normalized in model_classes else DistributionTag.OOD


def assess_warnings(
    assignment: Assignment,
    anns: list[AnnotatedObject],
    preds: list[PredictedObject],
    thresholds: Thresholds | None = None,
) -> tuple[dict[str, set[WarningTag]], frozenset[WarningTag]]:
    """Per-object/per-pair warnings keyed by object id, plus image warnings.

    CQS is assessed for every prediction, matched or not; CQB only for matched
    pairs and is attached under the prediction's id. FTD is image level.
    """
    if thresholds is None:
        thresholds = Thresholds()
    per_object: dict[str, set[WarningTag]] = {}

    for pred in preds:
        if pred.score < thresholds.confidence_floor:
            per_object.setdefault(pred.id, set()).add(WarningTag.CQS)

    for ann_idx, pred_idx in assignment.pairs:
        pair_iou = iou(anns[ann_idx].box, preds[pred_idx].box)
        if pair_iou < thresholds.iou_floor:
            per_object.setdefault(preds[pred_idx].id, set()).add(WarningTag.CQB)

    image_warnings = frozenset({WarningTag.FTD}) if not preds else frozenset()
    return per_object, image_warnings


def classify(
    anns: list[AnnotatedObject],
    preds: list[PredictedObject],
    assignment: Assignment,
    model_classes: set[str] | frozenset[str] | None,
    thresholds: Thresholds | None = None,
    *,
    image_id: str = "",
    model_id: str = "",
    persona_id: str = "",
    scenario_id: str = "",
) -> FailureReport:
    """Classify every annotation and prediction against the assignment.

    The assignment must have been produced from exactly these annotation and
    prediction lists. Severity starts at 1 on every instance; context ids are
    stamped onto each instance for later disaggregation.
    """
    if thresholds is None:
        thresholds = Thresholds()
    _check_indices(assignment, len(anns), len(preds))
    if not image_id and anns:
        image_id = anns[0].image_id

    warnings_by_id, image_warnings = assess_warnings(assignment, anns, preds, thresholds)
    context = dict(
        image_id=image_id, model_id=model_id, persona_id=persona_id, scenario_id=scenario_id
    )

    instances: list[FailureInstance] = []
    for ann_idx, pred_idx in assignment.sorted_pairs():
        ann, pred = anns[ann_idx], preds[pred_idx]
        mode = FailureMode.CD if ann.label == pred.label else FailureMode.FD
        instances.append(
            FailureInstance(
                mode=mode,
                annotation_id=ann.id,
                prediction_id=pred.id,
                distribution=check_distribution(ann.label, model_classes),
                warnings=frozenset(warnings_by_id.get(pred.id, set())),
                pair_iou=iou(ann.box, pred.box),
                **context,
            )
        )

    matched_anns = assignment.matched_annotations()
    for idx, ann in enumerate(anns):
        if idx in matched_anns:
            continue
        instances.append(
            FailureInstance(
                mode=FailureMode.MD,
                annotation_id=ann.id,
                distribution=check_distribution(ann.label, model_classes),
                **context,
            )
        )

    matched_preds = assignment.matched_predictions()
    for idx, pred in enumerate(preds):
        if idx in matched_preds:
            continue
        instances.append(
            FailureInstance(
                mode=FailureMode.UD,
                prediction_id=pred.id,
                warnings=frozenset(warnings_by_id.get(pred.id, set())),
                **context,
            )
        )

    return FailureReport(instances=tuple(instances), image_warnings=image_warnings)


def _check_indices(assignment: Assignment, n_anns: int, n_preds: int) -> None:
    if len(assignment.pairs) != min(n_anns, n_preds):
        raise InconsistentAssignmentError(
            f"assignment has {len(assignment.pairs)} pairs for a {n_anns}x{n_preds} problem"
        )
    for ann_idx, pred_idx in assignment.pairs:
        if not (0 <= ann_idx < n_anns) or not (0 <= pred_idx < n_preds):
            raise InconsistentAssignmentError(
                f"pair ({ann_idx}, {pred_idx}) out of range for {n_anns} annotations"
                f" and {n_preds} predictions"
            )
