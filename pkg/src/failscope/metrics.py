"""Disaggregated failure metrics per persona, scenario, or model.

Each group gets three count/percentage maps: detection outcomes (CD/FD/MD/UD
over all instances), distribution coverage (ID/OOD over annotated objects),
and warnings (FTD/CQS/CQB over emitted warnings, FTD counted once per
affected image). Percentages are rounded half-up to one decimal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum

from .classify import DistributionTag, FailureInstance, FailureMode, WarningTag


class MetricAxis(str, Enum):
    PERSONA = "persona"
    SCENARIO = "scenario"
    MODEL = "model"


@dataclass(frozen=True)
class ImageWarningRecord:
    """Image-level warnings stamped with the exploration context."""

    image_id: str
    model_id: str
    persona_id: str
    scenario_id: str
    tags: frozenset[WarningTag]


@dataclass(frozen=True)
class DisaggregatedReport:
    group_key: tuple[MetricAxis, str]
    mode_counts: dict[FailureMode, int]
    mode_percent: dict[FailureMode, float]
    dist_counts: dict[DistributionTag, int]
    dist_percent: dict[DistributionTag, float]
    warning_counts: dict[WarningTag, int]
    warning_percent: dict[WarningTag, float]
    totals: dict[str, int]


def percent_half_up(count: int, total: int) -> float:
    """100 * count / total rounded half-up to one decimal; 0.0 when total is 0."""
    if total == 0:
        return 0.0
    exact = Decimal(100 * count) / Decimal(total)
    return float(exact.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _group_id(instance: FailureInstance, axis: MetricAxis) -> str:
    if axis is MetricAxis.PERSONA:
        return instance.persona_id
    if axis is MetricAxis.SCENARIO:
        return instance.scenario_id
    return instance.model_id


def _warning_group_id(record: ImageWarningRecord, axis: MetricAxis) -> str:
    if axis is MetricAxis.PERSONA:
        return record.persona_id
    if axis is MetricAxis.SCENARIO:
        return record.scenario_id
    return record.model_id


def aggregate(
    instances: list[FailureInstance],
    image_warnings: list[ImageWarningRecord] | None = None,
    axis: MetricAxis = MetricAxis.PERSONA,
) -> list[DisaggregatedReport]:
    """One report per distinct group id along the axis, sorted by group id.

    The mode counts partition the instances; the distribution counts cover
    instances that reference an annotation; warning counts pool per-instance
    warnings with image-level FTD records (one per affected image).
    """
    image_warnings = image_warnings or []
    group_ids = sorted(
        {_group_id(inst, axis) for inst in instances}
        | {_warning_group_id(rec, axis) for rec in image_warnings if rec.tags}
    )

    reports = []
    for group_id in group_ids:
        group_instances = [inst for inst in instances if _group_id(inst, axis) == group_id]
        group_images = [
            rec for rec in image_warnings if _warning_group_id(rec, axis) == group_id
        ]
        reports.append(_build_report((axis, group_id), group_instances, group_images))
    return reports


def _build_report(
    group_key: tuple[MetricAxis, str],
    instances: list[FailureInstance],
    image_records: list[ImageWarningRecord],
) -> DisaggregatedReport:
    mode_counts = {mode: 0 for mode in FailureMode}
    for inst in instances:
        mode_counts[inst.mode] += 1
    n_instances = len(instances)
    mode_percent = {
        mode: percent_half_up(count, n_instances) for mode, count in mode_counts.items()
    }

    dist_counts = {tag: 0 for tag in DistributionTag}
    for inst in instances:
        if inst.distribution is not None:
            dist_counts[inst.distribution] += 1
    n_tagged = sum(dist_counts.values())
    dist_percent = {tag: percent_half_up(count, n_tagged) for tag, count in dist_counts.items()}

    warning_counts = {tag: 0 for tag in WarningTag}
    for inst in instances:
        for tag in inst.warnings:
            warning_counts[tag] += 1
    for record in image_records:
        for tag in record.tags:
            warning_counts[tag] += 1
    n_warnings = sum(warning_counts.values())
    warning_percent = {
        tag: percent_half_up(count, n_warnings) for tag, count in warning_counts.items()
    }

    return DisaggregatedReport(
        group_key=group_key,
        mode_counts=mode_counts,
        mode_percent=mode_percent,
        dist_counts=dist_counts,
        dist_percent=dist_percent,
        warning_counts=warning_counts,
        warning_percent=warning_percent,
        totals={
            "instances": n_instances,
            "distribution_tagged": n_tagged,
            "warnings": n_warnings,
        },
    )


def compare_models(reports_by_model: dict[str, DisaggregatedReport]) -> list[str]:
    """Model ids ranked by CD percentage, descending; ties broken by id."""
    if not reports_by_model:
        raise ValueError("at least one model report is required")
    return sorted(
        reports_by_model,
        key=lambda model_id: (-reports_by_model[model_id].mode_percent[FailureMode.CD], model_id),
    )
