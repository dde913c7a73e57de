"""Bundled failure taxonomy and recovery-mechanism catalogs."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

from ._data import load_resource

CATALOG_RESOURCE = "catalog.json"

EXPECTED_TAXONOMY_SIZE = 13
EXPECTED_RECOVERY_SIZE = 8


class SystemLevel(str, Enum):
    """Stage of the pipeline at which a failure manifests."""

    SENSING = "sensing"
    OBSERVATION = "observation"
    REACTION = "reaction"


@dataclass(frozen=True)
class TaxonomyEntry:
    system_level: SystemLevel
    name: str
    description: str
    example: str


@dataclass(frozen=True)
class RecoveryMechanism:
    name: str
    description: str


class CatalogError(ValueError):
    """The bundled catalog data is malformed or incomplete."""


def _parse_taxonomy(rows: object) -> tuple[TaxonomyEntry, ...]:
    if not isinstance(rows, list):
        raise CatalogError("taxonomy must be a list")
    entries = []
    for row in rows:
        try:
            entries.append(
                TaxonomyEntry(
                    system_level=SystemLevel(row["system_level"]),
                    name=row["name"],
                    description=row["description"],
                    example=row["example"],
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CatalogError(f"bad taxonomy row: {row!r}") from exc
    if len(entries) != EXPECTED_TAXONOMY_SIZE:
        raise CatalogError(
            f"expected {EXPECTED_TAXONOMY_SIZE} taxonomy entries, found {len(entries)}"
        )
    return tuple(entries)


def _parse_recoveries(rows: object) -> tuple[RecoveryMechanism, ...]:
    if not isinstance(rows, list):
        raise CatalogError("recoveries must be a list")
    mechanisms = []
    for row in rows:
        try:
            mechanisms.append(
                RecoveryMechanism(name=row["name"], description=row["description"])
            )
        except (KeyError, TypeError) as exc:
            raise CatalogError(f"bad recovery row: {row!r}") from exc
    if len(mechanisms) != EXPECTED_RECOVERY_SIZE:
        raise CatalogError(
            f"expected {EXPECTED_RECOVERY_SIZE} recovery mechanisms, found {len(mechanisms)}"
        )
    return tuple(mechanisms)


@lru_cache(maxsize=1)
def _catalog() -> tuple[int, tuple[TaxonomyEntry, ...], tuple[RecoveryMechanism, ...]]:
    raw = load_resource(CATALOG_RESOURCE)
    version = raw.get("catalog_version")
    if not isinstance(version, int) or version < 1:
        raise CatalogError("catalog_version must be a positive integer")
    return version, _parse_taxonomy(raw.get("taxonomy")), _parse_recoveries(raw.get("recoveries"))


def catalog_version() -> int:
    return _catalog()[0]


def list_taxonomy(level: SystemLevel | None = None) -> list[TaxonomyEntry]:
    """All taxonomy entries in table order, optionally filtered to one level."""
    entries = _catalog()[1]
    if level is None:
        return list(entries)
    level = SystemLevel(level)
    return [entry for entry in entries if entry.system_level is level]


def suggest_recoveries() -> list[RecoveryMechanism]:
    """All recovery mechanisms in table order."""
    return list(_catalog()[2])
