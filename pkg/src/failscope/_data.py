"""Loaders for the JSON data files bundled with the package."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from typing import Any


@lru_cache(maxsize=None)
def load_resource(name: str) -> Any:
    path = resources.files("failscope").joinpath("data", name)
    return json.loads(path.read_text(encoding="utf-8"))


def resource_bytes(name: str) -> bytes:
    path = resources.files("failscope").joinpath("data", name)
    return path.read_bytes()


def coco_classes() -> frozenset[str]:
    """The 80 object classes a stock COCO-trained detector can emit."""
    return frozenset(load_resource("coco_classes.json")["classes"])
