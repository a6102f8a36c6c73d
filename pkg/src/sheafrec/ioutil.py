"""Canonical serialization helpers.

Artifacts that must be byte-identical across reruns (metrics reports,
checkpoint manifests) all go through :func:`canonical_json`.
"""

from __future__ import annotations

import json
from pathlib import Path


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj), encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
