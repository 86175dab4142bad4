"""Shared file helpers: deterministic JSON and schema-version checking."""

from __future__ import annotations

import json
from pathlib import Path


class SchemaError(ValueError):
    """A file declares a format/version this build does not accept."""


def write_json(path: str | Path, obj: dict) -> None:
    """Write `obj` as JSON with sorted keys and a trailing newline.

    Output is byte-deterministic for equal inputs (floats use repr).
    """
    text = json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path: str | Path, expected_format: str) -> dict:
    """Load a JSON file and check its "format" tag.

    Raises SchemaError when the tag is missing or differs from
    `expected_format`, FileNotFoundError when the file is absent.
    """
    p = Path(path)
    with p.open(encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{p}: not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError(f"{p}: expected a JSON object")
    got = obj.get("format")
    if got != expected_format:
        raise SchemaError(
            f"{p}: schema-version mismatch: expected {expected_format!r}, found {got!r}"
        )
    return obj
