"""JSON schemas for every file the CLI emits."""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path

import jsonschema

SCHEMA_DIR = Path(__file__).parent
NAMES = ("synth_manifest", "split_manifest", "runlog_row", "run_meta", "eval_report", "profile_report", "compare_report")


class SchemaError(ValueError):
    pass


@lru_cache(maxsize=None)
def load(name: str) -> dict:
    path = SCHEMA_DIR / f"{name}.schema.json"
    if not path.exists():
        raise KeyError(f"no schema named {name!r}")
    return json.loads(path.read_text())


def validate(obj, name: str) -> None:
    try:
        jsonschema.validate(obj, load(name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{name}: {where}: {exc.message}") from None
