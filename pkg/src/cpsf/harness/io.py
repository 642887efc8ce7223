"""Dataset files: one episode per JSONL line."""
from __future__ import annotations

import json
from pathlib import Path

from ..exceptions import InvalidInputError, MissingArtifactError
from ..records import SCHEMA_VERSION, TrajectoryRecord


def write_jsonl(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def iter_jsonl(path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            version = obj.get("schema_version", SCHEMA_VERSION)
            if version != SCHEMA_VERSION:
                raise InvalidInputError(f"{path}:{lineno}: unsupported schema_version {version}")
            try:
                yield TrajectoryRecord.from_json(line)
            except (KeyError, ValueError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed episode ({exc})") from exc


def read_jsonl(path, producer="gen-data") -> list:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path, producer)
    return list(iter_jsonl(path))


def write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_json(path, producer):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(path, producer)
    return json.loads(path.read_text())
