"""Versioned JSONL interchange.

Every line carries a "schema" field naming its record schema (for example
"scene_graph.v1"). Modules register their record types here; load_jsonl
validates each line against the registered decoder and aborts on the first
offender with its line number. save_jsonl writes a canonical form (compact
separators, fixed key order from the encoder) so that load followed by
save reproduces a canonically written file byte-for-byte.
"""

from __future__ import annotations

import io
import json
import os
from typing import Any, Callable

from .errors import MalformedLine, SchemaViolation

# schema name -> (decode(record_dict) -> value, encode(value) -> record_dict)
_REGISTRY: dict[str, tuple[Callable[[dict], Any], Callable[[Any], dict]]] = {}


def register_schema(
    name: str,
    decode: Callable[[dict], Any],
    encode: Callable[[Any], dict],
) -> None:
    _REGISTRY[name] = (decode, encode)


def registered_schemas() -> list[str]:
    return sorted(_REGISTRY)


def dumps_record(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def load_jsonl(path: str | os.PathLike, schema: str) -> list:
    """Load and validate one JSONL file of the given schema.

    Raises MalformedLine for the first non-JSON line and SchemaViolation
    for the first line whose schema tag or invariants fail.
    """
    if schema not in _REGISTRY:
        raise SchemaViolation(str(path), 0, f"unknown schema: {schema}")
    decode, _ = _REGISTRY[schema]
    out = []
    with io.open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(str(path), line_no, str(exc)) from exc
            if not isinstance(rec, dict):
                raise SchemaViolation(str(path), line_no, "line is not an object")
            tag = rec.get("schema")
            if tag != schema:
                raise SchemaViolation(
                    str(path), line_no, f"expected schema {schema!r}, got {tag!r}"
                )
            try:
                out.append(decode(rec))
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaViolation(str(path), line_no, str(exc)) from exc
    return out


def save_jsonl(path: str | os.PathLike, values: list, schema: str) -> None:
    """Write values of one schema as canonical JSONL (atomic replace)."""
    if schema not in _REGISTRY:
        raise SchemaViolation(str(path), 0, f"unknown schema: {schema}")
    _, encode = _REGISTRY[schema]
    tmp = f"{path}.tmp.{os.getpid()}"
    with io.open(tmp, "w", encoding="utf-8") as fh:
        for value in values:
            rec = encode(value)
            if rec.get("schema") != schema:
                raise SchemaViolation(str(path), 0, "encoder emitted wrong schema tag")
            fh.write(dumps_record(rec))
            fh.write("\n")
    os.replace(tmp, path)
