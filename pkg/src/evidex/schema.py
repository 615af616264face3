"""Column schema loading and group-aware batching.

A schema is an ordered list of column definitions, each belonging to a
clinical group. Batching keeps groups together (context matters to the
agents) while capping batch size so requests stay reliable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import SchemaParseError, SchemaValidationError

CATEGORIES = ("numerical", "free_text")

DEFAULT_BATCH_LIMIT = 15


@dataclass(frozen=True)
class ColumnDef:
    """One schema field: what to extract and how it is evaluated."""

    id: str
    name: str
    definition: str
    category: str
    group: str


@dataclass(frozen=True)
class Schema:
    name: str
    version: str
    columns: tuple[ColumnDef, ...]

    def column_ids(self) -> list[str]:
        return [c.id for c in self.columns]

    def by_id(self) -> dict[str, ColumnDef]:
        return {c.id: c for c in self.columns}


@dataclass(frozen=True)
class ColumnBatch:
    batch_id: int
    columns: tuple[ColumnDef, ...]
    source_groups: tuple[str, ...]

    def column_ids(self) -> list[str]:
        return [c.id for c in self.columns]


_REQUIRED_COLUMN_FIELDS = ("id", "name", "definition", "category", "group")


def load_schema(source: str | Path | dict) -> Schema:
    """Load and validate a schema from a JSON file, JSON text, or parsed dict.

    Raises:
        SchemaParseError: malformed JSON, missing fields, or unknown category.
        SchemaValidationError: duplicate ids, empty definitions or groups.
    """
    record = _read_json(source, kind="schema")

    for key in ("name", "version", "columns"):
        if key not in record:
            raise SchemaParseError(f"schema record missing top-level field {key!r}")
    if not isinstance(record["columns"], list) or not record["columns"]:
        raise SchemaParseError("schema 'columns' must be a non-empty list")

    columns: list[ColumnDef] = []
    for i, entry in enumerate(record["columns"]):
        if not isinstance(entry, dict):
            raise SchemaParseError(f"column entry #{i} is not an object: {entry!r}")
        missing = [f for f in _REQUIRED_COLUMN_FIELDS if f not in entry]
        if missing:
            raise SchemaParseError(
                f"column entry #{i} ({entry.get('id', '?')!r}) missing fields: {missing}"
            )
        if entry["category"] not in CATEGORIES:
            raise SchemaParseError(
                f"column {entry['id']!r} has unknown category {entry['category']!r}; "
                f"expected one of {list(CATEGORIES)}"
            )
        columns.append(
            ColumnDef(
                id=str(entry["id"]),
                name=str(entry["name"]),
                definition=str(entry["definition"]),
                category=entry["category"],
                group=str(entry["group"]),
            )
        )

    _validate_columns(columns)
    return Schema(name=str(record["name"]), version=str(record["version"]), columns=tuple(columns))


def _validate_columns(columns: list[ColumnDef]) -> None:
    seen: set[str] = set()
    duplicates: list[str] = []
    for col in columns:
        if col.id in seen and col.id not in duplicates:
            duplicates.append(col.id)
        seen.add(col.id)
    if duplicates:
        raise SchemaValidationError(f"duplicate column ids: {duplicates}")

    empty_defs = [c.id for c in columns if not c.definition.strip()]
    if empty_defs:
        raise SchemaValidationError(f"columns with empty definition: {empty_defs}")

    # Empty groups are rejected at load time; batching relies on group names.
    empty_groups = [c.id for c in columns if not c.group.strip()]
    if empty_groups:
        raise SchemaValidationError(f"columns with empty group: {empty_groups}")


def _read_json(source: str | Path | dict, kind: str) -> dict:
    if isinstance(source, dict):
        return source
    if isinstance(source, str) and source.lstrip().startswith("{"):
        text = source  # raw JSON text
    else:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise SchemaParseError(f"cannot read {kind} file {path}: {exc}") from exc
    try:
        record = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaParseError(f"invalid JSON in {kind} source: {exc}") from exc
    if not isinstance(record, dict):
        raise SchemaParseError(f"{kind} record must be a JSON object")
    return record


def pack_batches(schema: Schema, batch_limit: int = DEFAULT_BATCH_LIMIT) -> list[ColumnBatch]:
    """Pack schema columns into group-aware batches of at most *batch_limit*.

    Groups larger than the limit are split into sequential pure sub-batches
    (never merged with other groups). Smaller whole groups are merged
    greedily in schema order until adding the next whole group would exceed
    the limit. Encountering an oversized group flushes the current merge
    buffer, so batches always follow schema order.
    """
    if batch_limit < 1:
        raise ValueError(f"batch_limit must be >= 1, got {batch_limit}")

    # Groups in order of first appearance; columns keep schema order within a group.
    group_order: list[str] = []
    grouped: dict[str, list[ColumnDef]] = {}
    for col in schema.columns:
        if col.group not in grouped:
            grouped[col.group] = []
            group_order.append(col.group)
        grouped[col.group].append(col)

    batches: list[ColumnBatch] = []
    buffer: list[ColumnDef] = []
    buffer_groups: list[str] = []

    def flush() -> None:
        if buffer:
            batches.append(
                ColumnBatch(
                    batch_id=len(batches),
                    columns=tuple(buffer),
                    source_groups=tuple(buffer_groups),
                )
            )
            buffer.clear()
            buffer_groups.clear()

    for group in group_order:
        cols = grouped[group]
        if len(cols) > batch_limit:
            flush()
            for start in range(0, len(cols), batch_limit):
                chunk = cols[start : start + batch_limit]
                batches.append(
                    ColumnBatch(
                        batch_id=len(batches),
                        columns=tuple(chunk),
                        source_groups=(group,),
                    )
                )
        else:
            if buffer and len(buffer) + len(cols) > batch_limit:
                flush()
            buffer.extend(cols)
            buffer_groups.append(group)
    flush()

    return batches
