"""On-disk pipeline state: versioned runs, review events, supervision export.

One directory per document holds versioned run files (cells + manifest), the
document copy the review service renders pages from, the per-run usage
ledger, and an append-only review-event log. Runs are immutable once
written; re-extraction creates the next version alongside the previous one.
Replaying the event log over a run reconstructs the current cell state
exactly, which is what makes the record auditable.
"""

from __future__ import annotations

import json
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import jsonschema

from . import NOT_REPORTED
from .agents import Attribution, Extraction
from .backend import UsageLedger
from .docmodel import MODALITIES, ParsedDocument, load_document
from .errors import CellNotFoundError, ReviewActionError, StoreError
from .reconciler import LABELS, ReconciledCell

REVIEW_STATUSES = ("unreviewed", "accepted_a", "accepted_b",
                   "accepted_reconciled", "human_corrected")
REVIEW_ACTIONS = ("accept_a", "accept_b", "accept_reconciled", "correct")


@dataclass(frozen=True)
class RunManifest:
    doc_id: str
    schema_name: str
    schema_version: str
    backend_name: str
    mode: str
    batches: list[dict]
    started_at: float
    finished_at: float
    ledger_totals: dict
    flags: dict
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunManifest":
        return RunManifest(**d)


@dataclass
class CellRecord:
    doc_id: str
    column_id: str
    reconciled: ReconciledCell
    review_status: str = "unreviewed"
    human_value: str | None = None
    reviewer_note: str | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def effective_value(self) -> str:
        if self.review_status == "human_corrected":
            return self.human_value  # human_value present iff human_corrected
        if self.review_status == "accepted_a":
            return self.reconciled.input_a.value
        if self.review_status == "accepted_b":
            return self.reconciled.input_b.value
        return self.reconciled.final_value


# --- serialization -----------------------------------------------------------


def attribution_to_dict(attribution: Attribution | None) -> dict | None:
    if attribution is None:
        return None
    return {"page": attribution.page, "modality": attribution.modality,
            "verbatim_quote": attribution.verbatim_quote}


def attribution_from_dict(d: dict | None) -> Attribution | None:
    if d is None:
        return None
    return Attribution(page=d["page"], modality=d["modality"],
                       verbatim_quote=d.get("verbatim_quote"))


def extraction_to_dict(e: Extraction) -> dict:
    return {"column_id": e.column_id, "value": e.value, "reasoning": e.reasoning,
            "attribution": attribution_to_dict(e.attribution), "agent": e.agent,
            "failed": e.failed}


def extraction_from_dict(d: dict) -> Extraction:
    return Extraction(column_id=d["column_id"], value=d["value"],
                      reasoning=d["reasoning"],
                      attribution=attribution_from_dict(d.get("attribution")),
                      agent=d["agent"], failed=d.get("failed", False))


def cell_to_dict(cell: ReconciledCell) -> dict:
    return {
        "column_id": cell.column_id,
        "final_value": cell.final_value,
        "label": cell.label,
        "attribution": attribution_to_dict(cell.attribution),
        "reconciler_reasoning": cell.reconciler_reasoning,
        "pass": cell.pass_,
        "low_confidence": cell.low_confidence,
        "corrected_value": cell.corrected_value,
        "verified_without_image": cell.verified_without_image,
        "inputs": {"a": extraction_to_dict(cell.input_a),
                   "b": extraction_to_dict(cell.input_b)},
    }


def cell_from_dict(d: dict) -> ReconciledCell:
    return ReconciledCell(
        column_id=d["column_id"],
        final_value=d["final_value"],
        label=d["label"],
        attribution=attribution_from_dict(d.get("attribution")),
        reconciler_reasoning=d["reconciler_reasoning"],
        pass_=d["pass"],
        low_confidence=d["low_confidence"],
        input_a=extraction_from_dict(d["inputs"]["a"]),
        input_b=extraction_from_dict(d["inputs"]["b"]),
        corrected_value=d.get("corrected_value"),
        verified_without_image=d.get("verified_without_image", False),
    )


_ATTR_SCHEMA = {
    "oneOf": [
        {"type": "null"},
        {
            "type": "object",
            "properties": {
                "page": {"type": "integer", "minimum": 1},
                "modality": {"enum": list(MODALITIES)},
                "verbatim_quote": {"type": ["string", "null"]},
            },
            "required": ["page", "modality"],
        },
    ]
}

_EXTRACTION_SCHEMA = {
    "type": "object",
    "properties": {
        "column_id": {"type": "string"},
        "value": {"type": "string", "minLength": 1},
        "reasoning": {"type": "string"},
        "attribution": _ATTR_SCHEMA,
        "agent": {"type": "string"},
        "failed": {"type": "boolean"},
    },
    "required": ["column_id", "value", "reasoning", "agent"],
}

CELL_JSON_SCHEMA = {
    "type": "object",
    "properties": {
        "column_id": {"type": "string"},
        "final_value": {"type": "string", "minLength": 1},
        "label": {"enum": list(LABELS)},
        "attribution": _ATTR_SCHEMA,
        "reconciler_reasoning": {"type": "string"},
        "pass": {"enum": ["pass1", "pass2"]},
        "low_confidence": {"type": "boolean"},
        "corrected_value": {"type": ["string", "null"]},
        "verified_without_image": {"type": "boolean"},
        "inputs": {
            "type": "object",
            "properties": {"a": _EXTRACTION_SCHEMA, "b": _EXTRACTION_SCHEMA},
            "required": ["a", "b"],
        },
    },
    "required": ["column_id", "final_value", "label", "reconciler_reasoning",
                 "pass", "low_confidence", "inputs"],
}


def validate_cell_dict(d: dict) -> list[str]:
    """Strict-schema plus invariant checks; returns problems (empty = valid)."""
    problems = []
    try:
        jsonschema.validate(d, CELL_JSON_SCHEMA)
    except jsonschema.ValidationError as exc:
        problems.append(f"{d.get('column_id', '?')}: {exc.message}")
        return problems
    if d["low_confidence"] != (d["label"] == "both_wrong"):
        problems.append(f"{d['column_id']}: low_confidence must equal (label == both_wrong)")
    if d["pass"] == "pass1" and d["label"] != "both_correct":
        problems.append(f"{d['column_id']}: pass1 cells must be both_correct")
    if (d["final_value"] != NOT_REPORTED and d["label"] != "both_wrong"
            and not d.get("attribution")):
        problems.append(f"{d['column_id']}: reported final value requires attribution")
    return problems


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False)


# --- the store ---------------------------------------------------------------


class Store:
    """Filesystem-backed run store with per-document write serialization."""

    def __init__(self, root: str | Path, clock: Callable[[], float] = time.time):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._clock = clock
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _lock_for(self, doc_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(doc_id, threading.Lock())

    def _doc_dir(self, doc_id: str) -> Path:
        return self.root / doc_id

    # -- runs -----------------------------------------------------------

    def list_documents(self) -> list[str]:
        return sorted(
            p.name for p in self.root.iterdir()
            if p.is_dir() and list(p.glob("run_v*.json"))
        )

    def list_versions(self, doc_id: str) -> list[int]:
        doc_dir = self._doc_dir(doc_id)
        if not doc_dir.is_dir():
            return []
        versions = []
        for path in doc_dir.glob("run_v*.json"):
            stem = path.stem  # run_v3
            try:
                versions.append(int(stem.removeprefix("run_v")))
            except ValueError:
                continue
        return sorted(versions)

    def latest_version(self, doc_id: str) -> int:
        versions = self.list_versions(doc_id)
        if not versions:
            raise StoreError(f"no runs stored for document {doc_id!r}")
        return versions[-1]

    def persist_run(self, doc_id: str, cells: list[ReconciledCell] | list[dict],
                    manifest: RunManifest, *, ledger: UsageLedger | None = None,
                    trace: dict | None = None) -> int:
        """Validate then atomically write a new run version. On validation
        failure nothing is written and the error lists every offending cell."""
        cell_dicts = [c if isinstance(c, dict) else cell_to_dict(c) for c in cells]
        problems = [p for d in cell_dicts for p in validate_cell_dict(d)]
        if problems:
            raise StoreError("run rejected; invalid cells: " + "; ".join(problems))

        with self._lock_for(doc_id):
            doc_dir = self._doc_dir(doc_id)
            doc_dir.mkdir(parents=True, exist_ok=True)
            version = (self.list_versions(doc_id) or [0])[-1] + 1
            record = {
                "doc_id": doc_id,
                "version": version,
                "mode": manifest.mode,
                "manifest": manifest.to_dict(),
                "cells": cell_dicts,
                "trace": trace,
            }
            _atomic_write(doc_dir / f"run_v{version}.json", _dump(record))
            if ledger is not None:
                lines = "\n".join(json.dumps(r, sort_keys=True) for r in ledger.to_dicts())
                _atomic_write(doc_dir / f"run_v{version}_ledger.jsonl", lines + "\n")
        return version

    def persist_predictions(self, doc_id: str, predictions: list[Extraction],
                            manifest: RunManifest, *,
                            ledger: UsageLedger | None = None) -> int:
        """Baseline-mode output: a bare prediction table instead of reconciled cells."""
        with self._lock_for(doc_id):
            doc_dir = self._doc_dir(doc_id)
            doc_dir.mkdir(parents=True, exist_ok=True)
            version = (self.list_versions(doc_id) or [0])[-1] + 1
            record = {
                "doc_id": doc_id,
                "version": version,
                "mode": manifest.mode,
                "manifest": manifest.to_dict(),
                "predictions": [extraction_to_dict(e) for e in predictions],
            }
            _atomic_write(doc_dir / f"run_v{version}.json", _dump(record))
            if ledger is not None:
                lines = "\n".join(json.dumps(r, sort_keys=True) for r in ledger.to_dicts())
                _atomic_write(doc_dir / f"run_v{version}_ledger.jsonl", lines + "\n")
        return version

    def persist_schema(self, doc_id: str, schema_record: dict) -> None:
        """Keep the column schema next to the runs so the review UI can label
        and group cells."""
        doc_dir = self._doc_dir(doc_id)
        doc_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(doc_dir / "schema.json", _dump(schema_record))

    def load_schema_record(self, doc_id: str) -> dict | None:
        path = self._doc_dir(doc_id) / "schema.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def persist_document(self, doc: ParsedDocument) -> None:
        """Keep a copy of the parsed document so the review service can render pages."""
        record = {
            "doc_id": doc.doc_id,
            "title": doc.title,
            "n_pages": doc.n_pages,
            "chunks": [
                {"chunk_id": c.chunk_id, "page": c.page, "modality": c.modality,
                 "content": c.content, "bbox": list(c.bbox) if c.bbox else None}
                for c in doc.chunks
            ],
            "page_images": ({str(k): v for k, v in doc.page_images.items()}
                            if doc.page_images else None),
        }
        doc_dir = self._doc_dir(doc.doc_id)
        doc_dir.mkdir(parents=True, exist_ok=True)
        _atomic_write(doc_dir / "document.json", _dump(record))

    def load_run(self, doc_id: str, version: int | None = None) -> dict:
        if version is None:
            version = self.latest_version(doc_id)
        path = self._doc_dir(doc_id) / f"run_v{version}.json"
        if not path.exists():
            raise StoreError(f"run v{version} not found for document {doc_id!r}")
        return json.loads(path.read_text(encoding="utf-8"))

    def load_ledger_records(self, doc_id: str, version: int | None = None) -> list[dict]:
        if version is None:
            version = self.latest_version(doc_id)
        path = self._doc_dir(doc_id) / f"run_v{version}_ledger.jsonl"
        if not path.exists():
            return []
        return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()
                if line.strip()]

    def load_document(self, doc_id: str) -> ParsedDocument:
        path = self._doc_dir(doc_id) / "document.json"
        if not path.exists():
            raise StoreError(f"no document copy stored for {doc_id!r}")
        return load_document(path)

    # -- review events ----------------------------------------------------

    def _review_log_path(self, doc_id: str) -> Path:
        return self._doc_dir(doc_id) / "review_log.jsonl"

    def review_events(self, doc_id: str, version: int | None = None) -> list[dict]:
        path = self._review_log_path(doc_id)
        if not path.exists():
            return []
        events = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()
                  if line.strip()]
        if version is not None:
            events = [e for e in events if e["version"] == version]
        return events

    def get_cells(self, doc_id: str, version: int | None = None) -> dict[str, CellRecord]:
        """Current cell state: the stored run with its review events replayed."""
        run = self.load_run(doc_id, version)
        if "cells" not in run:
            raise StoreError(f"run v{run['version']} of {doc_id!r} is a baseline "
                             "prediction table; it has no reviewable cells")
        records = {
            d["column_id"]: CellRecord(doc_id=doc_id, column_id=d["column_id"],
                                       reconciled=cell_from_dict(d))
            for d in run["cells"]
        }
        for event in self.review_events(doc_id, run["version"]):
            record = records.get(event["column_id"])
            if record is None:
                continue
            _replay_event(record, event)
        return records

    def get_cell(self, doc_id: str, column_id: str,
                 version: int | None = None) -> CellRecord:
        records = self.get_cells(doc_id, version)
        if column_id not in records:
            raise CellNotFoundError(f"no cell {column_id!r} in document {doc_id!r}")
        return records[column_id]

    def apply_review(self, doc_id: str, column_id: str, action: str, *,
                     value: str | None = None, note: str | None = None,
                     version: int | None = None) -> CellRecord:
        """Apply a reviewer action and append it to the event log.

        Raises:
            CellNotFoundError: unknown document or column.
            ReviewActionError: unknown action, or correction without a value.
        """
        if action not in REVIEW_ACTIONS:
            raise ReviewActionError(f"unknown review action {action!r}")
        if action == "correct" and not (value or "").strip():
            raise ReviewActionError("correction requires a non-empty value")

        with self._lock_for(doc_id):
            if version is None:
                version = self.latest_version(doc_id)
            record = self.get_cell(doc_id, column_id, version)
            event = {
                "ts": self._clock(),
                "version": version,
                "column_id": column_id,
                "action": action,
                "value": value if action == "correct" else None,
                "note": note,
                "before": {"status": record.review_status,
                           "value": record.effective_value},
            }
            _replay_event(record, event | {"after": None})
            record.history[-1]["after"] = {"status": record.review_status,
                                           "value": record.effective_value}
            event["after"] = record.history[-1]["after"]
            log_path = self._review_log_path(doc_id)
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")
            return record


_ACTION_TO_STATUS = {
    "accept_a": "accepted_a",
    "accept_b": "accepted_b",
    "accept_reconciled": "accepted_reconciled",
    "correct": "human_corrected",
}


def _replay_event(record: CellRecord, event: dict) -> None:
    record.review_status = _ACTION_TO_STATUS[event["action"]]
    record.human_value = event["value"] if event["action"] == "correct" else None
    if event.get("note") is not None:
        record.reviewer_note = event["note"]
    record.history.append(dict(event))


# --- supervision export -------------------------------------------------------


def export_supervision(store: Store, doc_ids: Iterable[str] | None = None) -> list[dict]:
    """Preference/supervision records from reconciler labels and human outcomes.

    Human corrections yield a supervision record (human value positive, each
    distinct wrong agent value negative). Reviewer accepts and one-sided
    labels yield preference records. Ties (both_correct) yield nothing.
    """
    if doc_ids is None:
        doc_ids = store.list_documents()
    records: list[dict] = []
    for doc_id in sorted(doc_ids):
        run = store.load_run(doc_id)
        if "cells" not in run:
            continue
        cells = store.get_cells(doc_id, run["version"])
        for cell_dict in run["cells"]:
            record = cells[cell_dict["column_id"]]
            exported = _export_cell(record)
            if exported is not None:
                records.append(exported)
    return records


def _export_cell(record: CellRecord) -> dict | None:
    cell = record.reconciled
    a, b = cell.input_a, cell.input_b
    base = {"doc_id": record.doc_id, "column_id": record.column_id,
            "label": cell.label, "review_status": record.review_status}

    if record.review_status == "human_corrected":
        negatives = []
        for extraction in (a, b):
            if (extraction.value != record.human_value
                    and extraction.value not in [n["value"] for n in negatives]):
                negatives.append({"agent": extraction.agent, "value": extraction.value})
        return base | {"type": "supervision", "target": record.human_value,
                       "negatives": negatives}

    if record.review_status == "accepted_a" and a.value != b.value:
        return base | {"type": "preference",
                       "chosen": {"agent": a.agent, "value": a.value},
                       "rejected": {"agent": b.agent, "value": b.value}}
    if record.review_status == "accepted_b" and a.value != b.value:
        return base | {"type": "preference",
                       "chosen": {"agent": b.agent, "value": b.value},
                       "rejected": {"agent": a.agent, "value": a.value}}

    if cell.label == "a_correct_b_wrong":
        return base | {"type": "preference",
                       "chosen": {"agent": a.agent, "value": a.value},
                       "rejected": {"agent": b.agent, "value": b.value}}
    if cell.label == "b_correct_a_wrong":
        return base | {"type": "preference",
                       "chosen": {"agent": b.agent, "value": b.value},
                       "rejected": {"agent": a.agent, "value": a.value}}
    return None


def supervision_jsonl(records: list[dict]) -> str:
    return "\n".join(json.dumps(r, sort_keys=True) for r in records) + ("\n" if records else "")
