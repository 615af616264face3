"""HTTP review service: the evidence table, cell provenance, review actions.

A thin adapter over the store; handlers only map transport to library calls.
Mutations are serialized per document by the store itself.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, PlainTextResponse
from pydantic import BaseModel

from .docmodel import get_page
from .errors import CellNotFoundError, PageRangeError, ReviewActionError, StoreError
from .store import CellRecord, Store, export_supervision, extraction_to_dict, supervision_jsonl


class ReviewRequest(BaseModel):
    action: str
    value: str | None = None
    note: str | None = None


def create_app(store_root: str | Path) -> FastAPI:
    store = Store(store_root)
    app = FastAPI(title="evidex review service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def _cells_or_404(doc_id: str, version: int | None) -> dict[str, CellRecord]:
        try:
            return store.get_cells(doc_id, version)
        except StoreError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/api/v1/documents")
    def list_documents():
        out = []
        for doc_id in store.list_documents():
            run = store.load_run(doc_id)
            entry = {
                "doc_id": doc_id,
                "versions": store.list_versions(doc_id),
                "latest_version": run["version"],
                "mode": run.get("mode"),
            }
            if "cells" in run:
                entry["n_cells"] = len(run["cells"])
                entry["flagged"] = sum(1 for c in run["cells"] if c["low_confidence"])
            else:
                entry["n_cells"] = len(run.get("predictions", []))
                entry["flagged"] = 0
            out.append(entry)
        return out

    @app.get("/api/v1/documents/{doc_id}/table")
    def get_table(doc_id: str, version: int | None = None):
        records = _cells_or_404(doc_id, version)
        run = store.load_run(doc_id, version)
        schema_record = store.load_schema_record(doc_id)
        columns = {c["id"]: c for c in (schema_record or {}).get("columns", [])}
        cells = []
        for cell_dict in run["cells"]:
            record = records[cell_dict["column_id"]]
            column = columns.get(record.column_id, {})
            cells.append({
                "column_id": record.column_id,
                "name": column.get("name", record.column_id),
                "group": column.get("group", ""),
                "category": column.get("category"),
                "effective_value": record.effective_value,
                "label": record.reconciled.label,
                "low_confidence": record.reconciled.low_confidence,
                "review_status": record.review_status,
            })
        return {
            "doc_id": doc_id,
            "version": run["version"],
            "flagged": sum(1 for c in cells if c["low_confidence"]),
            "cells": cells,
        }

    @app.get("/api/v1/documents/{doc_id}/cells/{column_id}")
    def get_cell_detail(doc_id: str, column_id: str, version: int | None = None):
        records = _cells_or_404(doc_id, version)
        if column_id not in records:
            raise HTTPException(status_code=404,
                                detail=f"no cell {column_id!r} in {doc_id!r}")
        return _cell_detail(store, records[column_id])

    @app.post("/api/v1/documents/{doc_id}/cells/{column_id}/review")
    def post_review(doc_id: str, column_id: str, body: ReviewRequest,
                    version: int | None = None):
        try:
            record = store.apply_review(doc_id, column_id, body.action,
                                        value=body.value, note=body.note,
                                        version=version)
        except CellNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ReviewActionError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        except StoreError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return _cell_detail(store, record)

    @app.get("/api/v1/documents/{doc_id}/manifest")
    def get_manifest(doc_id: str, version: int | None = None):
        try:
            return store.load_run(doc_id, version)["manifest"]
        except StoreError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/api/v1/documents/{doc_id}/ledger")
    def get_ledger(doc_id: str, version: int | None = None):
        try:
            return store.load_ledger_records(doc_id, version)
        except StoreError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.get("/api/v1/documents/{doc_id}/export", response_class=PlainTextResponse)
    def get_export(doc_id: str):
        try:
            records = export_supervision(store, [doc_id])
        except StoreError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return supervision_jsonl(records)

    @app.get("/api/v1/documents/{doc_id}/pages/{page}/image")
    def get_page_image(doc_id: str, page: int):
        try:
            doc = store.load_document(doc_id)
            view = get_page(doc, page)
        except (StoreError, PageRangeError) as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if not view.image or not Path(view.image).exists():
            raise HTTPException(status_code=404, detail=f"no image for page {page}")
        return FileResponse(view.image)

    return app


def _cell_detail(store: Store, record: CellRecord) -> dict:
    cell = record.reconciled
    schema_record = store.load_schema_record(record.doc_id)
    columns = {c["id"]: c for c in (schema_record or {}).get("columns", [])}

    pages = sorted({
        x.attribution.page
        for x in (cell.input_a, cell.input_b)
        if x.attribution is not None
    } | ({cell.attribution.page} if cell.attribution else set()))

    page_payloads = []
    try:
        doc = store.load_document(record.doc_id)
    except StoreError:
        doc = None
    for page in pages:
        if doc is None:
            page_payloads.append({"page": page, "text": None, "image_available": False})
            continue
        view = get_page(doc, page)
        page_payloads.append({
            "page": page,
            "text": view.text,
            "image_available": view.image is not None,
            "image_url": (f"/api/v1/documents/{record.doc_id}/pages/{page}/image"
                          if view.image else None),
        })

    return {
        "doc_id": record.doc_id,
        "column_id": record.column_id,
        "column": columns.get(record.column_id),
        "effective_value": record.effective_value,
        "review_status": record.review_status,
        "human_value": record.human_value,
        "reviewer_note": record.reviewer_note,
        "label": cell.label,
        "low_confidence": cell.low_confidence,
        "pass": cell.pass_,
        "final_value": cell.final_value,
        "corrected_value": cell.corrected_value,
        "reconciler_reasoning": cell.reconciler_reasoning,
        "verified_without_image": cell.verified_without_image,
        "agent_a": extraction_to_dict(cell.input_a),
        "agent_b": extraction_to_dict(cell.input_b),
        "pages": page_payloads,
        "history": record.history,
    }
