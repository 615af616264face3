"""End-to-end extraction runs: config, orchestration, persistence.

A run loads the schema, packs batches, and for each document builds the
retrieval index, executes both agents per batch (A and B concurrently,
batches parallel up to max_in_flight), reconciles, and persists the run with
its manifest and usage ledger. Per-document failures are isolated; ledger
records from concurrent workers are merged in a fixed order so identical
inputs yield identical artifacts.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

from . import mockmodel  # noqa: F401  (registers the "mock" backend)
from .agents import Extraction, SessionCache, run_agent_a, run_agent_b
from .backend import UsageLedger, create_backend, ledger_report
from .docmodel import ParsedDocument, load_document
from .retrieval import HashEmbedder, HttpEmbedder, build_index
from .schema import ColumnBatch, Schema, load_schema, pack_batches
from .store import RunManifest, Store

log = logging.getLogger("evidex.pipeline")

MODES = ("full", "agent_a_only", "parsed_single")


@dataclass
class BackendSelection:
    name: str = "mock"
    options: dict = field(default_factory=dict)


@dataclass
class PipelineConfig:
    schema_path: str
    document_paths: list[str]
    output_dir: str
    mode: str = "full"
    extraction: BackendSelection = field(default_factory=BackendSelection)
    reconciliation: BackendSelection = field(default_factory=BackendSelection)
    judge: BackendSelection | None = None
    embedder: BackendSelection = field(default_factory=lambda: BackendSelection(name="hash"))
    batch_limit: int = 15
    k: int = 5
    max_turns: int = 12
    retry_limit: int = 2
    rel_tol: float = 0.005
    abs_tol: float = 1e-9
    max_in_flight: int = 1

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not Path(self.schema_path).exists():
            raise FileNotFoundError(f"schema file not found: {self.schema_path}")
        for doc_path in self.document_paths:
            if not Path(doc_path).exists():
                raise FileNotFoundError(f"document file not found: {doc_path}")
        for knob, low in (("batch_limit", 1), ("k", 1), ("max_turns", 1),
                          ("retry_limit", 0), ("max_in_flight", 1)):
            if getattr(self, knob) < low:
                raise ValueError(f"{knob} must be >= {low}")
        if not (0.0 <= self.rel_tol < 1.0) or self.abs_tol < 0.0:
            raise ValueError("tolerances out of range")


def load_config(path: str | Path) -> PipelineConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    backends = raw.get("backends", {})

    def selection(key: str, default_name: str) -> BackendSelection:
        entry = backends.get(key)
        if entry is None:
            return BackendSelection(name=default_name)
        return BackendSelection(name=entry.get("name", default_name),
                                options={k: v for k, v in entry.items() if k != "name"})

    judge_sel = selection("judge", "mock") if backends.get("judge") else None
    config = PipelineConfig(
        schema_path=raw["schema"],
        document_paths=list(raw["documents"]),
        output_dir=raw["output_dir"],
        mode=raw.get("mode", "full"),
        extraction=selection("extraction", "mock"),
        reconciliation=selection("reconciliation", "mock"),
        judge=judge_sel,
        embedder=selection("embedder", "hash"),
        batch_limit=raw.get("batch_limit", 15),
        k=raw.get("k", 5),
        max_turns=raw.get("max_turns", 12),
        retry_limit=raw.get("retry_limit", 2),
        rel_tol=raw.get("rel_tol", 0.005),
        abs_tol=raw.get("abs_tol", 1e-9),
        max_in_flight=raw.get("max_in_flight", 1),
    )
    config.validate()
    return config


def make_embedder(selection: BackendSelection):
    if selection.name == "hash":
        return HashEmbedder(dimension=selection.options.get("dimension", 32))
    if selection.name == "http":
        return HttpEmbedder(**selection.options)
    raise KeyError(f"unknown embedder {selection.name!r}")


@dataclass
class DocumentRunResult:
    doc_id: str
    status: str  # "ok" | "failed"
    version: int | None = None
    error: str | None = None
    n_cells: int = 0


@dataclass
class ExtractSummary:
    results: list[DocumentRunResult]

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.results)


def run_extraction(config: PipelineConfig,
                   clock: Callable[[], float] = time.time) -> ExtractSummary:
    """Run the configured pipeline over every document; failures are isolated."""
    config.validate()
    schema = load_schema(Path(config.schema_path))
    batches = pack_batches(schema, config.batch_limit)
    store = Store(config.output_dir, clock=clock)

    results = []
    for doc_path in config.document_paths:
        doc_id = Path(doc_path).stem
        try:
            result = run_document(Path(doc_path), schema, batches, config, store, clock)
        except Exception as exc:  # per-document isolation
            log.exception("document %s failed", doc_path)
            result = DocumentRunResult(doc_id=doc_id, status="failed", error=str(exc))
        results.append(result)
    return ExtractSummary(results=results)


def run_document(doc_path: Path, schema: Schema, batches: list[ColumnBatch],
                 config: PipelineConfig, store: Store,
                 clock: Callable[[], float] = time.time) -> DocumentRunResult:
    doc = load_document(doc_path)
    started = clock()
    extraction_backend = create_backend(config.extraction.name, **config.extraction.options)
    ledger = UsageLedger()

    # Text-only backends get the markdown rendering; the manifest records it.
    rendering = "markdown" if config.extraction.name == "mock" else \
        config.extraction.options.get("document_rendering", "native")

    if config.mode in ("agent_a_only", "parsed_single"):
        rendering = "markdown" if config.mode == "parsed_single" else rendering
        predictions = _run_single_agent(doc, batches, extraction_backend, ledger,
                                        config, rendering, clock=clock)
        manifest = _manifest(doc, schema, batches, config, ledger, started,
                             clock(), rendering)
        version = store.persist_predictions(doc.doc_id, predictions, manifest,
                                            ledger=ledger)
        store.persist_document(doc)
        store.persist_schema(doc.doc_id, _schema_record(schema))
        return DocumentRunResult(doc_id=doc.doc_id, status="ok", version=version,
                                 n_cells=len(predictions))

    # Full dual-agent mode.
    from .reconciler import reconcile_batch

    reconciliation_backend = create_backend(config.reconciliation.name,
                                            **config.reconciliation.options)
    embedder = make_embedder(config.embedder)
    index = build_index(doc, embedder)
    cache = SessionCache(doc.doc_id)

    def run_batch(batch: ColumnBatch) -> tuple[list[Extraction], list[Extraction],
                                               UsageLedger, UsageLedger]:
        ledger_a, ledger_b = UsageLedger(), UsageLedger()
        box: dict[str, list[Extraction]] = {}

        def do_a():
            box["a"] = run_agent_a(doc, batch, extraction_backend, ledger_a,
                                   retry_limit=config.retry_limit, rendering=rendering,
                                   clock=clock)

        thread = threading.Thread(target=do_a)
        thread.start()
        box["b"] = run_agent_b(doc, index, batch, extraction_backend, ledger_b,
                               cache, embedder, k=config.k, max_turns=config.max_turns,
                               clock=clock)
        thread.join()
        return box["a"], box["b"], ledger_a, ledger_b

    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        batch_outputs = list(pool.map(run_batch, batches))

    # Merge staged ledgers in batch order (A before B) for reproducible ledgers.
    for extractions_a, extractions_b, ledger_a, ledger_b in batch_outputs:
        ledger.merge(ledger_a)
        ledger.merge(ledger_b)

    cells = []
    traces = []
    for batch, (extractions_a, extractions_b, _, _) in zip(batches, batch_outputs):
        ledger_r = UsageLedger()
        batch_cells, trace = reconcile_batch(extractions_a, extractions_b, doc,
                                             reconciliation_backend, ledger_r,
                                             max_turns=config.max_turns, clock=clock)
        ledger.merge(ledger_r)
        cells.extend(batch_cells)
        traces.append({"batch_id": batch.batch_id} | asdict(trace))

    manifest = _manifest(doc, schema, batches, config, ledger, started, clock(), rendering)
    version = store.persist_run(doc.doc_id, cells, manifest, ledger=ledger,
                                trace={"batches": traces})
    store.persist_document(doc)
    store.persist_schema(doc.doc_id, _schema_record(schema))
    return DocumentRunResult(doc_id=doc.doc_id, status="ok", version=version,
                             n_cells=len(cells))


def _run_single_agent(doc: ParsedDocument, batches: list[ColumnBatch], backend,
                      ledger: UsageLedger, config: PipelineConfig,
                      rendering: str,
                      clock: Callable[[], float] = time.time) -> list[Extraction]:
    def run_one(batch: ColumnBatch) -> tuple[list[Extraction], UsageLedger]:
        staged = UsageLedger()
        out = run_agent_a(doc, batch, backend, staged,
                          retry_limit=config.retry_limit, rendering=rendering,
                          clock=clock)
        return out, staged

    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        outputs = list(pool.map(run_one, batches))
    predictions: list[Extraction] = []
    for extractions, staged in outputs:
        ledger.merge(staged)
        predictions.extend(extractions)
    return predictions


def _schema_record(schema: Schema) -> dict:
    return {
        "name": schema.name,
        "version": schema.version,
        "columns": [
            {"id": c.id, "name": c.name, "definition": c.definition,
             "category": c.category, "group": c.group}
            for c in schema.columns
        ],
    }


def _manifest(doc: ParsedDocument, schema: Schema, batches: list[ColumnBatch],
              config: PipelineConfig, ledger: UsageLedger, started: float,
              finished: float, rendering: str) -> RunManifest:
    report = ledger_report(ledger)
    return RunManifest(
        doc_id=doc.doc_id,
        schema_name=schema.name,
        schema_version=schema.version,
        backend_name=config.extraction.name,
        mode=config.mode,
        batches=[
            {"batch_id": b.batch_id, "column_ids": b.column_ids(),
             "source_groups": list(b.source_groups)}
            for b in batches
        ],
        started_at=started,
        finished_at=finished,
        ledger_totals=report["total"],
        flags={
            "images_available": doc.page_images is not None,
            "document_rendering": rendering,
        },
        config={
            "batch_limit": config.batch_limit, "k": config.k,
            "max_turns": config.max_turns, "retry_limit": config.retry_limit,
            "rel_tol": config.rel_tol, "abs_tol": config.abs_tol,
            "max_in_flight": config.max_in_flight,
        },
    )
