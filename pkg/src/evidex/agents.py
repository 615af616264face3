"""The two extraction agents.

Agent A queries the whole document in one structured call per column batch.
Agent B runs a tool loop over the parsed representation: semantic search,
targeted page loads with session-wide deduplication, then a single
submission. Both emit one (value, reasoning, attribution) tuple per column;
failures degrade to the sentinel value with a failed flag, never to missing
columns.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from typing import Callable

from . import NOT_REPORTED, is_not_reported
from .backend import (
    DocumentPart,
    Message,
    ModelBackend,
    ModelRequest,
    TextPart,
    ToolCall,
    ToolSpec,
    UsageLedger,
    invoke,
    invoke_with_retry,
)
from .docmodel import MODALITIES, ParsedDocument, get_page
from .errors import HardFailure, OutputValidationError, TransportError
from .prompts import load_prompt
from .retrieval import DocumentIndex, EmbeddingProvider, search
from .schema import ColumnBatch

DEFAULT_MAX_TURNS = 12
CACHE_POINTER = "[[cached:page={page}]]"


@dataclass(frozen=True)
class Attribution:
    page: int
    modality: str
    verbatim_quote: str | None = None

    def __post_init__(self):
        if self.page < 1:
            raise ValueError(f"attribution page must be >= 1, got {self.page}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown attribution modality {self.modality!r}")


@dataclass(frozen=True)
class Extraction:
    column_id: str
    value: str
    reasoning: str
    attribution: Attribution | None
    agent: str
    failed: bool = False

    def __post_init__(self):
        if not self.value:
            raise ValueError("value must be non-empty; use the sentinel for missing")
        if not is_not_reported(self.value) and not self.failed and self.attribution is None:
            raise ValueError(
                f"column {self.column_id!r}: a reported value requires attribution"
            )


class SessionCache:
    """Pages already provided to the search agent within one document session.

    Shared across concurrent batch workers; membership updates are atomic so
    no page's full content is ever transmitted twice.
    """

    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        self._pages: set[int] = set()
        self._lock = threading.Lock()

    def add(self, page: int) -> bool:
        """Mark *page* as provided; True if it was not already cached."""
        with self._lock:
            if page in self._pages:
                return False
            self._pages.add(page)
            return True

    def __contains__(self, page: int) -> bool:
        with self._lock:
            return page in self._pages

    @property
    def pages(self) -> frozenset[int]:
        with self._lock:
            return frozenset(self._pages)


# --- structured-output schemas ----------------------------------------------

ATTRIBUTION_SCHEMA = {
    "type": "object",
    "properties": {
        "page": {"type": "integer", "minimum": 1},
        "modality": {"enum": list(MODALITIES)},
        "verbatim_quote": {"type": "string"},
    },
    "required": ["page", "modality"],
    "additionalProperties": False,
}

EXTRACTION_ENTRY_SCHEMA = {
    "type": "object",
    "properties": {
        "column_id": {"type": "string"},
        "value": {"type": "string", "minLength": 1},
        "reasoning": {"type": "string"},
        "attribution": {"oneOf": [{"type": "null"}, ATTRIBUTION_SCHEMA]},
    },
    "required": ["column_id", "value", "reasoning"],
    "additionalProperties": False,
}

EXTRACTION_OUTPUT_SCHEMA = {
    "type": "object",
    "properties": {
        "entries": {"type": "array", "items": EXTRACTION_ENTRY_SCHEMA},
    },
    "required": ["entries"],
    "additionalProperties": False,
}

SEARCH_CHUNKS_TOOL = ToolSpec(
    name="search_chunks",
    description="Semantic search over the document; returns the most relevant "
                "pages with full content.",
    parameters={
        "type": "object",
        "properties": {"query": {"type": "string", "minLength": 1}},
        "required": ["query"],
        "additionalProperties": False,
    },
)

GET_CHUNKS_BY_PAGE_TOOL = ToolSpec(
    name="get_chunks_by_page",
    description="Load the full parsed content of the given page numbers.",
    parameters={
        "type": "object",
        "properties": {
            "pages": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        },
        "required": ["pages"],
        "additionalProperties": False,
    },
)

SUBMIT_EXTRACTION_TOOL = ToolSpec(
    name="submit_extraction",
    description="Submit the final extraction: one entry per column in the batch.",
    parameters={
        "type": "object",
        "properties": {
            "entries": {"type": "array", "items": EXTRACTION_ENTRY_SCHEMA, "minItems": 1},
        },
        "required": ["entries"],
        "additionalProperties": False,
    },
)


def _batch_task_text(batch: ColumnBatch) -> str:
    columns = [
        {"id": c.id, "name": c.name, "definition": c.definition,
         "category": c.category, "group": c.group}
        for c in batch.columns
    ]
    blob = json.dumps({"columns": columns}, indent=2)
    return (
        "Fill every column below from the document. Use exactly one entry per "
        "column id.\n\n```json\n" + blob + "\n```"
    )


def _check_entries(entries: list[dict], batch: ColumnBatch, *, require_quote: bool) -> None:
    """Semantic validation beyond JSON Schema: per-batch completeness and
    the attribution contract. Raises OutputValidationError."""
    expected = set(batch.column_ids())
    got = [e["column_id"] for e in entries]
    if sorted(got) != sorted(expected) or len(set(got)) != len(got):
        raise OutputValidationError(
            f"submission must contain exactly one entry per column; expected "
            f"{sorted(expected)}, got {sorted(got)}",
            raw_output={"entries": entries},
        )
    for entry in entries:
        if is_not_reported(entry["value"]):
            continue
        attribution = entry.get("attribution")
        if not attribution:
            raise OutputValidationError(
                f"column {entry['column_id']!r} reports a value without attribution",
                raw_output={"entries": entries},
            )
        if require_quote and not (attribution.get("verbatim_quote") or "").strip():
            raise OutputValidationError(
                f"column {entry['column_id']!r} reports a value without a verbatim quote",
                raw_output={"entries": entries},
            )


def _entries_to_extractions(entries: list[dict], batch: ColumnBatch, agent: str,
                            *, keep_quote: bool) -> list[Extraction]:
    by_id = {e["column_id"]: e for e in entries}
    extractions = []
    for col in batch.columns:
        entry = by_id[col.id]
        attribution = None
        raw_attr = entry.get("attribution")
        if raw_attr:
            quote = raw_attr.get("verbatim_quote") if keep_quote else None
            attribution = Attribution(
                page=raw_attr["page"], modality=raw_attr["modality"], verbatim_quote=quote,
            )
        extractions.append(
            Extraction(column_id=col.id, value=entry["value"],
                       reasoning=entry.get("reasoning", ""), attribution=attribution,
                       agent=agent)
        )
    return extractions


def _failed_batch(batch: ColumnBatch, agent: str, reason: str) -> list[Extraction]:
    return [
        Extraction(column_id=col.id, value=NOT_REPORTED,
                   reasoning=f"extraction failed: {reason}", attribution=None,
                   agent=agent, failed=True)
        for col in batch.columns
    ]


# --- Agent A: whole-document structured query --------------------------------


def run_agent_a(doc: ParsedDocument, batch: ColumnBatch, backend: ModelBackend,
                ledger: UsageLedger, *, retry_limit: int = 2, rendering: str = "native",
                agent_label: str = "agent_a",
                clock: Callable[[], float] = time.monotonic) -> list[Extraction]:
    """One structured call over the full document; the document part is re-sent
    on every call (and on every retry), so its tokens recur in the ledger."""
    request = ModelRequest(
        mode="document_query",
        system_prompt=load_prompt("agent_a"),
        user_content=(DocumentPart(doc, rendering=rendering), TextPart(_batch_task_text(batch))),
        output_schema=EXTRACTION_OUTPUT_SCHEMA,
    )
    try:
        result = invoke_with_retry(
            request, backend, ledger, agent_label,
            validator=lambda data: _check_entries(data["entries"], batch, require_quote=True),
            retry_limit=retry_limit, clock=clock,
        )
    except HardFailure as exc:
        return _failed_batch(batch, agent_label, str(exc))
    return _entries_to_extractions(result.payload["entries"], batch, agent_label,
                                   keep_quote=True)


# --- Agent B: retrieval-guided tool loop --------------------------------------


def handle_tool_call(call: ToolCall, doc: ParsedDocument, index: DocumentIndex,
                     cache: SessionCache, embedder: EmbeddingProvider, *,
                     k: int = 5) -> dict:
    """Execute a retrieval tool call and return its result payload.

    Page content already provided in this session is replaced by a cache
    pointer; newly provided pages are recorded atomically. submit_extraction
    is not handled here, it terminates the loop in :func:`run_agent_b`.
    """
    if call.name == "search_chunks":
        hits = search(index, call.arguments["query"], embedder, k=k)
        payload_hits = []
        for hit in hits:
            if cache.add(hit.page):
                content = hit.content
            else:
                content = CACHE_POINTER.format(page=hit.page)
            payload_hits.append({"page": hit.page, "score": hit.score, "content": content})
        return {"hits": payload_hits}

    if call.name == "get_chunks_by_page":
        pages = call.arguments["pages"]
        bad = [p for p in pages if not (1 <= p <= doc.n_pages)]
        if bad:
            return {"error": f"pages out of range 1..{doc.n_pages}: {bad}"}
        payload_pages = []
        for page in pages:
            if cache.add(page):
                content = get_page(doc, page).text
            else:
                content = CACHE_POINTER.format(page=page)
            payload_pages.append({"page": page, "content": content})
        return {"pages": payload_pages}

    raise ValueError(f"unhandled tool {call.name!r}")


def run_agent_b(doc: ParsedDocument, index: DocumentIndex, batch: ColumnBatch,
                backend: ModelBackend, ledger: UsageLedger, cache: SessionCache,
                embedder: EmbeddingProvider, *, k: int = 5,
                max_turns: int = DEFAULT_MAX_TURNS,
                agent_label: str = "agent_b",
                clock: Callable[[], float] = time.monotonic) -> list[Extraction]:
    """Tool loop until submit_extraction covers the batch, or max_turns runs out.

    The first turn carries only the batch context (extract-first policy).
    Attributions are normalized to page+modality; quotes, if emitted, are
    dropped. Tool errors are fed back to the model and the loop continues.
    """
    request = ModelRequest(
        mode="tool_loop",
        system_prompt=load_prompt("agent_b"),
        user_content=(TextPart(_batch_task_text(batch)),),
        tools=(SEARCH_CHUNKS_TOOL, GET_CHUNKS_BY_PAGE_TOOL, SUBMIT_EXTRACTION_TOOL),
    )
    messages: list[Message] = [Message(role="user", parts=request.user_content)]

    for _turn in range(max_turns):
        try:
            result = invoke(request, backend, ledger, agent_label, messages, clock=clock)
        except OutputValidationError as exc:
            messages.append(Message(role="assistant", output=exc.raw_output))
            messages.append(Message(role="user", parts=(TextPart(
                f"Invalid response: {exc}. Use the declared tools."
            ),)))
            continue
        except TransportError:
            continue

        if result.kind != "tool_call":
            messages.append(Message(role="assistant", output={"type": "payload",
                                                              "data": result.payload}))
            messages.append(Message(role="user", parts=(TextPart(
                "Respond via the declared tools; finish with submit_extraction."
            ),)))
            continue

        call = result.tool_call
        messages.append(Message(role="assistant", output={
            "type": "tool_call", "name": call.name, "arguments": call.arguments,
        }))

        if call.name == "submit_extraction":
            entries = call.arguments["entries"]
            try:
                _check_entries(entries, batch, require_quote=False)
            except OutputValidationError as exc:
                messages.append(Message(role="tool", tool_name=call.name,
                                        parts=(TextPart(json.dumps({"error": str(exc)})),)))
                continue
            return _entries_to_extractions(entries, batch, agent_label, keep_quote=False)

        payload = handle_tool_call(call, doc, index, cache, embedder, k=k)
        messages.append(Message(role="tool", tool_name=call.name,
                                parts=(TextPart(json.dumps(payload)),)))

    return _failed_batch(batch, agent_label, f"no submission within {max_turns} turns")
