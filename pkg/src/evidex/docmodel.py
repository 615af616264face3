"""Parsed-document model: element-level chunks with page numbers and modality labels.

The pipeline never parses PDFs itself; it consumes parser output shaped as
``{doc_id, title, n_pages, chunks: [...], page_images?}``. Tables arrive as a
layout-preserving textual rendering inside the chunk content; figures as
caption plus whatever description the parser emitted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import DocumentError, PageRangeError, SchemaParseError

MODALITIES = ("text", "table", "figure")

# Marker line prefixed to each chunk in a PageView so agents and the UI can
# attribute quotes back to a specific chunk.
_MARKER = "[[{modality}:{page}:{chunk_id}]]"

PAGE_SEPARATOR = "\n\n---\n\n"


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    page: int
    modality: str
    content: str
    bbox: tuple[float, float, float, float] | None = None


@dataclass(frozen=True)
class ParsedDocument:
    doc_id: str
    title: str
    n_pages: int
    chunks: tuple[Chunk, ...]
    page_images: dict[int, str] | None = None

    def pages_with_content(self) -> list[int]:
        """Sorted page numbers that hold at least one chunk."""
        return sorted({c.page for c in self.chunks})


@dataclass(frozen=True)
class PageView:
    page: int
    text: str
    image: str | None
    chunk_ids: tuple[str, ...]


def load_document(source: str | Path | dict) -> ParsedDocument:
    """Load and validate a parsed-document record (JSON file, JSON text, or dict).

    Raises:
        SchemaParseError: malformed record or unknown modality.
        DocumentError: chunk references a page beyond n_pages, or other
            invariant violations.
    """
    record = _read_json(source)

    for key in ("doc_id", "title", "n_pages", "chunks"):
        if key not in record:
            raise SchemaParseError(f"document record missing field {key!r}")
    n_pages = record["n_pages"]
    if not isinstance(n_pages, int) or n_pages < 1:
        raise SchemaParseError(f"n_pages must be a positive integer, got {n_pages!r}")

    chunks: list[Chunk] = []
    for i, entry in enumerate(record["chunks"]):
        if not isinstance(entry, dict):
            raise SchemaParseError(f"chunk #{i} is not an object")
        missing = [f for f in ("chunk_id", "page", "modality", "content") if f not in entry]
        if missing:
            raise SchemaParseError(f"chunk #{i} missing fields: {missing}")
        modality = entry["modality"]
        if modality not in MODALITIES:
            raise SchemaParseError(
                f"chunk {entry['chunk_id']!r} has unknown modality {modality!r}; "
                f"expected one of {list(MODALITIES)}"
            )
        page = entry["page"]
        if not isinstance(page, int) or page < 1:
            raise DocumentError(f"chunk {entry['chunk_id']!r} has invalid page {page!r}")
        if page > n_pages:
            raise DocumentError(
                f"chunk {entry['chunk_id']!r} references page {page} in a {n_pages}-page document"
            )
        content = str(entry["content"])
        if not content and modality != "figure":
            raise DocumentError(
                f"chunk {entry['chunk_id']!r}: empty content is only allowed for figures"
            )
        bbox = entry.get("bbox")
        if bbox is not None:
            if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
                raise SchemaParseError(f"chunk {entry['chunk_id']!r} has malformed bbox {bbox!r}")
            bbox = tuple(float(v) for v in bbox)
        chunks.append(
            Chunk(chunk_id=str(entry["chunk_id"]), page=page, modality=modality,
                  content=content, bbox=bbox)
        )

    chunk_ids = [c.chunk_id for c in chunks]
    if len(set(chunk_ids)) != len(chunk_ids):
        dupes = sorted({cid for cid in chunk_ids if chunk_ids.count(cid) > 1})
        raise DocumentError(f"duplicate chunk ids: {dupes}")

    # Chunks must arrive in (page, reading order); within a page the source
    # order IS the reading order, so only page monotonicity is checkable.
    pages_seen = [c.page for c in chunks]
    if pages_seen != sorted(pages_seen):
        raise DocumentError("chunks are not ordered by page")

    page_images = None
    if record.get("page_images"):
        page_images = {}
        for key, path in record["page_images"].items():
            try:
                page_num = int(key)
            except (TypeError, ValueError):
                raise SchemaParseError(f"page_images key {key!r} is not a page number")
            if not (1 <= page_num <= n_pages):
                raise DocumentError(f"page_images references page {page_num} of {n_pages}")
            page_images[page_num] = str(path)

    return ParsedDocument(
        doc_id=str(record["doc_id"]),
        title=str(record["title"]),
        n_pages=n_pages,
        chunks=tuple(chunks),
        page_images=page_images,
    )


# Field-name mapping for vendor-shaped parser exports. Unknown element types
# fail loudly rather than being silently coerced.
_VENDOR_MODALITY = {
    "text": "text", "paragraph": "text", "title": "text", "list": "text",
    "table": "table",
    "figure": "figure", "image": "figure", "chart": "figure",
}


def adapt_vendor_record(record: dict) -> ParsedDocument:
    """Convert a vendor-shaped parser export into our document format.

    Expected shape: ``{document_id, title?, page_count, elements:
    [{id, page_number, type, text, box?}]}``.
    """
    try:
        doc_id = record["document_id"]
        n_pages = record["page_count"]
        elements = record["elements"]
    except KeyError as exc:
        raise SchemaParseError(f"vendor record missing field {exc.args[0]!r}") from exc

    chunks = []
    for i, el in enumerate(elements):
        try:
            el_type = el["type"]
            modality = _VENDOR_MODALITY[el_type]
        except KeyError:
            raise SchemaParseError(
                f"vendor element #{i}: unmapped element type {el.get('type')!r}"
            )
        chunks.append({
            "chunk_id": str(el.get("id", f"el-{i}")),
            "page": el.get("page_number"),
            "modality": modality,
            "content": el.get("text", ""),
            "bbox": el.get("box"),
        })
    return load_document({
        "doc_id": doc_id,
        "title": record.get("title", str(doc_id)),
        "n_pages": n_pages,
        "chunks": chunks,
    })


def get_page(doc: ParsedDocument, page: int) -> PageView:
    """Full parsed view of one page: chunk contents in order, modality markers prefixed.

    Raises:
        PageRangeError: page outside 1..n_pages.
    """
    if not (1 <= page <= doc.n_pages):
        raise PageRangeError(f"page {page} out of range 1..{doc.n_pages}")
    blocks = []
    chunk_ids = []
    for chunk in doc.chunks:
        if chunk.page != page:
            continue
        marker = _MARKER.format(modality=chunk.modality, page=chunk.page, chunk_id=chunk.chunk_id)
        blocks.append(f"{marker}\n{chunk.content}")
        chunk_ids.append(chunk.chunk_id)
    image = None
    if doc.page_images:
        image = doc.page_images.get(page)
    return PageView(page=page, text="\n".join(blocks), image=image, chunk_ids=tuple(chunk_ids))


def parse_chunk_marker(line: str) -> tuple[str, int, str] | None:
    """Inverse of the PageView marker: returns (modality, page, chunk_id) or None."""
    line = line.strip()
    if not (line.startswith("[[") and line.endswith("]]")):
        return None
    parts = line[2:-2].split(":", 2)
    if len(parts) != 3 or parts[0] not in MODALITIES:
        return None
    try:
        return parts[0], int(parts[1]), parts[2]
    except ValueError:
        return None


def render_markdown(doc: ParsedDocument) -> str:
    """Deterministic whole-document rendering with one separator between pages.

    Table chunks keep their layout-preserving content verbatim; this is the
    representation consumed by the parsed-text baseline mode.
    """
    pages = []
    by_page: dict[int, list[Chunk]] = {}
    for chunk in doc.chunks:
        by_page.setdefault(chunk.page, []).append(chunk)
    for page in range(1, doc.n_pages + 1):
        body = "\n\n".join(c.content for c in by_page.get(page, []))
        pages.append(f"## Page {page}\n\n{body}" if body else f"## Page {page}")
    return PAGE_SEPARATOR.join(pages)


def _read_json(source: str | Path | dict) -> dict:
    if isinstance(source, dict):
        return source
    if isinstance(source, str) and source.lstrip().startswith("{"):
        text = source
    else:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise SchemaParseError(f"cannot read document file {path}: {exc}") from exc
    try:
        record = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaParseError(f"invalid JSON in document source: {exc}") from exc
    if not isinstance(record, dict):
        raise SchemaParseError("document record must be a JSON object")
    return record
