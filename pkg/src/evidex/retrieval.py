"""Per-document embedding index and top-k cosine search.

Documents are tens of pages, so the index is an exhaustive in-memory scan:
exact, fast, and trivially swappable for an ANN structure later. One vector
per non-empty page, computed from the page's concatenated parsed text.
"""

from __future__ import annotations

import hashlib
import math
import os
import random
from dataclasses import dataclass
from typing import Protocol, Sequence

import requests

from .docmodel import ParsedDocument, get_page
from .errors import ProviderError

EMBED_BATCH_SIZE = 100
SUMMARY_CHARS = 160
DEFAULT_K = 5


class EmbeddingProvider(Protocol):
    """Order-preserving batch embedding: one vector per input text."""

    dimension: int

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


class HashEmbedder:
    """Deterministic offline embedder: stable pseudo-vectors seeded from text content.

    Identical text always maps to the identical vector, across runs and
    platforms, which makes retrieval (and everything downstream) reproducible
    without network access.
    """

    def __init__(self, dimension: int = 32):
        self.dimension = dimension

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        return [self._vector(t) for t in texts]

    def _vector(self, text: str) -> list[float]:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = random.Random(int.from_bytes(digest, "big"))
        vec = [rng.uniform(-1.0, 1.0) for _ in range(self.dimension)]
        # Guard the all-zero corner (astronomically unlikely, but cheap).
        if all(v == 0.0 for v in vec):
            vec[0] = 1.0
        return vec


class HttpEmbedder:
    """Live embedding provider speaking the common ``{"input": [...]}`` wire shape.

    The API key comes from an environment variable, never from config files.
    """

    def __init__(self, endpoint: str, model: str, dimension: int = 3072,
                 api_key_env: str = "EMBEDDING_API_KEY", timeout: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.dimension = dimension
        self.api_key_env = api_key_env
        self.timeout = timeout

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        key = os.environ.get(self.api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        try:
            resp = requests.post(
                self.endpoint,
                json={"model": self.model, "input": list(texts)},
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            data = resp.json()["data"]
        except Exception as exc:
            raise ProviderError(f"embedding request failed: {exc}") from exc
        vectors = [row["embedding"] for row in sorted(data, key=lambda r: r.get("index", 0))]
        if len(vectors) != len(texts):
            raise ProviderError(
                f"provider returned {len(vectors)} vectors for {len(texts)} texts"
            )
        return vectors


@dataclass(frozen=True)
class IndexEntry:
    page: int
    vector: tuple[float, ...]
    summary: str
    text: str  # full page text; hits must carry full content


@dataclass(frozen=True)
class DocumentIndex:
    doc_id: str
    entries: tuple[IndexEntry, ...]
    dimension: int


@dataclass(frozen=True)
class SearchHit:
    page: int
    score: float
    content: str


def build_index(doc: ParsedDocument, embedder: EmbeddingProvider,
                batch_size: int = EMBED_BATCH_SIZE) -> DocumentIndex:
    """Embed every non-empty page of *doc*, issuing provider calls in batches.

    Raises:
        ProviderError: provider failure, annotated with the failed batch range.
        ValueError: document has no page with content.
    """
    pages = doc.pages_with_content()
    if not pages:
        raise ValueError(f"document {doc.doc_id!r} has no page with content")
    texts = [get_page(doc, p).text for p in pages]

    vectors: list[list[float]] = []
    for start in range(0, len(texts), batch_size):
        batch = texts[start : start + batch_size]
        try:
            vectors.extend(embedder.embed(batch))
        except ProviderError as exc:
            exc.batch_range = (start, start + len(batch))
            raise
        except Exception as exc:
            raise ProviderError(
                f"embedding batch failed: {exc}",
                batch_range=(start, start + len(batch)),
            ) from exc

    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise ProviderError(f"provider returned mixed dimensions: {sorted(dims)}")

    entries = tuple(
        IndexEntry(page=p, vector=tuple(v), summary=t[:SUMMARY_CHARS], text=t)
        for p, v, t in zip(pages, vectors, texts)
    )
    return DocumentIndex(doc_id=doc.doc_id, entries=entries, dimension=dims.pop())


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """dot(a,b) / (||a||*||b||). Raises on dimension mismatch or zero vectors."""
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    dot = sum(x * y for x, y in zip(a, b))
    norm_a = math.sqrt(sum(x * x for x in a))
    norm_b = math.sqrt(sum(y * y for y in b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return dot / (norm_a * norm_b)


def search(index: DocumentIndex, query: str, embedder: EmbeddingProvider,
           k: int = DEFAULT_K) -> list[SearchHit]:
    """Top-k pages by cosine similarity; ties broken by ascending page number.

    Returns min(k, |entries|) hits, each carrying the full page content.
    """
    if not index.entries:
        raise ValueError("cannot search an empty index")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    try:
        (query_vec,) = embedder.embed([query])
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(f"query embedding failed: {exc}") from exc

    scored = [
        (cosine_similarity(query_vec, entry.vector), entry) for entry in index.entries
    ]
    scored.sort(key=lambda pair: (-pair[0], pair[1].page))
    return [
        SearchHit(page=entry.page, score=score, content=entry.text)
        for score, entry in scored[:k]
    ]
