"""Deterministic offline model emulation for tests and dry runs.

The emulated backend behaves like a cooperative extraction model over
synthetic fixtures: any document line of the form ``column_id = value`` is a
fact it can "read". It answers document queries by scanning the document,
drives the search-agent tool loop (search once, extract from the returned
pages, submit), performs page-verified reconciliation, and judges free-text
pairs by token overlap. Same inputs, same outputs, zero wall time reported —
two identical pipeline runs produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import re
from typing import Sequence

from . import NOT_REPORTED, is_not_reported
from .backend import (
    BackendTurn,
    Message,
    ModelRequest,
    TextPart,
    count_text_tokens,
    register_backend,
    request_token_count,
)
from .docmodel import parse_chunk_marker

_FACT_LINE = re.compile(r"^\s*(?P<id>[A-Za-z0-9_][A-Za-z0-9_.-]*)\s*=\s*(?P<value>.+?)\s*$")
_FENCED_JSON = re.compile(r"```json\s*(?P<body>\{.*?\})\s*```", re.DOTALL)
_CACHE_POINTER = re.compile(r"^\[\[cached:page=\d+\]\]$")


def _normalize(value: str) -> str:
    return " ".join(value.split())


def _fenced_json(messages: Sequence[Message]) -> dict:
    """First fenced JSON block in the conversation's user text parts."""
    for message in messages:
        if message.role != "user":
            continue
        for part in message.parts:
            if isinstance(part, TextPart):
                match = _FENCED_JSON.search(part.text)
                if match:
                    return json.loads(match.group("body"))
    raise AssertionError("mock backend found no fenced JSON task block")


def scan_facts(text: str) -> dict[str, tuple[str, str, int | None, str | None]]:
    """Extract ``id = value`` facts from marked-up page text.

    Returns id -> (value, quote_line, page, modality); page/modality come from
    the nearest preceding chunk marker, when present. First occurrence wins.
    """
    facts: dict[str, tuple[str, str, int | None, str | None]] = {}
    page: int | None = None
    modality: str | None = None
    for line in text.splitlines():
        marker = parse_chunk_marker(line)
        if marker:
            modality, page = marker[0], marker[1]
            continue
        match = _FACT_LINE.match(line)
        if match and match.group("id") not in facts:
            facts[match.group("id")] = (match.group("value"), line.strip(), page, modality)
    return facts


class EmulatedBackend:
    """Rule-driven stand-in for a live model; see module docstring."""

    name = "mock"

    def __init__(self, **_config):
        pass

    def complete(self, request: ModelRequest, messages: Sequence[Message]) -> BackendTurn:
        if request.mode == "document_query":
            output = self._document_query(request, messages)
        elif request.mode == "judge":
            output = self._judge(messages)
        elif any(t.name == "submit_extraction" for t in request.tools):
            output = self._search_agent_turn(request, messages)
        else:
            output = self._reconciler_turn(messages)
        return BackendTurn(
            output=output,
            input_tokens=request_token_count(request, messages),
            output_tokens=count_text_tokens(json.dumps(output)),
        )

    # -- whole-document structured query (Agent A, parsed baseline) -----

    def _document_query(self, request: ModelRequest, messages: Sequence[Message]) -> dict:
        task = _fenced_json(messages)
        columns = task["columns"]
        facts: dict[str, tuple[str, str, int | None, str | None]] = {}
        for message in messages:
            for part in message.parts:
                doc = getattr(part, "doc", None)
                if doc is None:
                    continue
                for chunk in doc.chunks:
                    for line in chunk.content.splitlines():
                        match = _FACT_LINE.match(line)
                        if match and match.group("id") not in facts:
                            facts[match.group("id")] = (
                                match.group("value"), line.strip(), chunk.page, chunk.modality,
                            )
        entries = []
        for col in columns:
            cid = col["id"]
            if cid in facts:
                value, quote, page, modality = facts[cid]
                entries.append({
                    "column_id": cid,
                    "value": value,
                    "reasoning": f"Stated on page {page}.",
                    "attribution": {
                        "page": page, "modality": modality, "verbatim_quote": quote,
                    },
                })
            else:
                entries.append({
                    "column_id": cid,
                    "value": NOT_REPORTED,
                    "reasoning": "No supporting statement found in the document.",
                    "attribution": None,
                })
        return {"type": "payload", "data": {"entries": entries}}

    # -- retrieval-guided tool loop (Agent B) ----------------------------

    def _search_agent_turn(self, request: ModelRequest, messages: Sequence[Message]) -> dict:
        task = _fenced_json(messages)
        columns = task["columns"]
        tool_results = [m for m in messages if m.role == "tool"]
        if not tool_results:
            query = " ".join(col["name"] for col in columns)
            return {"type": "tool_call", "name": "search_chunks",
                    "arguments": {"query": query}}

        facts: dict[str, tuple[str, str, int | None, str | None]] = {}
        for result in tool_results:
            for part in result.parts:
                if not isinstance(part, TextPart):
                    continue
                payload = json.loads(part.text)
                for hit in payload.get("hits", []) + payload.get("pages", []):
                    content = hit.get("content", "")
                    if _CACHE_POINTER.match(content.strip()):
                        continue
                    for cid, fact in scan_facts(content).items():
                        facts.setdefault(cid, fact)

        entries = []
        for col in columns:
            cid = col["id"]
            if cid in facts:
                value, _quote, page, modality = facts[cid]
                entries.append({
                    "column_id": cid,
                    "value": value,
                    "reasoning": f"Retrieved from page {page}.",
                    "attribution": {"page": page, "modality": modality},
                })
            else:
                entries.append({
                    "column_id": cid,
                    "value": NOT_REPORTED,
                    "reasoning": "Not present in any retrieved page.",
                    "attribution": None,
                })
        return {"type": "tool_call", "name": "submit_extraction",
                "arguments": {"entries": entries}}

    # -- page-verified reconciliation (Pass 2) ---------------------------

    def _reconciler_turn(self, messages: Sequence[Message]) -> dict:
        task = _fenced_json(messages)
        conflicts = task["conflicts"]

        disputed: list[int] = []
        for conflict in conflicts:
            for side in ("a", "b"):
                page = (conflict[side].get("attribution") or {}).get("page")
                if page is not None and page not in disputed:
                    disputed.append(page)
        disputed.sort()

        fetched: dict[int, str] = {}
        for message in messages:
            if message.role != "tool":
                continue
            for part in message.parts:
                if not isinstance(part, TextPart):
                    continue
                payload = json.loads(part.text)
                if "page" in payload and "content" in payload:
                    fetched[payload["page"]] = payload["content"]

        for page in disputed:
            if page not in fetched:
                return {"type": "tool_call", "name": "get_page",
                        "arguments": {"page": page}}

        page_facts: dict[str, tuple[str, int, str]] = {}
        for page in disputed:
            for cid, (value, _quote, _page, modality) in scan_facts(fetched[page]).items():
                page_facts.setdefault(cid, (value, page, modality or "text"))

        entries = [self._adjudicate(conflict, page_facts) for conflict in conflicts]
        return {"type": "tool_call", "name": "submit_reconciliation",
                "arguments": {"entries": entries}}

    def _adjudicate(self, conflict: dict, page_facts: dict) -> dict:
        cid = conflict["column_id"]
        a_value = conflict["a"]["value"]
        b_value = conflict["b"]["value"]
        found = page_facts.get(cid)

        def winner(side: str, value: str, reason: str) -> dict:
            label = "a_correct_b_wrong" if side == "a" else "b_correct_a_wrong"
            attribution = conflict[side].get("attribution")
            if found is not None and not is_not_reported(value):
                attribution = {"page": found[1], "modality": found[2]}
            entry = {"column_id": cid, "label": label, "final_value": value,
                     "reasoning": reason}
            if attribution and not is_not_reported(value):
                entry["attribution"] = {"page": attribution["page"],
                                        "modality": attribution["modality"]}
            return entry

        if found is not None:
            page_value, page_num, _modality = found
            if _normalize(page_value) == _normalize(a_value):
                return winner("a", a_value, f"Page {page_num} states this value.")
            if _normalize(page_value) == _normalize(b_value):
                return winner("b", b_value, f"Page {page_num} states this value.")
            return {
                "column_id": cid, "label": "both_wrong", "final_value": NOT_REPORTED,
                "reasoning": f"Page {page_num} states {page_value!r}, matching neither candidate.",
                "corrected_value": page_value,
            }

        # Fact absent from every disputed page: the abstaining side is right.
        if is_not_reported(a_value) and not is_not_reported(b_value):
            return winner("a", NOT_REPORTED, "Claimed value is not on the cited page.")
        if is_not_reported(b_value) and not is_not_reported(a_value):
            return winner("b", NOT_REPORTED, "Claimed value is not on the cited page.")
        return {
            "column_id": cid, "label": "both_wrong", "final_value": NOT_REPORTED,
            "reasoning": "Neither candidate is supported by the disputed pages.",
        }

    # -- category judge ---------------------------------------------------

    def _judge(self, messages: Sequence[Message]) -> dict:
        task = _fenced_json(messages)
        pred_tokens = set(re.findall(r"[a-z0-9]+", task["pred"].casefold()))
        gold_tokens = set(re.findall(r"[a-z0-9]+", task["gold"].casefold()))
        contained = bool(pred_tokens) and bool(gold_tokens) and (
            pred_tokens <= gold_tokens or gold_tokens <= pred_tokens
        )
        return {"type": "payload",
                "data": {"verdict": "correct" if contained else "incorrect"}}


register_backend("mock", EmulatedBackend)
