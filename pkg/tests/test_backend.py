"""Invocation boundary: validation, retries, ledger accounting, registry."""

from __future__ import annotations

import threading

import pytest

from evidex.backend import (
    DocumentPart,
    ModelRequest,
    ScriptedBackend,
    TextPart,
    ToolSpec,
    UsageLedger,
    create_backend,
    format_ledger_table,
    invoke,
    invoke_with_retry,
    ledger_report,
)
from evidex.errors import HardFailure, OutputValidationError
from evidex.mockmodel import EmulatedBackend  # noqa: F401  (registers "mock")
from evidex.docmodel import load_document

OUT_SCHEMA = {
    "type": "object",
    "properties": {"x": {"type": "integer"}},
    "required": ["x"],
    "additionalProperties": False,
}

GET_PAGE = ToolSpec(name="get_page", description="fetch a page",
                    parameters={"type": "object",
                                "properties": {"page": {"type": "integer"}},
                                "required": ["page"], "additionalProperties": False})


def judge_request(schema=OUT_SCHEMA, tools=()) -> ModelRequest:
    return ModelRequest(mode="judge", system_prompt="grade",
                        user_content=(TextPart("hello"),),
                        output_schema=schema, tools=tuple(tools))


def test_request_invariants():
    doc = load_document({"doc_id": "d", "title": "t", "n_pages": 1,
                         "chunks": [{"chunk_id": "c", "page": 1,
                                     "modality": "text", "content": "x"}]})
    with pytest.raises(ValueError, match="document parts"):
        ModelRequest(mode="tool_loop", system_prompt="s",
                     user_content=(DocumentPart(doc),))
    with pytest.raises(ValueError, match="temperature"):
        ModelRequest(mode="document_query", system_prompt="s",
                     user_content=(DocumentPart(doc),), temperature=0.7)
    with pytest.raises(ValueError, match="duplicate tool"):
        ModelRequest(mode="tool_loop", system_prompt="s",
                     user_content=(TextPart("x"),), tools=(GET_PAGE, GET_PAGE))


def test_invoke_valid_payload_appends_one_record():
    backend = ScriptedBackend([{"type": "payload", "data": {"x": 3}}])
    ledger = UsageLedger()
    result = invoke(judge_request(), backend, ledger, "judge")
    assert result.kind == "payload"
    assert result.payload == {"x": 3}
    assert len(ledger.records) == 1
    assert ledger.records[0].agent == "judge"
    assert ledger.records[0].input_tokens > 0


def test_invoke_schema_invalid_output_still_logs_usage():
    backend = ScriptedBackend([{"type": "payload", "data": {"x": "nope"}}])
    ledger = UsageLedger()
    with pytest.raises(OutputValidationError):
        invoke(judge_request(), backend, ledger, "judge")
    assert len(ledger.records) == 1


def test_retry_then_success_counts_three_records():
    backend = ScriptedBackend([
        {"type": "payload", "data": {"wrong": 1}},
        {"type": "payload", "data": {"x": "still wrong"}},
        {"type": "payload", "data": {"x": 42}},
    ])
    ledger = UsageLedger()
    result = invoke_with_retry(judge_request(), backend, ledger, "judge", retry_limit=2)
    assert result.payload == {"x": 42}
    assert len(ledger.records) == 3
    # The retry request carries the validation error back to the model.
    _req, messages = backend.calls[-1]
    assert any("rejected" in part.text for m in messages for part in m.parts
               if isinstance(part, TextPart))


def test_retries_exhausted_is_hard_failure():
    backend = ScriptedBackend([{"type": "payload", "data": {}}] * 3)
    ledger = UsageLedger()
    with pytest.raises(HardFailure):
        invoke_with_retry(judge_request(), backend, ledger, "judge", retry_limit=2)
    assert len(ledger.records) == 3


def test_transport_failure_logs_nothing_and_retries():
    backend = ScriptedBackend([
        {"transport_error": "connection reset"},
        {"type": "payload", "data": {"x": 1}},
    ])
    ledger = UsageLedger()
    result = invoke_with_retry(judge_request(), backend, ledger, "judge", retry_limit=2)
    assert result.payload == {"x": 1}
    assert len(ledger.records) == 1


def test_undeclared_tool_rejected():
    backend = ScriptedBackend([
        {"type": "tool_call", "name": "fetch", "arguments": {"page": 1}},
    ])
    ledger = UsageLedger()
    request = judge_request(tools=[GET_PAGE])
    with pytest.raises(OutputValidationError, match="undeclared tool"):
        invoke(request, backend, ledger, "judge")


def test_tool_arguments_validated():
    backend = ScriptedBackend([
        {"type": "tool_call", "name": "get_page", "arguments": {"page": "five"}},
    ])
    ledger = UsageLedger()
    with pytest.raises(OutputValidationError, match="get_page"):
        invoke(judge_request(tools=[GET_PAGE]), backend, ledger, "judge")


def test_valid_tool_call_passes_through():
    backend = ScriptedBackend([
        {"type": "tool_call", "name": "get_page", "arguments": {"page": 5}},
    ])
    ledger = UsageLedger()
    result = invoke(judge_request(tools=[GET_PAGE]), backend, ledger, "judge")
    assert result.kind == "tool_call"
    assert result.tool_call.name == "get_page"
    assert result.tool_call.arguments == {"page": 5}


def test_ledger_report_empty():
    report = ledger_report(UsageLedger())
    assert report["total"] == {"input_tokens": 0, "output_tokens": 0,
                               "total_tokens": 0, "api_calls": 0}


def test_ledger_report_totals():
    ledger = UsageLedger()
    ledger.append("agent_a", 100, 10, 0.0)
    ledger.append("agent_b", 50, 5, 0.0)
    report = ledger_report(ledger)
    assert report["total"] == {"input_tokens": 150, "output_tokens": 15,
                               "total_tokens": 165, "api_calls": 2}
    assert report["agent_a"]["api_calls"] == 1
    table = format_ledger_table(report)
    assert "In Tok.\tOut Tok.\tTotal Tok.\tAPI Calls" in table
    assert "total\t150\t15\t165\t2" in table


def test_ledger_merge_reassigns_ids_in_order():
    staged_a, staged_b, main = UsageLedger(), UsageLedger(), UsageLedger()
    staged_a.append("agent_a", 1, 1, 0.0)
    staged_b.append("agent_b", 2, 2, 0.0)
    staged_b.append("agent_b", 3, 3, 0.0)
    main.merge(staged_a)
    main.merge(staged_b)
    assert [r.call_id for r in main.records] == ["c0001", "c0002", "c0003"]
    assert [r.agent for r in main.records] == ["agent_a", "agent_b", "agent_b"]


def test_ledger_concurrent_appends():
    ledger = UsageLedger()

    def worker():
        for _ in range(200):
            ledger.append("agent_a", 1, 1, 0.0)

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(ledger.records) == 800
    assert len({r.call_id for r in ledger.records}) == 800


def test_ledger_rejects_bad_values():
    ledger = UsageLedger()
    with pytest.raises(ValueError):
        ledger.append("stranger", 1, 1, 0.0)
    with pytest.raises(ValueError):
        ledger.append("agent_a", -1, 1, 0.0)


def test_registry():
    backend = create_backend("mock")
    assert backend.name == "mock"
    with pytest.raises(KeyError, match="unknown backend"):
        create_backend("gpt-99")


def test_document_tokens_counted_per_call():
    doc = load_document({"doc_id": "d", "title": "t", "n_pages": 1,
                         "chunks": [{"chunk_id": "c", "page": 1, "modality": "text",
                                     "content": "tok " * 500}]})
    long_request = ModelRequest(mode="document_query", system_prompt="s",
                                user_content=(DocumentPart(doc), TextPart("q")),
                                output_schema=None)
    short_request = judge_request(schema=None)
    backend = ScriptedBackend([{"type": "payload", "data": {}}] * 2)
    ledger = UsageLedger()
    invoke(long_request, backend, ledger, "agent_a")
    invoke(short_request, backend, ledger, "judge")
    doc_call, plain_call = ledger.records
    assert doc_call.input_tokens > plain_call.input_tokens + 400
