"""Acceptance suite: one test per release criterion, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the criterion lines.
"""

from __future__ import annotations

import functools
import json
import math
import random
import time

from helpers import (
    FIXTURE_DOC_ID,
    fixture_document_record,
    fixture_schema,
    mk_cell,
    mk_extraction,
    write_fixture_files,
)

from evidex import NOT_REPORTED
from evidex.agents import SessionCache, handle_tool_call, run_agent_b
from evidex.backend import ScriptedBackend, ToolCall, UsageLedger, count_text_tokens
from evidex.docmodel import get_page, load_document, render_markdown
from evidex.evaluation import GoldCell, PredictedCell, numeric_match, score_run
from evidex.pipeline import BackendSelection, PipelineConfig, run_extraction
from evidex.reconciler import ReconcileTrace, pass1_agree, pass2_verify_group, reconcile_batch
from evidex.retrieval import HashEmbedder, build_index, search
from evidex.schema import load_schema, pack_batches
from evidex.store import RunManifest, Store, cell_from_dict, export_supervision
from test_evaluation import NUMERIC_CASES, make_schema
from test_schema import check_batching, make_record


def criterion(name):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                result = fn(*args, **kwargs)
            except BaseException:
                print(f"ACCEPTANCE {name}: FAIL")
                raise
            print(f"ACCEPTANCE {name}: PASS")
            return result
        return wrapper
    return decorate


# --- 1. batching -----------------------------------------------------------------


@criterion("batching-500-random-schemas")
def test_batching_suite():
    rng = random.Random(1234)
    started = time.perf_counter()
    for _ in range(500):
        groups = {f"g{i}": rng.randint(1, 40) for i in range(rng.randint(1, 10))}
        schema = load_schema(make_record(groups))
        batches = pack_batches(schema, 15)
        check_batching(schema, batches, 15)
        assert pack_batches(schema, 15) == batches  # determinism
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0, f"batching suite took {elapsed:.2f}s"


# --- 2. retrieval oracle -----------------------------------------------------------


@criterion("retrieval-oracle-100-indexes")
def test_retrieval_oracle():
    rng = random.Random(4321)
    embedder = HashEmbedder(32)
    started = time.perf_counter()
    for _ in range(100):
        n_pages = rng.randint(1, 200)
        record = {
            "doc_id": "r", "title": "r", "n_pages": n_pages,
            "chunks": [
                {"chunk_id": f"c{p}", "page": p, "modality": "text",
                 "content": f"page {p} topic {rng.randint(0, 9)} term {rng.random():.6f}"}
                for p in range(1, n_pages + 1)
            ],
        }
        index = build_index(load_document(record), embedder)
        query = f"find topic {rng.randint(0, 9)}"
        hits = search(index, query, embedder, k=5)

        (query_vec,) = embedder.embed([query])
        scored = []
        for entry in index.entries:
            dot = sum(q * v for q, v in zip(query_vec, entry.vector))
            nq = math.sqrt(sum(q * q for q in query_vec))
            nv = math.sqrt(sum(v * v for v in entry.vector))
            scored.append((dot / (nq * nv), entry.page))
        scored.sort(key=lambda pair: (-pair[0], pair[1]))
        expected = scored[:5]

        assert [h.page for h in hits] == [p for _s, p in expected]
        for hit, (score, _page) in zip(hits, expected):
            assert abs(hit.score - score) <= 1e-9
    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"retrieval oracle took {elapsed:.2f}s"


# --- 3. cosine properties -----------------------------------------------------------


@criterion("cosine-properties-1000-pairs")
def test_cosine_properties():
    from evidex.retrieval import cosine_similarity

    rng = random.Random(777)
    for _ in range(1000):
        dim = rng.randint(2, 32)
        a = [rng.uniform(-1, 1) for _ in range(dim)]
        b = [rng.uniform(-1, 1) for _ in range(dim)]
        scale = rng.uniform(1e-3, 1e3)
        assert abs(cosine_similarity(a, b) - cosine_similarity(b, a)) <= 1e-9
        assert abs(cosine_similarity([scale * x for x in a], b)
                   - cosine_similarity(a, b)) <= 1e-9
        assert abs(cosine_similarity(a, a) - 1.0) <= 1e-9


# --- 4. dedup cache -----------------------------------------------------------------


@criterion("dedup-cache-bounded-context")
def test_dedup_cache():
    doc = load_document(fixture_document_record())
    embedder = HashEmbedder(32)
    index = build_index(doc, embedder)
    cache = SessionCache(doc.doc_id)
    sessions = [[1, 2, 3], [3, 2, 1], [4, 5], [5, 6, 1], [2, 4, 6], [1, 2, 3, 4, 5, 6]]
    sent_chars = 0
    seen_pages: set[int] = set()
    for pages in sessions:
        result = handle_tool_call(ToolCall("get_chunks_by_page", {"pages": pages}),
                                  doc, index, cache, embedder)
        for item in result["pages"]:
            if item["content"].startswith("[[cached:page="):
                continue
            assert item["page"] not in seen_pages, \
                f"page {item['page']} content transmitted twice"
            seen_pages.add(item["page"])
            sent_chars += len(item["content"])
    distinct_sum = sum(len(get_page(doc, p).text) for p in range(1, doc.n_pages + 1))
    assert sent_chars == distinct_sum
    assert seen_pages == set(range(1, doc.n_pages + 1))
    # search results obey the same cache.
    result = handle_tool_call(ToolCall("search_chunks", {"query": "anything"}),
                              doc, index, cache, embedder)
    assert all(h["content"].startswith("[[cached:page=") for h in result["hits"])


# --- 5. reconciliation rules ----------------------------------------------------------


@criterion("reconciliation-rule-table")
def test_reconciliation_rules():
    doc = load_document(fixture_document_record())

    # Pass-1 resolutions: zero backend calls by construction.
    a = mk_extraction("k", NOT_REPORTED, agent="agent_a", page=None)
    b = mk_extraction("k", NOT_REPORTED, agent="agent_b", page=None)
    cell = pass1_agree(a, b)
    assert cell.label == "both_correct" and cell.final_value == NOT_REPORTED

    a = mk_extraction("k", "0.62", agent="agent_a", page=3, modality="table")
    b = mk_extraction("k", "0.62", agent="agent_b", page=5, modality="text")
    cell = pass1_agree(a, b)
    assert cell.label == "both_correct" and cell.final_value == "0.62"

    a = mk_extraction("k", "0.62", agent="agent_a", page=3, modality="table")
    b = mk_extraction("k", "0.62 (95% CI 0.51-0.76)", agent="agent_b", page=3,
                      modality="table")
    cell = pass1_agree(a, b)
    assert cell.label == "both_correct"
    assert cell.final_value == "0.62 (95% CI 0.51-0.76)"  # more complete value wins

    # Six escalation cases: pass1 yields nothing, and a verified resolution
    # must show at least one get_page call in its trace.
    escalations = [
        (mk_extraction("k", "0.62", page=3, modality="table"),
         mk_extraction("k", "0.71", agent="agent_b", page=3, modality="table")),
        (mk_extraction("k", "0.62", page=3, modality="table"),
         mk_extraction("k", "0.71", agent="agent_b", page=5, modality="table")),
        (mk_extraction("k", "0.62", page=3, modality="table"),
         mk_extraction("k", NOT_REPORTED, agent="agent_b", page=None)),
        (mk_extraction("k", "0.62", page=3, modality="table"),
         mk_extraction("k", "0.62 (95% CI 0.51-0.76)", agent="agent_b", page=4,
                       modality="table")),
        (mk_extraction("k", "0.62", page=3, modality="table"),
         mk_extraction("k", "0.62 (95% CI 0.51-0.76)", agent="agent_b", page=3,
                       modality="text")),
        (mk_extraction("k", NOT_REPORTED, page=None, failed=True),
         mk_extraction("k", "0.62", agent="agent_b", page=3, modality="table")),
    ]
    expected_labels = ["a_correct_b_wrong", "b_correct_a_wrong", "a_correct_b_wrong",
                       "b_correct_a_wrong", "a_correct_b_wrong", "b_correct_a_wrong"]
    for (ex_a, ex_b), label in zip(escalations, expected_labels):
        assert pass1_agree(ex_a, ex_b) is None, "escalation case resolved in pass 1"
        winner_value = ex_a.value if label.startswith("a_") else ex_b.value
        entry = {"column_id": "k", "label": label, "final_value": winner_value,
                 "reasoning": "v"}
        if winner_value != NOT_REPORTED:
            entry["attribution"] = {"page": 3, "modality": "table"}
        backend = ScriptedBackend([
            {"type": "tool_call", "name": "get_page", "arguments": {"page": 3}},
            {"type": "tool_call", "name": "submit_reconciliation",
             "arguments": {"entries": [entry]}},
        ])
        ledger = UsageLedger()
        trace = ReconcileTrace()
        (cell,) = pass2_verify_group([(ex_a, ex_b)], doc, backend, ledger, trace=trace)
        assert cell.label == label and cell.final_value == winner_value
        assert len(trace.get_page_calls) >= 1, "forced-tool contract"
        assert len(ledger.records) >= 1

    # Forced-tool contract: a submit before any get_page is rejected, recorded,
    # and the loop recovers once the model complies.
    ex_a = mk_extraction("k", "0.62", page=3, modality="table")
    ex_b = mk_extraction("k", "0.71", agent="agent_b", page=3, modality="table")
    entry = {"column_id": "k", "label": "a_correct_b_wrong", "final_value": "0.62",
             "reasoning": "v", "attribution": {"page": 3, "modality": "table"}}
    backend = ScriptedBackend([
        {"type": "tool_call", "name": "submit_reconciliation",
         "arguments": {"entries": [entry]}},
        {"type": "tool_call", "name": "get_page", "arguments": {"page": 3}},
        {"type": "tool_call", "name": "submit_reconciliation",
         "arguments": {"entries": [entry]}},
    ])
    trace = ReconcileTrace()
    (cell,) = pass2_verify_group([(ex_a, ex_b)], doc, backend, UsageLedger(),
                                 trace=trace)
    assert trace.forced_rejections == 1
    assert trace.get_page_calls == [3]
    assert cell.label == "a_correct_b_wrong"


# --- 6. end-to-end determinism ---------------------------------------------------------


def _fixture_config(base) -> PipelineConfig:
    schema_path, doc_path = write_fixture_files(base)
    return PipelineConfig(
        schema_path=str(schema_path), document_paths=[str(doc_path)],
        output_dir=str(base / "runs"),
        embedder=BackendSelection(name="hash", options={"dimension": 32}),
    )


@criterion("end-to-end-determinism")
def test_end_to_end_determinism(tmp_path):
    # 6-page fixture (text+table+figure chunks), 20 columns in 3 groups.
    doc = load_document(fixture_document_record())
    assert doc.n_pages == 6
    assert {c.modality for c in doc.chunks} == {"text", "table", "figure"}
    schema = fixture_schema()
    assert len(schema.columns) == 20
    assert len({c.group for c in schema.columns}) == 3

    outputs = []
    for run_name in ("first", "second"):
        config = _fixture_config(tmp_path / run_name)
        summary = run_extraction(config, clock=lambda: 0.0)
        assert summary.ok
        run_dir = tmp_path / run_name / "runs" / FIXTURE_DOC_ID
        outputs.append({
            "run": (run_dir / "run_v1.json").read_bytes(),
            "ledger": (run_dir / "run_v1_ledger.jsonl").read_bytes(),
        })
    assert outputs[0]["run"] == outputs[1]["run"]
    assert outputs[0]["ledger"] == outputs[1]["ledger"]

    run = json.loads(outputs[0]["run"])
    reported = [c for c in run["cells"]
                if c["final_value"] != NOT_REPORTED and c["label"] != "both_wrong"]
    assert reported
    covered = [c for c in reported if c["attribution"] is not None]
    assert len(covered) == len(reported), "attribution coverage must be 100%"


# --- 7. ledger accounting ----------------------------------------------------------------


@criterion("ledger-accounting-formula")
def test_ledger_accounting(tmp_path):
    doc = load_document(fixture_document_record())
    schema = load_schema(make_record({"G1": 3, "G2": 3}))
    batches = pack_batches(schema, 3)
    assert len(batches) == 2

    def a_entries(batch, values):
        return [{"column_id": c.id, "value": values.get(c.id, NOT_REPORTED),
                 "reasoning": "r",
                 "attribution": ({"page": 3, "modality": "table",
                                  "verbatim_quote": "line"}
                                 if c.id in values else None)}
                for c in batch.columns]

    def b_entries(batch, values):
        return [{"column_id": c.id, "value": values.get(c.id, NOT_REPORTED),
                 "reasoning": "r",
                 "attribution": ({"page": 3, "modality": "table"}
                                 if c.id in values else None)}
                for c in batch.columns]

    # Batch 1: agents disagree on G1_0 (conflict); batch 2: A needs one retry.
    a_script = [
        {"type": "payload", "data": {"entries": a_entries(batches[0], {"G1_0": "0.62"})}},
        {"type": "payload", "data": {"entries": []}},  # malformed: retry
        {"type": "payload", "data": {"entries": a_entries(batches[1], {})}},
    ]
    b_script = [
        {"type": "tool_call", "name": "submit_extraction",
         "arguments": {"entries": b_entries(batches[0], {"G1_0": "0.71"})}},
        {"type": "tool_call", "name": "submit_extraction",
         "arguments": {"entries": b_entries(batches[1], {})}},
    ]
    recon_script = [
        {"type": "tool_call", "name": "get_page", "arguments": {"page": 3}},
        {"type": "tool_call", "name": "submit_reconciliation",
         "arguments": {"entries": [{"column_id": "G1_0", "label": "a_correct_b_wrong",
                                    "final_value": "0.62", "reasoning": "v",
                                    "attribution": {"page": 3, "modality": "table"}}]}},
    ]
    backend_a, backend_b = ScriptedBackend(a_script), ScriptedBackend(b_script)
    backend_r = ScriptedBackend(recon_script)
    ledger = UsageLedger()

    from evidex.agents import run_agent_a
    embedder = HashEmbedder(32)
    index = build_index(doc, embedder)
    cache = SessionCache(doc.doc_id)
    all_a, all_b = {}, {}
    for batch in batches:
        all_a[batch.batch_id] = run_agent_a(doc, batch, backend_a, ledger)
        all_b[batch.batch_id] = run_agent_b(doc, index, batch, backend_b, ledger,
                                            cache, embedder)
    for batch in batches:
        reconcile_batch(all_a[batch.batch_id], all_b[batch.batch_id], doc,
                        backend_r, ledger)

    retries = 1
    pass2_invocations = len(backend_r.calls)
    instrumented = len(backend_a.calls) + len(backend_b.calls) + len(backend_r.calls)
    assert len(ledger.records) == instrumented
    assert len(ledger.records) == 2 * len(batches) + pass2_invocations + retries

    # Agent A pays the document tokens on every call, retries included.
    doc_tokens = count_text_tokens(render_markdown(doc))
    a_records = [r for r in ledger.records if r.agent == "agent_a"]
    assert len(a_records) == 3
    assert all(r.input_tokens >= doc_tokens for r in a_records)

    # Agent B's context is bounded by distinct pages: a repeated page request
    # adds only a pointer, not the page content again.
    pointer_session = ScriptedBackend([
        {"type": "tool_call", "name": "get_chunks_by_page", "arguments": {"pages": [1, 2]}},
        {"type": "tool_call", "name": "get_chunks_by_page", "arguments": {"pages": [1, 2]}},
        {"type": "tool_call", "name": "submit_extraction",
         "arguments": {"entries": b_entries(batches[1], {})}},
    ])
    bounded_ledger = UsageLedger()
    run_agent_b(doc, index, batches[1], pointer_session, bounded_ledger,
                SessionCache("fresh"), embedder)
    turns = [r.input_tokens for r in bounded_ledger.records]
    first_fetch_growth = turns[1] - turns[0]
    repeat_fetch_growth = turns[2] - turns[1]
    page_tokens = count_text_tokens(get_page(doc, 1).text + " " + get_page(doc, 2).text)
    assert first_fetch_growth >= page_tokens
    assert repeat_fetch_growth < page_tokens // 2


# --- 8. evaluation arithmetic ---------------------------------------------------------------


@criterion("evaluation-arithmetic")
def test_evaluation_arithmetic():
    schema = make_schema([(f"g{i}", "numerical") for i in range(10)])
    golds = [GoldCell(f"g{i}", str(i + 1), page=1, modality="table") for i in range(10)]
    preds = [PredictedCell(f"g{i}", str(i + 1), has_attribution=True) for i in range(8)]
    preds.append(PredictedCell("g8", "999", has_attribution=True))
    preds.append(PredictedCell("g9", NOT_REPORTED))
    report = score_run(preds, golds, schema)
    stratum = report.strata["all"]
    assert abs(stratum.correctness - 88.9) <= 0.05
    assert abs(stratum.completeness - 90.0) <= 0.05
    assert abs(stratum.overall - 89.4) <= 0.05

    # overall == mean(corr, comp) on every stratum of every emitted report.
    for sub in list(report.strata.values()) + list(report.modality_strata.values()):
        if sub.correctness is not None and sub.completeness is not None:
            assert sub.overall == (sub.correctness + sub.completeness) / 2

    assert len(NUMERIC_CASES) >= 30
    for pred, gold, expected in NUMERIC_CASES:
        assert numeric_match(pred, gold) is expected, (pred, gold)


# --- 9. store round-trip and audit ------------------------------------------------------------


@criterion("store-roundtrip-and-audit")
def test_store_roundtrip_and_audit(tmp_path):
    store = Store(tmp_path / "store", clock=lambda: 42.0)
    cells = [
        mk_cell("c1", "0.62", "both_correct", page=3, modality="table"),
        mk_cell("c2", "0.47", "a_correct_b_wrong", pass_="pass2", page=3,
                a_value="0.47", b_value="0.99"),
        mk_cell("c3", NOT_REPORTED, "both_wrong", pass_="pass2", page=4,
                a_value="1", b_value="2"),
    ]
    manifest = RunManifest(doc_id="d", schema_name="s", schema_version="1",
                           backend_name="mock", mode="full", batches=[],
                           started_at=0.0, finished_at=0.0, ledger_totals={},
                           flags={}, config={})
    store.persist_run("d", cells, manifest)
    loaded = [cell_from_dict(c) for c in store.load_run("d")["cells"]]
    assert loaded == cells  # persist -> load identity

    store.apply_review("d", "c1", "accept_b")
    returned = store.apply_review("d", "c1", "correct", value="0.63", note="fix")
    replayed = store.get_cell("d", "c1")
    assert replayed.review_status == returned.review_status == "human_corrected"
    assert replayed.effective_value == returned.effective_value == "0.63"
    assert replayed.history == returned.history
    assert len(replayed.history) == 2

    records = export_supervision(store)
    preferences = [r for r in records if r["type"] == "preference"]
    assert [r["column_id"] for r in preferences] == ["c2"]
    assert preferences[0]["chosen"] == {"agent": "agent_a", "value": "0.47"}
    assert preferences[0]["rejected"] == {"agent": "agent_b", "value": "0.99"}
    assert not any(r["column_id"] == "c1" and r["type"] == "preference"
                   for r in records if r["column_id"] == "c1")
    # both_correct emits nothing; the corrected cell emits supervision instead.
    supervision = [r for r in records if r["type"] == "supervision"]
    assert [r["column_id"] for r in supervision] == ["c1"]
