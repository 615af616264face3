"""Shared synthetic fixtures: schema, document, gold, and handcrafted cells.

The fixture document follows the convention the emulated backend reads:
any standalone line ``column_id = value`` is a fact. Facts are spread over
all six pages so that whichever page the search agent's top-5 misses, some
batch columns conflict and Pass 2 gets exercised.
"""

from __future__ import annotations

import json
from pathlib import Path

from evidex.agents import Attribution, Extraction
from evidex.reconciler import ReconciledCell
from evidex.schema import Schema, load_schema

FIXTURE_DOC_ID = "synth-trial-001"

# column id -> (group, category, value or None for unreported, page, modality)
FIXTURE_COLUMNS = {
    "trial_name": ("trial characteristics", "free_text", "SYNTH-1", 1, "text"),
    "nct_id": ("trial characteristics", "free_text", "NCT00000001", 1, "text"),
    "design": ("trial characteristics", "free_text", "randomized, open-label", 1, "text"),
    "enrollment": ("trial characteristics", "numerical", "1150", 2, "text"),
    "blinding": ("trial characteristics", "free_text", None, None, None),
    "primary_endpoint": ("trial characteristics", "free_text", "overall survival", 2, "text"),
    "follow_up_months": ("trial characteristics", "numerical", "44.0", 5, "text"),
    "os_hr": ("efficacy outcomes", "numerical", "0.62", 3, "table"),
    "os_ci": ("efficacy outcomes", "numerical", "0.51-0.76", 3, "table"),
    "pfs_hr": ("efficacy outcomes", "numerical", "0.47", 3, "table"),
    "pfs_median_tx": ("efficacy outcomes", "numerical", "20.3 months", 4, "table"),
    "pfs_median_ctrl": ("efficacy outcomes", "numerical", "11.2 months", 4, "table"),
    "orr_pct": ("efficacy outcomes", "numerical", "83.1", 4, "table"),
    "os_events": ("efficacy outcomes", "numerical", "148", 5, "figure"),
    "rpfs_hr": ("efficacy outcomes", "numerical", None, None, None),
    "grade3_ae_pct": ("adverse events", "numerical", "24.3", 6, "table"),
    "sae_pct": ("adverse events", "numerical", "18.0", 6, "table"),
    "discontinuation_pct": ("adverse events", "numerical", "7.2", 6, "text"),
    "febrile_neutropenia_pct": ("adverse events", "numerical", "0.6", 2, "text"),
    "ae_deaths": ("adverse events", "numerical", None, None, None),
}


def fixture_schema_record() -> dict:
    columns = []
    for cid, (group, category, _value, _page, _modality) in FIXTURE_COLUMNS.items():
        columns.append({
            "id": cid,
            "name": cid.replace("_", " "),
            "definition": f"Report the {cid.replace('_', ' ')}. Use Not reported if missing.",
            "category": category,
            "group": group,
        })
    return {"name": "synthetic-oncology", "version": "1", "columns": columns}


def fixture_schema() -> Schema:
    return load_schema(fixture_schema_record())


def _facts_on(page: int) -> list[str]:
    return [
        f"{cid} = {value}"
        for cid, (_g, _c, value, fact_page, _m) in FIXTURE_COLUMNS.items()
        if value is not None and fact_page == page
    ]


def fixture_document_record(with_images: bool = False) -> dict:
    """A 6-page synthetic trial publication with text, table, and figure chunks."""
    def text_chunk(cid, page, lines):
        return {"chunk_id": cid, "page": page, "modality": "text",
                "content": "\n".join(lines)}

    def table_chunk(cid, page, header, rows, facts):
        grid = [f"| {' | '.join(header)} |",
                f"|{'---|' * len(header)}"]
        grid += [f"| {' | '.join(r)} |" for r in rows]
        return {"chunk_id": cid, "page": page, "modality": "table",
                "content": "\n".join(grid + facts)}

    def figure_chunk(cid, page, caption, facts):
        return {"chunk_id": cid, "page": page, "modality": "figure",
                "content": "\n".join([caption] + facts)}

    chunks = [
        text_chunk("c1", 1, [
            "A randomized synthetic trial of combination therapy in metastatic disease.",
            *_facts_on(1),
        ]),
        text_chunk("c2", 2, [
            "Patients were enrolled across 120 centers between 2019 and 2022.",
            *_facts_on(2),
        ]),
        table_chunk("c3", 3, ["Endpoint", "HR", "95% CI"],
                    [["OS", "0.62", "0.51-0.76"], ["PFS", "0.47", "0.39-0.57"]],
                    _facts_on(3)),
        table_chunk("c4", 4, ["Outcome", "Treatment", "Control"],
                    [["Median PFS", "20.3", "11.2"], ["ORR %", "83.1", "63.4"]],
                    _facts_on(4)),
        figure_chunk("c5", 5, "Figure 2. Kaplan-Meier estimate of overall survival.",
                     _facts_on(5)),
        table_chunk("c6", 6, ["Event", "Rate %"],
                    [["Grade >=3 AE", "24.3"], ["Serious AE", "18.0"]],
                    _facts_on(6)),
        text_chunk("c7", 6, [
            "Treatment discontinuation due to adverse events was uncommon.",
            "discontinuation_pct = 7.2",
        ]),
    ]
    # discontinuation_pct already emitted inside c7; drop it from c6's facts.
    chunks[5]["content"] = "\n".join(
        line for line in chunks[5]["content"].splitlines()
        if not line.startswith("discontinuation_pct")
    )
    record = {
        "doc_id": FIXTURE_DOC_ID,
        "title": "A Synthetic Randomized Trial",
        "n_pages": 6,
        "chunks": chunks,
    }
    if with_images:
        record["page_images"] = {str(p): f"/tmp/does-not-matter/page{p}.png"
                                 for p in range(1, 7)}
    return record


def write_fixture_files(dirpath: Path, with_images: bool = False) -> tuple[Path, Path]:
    """Write the fixture schema and document; returns their paths."""
    dirpath.mkdir(parents=True, exist_ok=True)
    schema_path = dirpath / "schema.json"
    doc_path = dirpath / f"{FIXTURE_DOC_ID}.json"
    schema_path.write_text(json.dumps(fixture_schema_record(), indent=2), encoding="utf-8")
    doc_path.write_text(json.dumps(fixture_document_record(with_images), indent=2),
                        encoding="utf-8")
    return schema_path, doc_path


def fixture_gold_record() -> dict:
    cells = []
    for cid, (_g, _c, value, page, modality) in FIXTURE_COLUMNS.items():
        entry = {"column_id": cid, "value": value if value is not None else "Not reported"}
        if value is not None:
            entry["attribution"] = {"page": page, "modality": modality}
        cells.append(entry)
    return {"doc_id": FIXTURE_DOC_ID, "cells": cells}


def make_config_store(tmp_path) -> Path:
    """A review-ready store: one real pipeline run, with the dual-sentinel
    'blinding' cell swapped for a handcrafted both_wrong conflict (the honest
    emulated backend never produces one organically)."""
    from evidex import NOT_REPORTED
    from evidex.backend import UsageLedger
    from evidex.pipeline import BackendSelection, PipelineConfig, run_extraction
    from evidex.store import RunManifest, Store, cell_from_dict

    base = Path(tmp_path)
    schema_path, doc_path = write_fixture_files(base)
    config = PipelineConfig(
        schema_path=str(schema_path), document_paths=[str(doc_path)],
        output_dir=str(base / "store"),
        embedder=BackendSelection(name="hash", options={"dimension": 32}),
    )
    summary = run_extraction(config, clock=lambda: 0.0)
    assert summary.ok
    store = Store(config.output_dir)
    run = store.load_run(FIXTURE_DOC_ID)
    cells = [cell_from_dict(d) for d in run["cells"]]
    assert any(c.label == "a_correct_b_wrong" for c in cells), \
        "fixture is expected to force escalations"

    flagged = mk_cell("blinding", NOT_REPORTED, "both_wrong", pass_="pass2",
                      page=1, a_value="single blind", b_value="double blind",
                      a_quote="blinding was single blind")
    cells = [flagged if c.column_id == "blinding" else c for c in cells]

    ledger = UsageLedger()
    for rec in store.load_ledger_records(FIXTURE_DOC_ID):
        ledger.append(rec["agent"], rec["input_tokens"], rec["output_tokens"],
                      rec["wall_time"])
    store.persist_run(FIXTURE_DOC_ID, cells, RunManifest.from_dict(run["manifest"]),
                      ledger=ledger, trace=run.get("trace"))
    return Path(config.output_dir)


# --- handcrafted extraction/cell builders -------------------------------------


def mk_extraction(column_id: str, value: str, agent: str = "agent_a",
                  page: int | None = 1, modality: str = "text",
                  quote: str | None = None, failed: bool = False) -> Extraction:
    attribution = None
    if page is not None and value != "Not reported" and not failed:
        if quote is None and agent == "agent_a":
            quote = f"{column_id} = {value}"
        attribution = Attribution(page=page, modality=modality, verbatim_quote=quote)
    return Extraction(column_id=column_id, value=value, reasoning=f"reasoning for {column_id}",
                      attribution=attribution, agent=agent, failed=failed)


def mk_cell(column_id: str, final: str, label: str, *, pass_: str = "pass1",
            page: int | None = 1, modality: str = "text",
            a_value: str | None = None, b_value: str | None = None,
            a_quote: str | None = None) -> ReconciledCell:
    a = mk_extraction(column_id, a_value if a_value is not None else final,
                      agent="agent_a", page=page, modality=modality, quote=a_quote)
    b = mk_extraction(column_id, b_value if b_value is not None else final,
                      agent="agent_b", page=page, modality=modality)
    attribution = None
    if final != "Not reported" and label != "both_wrong" and page is not None:
        attribution = Attribution(page=page, modality=modality)
    return ReconciledCell(
        column_id=column_id, final_value=final, label=label, attribution=attribution,
        reconciler_reasoning=f"verdict for {column_id}", pass_=pass_,
        low_confidence=(label == "both_wrong"), input_a=a, input_b=b,
    )
