"""Two-pass adjudication of Agent A vs Agent B outputs.

Pass 1 resolves agreements by rule, with zero model calls: dual sentinel,
identical values after whitespace normalization, or matching attribution
plus a strict value superset. Everything else escalates to Pass 2, a model
loop that must inspect a disputed page via get_page before it may submit a
verdict carrying one of four labels. both_wrong cells are flagged
low-confidence for targeted human attention.
"""

from __future__ import annotations

import json
import re
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

from . import NOT_REPORTED, is_not_reported
from .agents import Attribution, Extraction
from .backend import (
    Message,
    ModelBackend,
    ModelRequest,
    TextPart,
    ToolSpec,
    UsageLedger,
    invoke,
)
from .docmodel import MODALITIES, ParsedDocument, get_page
from .errors import OutputValidationError, TransportError
from .prompts import load_prompt

LABELS = ("both_correct", "a_correct_b_wrong", "b_correct_a_wrong", "both_wrong")

PASS2_MAX_TURNS = 12


@dataclass(frozen=True)
class ReconciledCell:
    column_id: str
    final_value: str
    label: str
    attribution: Attribution | None
    reconciler_reasoning: str
    pass_: str  # "pass1" | "pass2"
    low_confidence: bool
    input_a: Extraction
    input_b: Extraction
    corrected_value: str | None = None
    verified_without_image: bool = False

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"unknown verification label {self.label!r}")
        if self.low_confidence != (self.label == "both_wrong"):
            raise ValueError("low_confidence must hold exactly for both_wrong cells")
        if self.pass_ == "pass1" and self.label != "both_correct":
            raise ValueError("pass1 cells must be labelled both_correct")
        if (self.final_value != NOT_REPORTED and self.label != "both_wrong"
                and self.attribution is None):
            raise ValueError(
                f"cell {self.column_id!r}: reported final value requires attribution"
            )


def normalize_value(value: str) -> str:
    """Canonical whitespace form: collapse internal runs, trim. Case-sensitive."""
    return " ".join(value.split())


_TOKEN = re.compile(r"(?<![\d.])[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?|[A-Za-z]+")


def value_tokens(value: str) -> list[str]:
    """Tokens for the superset predicate: canonicalized numbers and casefolded words."""
    tokens = []
    for raw in _TOKEN.findall(value):
        if raw[0].isdigit() or raw[0] in "+-":
            number = float(raw.replace(",", ""))
            tokens.append(repr(number))
        else:
            tokens.append(raw.casefold())
    return tokens


def is_strict_superset(sup_value: str, sub_value: str) -> bool:
    """True iff *sub_value*'s token multiset is a proper sub-multiset of
    *sup_value*'s. Numeric tokens compare by normalized value, so "0.620"
    counts as "0.62"."""
    sup = Counter(value_tokens(sup_value))
    sub = Counter(value_tokens(sub_value))
    if not sub:
        return False
    if any(sub[t] > sup.get(t, 0) for t in sub):
        return False
    return sum(sup.values()) > sum(sub.values())


def pass1_agree(a: Extraction, b: Extraction) -> ReconciledCell | None:
    """Rule-based agreement detection; returns a pass1 cell or None to escalate.

    Failed extractions never agree: a failure is not a report, so the
    surviving agent's value must be verified in Pass 2.
    """
    if a.column_id != b.column_id:
        raise ValueError(f"column mismatch: {a.column_id!r} vs {b.column_id!r}")
    if a.failed or b.failed:
        return None

    a_missing, b_missing = is_not_reported(a.value), is_not_reported(b.value)
    if a_missing and b_missing:
        return ReconciledCell(
            column_id=a.column_id, final_value=NOT_REPORTED, label="both_correct",
            attribution=None,
            reconciler_reasoning="Both agents report the value as not reported.",
            pass_="pass1", low_confidence=False, input_a=a, input_b=b,
        )
    if a_missing != b_missing:
        return None

    if normalize_value(a.value) == normalize_value(b.value):
        final = normalize_value(a.value)
        attribution = a.attribution or b.attribution
        return ReconciledCell(
            column_id=a.column_id, final_value=final, label="both_correct",
            attribution=attribution,
            reconciler_reasoning="Both agents extracted the identical value.",
            pass_="pass1", low_confidence=False, input_a=a, input_b=b,
        )

    if (a.attribution is not None and b.attribution is not None
            and a.attribution.page == b.attribution.page
            and a.attribution.modality == b.attribution.modality):
        if is_strict_superset(a.value, b.value):
            winner = a
        elif is_strict_superset(b.value, a.value):
            winner = b
        else:
            return None
        return ReconciledCell(
            column_id=a.column_id, final_value=winner.value, label="both_correct",
            attribution=winner.attribution,
            reconciler_reasoning=(
                "Same page and modality; kept the more complete value "
                f"from {winner.agent}."
            ),
            pass_="pass1", low_confidence=False, input_a=a, input_b=b,
        )
    return None


# --- Pass 2: model-driven verification with forced page inspection -----------

GET_PAGE_TOOL = ToolSpec(
    name="get_page",
    description="Return the full parsed text of a page and its rendered image "
                "when available.",
    parameters={
        "type": "object",
        "properties": {"page": {"type": "integer"}},
        "required": ["page"],
        "additionalProperties": False,
    },
)

_RECONCILIATION_ENTRY_SCHEMA = {
    "type": "object",
    "properties": {
        "column_id": {"type": "string"},
        "label": {"enum": list(LABELS)},
        "final_value": {"type": "string", "minLength": 1},
        "reasoning": {"type": "string"},
        "attribution": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "properties": {
                        "page": {"type": "integer", "minimum": 1},
                        "modality": {"enum": list(MODALITIES)},
                    },
                    "required": ["page", "modality"],
                    "additionalProperties": False,
                },
            ]
        },
        "corrected_value": {"type": "string"},
    },
    "required": ["column_id", "label", "final_value", "reasoning"],
    "additionalProperties": False,
}

SUBMIT_RECONCILIATION_TOOL = ToolSpec(
    name="submit_reconciliation",
    description="Submit the adjudicated verdicts: one entry per conflict.",
    parameters={
        "type": "object",
        "properties": {
            "entries": {"type": "array", "items": _RECONCILIATION_ENTRY_SCHEMA,
                        "minItems": 1},
        },
        "required": ["entries"],
        "additionalProperties": False,
    },
)


@dataclass
class ReconcileTrace:
    """Audit trail of one reconciliation: what escalated and what Pass 2 did."""

    escalated_columns: list[str] = field(default_factory=list)
    direct_both_wrong: list[str] = field(default_factory=list)
    get_page_calls: list[int] = field(default_factory=list)
    forced_rejections: int = 0
    pass2_model_calls: int = 0


def _attribution_dict(attribution: Attribution | None) -> dict | None:
    if attribution is None:
        return None
    d = {"page": attribution.page, "modality": attribution.modality}
    if attribution.verbatim_quote is not None:
        d["verbatim_quote"] = attribution.verbatim_quote
    return d


def _conflict_payload(conflicts: list[tuple[Extraction, Extraction]]) -> str:
    body = {
        "conflicts": [
            {
                "column_id": a.column_id,
                "a": {"value": a.value, "reasoning": a.reasoning,
                      "attribution": _attribution_dict(a.attribution), "failed": a.failed},
                "b": {"value": b.value, "reasoning": b.reasoning,
                      "attribution": _attribution_dict(b.attribution), "failed": b.failed},
            }
            for a, b in conflicts
        ]
    }
    return (
        "Adjudicate the following conflicts. Inspect the disputed pages with "
        "get_page before submitting.\n\n```json\n"
        + json.dumps(body, indent=2) + "\n```"
    )


def _disputed_pages(a: Extraction, b: Extraction) -> set[int]:
    return {x.attribution.page for x in (a, b) if x.attribution is not None}


def _both_wrong_cell(a: Extraction, b: Extraction, reasoning: str,
                     corrected_value: str | None = None,
                     verified_without_image: bool = False) -> ReconciledCell:
    return ReconciledCell(
        column_id=a.column_id, final_value=NOT_REPORTED, label="both_wrong",
        attribution=None, reconciler_reasoning=reasoning, pass_="pass2",
        low_confidence=True, input_a=a, input_b=b, corrected_value=corrected_value,
        verified_without_image=verified_without_image,
    )


def _check_verdicts(entries: list[dict],
                    conflicts: list[tuple[Extraction, Extraction]]) -> str | None:
    """Semantic validation of a reconciliation submission; returns an error
    message (to feed back to the model) or None when valid."""
    expected = [a.column_id for a, _ in conflicts]
    got = [e["column_id"] for e in entries]
    if sorted(got) != sorted(expected) or len(set(got)) != len(got):
        return (f"submission must contain exactly one entry per conflict; "
                f"expected {sorted(expected)}, got {sorted(got)}")
    by_id = {a.column_id: (a, b) for a, b in conflicts}
    for entry in entries:
        a, b = by_id[entry["column_id"]]
        label, final = entry["label"], entry["final_value"]
        if label == "a_correct_b_wrong" and normalize_value(final) != normalize_value(a.value):
            return (f"{entry['column_id']}: label says agent A is correct but "
                    f"final_value differs from A's value")
        if label == "b_correct_a_wrong" and normalize_value(final) != normalize_value(b.value):
            return (f"{entry['column_id']}: label says agent B is correct but "
                    f"final_value differs from B's value")
        if label == "both_correct" and normalize_value(final) not in (
                normalize_value(a.value), normalize_value(b.value)):
            return f"{entry['column_id']}: both_correct final_value must match a candidate"
        if label == "both_wrong" and not is_not_reported(final):
            return (f"{entry['column_id']}: both_wrong requires final_value "
                    f"'Not reported' (use corrected_value for a page-sourced value)")
        if (label != "both_wrong" and not is_not_reported(final)
                and not entry.get("attribution")):
            return f"{entry['column_id']}: reported final value requires attribution"
    return None


def pass2_verify_group(conflicts: list[tuple[Extraction, Extraction]],
                       doc: ParsedDocument, backend: ModelBackend,
                       ledger: UsageLedger, *, max_turns: int = PASS2_MAX_TURNS,
                       trace: ReconcileTrace | None = None,
                       clock: Callable[[], float] = time.monotonic) -> list[ReconciledCell]:
    """Verify a group of conflicts in one model loop (one Pass-2 invocation
    per batch). Submissions that arrive before a get_page call on a disputed
    page are rejected and the rejection is fed back to the model."""
    if trace is None:
        trace = ReconcileTrace()
    if not conflicts:
        return []

    disputed_by_column = {a.column_id: _disputed_pages(a, b) for a, b in conflicts}
    all_disputed = sorted(set().union(*disputed_by_column.values()))

    request = ModelRequest(
        mode="tool_loop",
        system_prompt=load_prompt("reconciler"),
        user_content=(TextPart(_conflict_payload(conflicts)),),
        tools=(GET_PAGE_TOOL, SUBMIT_RECONCILIATION_TOOL),
    )
    messages: list[Message] = [Message(role="user", parts=request.user_content)]

    fetched: dict[int, bool] = {}  # page -> image was available
    # A group needs at least one turn per disputed page plus the submission.
    turn_budget = max(max_turns, len(all_disputed) + 2)

    for _turn in range(turn_budget):
        try:
            result = invoke(request, backend, ledger, "reconciler", messages, clock=clock)
        except OutputValidationError as exc:
            trace.pass2_model_calls += 1
            messages.append(Message(role="assistant", output=exc.raw_output))
            messages.append(Message(role="user", parts=(TextPart(
                f"Invalid response: {exc}. Use get_page and submit_reconciliation."
            ),)))
            continue
        except TransportError:
            continue
        trace.pass2_model_calls += 1

        if result.kind != "tool_call":
            messages.append(Message(role="assistant",
                                    output={"type": "payload", "data": result.payload}))
            messages.append(Message(role="user", parts=(TextPart(
                "Respond via the declared tools."
            ),)))
            continue

        call = result.tool_call
        messages.append(Message(role="assistant", output={
            "type": "tool_call", "name": call.name, "arguments": call.arguments,
        }))

        if call.name == "get_page":
            page = call.arguments["page"]
            if not (1 <= page <= doc.n_pages):
                payload = {"error": f"page {page} out of range 1..{doc.n_pages}"}
            else:
                view = get_page(doc, page)
                fetched[page] = view.image is not None
                trace.get_page_calls.append(page)
                payload = {"page": page, "content": view.text, "image": view.image,
                           "image_available": view.image is not None}
            messages.append(Message(role="tool", tool_name="get_page",
                                    parts=(TextPart(json.dumps(payload)),)))
            continue

        # submit_reconciliation: enforce the forced-tool contract first.
        unverified = [
            cid for cid, pages in disputed_by_column.items()
            if pages and not (pages & set(fetched))
        ]
        if unverified:
            trace.forced_rejections += 1
            payload = {"error": (
                "submission rejected: call get_page on a disputed page before "
                f"submitting; unverified columns: {sorted(unverified)}"
            )}
            messages.append(Message(role="tool", tool_name="submit_reconciliation",
                                    parts=(TextPart(json.dumps(payload)),)))
            continue

        entries = call.arguments["entries"]
        error = _check_verdicts(entries, conflicts)
        if error:
            messages.append(Message(role="tool", tool_name="submit_reconciliation",
                                    parts=(TextPart(json.dumps({"error": error})),)))
            continue

        return _build_cells(entries, conflicts, disputed_by_column, fetched)

    # Retries exhausted: degrade every conflict to a flagged both_wrong.
    return [
        _both_wrong_cell(a, b, "Verification loop produced no valid submission.")
        for a, b in conflicts
    ]


def _build_cells(entries: list[dict], conflicts: list[tuple[Extraction, Extraction]],
                 disputed_by_column: dict[str, set[int]],
                 fetched: dict[int, bool]) -> list[ReconciledCell]:
    by_id = {e["column_id"]: e for e in entries}
    cells = []
    for a, b in conflicts:
        entry = by_id[a.column_id]
        label = entry["label"]
        raw_attr = entry.get("attribution")
        attribution = None
        if raw_attr:
            attribution = Attribution(page=raw_attr["page"], modality=raw_attr["modality"])
        checked = disputed_by_column[a.column_id] & set(fetched)
        without_image = bool(checked) and not any(fetched[p] for p in checked)
        cells.append(ReconciledCell(
            column_id=a.column_id,
            final_value=(NOT_REPORTED if label == "both_wrong" else entry["final_value"]),
            label=label,
            attribution=attribution,
            reconciler_reasoning=entry.get("reasoning", ""),
            pass_="pass2",
            low_confidence=(label == "both_wrong"),
            input_a=a,
            input_b=b,
            corrected_value=entry.get("corrected_value"),
            verified_without_image=without_image,
        ))
    return cells


def pass2_verify(a: Extraction, b: Extraction, doc: ParsedDocument,
                 backend: ModelBackend, ledger: UsageLedger, *,
                 max_turns: int = PASS2_MAX_TURNS,
                 clock: Callable[[], float] = time.monotonic) -> ReconciledCell:
    """Single-column verification; a group of one."""
    if not _disputed_pages(a, b):
        return _both_wrong_cell(
            a, b, "Neither agent supplied an evidence trail to verify.")
    (cell,) = pass2_verify_group([(a, b)], doc, backend, ledger,
                                 max_turns=max_turns, clock=clock)
    return cell


def reconcile_batch(extractions_a: list[Extraction], extractions_b: list[Extraction],
                    doc: ParsedDocument, backend: ModelBackend, ledger: UsageLedger,
                    *, max_turns: int = PASS2_MAX_TURNS,
                    clock: Callable[[], float] = time.monotonic,
                    ) -> tuple[list[ReconciledCell], ReconcileTrace]:
    """Resolve every column of a batch exactly once.

    Pass-1 agreements cost zero model calls; all of a batch's escalations go
    to Pass 2 in a single grouped invocation. Per-column failures degrade to
    flagged both_wrong cells rather than aborting the batch.
    """
    ids_a = [e.column_id for e in extractions_a]
    ids_b = {e.column_id for e in extractions_b}
    if set(ids_a) != ids_b or len(ids_a) != len(extractions_b):
        raise ValueError(f"agent outputs cover different columns: {sorted(set(ids_a) ^ ids_b)}")
    b_by_id = {e.column_id: e for e in extractions_b}

    trace = ReconcileTrace()
    resolved: dict[str, ReconciledCell] = {}
    conflicts: list[tuple[Extraction, Extraction]] = []

    for a in extractions_a:
        b = b_by_id[a.column_id]
        cell = pass1_agree(a, b)
        if cell is not None:
            resolved[a.column_id] = cell
            continue
        if not _disputed_pages(a, b):
            # Double failure: nothing to inspect, flag for the reviewer.
            trace.direct_both_wrong.append(a.column_id)
            resolved[a.column_id] = _both_wrong_cell(
                a, b, "Neither agent supplied an evidence trail to verify.")
            continue
        trace.escalated_columns.append(a.column_id)
        conflicts.append((a, b))

    for cell in pass2_verify_group(conflicts, doc, backend, ledger,
                                   max_turns=max_turns, trace=trace, clock=clock):
        resolved[cell.column_id] = cell

    return [resolved[cid] for cid in ids_a], trace
