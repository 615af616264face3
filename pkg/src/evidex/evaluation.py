"""Scoring pipeline outputs against gold annotations.

Correctness is the share of attempted values that match gold; completeness
the share of gold-reported columns the system filled; overall their mean.
Numeric columns use tolerant multiset matching over extracted numbers;
free-text columns use a judge backend when configured, else a deterministic
token-containment fallback. Strata: column category, and evidence modality
as given by the gold attribution.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import is_not_reported
from .backend import ModelBackend, ModelRequest, TextPart, UsageLedger, invoke_with_retry
from .docmodel import MODALITIES
from .errors import HardFailure, SchemaParseError
from .prompts import load_prompt
from .schema import ColumnDef, Schema

DEFAULT_REL_TOL = 0.005
DEFAULT_ABS_TOL = 1e-9

VERDICTS = ("correct", "incorrect", "missing", "unevaluated")


@dataclass(frozen=True)
class GoldCell:
    column_id: str
    value: str
    page: int | None = None
    modality: str | None = None


@dataclass(frozen=True)
class PredictedCell:
    column_id: str
    value: str
    failed: bool = False
    has_attribution: bool = False


def load_gold(source: str | Path | dict) -> tuple[str, list[GoldCell]]:
    """Load a gold file ``{doc_id, cells: [{column_id, value, attribution?}]}``."""
    if isinstance(source, dict):
        record = source
    else:
        path = Path(source)
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaParseError(f"cannot load gold file {path}: {exc}") from exc
    if "doc_id" not in record or "cells" not in record:
        raise SchemaParseError("gold record must have 'doc_id' and 'cells'")
    cells = []
    for i, entry in enumerate(record["cells"]):
        if "column_id" not in entry or "value" not in entry:
            raise SchemaParseError(f"gold cell #{i} missing column_id or value")
        attribution = entry.get("attribution") or {}
        modality = attribution.get("modality")
        if modality is not None and modality not in MODALITIES:
            raise SchemaParseError(
                f"gold cell {entry['column_id']!r} has unknown modality {modality!r}")
        cells.append(GoldCell(column_id=entry["column_id"], value=str(entry["value"]),
                              page=attribution.get("page"), modality=modality))
    return str(record["doc_id"]), cells


# --- tolerant numeric matching -------------------------------------------------

# A number is a digit run with optional thousands separators and decimals; a
# leading sign only counts when not glued to a preceding number (so the dash
# in "0.51-0.76" separates a range instead of negating 0.76).
_NUMBER = re.compile(r"(?<![\d.])[-+]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?")


def extract_numbers(text: str) -> list[float]:
    """All numeric tokens in *text*, handling %, ranges, CI brackets, and
    thousands separators. Order follows appearance."""
    return [float(tok.replace(",", "")) for tok in _NUMBER.findall(text)]


def _within(pred: float, gold: float, rel_tol: float, abs_tol: float) -> bool:
    return abs(pred - gold) <= max(abs_tol, rel_tol * abs(gold))


def numeric_match(pred: str, gold: str, rel_tol: float = DEFAULT_REL_TOL,
                  abs_tol: float = DEFAULT_ABS_TOL) -> bool:
    """True iff every gold number is covered one-to-one by a predicted number
    within tolerance. The sentinel matches only the sentinel; a gold value
    with no parseable numbers never matches."""
    if is_not_reported(gold) or is_not_reported(pred):
        return is_not_reported(gold) and is_not_reported(pred)
    gold_numbers = extract_numbers(gold)
    if not gold_numbers:
        return False
    pred_numbers = extract_numbers(pred)

    def cover(remaining: list[float], available: list[float]) -> bool:
        if not remaining:
            return True
        head, *rest = remaining
        for i, candidate in enumerate(available):
            if _within(candidate, head, rel_tol, abs_tol):
                if cover(rest, available[:i] + available[i + 1:]):
                    return True
        return False

    return cover(gold_numbers, pred_numbers)


# --- per-cell judgement ---------------------------------------------------------


def _containment_tokens(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9]+", text.casefold()))


def fallback_judge(pred: str, gold: str) -> str:
    """Deterministic free-text fallback: normalized token-set containment in
    either direction."""
    pred_tokens = _containment_tokens(pred)
    gold_tokens = _containment_tokens(gold)
    if pred_tokens and gold_tokens and (
            pred_tokens <= gold_tokens or gold_tokens <= pred_tokens):
        return "correct"
    return "incorrect"


def judge_cell(pred: str, gold: GoldCell, column: ColumnDef,
               judge_backend: ModelBackend | None = None, *,
               ledger: UsageLedger | None = None,
               rel_tol: float = DEFAULT_REL_TOL, abs_tol: float = DEFAULT_ABS_TOL,
               clock: Callable[[], float] = time.monotonic) -> str:
    """Verdict for one cell: correct, incorrect, missing, or unevaluated."""
    gold_missing = is_not_reported(gold.value)
    pred_missing = is_not_reported(pred)
    if pred_missing and gold_missing:
        return "correct"
    if pred_missing:
        return "missing"
    if gold_missing:
        return "incorrect"

    if column.category == "numerical":
        return "correct" if numeric_match(pred, gold.value, rel_tol, abs_tol) else "incorrect"

    if judge_backend is None:
        return fallback_judge(pred, gold.value)

    rubric = load_prompt("judge_free_text")
    task = json.dumps({"column": column.name, "definition": column.definition,
                       "pred": pred, "gold": gold.value}, indent=2)
    request = ModelRequest(
        mode="judge",
        system_prompt=rubric,
        user_content=(TextPart("Grade this prediction.\n\n```json\n" + task + "\n```"),),
        output_schema={
            "type": "object",
            "properties": {"verdict": {"enum": ["correct", "incorrect"]}},
            "required": ["verdict"],
            "additionalProperties": False,
        },
    )
    if ledger is None:
        ledger = UsageLedger()
    try:
        result = invoke_with_retry(request, judge_backend, ledger, "judge",
                                   retry_limit=1, clock=clock)
    except HardFailure:
        return "unevaluated"
    return result.payload["verdict"]


# --- run scoring ----------------------------------------------------------------


@dataclass
class StratumScore:
    n_gold: int = 0
    n_gold_reported: int = 0
    n_attempted: int = 0
    n_correct: int = 0
    n_filled: int = 0

    @property
    def correctness(self) -> float | None:
        return None if self.n_attempted == 0 else 100.0 * self.n_correct / self.n_attempted

    @property
    def completeness(self) -> float | None:
        return None if self.n_gold_reported == 0 else 100.0 * self.n_filled / self.n_gold_reported

    @property
    def overall(self) -> float | None:
        c, p = self.correctness, self.completeness
        if c is None or p is None:
            return None
        return (c + p) / 2.0

    def to_dict(self) -> dict:
        return {
            "n_gold": self.n_gold, "n_gold_reported": self.n_gold_reported,
            "n_attempted": self.n_attempted, "n_correct": self.n_correct,
            "n_filled": self.n_filled, "correctness": self.correctness,
            "completeness": self.completeness, "overall": self.overall,
        }


@dataclass
class EvalReport:
    strata: dict[str, StratumScore]
    modality_strata: dict[str, StratumScore]
    attribution_coverage: float | None
    verdicts: list[dict] = field(default_factory=list)
    unevaluated: int = 0
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "strata": {k: v.to_dict() for k, v in self.strata.items()},
            "modality_strata": {k: v.to_dict() for k, v in self.modality_strata.items()},
            "attribution_coverage": self.attribution_coverage,
            "unevaluated": self.unevaluated,
            "flags": self.flags,
        }


def score_run(predictions: list[PredictedCell], gold: list[GoldCell], schema: Schema,
              judge_backend: ModelBackend | None = None, *,
              rel_tol: float = DEFAULT_REL_TOL, abs_tol: float = DEFAULT_ABS_TOL,
              ledger: UsageLedger | None = None,
              clock: Callable[[], float] = time.monotonic) -> EvalReport:
    """Score predictions against gold, stratified by category and gold modality.

    Correctness denominator: columns attempted (reported, non-failed) where a
    gold cell exists. Completeness denominator: gold-reported columns.
    Abstentions therefore cost completeness, never correctness.
    """
    columns = schema.by_id()
    unknown = [g.column_id for g in gold if g.column_id not in columns]
    if unknown:
        raise ValueError(f"gold references columns absent from the schema: {unknown}")

    preds = {p.column_id: p for p in predictions}
    strata = {"numerical": StratumScore(), "free_text": StratumScore(),
              "all": StratumScore()}
    modality_strata = {m: StratumScore() for m in MODALITIES}
    verdicts: list[dict] = []
    unevaluated = 0
    flags: list[str] = []

    for gold_cell in gold:
        column = columns[gold_cell.column_id]
        pred = preds.get(gold_cell.column_id)
        pred_value = pred.value if pred is not None else None
        attempted = (pred is not None and not pred.failed
                     and not is_not_reported(pred.value))
        filled = attempted and not is_not_reported(gold_cell.value)

        if pred is None:
            verdict = "missing"
        else:
            verdict = judge_cell(pred.value, gold_cell, column, judge_backend,
                                 ledger=ledger, rel_tol=rel_tol, abs_tol=abs_tol,
                                 clock=clock)
            if pred.failed and verdict != "correct":
                verdict = "missing"
        if verdict == "unevaluated":
            unevaluated += 1
        if column.category == "numerical" and not is_not_reported(gold_cell.value) \
                and not extract_numbers(gold_cell.value):
            flags.append(f"{gold_cell.column_id}: gold value has no parseable numbers")

        targets = [strata[column.category], strata["all"]]
        if gold_cell.modality is not None:
            targets.append(modality_strata[gold_cell.modality])
        for stratum in targets:
            stratum.n_gold += 1
            if not is_not_reported(gold_cell.value):
                stratum.n_gold_reported += 1
            if filled:
                stratum.n_filled += 1
            if attempted and verdict != "unevaluated":
                stratum.n_attempted += 1
                if verdict == "correct":
                    stratum.n_correct += 1

        verdicts.append({
            "column_id": gold_cell.column_id,
            "category": column.category,
            "gold_modality": gold_cell.modality,
            "gold_value": gold_cell.value,
            "pred_value": pred_value,
            "verdict": verdict,
        })

    reported_preds = [p for p in predictions if not p.failed and not is_not_reported(p.value)]
    coverage = (100.0 * sum(1 for p in reported_preds if p.has_attribution)
                / len(reported_preds)) if reported_preds else None

    return EvalReport(strata=strata, modality_strata=modality_strata,
                      attribution_coverage=coverage, verdicts=verdicts,
                      unevaluated=unevaluated, flags=flags)


def predictions_from_run(run: dict) -> list[PredictedCell]:
    """Adapt a stored run record (full or baseline) into scorable predictions."""
    if "cells" in run:
        preds = []
        for cell in run["cells"]:
            inputs = cell["inputs"]
            failed = inputs["a"].get("failed", False) and inputs["b"].get("failed", False)
            preds.append(PredictedCell(
                column_id=cell["column_id"], value=cell["final_value"], failed=failed,
                has_attribution=cell.get("attribution") is not None,
            ))
        return preds
    return [
        PredictedCell(column_id=p["column_id"], value=p["value"],
                      failed=p.get("failed", False),
                      has_attribution=p.get("attribution") is not None)
        for p in run["predictions"]
    ]


# --- report emitters -------------------------------------------------------------


def _fmt(score: float | None) -> str:
    return "-" if score is None else f"{score:.1f}"


def format_grid(report: EvalReport) -> str:
    """Category grid: Corr./Comp./Ovrl. rows by numerical/free-text/all columns."""
    header = ["Metric", "Numerical", "Free-text", "All"]
    rows = [
        ["Corr."] + [_fmt(report.strata[s].correctness) for s in ("numerical", "free_text", "all")],
        ["Comp."] + [_fmt(report.strata[s].completeness) for s in ("numerical", "free_text", "all")],
        ["Ovrl."] + [_fmt(report.strata[s].overall) for s in ("numerical", "free_text", "all")],
    ]
    return "\n".join("\t".join(r) for r in [header, *rows])


def format_modality_grid(report: EvalReport) -> str:
    """Per-modality grid keyed by gold-standard attribution."""
    header = ["Metric", "Text", "Table", "Figure"]
    rows = [
        ["Corr."] + [_fmt(report.modality_strata[m].correctness) for m in MODALITIES],
        ["Comp."] + [_fmt(report.modality_strata[m].completeness) for m in MODALITIES],
        ["Ovrl."] + [_fmt(report.modality_strata[m].overall) for m in MODALITIES],
    ]
    return "\n".join("\t".join(r) for r in [header, *rows])
