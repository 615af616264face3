// Detail-panel view model: both candidates, the reconciler verdict, and the
// attributed page text with agent A's verbatim quote highlighted.

import { HighlightResult, highlightQuote } from "./highlight.js";
import type { CellDetail, PageInfo, ReviewAction } from "./types.js";

export const REVIEW_ACTIONS: ReviewAction[] = [
  "accept_a",
  "accept_b",
  "accept_reconciled",
  "correct",
];

export interface DetailView {
  columnId: string;
  columnName: string;
  effectiveValue: string;
  reviewStatus: string;
  label: string;
  lowConfidence: boolean;
  verifiedWithoutImage: boolean;
  reconcilerReasoning: string;
  correctedValue: string | null;
  agentA: { value: string; reasoning: string; quote: string | null; page: number | null; modality: string | null };
  agentB: { value: string; reasoning: string; page: number | null; modality: string | null };
  page: PageInfo | null;
  highlight: HighlightResult | null;
  quoteLocated: boolean;
  imageUrl: string | null;
  history: CellDetail["history"];
}

/** The page whose text the panel shows: the reconciled attribution's page
 *  when present, else agent A's, else the first attributed page returned. */
export function pickDisplayPage(detail: CellDetail): PageInfo | null {
  if (detail.pages.length === 0) return null;
  const preferred =
    detail.agent_a.attribution?.page ?? detail.agent_b.attribution?.page ?? null;
  if (preferred !== null) {
    const match = detail.pages.find((p) => p.page === preferred);
    if (match) return match;
  }
  return detail.pages[0] ?? null;
}

export function buildDetailView(detail: CellDetail): DetailView {
  const page = pickDisplayPage(detail);
  const quote = detail.agent_a.attribution?.verbatim_quote ?? null;
  const highlight = page?.text != null ? highlightQuote(page.text, quote) : null;
  return {
    columnId: detail.column_id,
    columnName: detail.column?.name ?? detail.column_id,
    effectiveValue: detail.effective_value,
    reviewStatus: detail.review_status,
    label: detail.label,
    lowConfidence: detail.low_confidence,
    verifiedWithoutImage: detail.verified_without_image,
    reconcilerReasoning: detail.reconciler_reasoning,
    correctedValue: detail.corrected_value,
    agentA: {
      value: detail.agent_a.value,
      reasoning: detail.agent_a.reasoning,
      quote,
      page: detail.agent_a.attribution?.page ?? null,
      modality: detail.agent_a.attribution?.modality ?? null,
    },
    agentB: {
      value: detail.agent_b.value,
      reasoning: detail.agent_b.reasoning,
      page: detail.agent_b.attribution?.page ?? null,
      modality: detail.agent_b.attribution?.modality ?? null,
    },
    page,
    highlight,
    // A quote that exists but cannot be found shows the not-located badge;
    // a cell with no quote at all simply has nothing to highlight.
    quoteLocated: quote !== null && highlight !== null && highlight.found,
    imageUrl: page?.image_url ?? null,
    history: detail.history,
  };
}

export function showQuoteNotLocatedBadge(view: DetailView): boolean {
  return view.agentA.quote !== null && !view.quoteLocated;
}
