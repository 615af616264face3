// Single-page review client. All reads and writes go through ReviewApi;
// the DOM below only renders server payloads and collects user intent.

import { ApiError, ReviewApi } from "./api.js";
import { buildDetailView, showQuoteNotLocatedBadge } from "./detail.js";
import { buildTableView } from "./table.js";
import type { CellDetail, ReviewAction, TablePayload } from "./types.js";

class ReviewApp {
  private api: ReviewApi;
  private currentDoc: string | null = null;

  constructor(baseUrl: string) {
    this.api = new ReviewApi(baseUrl);
    this.el("retry").addEventListener("click", () => void this.loadDocuments());
    void this.loadDocuments();
  }

  private el(id: string): HTMLElement {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing element #${id}`);
    return node;
  }

  private showError(message: string): void {
    const banner = this.el("error-banner");
    banner.classList.remove("hidden");
    this.el("error-message").textContent = message;
  }

  private clearError(): void {
    this.el("error-banner").classList.add("hidden");
  }

  private async guard<T>(work: () => Promise<T>): Promise<T | null> {
    try {
      const result = await work();
      this.clearError();
      return result;
    } catch (err) {
      this.showError(err instanceof ApiError ? err.message : String(err));
      return null;
    }
  }

  async loadDocuments(): Promise<void> {
    const docs = await this.guard(() => this.api.listDocuments());
    if (!docs) return;
    const list = this.el("documents");
    list.innerHTML = "";
    if (docs.length === 0) {
      list.textContent = "No documents in the store yet.";
      return;
    }
    for (const doc of docs) {
      const item = document.createElement("button");
      item.className = "doc-link";
      item.textContent = `${doc.doc_id} (v${doc.latest_version}, ${doc.n_cells} cells, ${doc.flagged} flagged)`;
      item.addEventListener("click", () => void this.loadTable(doc.doc_id));
      list.appendChild(item);
    }
    if (docs.length === 1 && docs[0]) void this.loadTable(docs[0].doc_id);
  }

  async loadTable(docId: string): Promise<void> {
    const payload = await this.guard(() => this.api.getTable(docId));
    if (!payload) return;
    this.currentDoc = docId;
    this.renderTable(payload);
  }

  private renderTable(payload: TablePayload): void {
    const view = buildTableView(payload);
    this.el("table-title").textContent = `${view.docId} — run v${view.version}`;
    this.el("flagged-count").textContent =
      view.flaggedCount === 0
        ? "no flagged cells"
        : `${view.flaggedCount} low-confidence cell(s) need attention`;
    const host = this.el("table");
    host.innerHTML = "";
    if (view.isEmpty) {
      host.textContent = "This run has no cells.";
      return;
    }
    for (const section of view.sections) {
      const heading = document.createElement("h3");
      heading.textContent = section.group;
      host.appendChild(heading);
      const table = document.createElement("table");
      table.innerHTML =
        "<thead><tr><th>Column</th><th>Value</th><th>Verdict</th><th>Status</th></tr></thead>";
      const body = document.createElement("tbody");
      for (const cell of section.cells) {
        const row = document.createElement("tr");
        if (cell.low_confidence) row.classList.add("flagged");
        row.innerHTML = `
          <td>${escapeHtml(cell.name)}</td>
          <td>${escapeHtml(cell.effective_value)}</td>
          <td>${escapeHtml(cell.label)}</td>
          <td>${escapeHtml(cell.review_status)}</td>`;
        row.addEventListener("click", () => void this.openDetail(cell.column_id));
        body.appendChild(row);
      }
      table.appendChild(body);
      host.appendChild(table);
    }
  }

  async openDetail(columnId: string): Promise<void> {
    if (!this.currentDoc) return;
    const detail = await this.guard(() => this.api.getCell(this.currentDoc!, columnId));
    if (!detail) return;
    this.renderDetail(detail);
  }

  private renderDetail(detail: CellDetail): void {
    const view = buildDetailView(detail);
    const drawer = this.el("detail");
    drawer.classList.remove("hidden");
    this.el("detail-title").textContent = view.columnName;
    this.el("detail-value").textContent = view.effectiveValue;
    this.el("detail-status").textContent =
      `${view.label} · ${view.reviewStatus}` +
      (view.lowConfidence ? " · LOW CONFIDENCE" : "") +
      (view.verifiedWithoutImage ? " · verified without image" : "");
    this.el("candidate-a").textContent =
      `${view.agentA.value}\n${view.agentA.reasoning}` +
      (view.agentA.page ? `\n(p.${view.agentA.page}, ${view.agentA.modality})` : "");
    this.el("candidate-b").textContent =
      `${view.agentB.value}\n${view.agentB.reasoning}` +
      (view.agentB.page ? `\n(p.${view.agentB.page}, ${view.agentB.modality})` : "");
    this.el("reconciler-reasoning").textContent =
      view.reconcilerReasoning +
      (view.correctedValue ? `\nPage-sourced value: ${view.correctedValue}` : "");

    const badge = this.el("quote-badge");
    badge.classList.toggle("hidden", !showQuoteNotLocatedBadge(view));

    const pageHost = this.el("page-text");
    pageHost.innerHTML = "";
    if (view.highlight) {
      for (const segment of view.highlight.segments) {
        const span = document.createElement("span");
        if (segment.highlighted) span.className = "quote";
        span.textContent = segment.text;
        pageHost.appendChild(span);
      }
    } else {
      pageHost.textContent = view.page?.text ?? "(no attributed page)";
    }

    const image = this.el("page-image") as HTMLImageElement;
    if (view.imageUrl) {
      image.src = view.imageUrl;
      image.classList.remove("hidden");
    } else {
      image.classList.add("hidden");
    }

    const historyHost = this.el("history");
    historyHost.innerHTML = "";
    for (const event of view.history) {
      const line = document.createElement("li");
      line.textContent =
        `${event.action}: ${event.before.value} -> ${event.after.value}` +
        (event.note ? ` (${event.note})` : "");
      historyHost.appendChild(line);
    }

    this.bindAction("accept-a", detail, "accept_a");
    this.bindAction("accept-b", detail, "accept_b");
    this.bindAction("accept-reconciled", detail, "accept_reconciled");
    const form = this.el("correct-form") as HTMLFormElement;
    form.onsubmit = (event) => {
      event.preventDefault();
      const value = (this.el("correct-value") as HTMLInputElement).value;
      const note = (this.el("correct-note") as HTMLInputElement).value;
      // Optimistic update, then re-render from the server's confirmation.
      this.el("detail-value").textContent = value;
      void this.submitReview(detail, "correct", value, note || undefined);
    };
  }

  private bindAction(buttonId: string, detail: CellDetail, action: ReviewAction): void {
    (this.el(buttonId) as HTMLButtonElement).onclick = () =>
      void this.submitReview(detail, action);
  }

  private async submitReview(
    detail: CellDetail,
    action: ReviewAction,
    value?: string,
    note?: string,
  ): Promise<void> {
    const updated = await this.guard(() =>
      this.api.postReview(detail.doc_id, detail.column_id, action, value, note),
    );
    if (!updated) return;
    this.renderDetail(updated);
    if (this.currentDoc) void this.loadTable(this.currentDoc);
  }
}

function escapeHtml(value: string): string {
  return value
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

declare global {
  interface Window {
    EVIDEX_API_BASE?: string;
  }
}

window.addEventListener("DOMContentLoaded", () => {
  new ReviewApp(window.EVIDEX_API_BASE ?? "");
});
