import type {
  CellDetail,
  DocumentSummary,
  ReviewAction,
  TablePayload,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

/** Thin typed client for the /api/v1 review endpoints. All state changes
 *  round-trip through the service; nothing is computed client-side. */
export class ReviewApi {
  constructor(private baseUrl: string = "") {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await fetch(`${this.baseUrl}${path}`, init);
    } catch (err) {
      throw new ApiError(0, `service unreachable: ${String(err)}`);
    }
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = (await response.json()) as { detail?: string };
        if (body.detail) detail = body.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  listDocuments(): Promise<DocumentSummary[]> {
    return this.request("/api/v1/documents");
  }

  getTable(docId: string, version?: number): Promise<TablePayload> {
    const query = version === undefined ? "" : `?version=${version}`;
    return this.request(`/api/v1/documents/${encodeURIComponent(docId)}/table${query}`);
  }

  getCell(docId: string, columnId: string): Promise<CellDetail> {
    return this.request(
      `/api/v1/documents/${encodeURIComponent(docId)}/cells/${encodeURIComponent(columnId)}`,
    );
  }

  postReview(
    docId: string,
    columnId: string,
    action: ReviewAction,
    value?: string,
    note?: string,
  ): Promise<CellDetail> {
    return this.request(
      `/api/v1/documents/${encodeURIComponent(docId)}/cells/${encodeURIComponent(columnId)}/review`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ action, value: value ?? null, note: note ?? null }),
      },
    );
  }

  async getSupervisionExport(docId: string): Promise<string> {
    const response = await fetch(
      `${this.baseUrl}/api/v1/documents/${encodeURIComponent(docId)}/export`,
    );
    if (!response.ok) throw new ApiError(response.status, response.statusText);
    return response.text();
  }
}
