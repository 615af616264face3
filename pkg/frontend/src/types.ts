// Payload shapes mirrored 1:1 from the review service; the client never
// derives values locally, it renders what the server sends.

export interface DocumentSummary {
  doc_id: string;
  versions: number[];
  latest_version: number;
  mode: string | null;
  n_cells: number;
  flagged: number;
}

export interface TableCell {
  column_id: string;
  name: string;
  group: string;
  category: string | null;
  effective_value: string;
  label: string;
  low_confidence: boolean;
  review_status: string;
}

export interface TablePayload {
  doc_id: string;
  version: number;
  flagged: number;
  cells: TableCell[];
}

export interface Attribution {
  page: number;
  modality: string;
  verbatim_quote: string | null;
}

export interface AgentCandidate {
  column_id: string;
  value: string;
  reasoning: string;
  attribution: Attribution | null;
  agent: string;
  failed: boolean;
}

export interface ColumnMeta {
  id: string;
  name: string;
  definition: string;
  category: string;
  group: string;
}

export interface PageInfo {
  page: number;
  text: string | null;
  image_available: boolean;
  image_url?: string | null;
}

export interface ReviewEvent {
  ts: number;
  version: number;
  column_id: string;
  action: string;
  value: string | null;
  note: string | null;
  before: { status: string; value: string };
  after: { status: string; value: string };
}

export interface CellDetail {
  doc_id: string;
  column_id: string;
  column: ColumnMeta | null;
  effective_value: string;
  review_status: string;
  human_value: string | null;
  reviewer_note: string | null;
  label: string;
  low_confidence: boolean;
  pass: string;
  final_value: string;
  corrected_value: string | null;
  reconciler_reasoning: string;
  verified_without_image: boolean;
  agent_a: AgentCandidate;
  agent_b: AgentCandidate;
  pages: PageInfo[];
  history: ReviewEvent[];
}

export type ReviewAction = "accept_a" | "accept_b" | "accept_reconciled" | "correct";
