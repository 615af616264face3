// Evidence-table view model: rows grouped by clinical section, flagged cells
// surfaced. Pure functions over the service payload; no value derivation.

import type { TableCell, TablePayload } from "./types.js";

export interface SectionGroup {
  group: string;
  cells: TableCell[];
}

/** Group cells by section, preserving the order sections first appear in the
 *  payload (which follows schema order). */
export function groupBySection(cells: TableCell[]): SectionGroup[] {
  const sections: SectionGroup[] = [];
  const byName = new Map<string, SectionGroup>();
  for (const cell of cells) {
    let section = byName.get(cell.group);
    if (!section) {
      section = { group: cell.group, cells: [] };
      byName.set(cell.group, section);
      sections.push(section);
    }
    section.cells.push(cell);
  }
  return sections;
}

export function flaggedCells(cells: TableCell[]): TableCell[] {
  return cells.filter((cell) => cell.low_confidence);
}

export interface TableView {
  docId: string;
  version: number;
  flaggedCount: number;
  sections: SectionGroup[];
  isEmpty: boolean;
}

export function buildTableView(payload: TablePayload): TableView {
  return {
    docId: payload.doc_id,
    version: payload.version,
    flaggedCount: flaggedCells(payload.cells).length,
    sections: groupBySection(payload.cells),
    isEmpty: payload.cells.length === 0,
  };
}
