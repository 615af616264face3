// Quote highlighting: substring search after whitespace normalization,
// first occurrence only. When the quote cannot be located the caller shows
// a "quote not located" badge instead of failing.

export interface HighlightSegment {
  text: string;
  highlighted: boolean;
}

export interface HighlightResult {
  found: boolean;
  segments: HighlightSegment[];
}

export function normalizeWhitespace(value: string): string {
  return value.replace(/\s+/g, " ").trim();
}

function unmatched(text: string): HighlightResult {
  return { found: false, segments: [{ text, highlighted: false }] };
}

/** Locate the first occurrence of `quote` in `pageText`, tolerant of
 *  whitespace differences, and split the ORIGINAL text into segments so the
 *  view can highlight the exact span as it appears in the source. */
export function highlightQuote(pageText: string, quote: string | null | undefined): HighlightResult {
  if (!quote) return unmatched(pageText);
  const needle = normalizeWhitespace(quote);
  if (!needle) return unmatched(pageText);

  // Normalized copy of the page text with a map back to original offsets.
  const offsets: number[] = [];
  let normalized = "";
  let previousWasSpace = true;
  for (let i = 0; i < pageText.length; i++) {
    const ch = pageText[i]!;
    if (/\s/.test(ch)) {
      if (!previousWasSpace) {
        normalized += " ";
        offsets.push(i);
        previousWasSpace = true;
      }
    } else {
      normalized += ch;
      offsets.push(i);
      previousWasSpace = false;
    }
  }
  if (normalized.endsWith(" ")) {
    normalized = normalized.slice(0, -1);
    offsets.pop();
  }

  const at = normalized.indexOf(needle);
  if (at < 0) return unmatched(pageText);

  const start = offsets[at]!;
  const end = offsets[at + needle.length - 1]! + 1;
  const segments: HighlightSegment[] = [];
  if (start > 0) segments.push({ text: pageText.slice(0, start), highlighted: false });
  segments.push({ text: pageText.slice(start, end), highlighted: true });
  if (end < pageText.length) {
    segments.push({ text: pageText.slice(end), highlighted: false });
  }
  return { found: true, segments };
}

export function highlightedCount(result: HighlightResult): number {
  return result.segments.filter((segment) => segment.highlighted).length;
}
