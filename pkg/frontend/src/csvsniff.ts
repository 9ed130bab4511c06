/**
 * Local CSV sniffing: column names and rough kinds from the raw text.
 *
 * Only a preview for the role-assignment table; the service re-reads and
 * validates every cell on upload, so this parser favors being small over
 * being a full RFC-4180 implementation (it does handle quoted fields and
 * escaped quotes, the cases that actually occur in exported study tables).
 */

import type { ColumnSummary } from "./types.js";

const SAMPLE_ROWS = 200;
const MAX_LEVELS = 24;

/** Split one CSV record, honoring double-quoted fields. */
export function splitRecord(line: string): string[] {
  const fields: string[] = [];
  let cur = "";
  let quoted = false;
  for (let i = 0; i < line.length; i += 1) {
    const ch = line[i];
    if (quoted) {
      if (ch === '"') {
        if (line[i + 1] === '"') {
          cur += '"';
          i += 1;
        } else {
          quoted = false;
        }
      } else {
        cur += ch;
      }
    } else if (ch === '"') {
      quoted = true;
    } else if (ch === ",") {
      fields.push(cur);
      cur = "";
    } else {
      cur += ch;
    }
  }
  fields.push(cur);
  return fields;
}

/**
 * Summarize the columns of a CSV text: every sampled value numeric makes a
 * numeric column, anything else is categorical with its observed levels in
 * first-appearance order. Low-cardinality numeric columns keep their
 * distinct values too, so the analyst can re-declare a 0/1-coded factor as
 * categorical and still get a level set. High-cardinality text columns are
 * capped; they are almost certainly identifiers, not factors.
 */
export function sniffColumns(text: string, sampleRows: number = SAMPLE_ROWS): ColumnSummary[] {
  const lines = text.split(/\r\n|\n|\r/).filter((line) => line.length > 0);
  if (lines.length === 0) {
    throw new Error("empty file: header row required");
  }
  const header = splitRecord(lines[0]!).map((name) => name.trim());
  const numeric = header.map(() => true);
  const levels = header.map(() => new Map<string, null>());

  for (const line of lines.slice(1, 1 + sampleRows)) {
    const row = splitRecord(line);
    for (let i = 0; i < header.length; i += 1) {
      const value = (row[i] ?? "").trim();
      if (value === "") continue;
      if (numeric[i] && !Number.isFinite(Number(value))) {
        numeric[i] = false;
      }
      if (levels[i]!.size <= MAX_LEVELS) {
        levels[i]!.set(value, null);
      }
    }
  }

  return header.map((name, i) => {
    const seen = [...levels[i]!.keys()];
    if (numeric[i]) {
      return seen.length <= MAX_LEVELS
        ? { name, kind: "numeric", levels: seen }
        : { name, kind: "numeric" };
    }
    return { name, kind: "categorical", levels: seen.slice(0, MAX_LEVELS) };
  });
}

/** Merge the column views of the two studies; kinds must agree to be usable. */
export function mergeColumns(a: ColumnSummary[], b: ColumnSummary[]): {
  columns: ColumnSummary[];
  warnings: string[];
} {
  const warnings: string[] = [];
  const byName = new Map(a.map((col) => [col.name, col]));
  const columns: ColumnSummary[] = [...a];
  for (const col of b) {
    const seen = byName.get(col.name);
    if (seen === undefined) {
      warnings.push(`column '${col.name}' appears only in the replication file`);
      columns.push(col);
      byName.set(col.name, col);
      continue;
    }
    if (seen.kind !== col.kind) {
      warnings.push(`column '${col.name}' looks ${seen.kind} in one file and ${col.kind} in the other`);
    } else if (seen.levels !== undefined && col.levels !== undefined) {
      const merged = [...seen.levels];
      for (const level of col.levels) {
        if (!merged.includes(level)) merged.push(level);
      }
      seen.levels = merged;
    } else {
      delete seen.levels;
    }
  }
  for (const col of a) {
    if (!b.some((other) => other.name === col.name)) {
      warnings.push(`column '${col.name}' appears only in the original file`);
    }
  }
  return { columns, warnings };
}
