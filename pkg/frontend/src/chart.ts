/**
 * Decomposition chart model.
 *
 * `renderDecompositionChart` is a pure function of the result document: same
 * document, same model, so the chart is snapshot-testable and the console
 * shows exactly the numbers the service computed. Layout (scales, pixel
 * geometry) lives in `chartSvg`, which turns a model into a standalone SVG
 * string with no DOM dependency.
 */

import type { AdjustedBlock, IntervalRow, ResultDocument } from "./types.js";

/** Fixed bar order; the observed discrepancy is a reference line, not a bar. */
export const BAR_ORDER = [
  "sampling_variability",
  "covariate_shift",
  "mediation_shift",
  "residual",
] as const;

export interface ChartBar {
  component: string;
  estimate: number;
  ciLo: number;
  ciHi: number;
  /** True for bars from the selection-adjusted block. */
  adjusted: boolean;
}

export interface ChartModel {
  /** Unadjusted bars first, then adjusted ones, each group in BAR_ORDER. */
  bars: ChartBar[];
  /** Horizontal reference at the observed discrepancy, with its interval. */
  reference: { value: number; ciLo: number; ciHi: number };
  /** True when adjusted bars overlay the unadjusted ones. */
  overlay: boolean;
  level: number | null;
  notices: string[];
}

/** Whiskers are drawn exactly when both interval ends are finite. */
export function hasWhisker(bar: ChartBar): boolean {
  return Number.isFinite(bar.ciLo) && Number.isFinite(bar.ciHi);
}

function asNumber(value: unknown, where: string): number {
  if (typeof value !== "number" || Number.isNaN(value)) {
    throw new Error(`result document: ${where} is not a number`);
  }
  return value;
}

function barsFromRows(rows: IntervalRow[], adjusted: boolean, notices: string[]): ChartBar[] {
  const byName = new Map<string, IntervalRow>();
  for (const row of rows) {
    if (typeof row !== "object" || row === null || typeof row.name !== "string") {
      throw new Error("result document: component entries need a 'name' field");
    }
    byName.set(row.name, row);
  }
  const bars: ChartBar[] = [];
  for (const name of BAR_ORDER) {
    const row = byName.get(name);
    if (row === undefined) {
      const block = adjusted ? "adjusted" : "unadjusted";
      notices.push(`no ${name} component in the ${block} results; bar omitted`);
      continue;
    }
    bars.push({
      component: name,
      estimate: asNumber(row.estimate, `${name}.estimate`),
      ciLo: asNumber(row.ci_lo, `${name}.ci_lo`),
      ciHi: asNumber(row.ci_hi, `${name}.ci_hi`),
      adjusted,
    });
  }
  return bars;
}

/**
 * Build the chart model for a result document.
 *
 * Missing components are omitted with a notice rather than failing; a
 * document without a components list at all is malformed and throws.
 */
export function renderDecompositionChart(doc: ResultDocument): ChartModel {
  if (typeof doc !== "object" || doc === null || !Array.isArray(doc.components)) {
    throw new Error("not a result document: 'components' list is missing");
  }
  if (typeof doc.observed !== "object" || doc.observed === null) {
    throw new Error("not a result document: 'observed' block is missing");
  }
  const notices: string[] = [];
  const bars = barsFromRows(doc.components, false, notices);

  const adjusted: AdjustedBlock | null = doc.adjusted ?? null;
  let overlay = false;
  if (adjusted !== null) {
    if (!Array.isArray(adjusted.components)) {
      throw new Error("result document: 'adjusted' must hold a components list");
    }
    bars.push(...barsFromRows(adjusted.components, true, notices));
    overlay = true;
  }

  return {
    bars,
    reference: {
      value: asNumber(doc.observed.estimate, "observed.estimate"),
      ciLo: asNumber(doc.observed.ci_lo, "observed.ci_lo"),
      ciHi: asNumber(doc.observed.ci_hi, "observed.ci_hi"),
    },
    overlay,
    level: typeof doc.metadata?.level === "number" ? doc.metadata.level : null,
    notices,
  };
}

// -- SVG rendering -----------------------------------------------------------

const WIDTH = 680;
const HEIGHT = 380;
const MARGIN = { top: 24, right: 16, bottom: 56, left: 64 };

const LABELS: Record<string, string> = {
  sampling_variability: "sampling",
  covariate_shift: "covariate",
  mediation_shift: "mediation",
  residual: "residual",
};

function esc(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

function ticks(lo: number, hi: number, count: number): number[] {
  const span = hi - lo;
  if (!(span > 0)) return [lo];
  const raw = span / count;
  const mag = 10 ** Math.floor(Math.log10(raw));
  const step = [1, 2, 5, 10].map((m) => m * mag).find((s) => span / s <= count) ?? mag * 10;
  const start = Math.ceil(lo / step) * step;
  const out: number[] = [];
  for (let v = start; v <= hi + step * 1e-9; v += step) out.push(v);
  return out;
}

/** Render a chart model to a self-contained SVG document. */
export function chartSvg(model: ChartModel): string {
  const groups = new Map<string, ChartBar[]>();
  for (const bar of model.bars) {
    const list = groups.get(bar.component) ?? [];
    list.push(bar);
    groups.set(bar.component, list);
  }
  const slots = [...groups.keys()];

  const values = [0, model.reference.value, model.reference.ciLo, model.reference.ciHi];
  for (const bar of model.bars) {
    values.push(bar.estimate);
    if (hasWhisker(bar)) values.push(bar.ciLo, bar.ciHi);
  }
  const finite = values.filter((v) => Number.isFinite(v));
  let lo = Math.min(...finite);
  let hi = Math.max(...finite);
  if (lo === hi) {
    lo -= 1;
    hi += 1;
  }
  const pad = 0.06 * (hi - lo);
  lo -= pad;
  hi += pad;

  const plotW = WIDTH - MARGIN.left - MARGIN.right;
  const plotH = HEIGHT - MARGIN.top - MARGIN.bottom;
  const y = (v: number) => MARGIN.top + plotH * (1 - (v - lo) / (hi - lo));
  const slotW = plotW / Math.max(slots.length, 1);

  const parts: string[] = [];
  parts.push(
    `<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 ${WIDTH} ${HEIGHT}" ` +
      `font-family="sans-serif" font-size="12">`,
  );
  for (const tick of ticks(lo, hi, 6)) {
    const ty = y(tick);
    parts.push(
      `<line x1="${MARGIN.left}" x2="${WIDTH - MARGIN.right}" y1="${ty}" y2="${ty}" stroke="#eee"/>`,
      `<text x="${MARGIN.left - 6}" y="${ty + 4}" text-anchor="end">${esc(formatTick(tick))}</text>`,
    );
  }
  parts.push(
    `<line class="zero" x1="${MARGIN.left}" x2="${WIDTH - MARGIN.right}" ` +
      `y1="${y(0)}" y2="${y(0)}" stroke="#888"/>`,
  );

  for (const [slot, name] of slots.entries()) {
    const group = groups.get(name)!;
    const x0 = MARGIN.left + slot * slotW;
    const lane = slotW / (group.length + 1);
    for (const [i, bar] of group.entries()) {
      const cx = x0 + lane * (i + 1);
      const w = Math.min(lane * 0.72, 48);
      const top = Math.min(y(0), y(bar.estimate));
      const h = Math.abs(y(bar.estimate) - y(0));
      const cls = bar.adjusted ? "bar adjusted" : "bar";
      const fill = bar.adjusted ? "#9467bd" : "#4c78a8";
      parts.push(
        `<rect class="${cls}" data-component="${esc(bar.component)}" x="${cx - w / 2}" ` +
          `y="${top}" width="${w}" height="${h}" fill="${fill}" fill-opacity="0.85"/>`,
      );
      if (hasWhisker(bar)) {
        const yLo = y(bar.ciLo);
        const yHi = y(bar.ciHi);
        parts.push(
          `<line class="whisker" x1="${cx}" x2="${cx}" y1="${yLo}" y2="${yHi}" stroke="#333"/>`,
          `<line x1="${cx - 6}" x2="${cx + 6}" y1="${yLo}" y2="${yLo}" stroke="#333"/>`,
          `<line x1="${cx - 6}" x2="${cx + 6}" y1="${yHi}" y2="${yHi}" stroke="#333"/>`,
        );
      }
    }
    parts.push(
      `<text x="${x0 + slotW / 2}" y="${HEIGHT - MARGIN.bottom + 18}" text-anchor="middle">` +
        `${esc(LABELS[name] ?? name)}</text>`,
    );
  }

  const refY = y(model.reference.value);
  parts.push(
    `<line class="reference" x1="${MARGIN.left}" x2="${WIDTH - MARGIN.right}" ` +
      `y1="${refY}" y2="${refY}" stroke="#d62728" stroke-dasharray="6 4"/>`,
    `<text x="${WIDTH - MARGIN.right}" y="${refY - 5}" text-anchor="end" fill="#d62728">` +
      `observed ${esc(formatTick(model.reference.value))}</text>`,
  );
  if (model.overlay) {
    parts.push(
      `<text x="${MARGIN.left}" y="${MARGIN.top - 8}" fill="#555">` +
        `solid: unadjusted, violet: selection-adjusted</text>`,
    );
  }
  if (model.level !== null) {
    parts.push(
      `<text x="${WIDTH - MARGIN.right}" y="${MARGIN.top - 8}" text-anchor="end" fill="#555">` +
        `${esc(String(Math.round(model.level * 100)))}% intervals</text>`,
    );
  }
  parts.push("</svg>");
  return parts.join("\n");
}

function formatTick(v: number): string {
  if (v === 0) return "0";
  const abs = Math.abs(v);
  if (abs >= 1000 || abs < 0.01) return v.toExponential(1);
  return String(Number(v.toPrecision(3)));
}
