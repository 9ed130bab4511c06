/**
 * Console wiring: file pickers, the column-role table, and the run loop.
 *
 * All statistics arrive from the service; this file only moves DOM state
 * into `buildSpecDraft` and result documents into the chart renderer. Runs
 * are queued so at most one decompose request is in flight, and every
 * completed run lands in the history panel for side-by-side comparison.
 */

import { ApiError, ConsoleApi } from "./api.js";
import { chartSvg, renderDecompositionChart } from "./chart.js";
import { mergeColumns, sniffColumns } from "./csvsniff.js";
import { buildSpecDraft, specPayload, type DraftActions, type Role, ROLES } from "./specdraft.js";
import type { ColumnSummary, MomentChoice, ResultDocument, TemplateKind } from "./types.js";

const api = new ConsoleApi("");

interface UploadKey {
  name: string;
  size: number;
  lastModified: number;
  specJson: string;
}

const state = {
  columns: [] as ColumnSummary[],
  files: { original: null as File | null, replication: null as File | null },
  uploads: new Map<string, string>(),
  runCount: 0,
  queue: Promise.resolve(),
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

function setStatus(text: string) {
  el<HTMLElement>("status").textContent = text;
}

function showMessages(messages: string[], kind: "error" | "warning") {
  const box = el<HTMLElement>("messages");
  box.innerHTML = "";
  box.className = messages.length > 0 ? `messages ${kind}` : "messages";
  for (const message of messages) {
    const item = document.createElement("li");
    item.textContent = message;
    box.appendChild(item);
  }
}

// -- column table -------------------------------------------------------------

function momentOptions(col: ColumnSummary): MomentChoice[] {
  return col.kind === "categorical" ? ["one_hot"] : ["mean", "mean_and_second_moment"];
}

function fillMomentOptions(select: HTMLSelectElement, col: ColumnSummary) {
  select.innerHTML = "";
  for (const option of momentOptions(col)) {
    const opt = document.createElement("option");
    opt.value = option;
    opt.textContent = option;
    select.appendChild(opt);
  }
}

function renderColumnTable() {
  const body = el<HTMLTableSectionElement>("columns-body");
  body.innerHTML = "";
  for (const col of state.columns) {
    const row = document.createElement("tr");

    const name = document.createElement("td");
    name.textContent = col.name;

    const kind = document.createElement("td");
    const canRecode =
      col.kind === "numeric" && col.levels !== undefined && col.levels.length >= 2;
    let kindSelect: HTMLSelectElement | null = null;
    if (canRecode) {
      // 0/1-coded factors sniff as numeric; let the analyst re-declare them
      kindSelect = document.createElement("select");
      for (const option of ["numeric", "categorical"]) {
        const opt = document.createElement("option");
        opt.value = option;
        opt.textContent = option === "categorical" ? `categorical (${col.levels!.length})` : option;
        kindSelect.appendChild(opt);
      }
      kindSelect.value = col.kind;
      kind.appendChild(kindSelect);
    } else {
      kind.textContent =
        col.kind === "categorical" ? `categorical (${(col.levels ?? []).length})` : "numeric";
    }

    const roleCell = document.createElement("td");
    const role = document.createElement("select");
    role.dataset["column"] = col.name;
    role.className = "role";
    for (const option of ROLES) {
      const opt = document.createElement("option");
      opt.value = option;
      opt.textContent = option;
      role.appendChild(opt);
    }
    role.value = "ignore";
    roleCell.appendChild(role);

    const momentCell = document.createElement("td");
    const moments = document.createElement("select");
    moments.dataset["column"] = col.name;
    moments.className = "moments";
    fillMomentOptions(moments, col);
    moments.disabled = true;
    momentCell.appendChild(moments);

    role.addEventListener("change", () => {
      moments.disabled = role.value !== "covariate" && role.value !== "mediator";
    });
    kindSelect?.addEventListener("change", () => {
      col.kind = kindSelect!.value as ColumnSummary["kind"];
      fillMomentOptions(moments, col);
    });

    row.append(name, kind, roleCell, momentCell);
    body.appendChild(row);
  }
  el<HTMLElement>("spec-section").hidden = state.columns.length === 0;
}

async function refreshColumns() {
  const { original, replication } = state.files;
  if (original === null || replication === null) return;
  try {
    const a = sniffColumns(await original.text());
    const b = sniffColumns(await replication.text());
    const merged = mergeColumns(a, b);
    state.columns = merged.columns;
    showMessages(merged.warnings, "warning");
    renderColumnTable();
    setStatus("assign roles, then run");
  } catch (err) {
    showMessages([String(err instanceof Error ? err.message : err)], "error");
  }
}

// -- drafting -----------------------------------------------------------------

function actionsFromDom(): DraftActions {
  const roles: DraftActions["roles"] = [];
  for (const select of document.querySelectorAll<HTMLSelectElement>("select.role")) {
    const column = select.dataset["column"]!;
    const role = select.value as Role;
    if (role === "ignore") continue;
    const momentSelect = document.querySelector<HTMLSelectElement>(
      `select.moments[data-column="${CSS.escape(column)}"]`,
    );
    const action: DraftActions["roles"][number] = { column, role };
    if ((role === "covariate" || role === "mediator") && momentSelect !== null) {
      action.moments = momentSelect.value as MomentChoice;
    }
    roles.push(action);
  }
  const kind = el<HTMLSelectElement>("template-kind").value as TemplateKind;
  const parse = (id: string) =>
    el<HTMLInputElement>(id)
      .value.split(",")
      .map((name) => name.trim())
      .filter((name) => name.length > 0);
  const actions: DraftActions = {
    roles,
    template: { kind, f: parse("custom-f"), gExtra: parse("custom-g") },
    ciLevel: Number(el<HTMLInputElement>("ci-level").value),
  };
  if (el<HTMLInputElement>("selection-enabled").checked) {
    actions.selection = { enabled: true, alpha0: Number(el<HTMLInputElement>("selection-alpha0").value) };
  }
  return actions;
}

async function uploadOnce(file: File, specJson: string): Promise<string> {
  const key: UploadKey = { name: file.name, size: file.size, lastModified: file.lastModified, specJson };
  const cacheKey = JSON.stringify(key);
  const hit = state.uploads.get(cacheKey);
  if (hit !== undefined) return hit;
  const spec = JSON.parse(specJson);
  const uploaded = await api.uploadDataset(file, file.name, spec);
  state.uploads.set(cacheKey, uploaded.id);
  return uploaded.id;
}

async function runOnce(): Promise<void> {
  const { original, replication } = state.files;
  if (original === null || replication === null) {
    showMessages(["choose both study files first"], "error");
    return;
  }
  const result = buildSpecDraft(state.columns, actionsFromDom());
  if (!result.ok) {
    showMessages(result.messages, "error");
    return;
  }
  showMessages([], "warning");
  const spec = specPayload(result.draft);
  const specJson = JSON.stringify(spec);
  try {
    setStatus("uploading studies…");
    const originalId = await uploadOnce(original, specJson);
    const replicationId = await uploadOnce(replication, specJson);
    setStatus("decomposing…");
    const { doc, text } = await api.decompose({
      original_id: originalId,
      replication_id: replicationId,
      spec,
    });
    showResult(doc, text, specJson);
    setStatus("done");
  } catch (err) {
    if (err instanceof ApiError) {
      showMessages([`${err.code}: ${err.message}`], "error");
    } else {
      showMessages([String(err instanceof Error ? err.message : err)], "error");
    }
    setStatus("failed");
  }
}

// -- results ------------------------------------------------------------------

function formatNumber(v: number): string {
  return Number(v.toPrecision(6)).toString();
}

function resultTable(doc: ResultDocument): HTMLTableElement {
  const table = document.createElement("table");
  table.className = "numbers";
  const head = table.createTHead().insertRow();
  for (const label of ["component", "estimate", "ci lo", "ci hi"]) {
    const cell = document.createElement("th");
    cell.textContent = label;
    head.appendChild(cell);
  }
  const body = table.createTBody();
  const add = (name: string, estimate: number, lo: number, hi: number) => {
    const row = body.insertRow();
    for (const value of [name, formatNumber(estimate), formatNumber(lo), formatNumber(hi)]) {
      row.insertCell().textContent = value;
    }
  };
  add("observed", doc.observed.estimate, doc.observed.ci_lo, doc.observed.ci_hi);
  for (const row of doc.components) add(row.name, row.estimate, row.ci_lo, row.ci_hi);
  if (doc.adjusted !== null) {
    add(
      "population discrepancy (adjusted)",
      doc.adjusted.population_discrepancy.estimate,
      doc.adjusted.population_discrepancy.ci_lo,
      doc.adjusted.population_discrepancy.ci_hi,
    );
    for (const row of doc.adjusted.components) {
      add(`${row.name} (adjusted)`, row.estimate, row.ci_lo, row.ci_hi);
    }
  }
  return table;
}

function showResult(doc: ResultDocument, text: string, specJson: string) {
  const model = renderDecompositionChart(doc);
  el<HTMLElement>("chart").innerHTML = chartSvg(model);
  showMessages([...model.notices, ...doc.warnings], "warning");

  const meta = el<HTMLElement>("result-meta");
  meta.innerHTML = "";
  meta.appendChild(resultTable(doc));
  const download = document.createElement("a");
  download.textContent = "download result JSON";
  download.href = URL.createObjectURL(new Blob([text], { type: "application/json" }));
  download.download = "decomposition.json";
  meta.appendChild(download);

  state.runCount += 1;
  const entry = document.createElement("details");
  const label = document.createElement("summary");
  label.textContent = `run ${state.runCount}: observed ${formatNumber(doc.observed.estimate)}`;
  entry.appendChild(label);
  const chart = document.createElement("div");
  chart.innerHTML = chartSvg(model);
  entry.appendChild(chart);
  const specBlock = document.createElement("pre");
  specBlock.textContent = JSON.stringify(JSON.parse(specJson), null, 2);
  entry.appendChild(specBlock);
  el<HTMLElement>("history").prepend(entry);
}

// -- bootstrap ----------------------------------------------------------------

export function main() {
  el<HTMLInputElement>("original-file").addEventListener("change", (event) => {
    state.files.original = (event.target as HTMLInputElement).files?.[0] ?? null;
    void refreshColumns();
  });
  el<HTMLInputElement>("replication-file").addEventListener("change", (event) => {
    state.files.replication = (event.target as HTMLInputElement).files?.[0] ?? null;
    void refreshColumns();
  });
  el<HTMLSelectElement>("template-kind").addEventListener("change", () => {
    const custom = el<HTMLSelectElement>("template-kind").value === "custom";
    el<HTMLElement>("custom-features").hidden = !custom;
  });
  el<HTMLInputElement>("selection-enabled").addEventListener("change", () => {
    el<HTMLInputElement>("selection-alpha0").disabled =
      !el<HTMLInputElement>("selection-enabled").checked;
  });
  el<HTMLButtonElement>("run").addEventListener("click", () => {
    // serialize runs: a click during a run queues exactly one more attempt
    state.queue = state.queue.then(runOnce, runOnce);
  });
  void api
    .version()
    .then((v) => setStatus(`${v.engine} ${v.version}: choose the two study files`))
    .catch(() => setStatus("service unreachable; is the server running?"));
}

main();
