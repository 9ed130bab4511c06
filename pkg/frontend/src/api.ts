/**
 * Thin fetch client for the shiftdiag service.
 *
 * Runs unchanged in the browser and under node's built-in fetch, which is
 * what the round-trip test uses. Decompose keeps the raw response text next
 * to the parsed document because the service's serialization is canonical;
 * the text is what an analyst downloads and what golden comparisons use.
 */

import type { ErrorBody, ResultDocument, SpecPayload, UploadResponse } from "./types.js";

export class ApiError extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
    readonly detail: unknown = null,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

export interface DecomposeRequest {
  original_id: string;
  replication_id: string;
  spec: SpecPayload;
  selection?: { alpha0: number };
  level?: number;
}

export interface DecomposeResult {
  doc: ResultDocument;
  text: string;
}

async function raiseForStatus(response: Response): Promise<void> {
  if (response.ok) return;
  let body: Partial<ErrorBody> = {};
  try {
    body = (await response.json()) as Partial<ErrorBody>;
  } catch {
    // non-JSON error page; fall through to the status line
  }
  throw new ApiError(
    response.status,
    body.code ?? "http_error",
    body.message ?? `request failed with status ${response.status}`,
    body.detail ?? null,
  );
}

export class ConsoleApi {
  constructor(private readonly base: string = "") {}

  private url(path: string): string {
    return this.base + path;
  }

  async health(): Promise<{ status: string; datasets: number }> {
    const response = await fetch(this.url("/api/health"));
    await raiseForStatus(response);
    return response.json();
  }

  async version(): Promise<{ engine: string; version: string }> {
    const response = await fetch(this.url("/api/version"));
    await raiseForStatus(response);
    return response.json();
  }

  /** Upload one CSV together with the spec used to read it. */
  async uploadDataset(csv: Blob | string, filename: string, spec: SpecPayload): Promise<UploadResponse> {
    const form = new FormData();
    const blob = typeof csv === "string" ? new Blob([csv], { type: "text/csv" }) : csv;
    form.append("file", blob, filename);
    form.append("spec", JSON.stringify(spec));
    const response = await fetch(this.url("/api/datasets"), { method: "POST", body: form });
    await raiseForStatus(response);
    return response.json();
  }

  async decompose(request: DecomposeRequest): Promise<DecomposeResult> {
    const response = await fetch(this.url("/api/decompose"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(request),
    });
    await raiseForStatus(response);
    const text = await response.text();
    return { doc: JSON.parse(text) as ResultDocument, text };
  }
}
