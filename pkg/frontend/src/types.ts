/**
 * JSON shapes exchanged with the shiftdiag HTTP service.
 *
 * The console never computes statistics; these types only describe what the
 * service sends back, so every field here mirrors a key in the canonical
 * result document or the upload summary.
 */

export type MomentChoice = "mean" | "mean_and_second_moment" | "one_hot";

export type TemplateKind = "ttest" | "anova2" | "ancova" | "adjusted" | "custom";

export const MOMENT_CHOICES: readonly MomentChoice[] = [
  "mean",
  "mean_and_second_moment",
  "one_hot",
];

export const TEMPLATE_KINDS: readonly TemplateKind[] = [
  "ttest",
  "anova2",
  "ancova",
  "adjusted",
  "custom",
];

/** Analysis spec as the service accepts it (POST bodies and upload forms). */
export interface SpecPayload {
  outcomes: string[];
  treatment: string;
  template: { kind: TemplateKind; f?: string[]; g_extra?: string[] };
  covariates: { column: string; moments: MomentChoice }[];
  mediators: { column: string; moments: MomentChoice }[];
  categorical: Record<string, string[]>;
  selection?: { alpha0: number };
  ci_level: number;
}

/** One estimate with its confidence interval, as emitted by the service. */
export interface IntervalRow {
  name: string;
  estimate: number;
  se: number;
  ci_lo: number;
  ci_hi: number;
}

export interface WeightBlock {
  balance_residual: number;
  effective_sample_size: number;
  entropy: number;
  iterations: number;
}

export interface AdjustedBlock {
  selection: { alpha0: number; observed_z: number; z_threshold: number };
  population_discrepancy: { estimate: number; se: number; ci_lo: number; ci_hi: number };
  components: IntervalRow[];
}

export interface ResultDocument {
  metadata: {
    engine: string;
    version: string;
    spec_sha256: string;
    level: number;
    seed: number | null;
  };
  observed: { estimate: number; se: number; ci_lo: number; ci_hi: number };
  effects: {
    original: number;
    replication: number;
    covariate_balanced: number;
    fully_balanced: number;
  };
  components: IntervalRow[];
  adjusted: AdjustedBlock | null;
  balance: { covariate: WeightBlock | null; mediator: WeightBlock | null };
  warnings: string[];
}

/** Column facts the console works from when drafting a spec. Produced either
 * by the local CSV sniffer before upload or from the server's summary. */
export interface ColumnSummary {
  name: string;
  kind: "numeric" | "categorical";
  /** Observed distinct values in first-appearance order. Always present for
   * categorical columns; present for numeric ones when cardinality is low
   * enough that re-declaring the column as a coded factor makes sense. */
  levels?: string[];
}

export interface UploadSummary {
  n: number;
  n_treated: number;
  outcomes: string[];
  columns: Record<
    string,
    | { kind: "numeric"; mean: number; min: number; max: number }
    | { kind: "categorical"; counts: Record<string, number> }
  >;
}

export interface UploadResponse {
  id: string;
  summary: UploadSummary;
}

/** Error body for every non-2xx service response. */
export interface ErrorBody {
  code: string;
  message: string;
  detail: unknown;
}
