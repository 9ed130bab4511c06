/**
 * Spec drafting and client-side validation.
 *
 * The analyst assigns a role to each column, picks balancing moments, and
 * chooses a regression template; `buildSpecDraft` turns those actions into a
 * server-submittable spec or a list of blocking messages. The checks here
 * replicate the server's validation rules (disjoint roles, moment/type
 * compatibility, template arity) so a round trip to a 4xx response is the
 * exception, not the editing loop.
 */

import {
  type ColumnSummary,
  type MomentChoice,
  type SpecPayload,
  type TemplateKind,
  MOMENT_CHOICES,
  TEMPLATE_KINDS,
} from "./types.js";

export type Role = "outcome" | "treatment" | "covariate" | "mediator" | "ignore";

export const ROLES: readonly Role[] = ["outcome", "treatment", "covariate", "mediator", "ignore"];

/** One analyst gesture: assign `column` to `role`, optionally picking the
 * moments to balance for it. Later actions on the same column refine the
 * moments; a different role for the same column is a conflict, not an update,
 * so stale assignments surface instead of being silently dropped. */
export interface RoleAction {
  column: string;
  role: Role;
  moments?: MomentChoice;
}

export interface DraftActions {
  roles: RoleAction[];
  template?: { kind: TemplateKind; f?: string[]; gExtra?: string[] };
  selection?: { enabled: boolean; alpha0: number };
  ciLevel?: number;
}

/** Mirror of the server-side analysis spec plus the console's own state:
 * the full per-column role map (including "ignore"), per-column moment
 * choices, the selection toggle, and the CI level. */
export interface SpecDraft {
  roles: Record<string, Role>;
  moments: Record<string, MomentChoice>;
  outcomes: string[];
  treatment: string;
  covariates: string[];
  mediators: string[];
  categorical: Record<string, string[]>;
  template: { kind: TemplateKind; f: string[]; gExtra: string[] };
  selection: { enabled: boolean; alpha0: number };
  ciLevel: number;
}

export type DraftResult =
  | { ok: true; draft: SpecDraft }
  | { ok: false; messages: string[] };

const DEFAULT_ALPHA0 = 0.05;

function defaultMoments(kind: "numeric" | "categorical"): MomentChoice {
  return kind === "categorical" ? "one_hot" : "mean";
}

/**
 * Fold the analyst's actions into a complete draft, or report why not.
 *
 * Every blocking problem is collected rather than failing fast, so the
 * console can flag all offending rows in one pass.
 */
export function buildSpecDraft(columns: ColumnSummary[], actions: DraftActions): DraftResult {
  const messages: string[] = [];
  const byName = new Map<string, ColumnSummary>();
  for (const col of columns) {
    if (byName.has(col.name)) {
      messages.push(`duplicate column name '${col.name}' in the dataset summary`);
    }
    byName.set(col.name, col);
  }

  const roles = new Map<string, Role>();
  const moments = new Map<string, MomentChoice>();
  const order: string[] = [];
  for (const action of actions.roles) {
    const col = byName.get(action.column);
    if (col === undefined) {
      messages.push(`unknown column '${action.column}'`);
      continue;
    }
    const previous = roles.get(action.column);
    if (previous !== undefined && previous !== action.role) {
      messages.push(
        `column '${action.column}' assigned to both ${previous} and ${action.role} roles`,
      );
      continue;
    }
    if (previous === undefined) {
      roles.set(action.column, action.role);
      order.push(action.column);
    }
    if (action.moments !== undefined) {
      if (!MOMENT_CHOICES.includes(action.moments)) {
        messages.push(`unknown moment choice '${action.moments}' for column '${action.column}'`);
      } else {
        moments.set(action.column, action.moments);
      }
    }
  }

  const pick = (role: Role) => order.filter((name) => roles.get(name) === role);
  const outcomes = pick("outcome");
  const treatments = pick("treatment");
  const covariates = pick("covariate");
  const mediators = pick("mediator");

  if (outcomes.length === 0) {
    messages.push("at least one outcome column is required");
  }
  if (treatments.length === 0) {
    messages.push("no treatment column assigned");
  } else if (treatments.length > 1) {
    messages.push(`more than one treatment column assigned: ${treatments.join(", ")}`);
  }

  const kindOf = (name: string) => byName.get(name)!.kind;
  for (const name of outcomes) {
    if (kindOf(name) === "categorical") {
      messages.push(`outcome column '${name}' must be numeric`);
    }
  }
  for (const name of treatments) {
    if (kindOf(name) === "categorical") {
      messages.push(`treatment column '${name}' cannot be categorical`);
    }
  }

  const categorical: Record<string, string[]> = {};
  for (const name of [...covariates, ...mediators]) {
    const col = byName.get(name)!;
    const chosen = moments.get(name) ?? defaultMoments(col.kind);
    moments.set(name, chosen);
    if (col.kind === "categorical") {
      const levels = col.levels ?? [];
      if (chosen !== "one_hot") {
        messages.push(`categorical column '${name}' can only be balanced with one_hot moments`);
      }
      if (levels.length < 2) {
        messages.push(`categorical column '${name}' needs at least two levels`);
      }
      if (new Set(levels).size !== levels.length) {
        messages.push(`categorical column '${name}' repeats a level`);
      }
      categorical[name] = [...levels];
    } else if (chosen === "one_hot") {
      messages.push(`one_hot moments require a categorical column, but '${name}' is numeric`);
    }
  }

  const template = {
    kind: actions.template?.kind ?? ("ttest" as TemplateKind),
    f: [...(actions.template?.f ?? [])],
    gExtra: [...(actions.template?.gExtra ?? [])],
  };
  if (!TEMPLATE_KINDS.includes(template.kind)) {
    messages.push(`unknown regression template '${template.kind}'`);
  }
  if (template.kind !== "custom" && (template.f.length > 0 || template.gExtra.length > 0)) {
    messages.push(`template '${template.kind}' does not take feature columns`);
  }
  if (template.kind === "custom") {
    const overlap = template.f.filter((name) => template.gExtra.includes(name));
    if (overlap.length > 0) {
      messages.push(`custom template lists ${overlap.join(", ")} in both f and g_extra`);
    }
    for (const name of [...template.f, ...template.gExtra]) {
      const col = byName.get(name);
      if (col === undefined) {
        messages.push(`unknown column '${name}' in the custom template`);
      } else if (col.kind === "categorical") {
        messages.push(`custom template feature '${name}' must be a numeric column`);
      } else if (roles.get(name) === "treatment" || roles.get(name) === "outcome") {
        messages.push(`custom template feature '${name}' cannot reuse a treatment or outcome column`);
      }
    }
  }
  if (template.kind === "ttest" && outcomes.length > 1) {
    messages.push("ttest template requires exactly one outcome column");
  }
  if ((template.kind === "ancova" || template.kind === "adjusted") && covariates.length === 0) {
    messages.push(`${template.kind} template requires at least one covariate column`);
  }

  const selection = {
    enabled: actions.selection?.enabled ?? false,
    alpha0: actions.selection?.alpha0 ?? DEFAULT_ALPHA0,
  };
  if (selection.enabled && !(selection.alpha0 > 0 && selection.alpha0 < 1)) {
    messages.push(`selection alpha0 must lie in (0, 1), got ${selection.alpha0}`);
  }
  const ciLevel = actions.ciLevel ?? 0.9;
  if (!(ciLevel > 0 && ciLevel < 1)) {
    messages.push(`ci_level must lie in (0, 1), got ${ciLevel}`);
  }

  if (messages.length > 0) {
    return { ok: false, messages };
  }

  const roleMap: Record<string, Role> = {};
  for (const col of columns) {
    roleMap[col.name] = roles.get(col.name) ?? "ignore";
  }
  const momentMap: Record<string, MomentChoice> = {};
  for (const name of [...covariates, ...mediators]) {
    momentMap[name] = moments.get(name)!;
  }
  return {
    ok: true,
    draft: {
      roles: roleMap,
      moments: momentMap,
      outcomes,
      treatment: treatments[0]!,
      covariates,
      mediators,
      categorical,
      template,
      selection,
      ciLevel,
    },
  };
}

/** Serialize a draft into the JSON object the service accepts. */
export function specPayload(draft: SpecDraft): SpecPayload {
  const roster = (names: string[]) =>
    names.map((column) => ({ column, moments: draft.moments[column]! }));
  const payload: SpecPayload = {
    outcomes: [...draft.outcomes],
    treatment: draft.treatment,
    template:
      draft.template.kind === "custom"
        ? { kind: draft.template.kind, f: [...draft.template.f], g_extra: [...draft.template.gExtra] }
        : { kind: draft.template.kind },
    covariates: roster(draft.covariates),
    mediators: roster(draft.mediators),
    categorical: Object.fromEntries(
      Object.entries(draft.categorical).map(([name, levels]) => [name, [...levels]]),
    ),
    ci_level: draft.ciLevel,
  };
  if (draft.selection.enabled) {
    payload.selection = { alpha0: draft.selection.alpha0 };
  }
  return payload;
}

/** Read the column facts back out of a server upload summary. */
export function columnsFromUploadSummary(summary: {
  columns: Record<string, { kind: string; counts?: Record<string, number> }>;
}): ColumnSummary[] {
  return Object.entries(summary.columns).map(([name, col]) =>
    col.kind === "categorical"
      ? { name, kind: "categorical", levels: Object.keys(col.counts ?? {}) }
      : { name, kind: "numeric" },
  );
}
