"""Study datasets, analysis specifications, and input validation.

A study is a rectangular CSV (RFC-4180, UTF-8, header row required) with one
row per randomized unit. The analysis specification declares which columns
play which role: one binary treatment column, one or more numeric outcome
columns, and optional covariate / mediator columns with the moments to
balance. Categorical columns must be declared with their full level set;
everything else is parsed as float64. Missing values are rejected, never
imputed.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

MOMENT_CHOICES = ("mean", "mean_and_second_moment", "one_hot")
TEMPLATE_KINDS = ("ttest", "anova2", "ancova", "adjusted", "custom")

# Shared-grid histogram resolution for the overlap density-ratio proxy.
OVERLAP_BINS = 10


@dataclass(frozen=True)
class MomentSpec:
    """One balanced column and the moments matched for it."""

    column: str
    moments: str

    def __post_init__(self):
        if self.moments not in MOMENT_CHOICES:
            raise ValidationError(
                f"unknown moment choice {self.moments!r}; expected one of {MOMENT_CHOICES}",
                column=self.column,
            )


@dataclass(frozen=True)
class TemplateSpec:
    """Regression template selecting the basis of the stacked regression.

    ``custom`` stacks an intercept plus ``f_columns`` as treatment-interacted
    features and an intercept plus ``f_columns`` plus ``g_extra_columns`` as
    baseline features, the same basis in every outcome slot.
    """

    kind: str
    f_columns: tuple[str, ...] = ()
    g_extra_columns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in TEMPLATE_KINDS:
            raise ValidationError(
                f"unknown regression template {self.kind!r}; expected one of {TEMPLATE_KINDS}"
            )
        if self.kind != "custom" and (self.f_columns or self.g_extra_columns):
            raise ValidationError(f"template {self.kind!r} does not take feature columns")
        overlap = set(self.f_columns) & set(self.g_extra_columns)
        if overlap:
            raise ValidationError(
                f"custom template lists {sorted(overlap)} in both f and g_extra"
            )


@dataclass(frozen=True)
class SelectionSpec:
    """Publication-selection model: the original study was reported because
    the two-sided p-value of its target coefficient fell below alpha0."""

    alpha0: float

    def __post_init__(self):
        if not (0.0 < self.alpha0 < 1.0):
            raise ValidationError(f"selection alpha0 must lie in (0, 1), got {self.alpha0}")


@dataclass(frozen=True)
class AnalysisSpec:
    """Declares roles, regression template, and balancing moments."""

    outcomes: tuple[str, ...]
    treatment: str
    template: TemplateSpec
    covariates: tuple[MomentSpec, ...] = ()
    mediators: tuple[MomentSpec, ...] = ()
    categorical: dict[str, tuple[str, ...]] = field(default_factory=dict)
    selection: SelectionSpec | None = None
    ci_level: float = 0.90

    def __post_init__(self):
        if not self.outcomes:
            raise ValidationError("at least one outcome column is required")
        if len(set(self.outcomes)) != len(self.outcomes):
            raise ValidationError("duplicate outcome columns")
        if not (0.0 < self.ci_level < 1.0):
            raise ValidationError(f"ci_level must lie in (0, 1), got {self.ci_level}")
        roles = {
            "outcome": set(self.outcomes),
            "treatment": {self.treatment},
            "covariate": {m.column for m in self.covariates},
            "mediator": {m.column for m in self.mediators},
        }
        names = list(roles)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                clash = roles[a] & roles[b]
                if clash:
                    raise ValidationError(
                        f"column {sorted(clash)[0]!r} assigned to both "
                        f"{a} and {b} roles"
                    )
        for roster, label in ((self.covariates, "covariate"), (self.mediators, "mediator")):
            seen = set()
            for m in roster:
                if m.column in seen:
                    raise ValidationError(f"duplicate {label} column", column=m.column)
                seen.add(m.column)
                if m.moments == "one_hot" and m.column not in self.categorical:
                    raise ValidationError(
                        "one_hot moments require declared categorical levels",
                        column=m.column,
                    )
                if m.moments != "one_hot" and m.column in self.categorical:
                    raise ValidationError(
                        "categorical columns can only be balanced with one_hot moments",
                        column=m.column,
                    )
        for col, levels in self.categorical.items():
            if len(levels) < 2:
                raise ValidationError("categorical columns need at least two levels", column=col)
            if len(set(levels)) != len(levels):
                raise ValidationError("duplicate categorical levels", column=col)
        if self.treatment in self.categorical:
            raise ValidationError("treatment column cannot be categorical", column=self.treatment)
        for col in self.outcomes:
            if col in self.categorical:
                raise ValidationError("outcome columns must be numeric", column=col)
        if self.template.kind == "ttest" and len(self.outcomes) != 1:
            raise ValidationError("ttest template requires exactly one outcome column")
        if self.template.kind in ("ancova", "adjusted") and not self.covariates:
            raise ValidationError(
                f"{self.template.kind} template requires at least one covariate column"
            )
        for col in self.template.f_columns + self.template.g_extra_columns:
            if col in self.categorical:
                raise ValidationError(
                    "custom template features must be numeric columns", column=col
                )
            if col == self.treatment or col in self.outcomes:
                raise ValidationError(
                    "custom template features cannot reuse treatment or outcome columns",
                    column=col,
                )

    # -- regression feature columns ------------------------------------

    def regression_covariates(self) -> tuple[str, ...]:
        """Columns entering ancova/adjusted baselines, in roster order."""
        return tuple(m.column for m in self.covariates)

    def balanced_columns(self) -> tuple[MomentSpec, ...]:
        return self.covariates + self.mediators

    # -- serialization ---------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "AnalysisSpec":
        if not isinstance(raw, dict):
            raise ValidationError("analysis spec must be a JSON object")
        known = {
            "outcomes",
            "treatment",
            "template",
            "covariates",
            "mediators",
            "categorical",
            "selection",
            "ci_level",
        }
        unknown = set(raw) - known
        if unknown:
            raise ValidationError(f"unknown spec fields: {sorted(unknown)}")

        def _roster(key):
            entries = raw.get(key, [])
            if not isinstance(entries, list):
                raise ValidationError(f"{key} must be a list")
            out = []
            for e in entries:
                if not isinstance(e, dict) or "column" not in e:
                    raise ValidationError(f"each {key} entry needs a 'column' field")
                out.append(MomentSpec(str(e["column"]), str(e.get("moments", "mean"))))
            return tuple(out)

        tmpl_raw = raw.get("template", {"kind": "ttest"})
        if isinstance(tmpl_raw, str):
            tmpl_raw = {"kind": tmpl_raw}
        if not isinstance(tmpl_raw, dict) or "kind" not in tmpl_raw:
            raise ValidationError("template must be a string or an object with a 'kind'")
        template = TemplateSpec(
            kind=str(tmpl_raw["kind"]),
            f_columns=tuple(str(c) for c in tmpl_raw.get("f", [])),
            g_extra_columns=tuple(str(c) for c in tmpl_raw.get("g_extra", [])),
        )

        categorical = {}
        for col, levels in (raw.get("categorical", {}) or {}).items():
            if not isinstance(levels, list):
                raise ValidationError("categorical levels must be a list", column=col)
            categorical[str(col)] = tuple(str(v) for v in levels)

        selection = None
        if raw.get("selection") is not None:
            sel = raw["selection"]
            if not isinstance(sel, dict) or "alpha0" not in sel:
                raise ValidationError("selection must be an object with 'alpha0'")
            selection = SelectionSpec(alpha0=float(sel["alpha0"]))

        try:
            outcomes = tuple(str(c) for c in raw["outcomes"])
            treatment = str(raw["treatment"])
        except KeyError as missing:
            raise ValidationError(f"spec is missing required field {missing.args[0]!r}") from None

        return cls(
            outcomes=outcomes,
            treatment=treatment,
            template=template,
            covariates=_roster("covariates"),
            mediators=_roster("mediators"),
            categorical=categorical,
            selection=selection,
            ci_level=float(raw.get("ci_level", 0.90)),
        )

    def to_dict(self) -> dict:
        tmpl: dict = {"kind": self.template.kind}
        if self.template.kind == "custom":
            tmpl["f"] = list(self.template.f_columns)
            tmpl["g_extra"] = list(self.template.g_extra_columns)
        out = {
            "outcomes": list(self.outcomes),
            "treatment": self.treatment,
            "template": tmpl,
            "covariates": [{"column": m.column, "moments": m.moments} for m in self.covariates],
            "mediators": [{"column": m.column, "moments": m.moments} for m in self.mediators],
            "categorical": {c: list(v) for c, v in sorted(self.categorical.items())},
            "ci_level": self.ci_level,
        }
        if self.selection is not None:
            out["selection"] = {"alpha0": self.selection.alpha0}
        return out

    def spec_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return "sha256:" + hashlib.sha256(canonical.encode()).hexdigest()

    def with_selection(self, alpha0: float | None) -> "AnalysisSpec":
        selection = None if alpha0 is None else SelectionSpec(alpha0=alpha0)
        return AnalysisSpec(
            outcomes=self.outcomes,
            treatment=self.treatment,
            template=self.template,
            covariates=self.covariates,
            mediators=self.mediators,
            categorical=self.categorical,
            selection=selection,
            ci_level=self.ci_level,
        )


@dataclass(frozen=True)
class StudyDataset:
    """Validated, immutable columnar view of one study.

    ``numeric`` holds float64 arrays; ``categorical`` holds integer codes
    into the level tuples declared by the spec. ``outcomes`` is (n, p) with
    outcome slots in spec order.
    """

    n: int
    treatment: np.ndarray
    outcomes: np.ndarray
    numeric: dict[str, np.ndarray]
    categorical: dict[str, np.ndarray]
    levels: dict[str, tuple[str, ...]]
    source: str = "<memory>"

    def __post_init__(self):
        for arr in (self.treatment, self.outcomes, *self.numeric.values(), *self.categorical.values()):
            arr.setflags(write=False)

    @property
    def p(self) -> int:
        return self.outcomes.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    def column(self, name: str) -> np.ndarray:
        """Numeric value array for a column (categorical columns are codes)."""
        if name in self.numeric:
            return self.numeric[name]
        if name in self.categorical:
            return self.categorical[name]
        raise KeyError(name)


def _parse_float(value: str, column: str, row: int) -> float:
    text = value.strip()
    if not text:
        raise ValidationError("missing value", row=row, column=column)
    try:
        parsed = float(text)
    except ValueError:
        raise ValidationError(f"not a number: {value!r}", row=row, column=column) from None
    if not math.isfinite(parsed):
        raise ValidationError(f"non-finite value {value!r}", row=row, column=column)
    return parsed


def from_columns(spec: AnalysisSpec, columns: dict[str, np.ndarray], source: str = "<memory>") -> StudyDataset:
    """Build a dataset from in-memory arrays (used by the simulators).

    Numeric columns are float arrays; categorical columns may be string
    arrays (mapped to codes) or integer code arrays.
    """
    needed = _needed_columns(spec)
    missing = [c for c in needed if c not in columns]
    if missing:
        raise ValidationError(f"missing columns: {missing}")
    n = len(next(iter(columns.values())))
    for name, col in columns.items():
        if len(col) != n:
            raise ValidationError("ragged columns", column=name)

    treatment = np.asarray(columns[spec.treatment], dtype=float)
    _check_treatment(treatment, spec.treatment)

    outcomes = np.column_stack([np.asarray(columns[c], dtype=float) for c in spec.outcomes])
    if not np.isfinite(outcomes).all():
        bad = spec.outcomes[int(np.argwhere(~np.isfinite(outcomes))[0][1])]
        raise ValidationError("non-finite outcome value", column=bad)

    numeric: dict[str, np.ndarray] = {}
    categorical: dict[str, np.ndarray] = {}
    for name in needed:
        if name == spec.treatment or name in spec.outcomes:
            continue
        col = columns[name]
        if name in spec.categorical:
            levels = spec.categorical[name]
            arr = np.asarray(col)
            if arr.dtype.kind in "iu":
                codes = arr.astype(np.int64)
                if codes.size and (codes.min() < 0 or codes.max() >= len(levels)):
                    raise ValidationError("categorical code out of range", column=name)
            else:
                lookup = {lev: i for i, lev in enumerate(levels)}
                codes = np.empty(n, dtype=np.int64)
                for i, v in enumerate(arr):
                    key = str(v)
                    if key not in lookup:
                        raise ValidationError(
                            f"value {key!r} not in declared levels {list(levels)}",
                            row=i + 1,
                            column=name,
                        )
                    codes[i] = lookup[key]
            categorical[name] = codes
        else:
            arr = np.asarray(col, dtype=float)
            if not np.isfinite(arr).all():
                raise ValidationError("non-finite value", column=name)
            numeric[name] = arr

    return StudyDataset(
        n=n,
        treatment=treatment.astype(np.int8),
        outcomes=outcomes,
        numeric=numeric,
        categorical=categorical,
        levels={c: spec.categorical[c] for c in categorical},
        source=source,
    )


def _needed_columns(spec: AnalysisSpec) -> tuple[str, ...]:
    seen: dict[str, None] = {}
    for col in (
        (spec.treatment,)
        + spec.outcomes
        + tuple(m.column for m in spec.covariates)
        + tuple(m.column for m in spec.mediators)
        + spec.template.f_columns
        + spec.template.g_extra_columns
    ):
        seen.setdefault(col, None)
    return tuple(seen)


def _check_treatment(values: np.ndarray, column: str) -> None:
    if values.size == 0:
        raise ValidationError("dataset has no rows")
    bad = np.nonzero(~np.isin(values, (0.0, 1.0)))[0]
    if bad.size:
        raise ValidationError(
            f"treatment must be 0 or 1, got {values[bad[0]]!r}",
            row=int(bad[0]) + 1,
            column=column,
        )
    if values.min() == values.max():
        arm = "treated" if values[0] == 1.0 else "control"
        raise ValidationError(f"dataset contains only {arm} units", column=column)


def load_dataset(path: str, spec: AnalysisSpec) -> StudyDataset:
    """Load and validate a CSV file against the spec."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return read_csv(fh, spec, source=path)


def loads_dataset(text: str, spec: AnalysisSpec, source: str = "<upload>") -> StudyDataset:
    return read_csv(io.StringIO(text), spec, source=source)


def read_csv(fh, spec: AnalysisSpec, source: str = "<stream>") -> StudyDataset:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise ValidationError("empty file: header row required") from None
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        dupes = sorted({h for h in header if header.count(h) > 1})
        raise ValidationError(f"duplicate header columns: {dupes}")
    index = {name: i for i, name in enumerate(header)}

    needed = _needed_columns(spec)
    missing = [c for c in needed if c not in index]
    if missing:
        raise ValidationError(f"missing columns: {missing} (header has {header})")

    raw: dict[str, list] = {c: [] for c in needed}
    width = len(header)
    for rownum, row in enumerate(reader, start=1):
        if len(row) != width:
            raise ValidationError(
                f"expected {width} fields, got {len(row)}", row=rownum
            )
        for c in needed:
            raw[c].append(row[index[c]])

    n = len(raw[needed[0]]) if needed else 0
    if n == 0:
        raise ValidationError("dataset has no rows")

    columns: dict[str, np.ndarray] = {}
    for c in needed:
        if c in spec.categorical:
            cells = np.array([v.strip() for v in raw[c]], dtype=object)
            empty = np.nonzero(cells == "")[0]
            if empty.size:
                raise ValidationError("missing value", row=int(empty[0]) + 1, column=c)
            columns[c] = cells
        else:
            columns[c] = np.array(
                [_parse_float(v, c, i + 1) for i, v in enumerate(raw[c])], dtype=float
            )
    return from_columns(spec, columns, source=source)


def summarize(ds: StudyDataset, spec: AnalysisSpec) -> dict:
    """Per-column summary used by the upload endpoint."""
    cols: dict[str, dict] = {}
    for name, arr in ds.numeric.items():
        cols[name] = {
            "kind": "numeric",
            "mean": float(arr.mean()),
            "min": float(arr.min()),
            "max": float(arr.max()),
        }
    for name, codes in ds.categorical.items():
        levels = ds.levels[name]
        counts = np.bincount(codes, minlength=len(levels))
        cols[name] = {
            "kind": "categorical",
            "counts": {lev: int(c) for lev, c in zip(levels, counts)},
        }
    return {
        "n": ds.n,
        "n_treated": ds.n_treated,
        "outcomes": list(spec.outcomes),
        "columns": cols,
    }


@dataclass(frozen=True)
class OverlapDiagnostics:
    """Support/overlap report for the balanced columns. Warnings only;
    nothing here blocks estimation."""

    ratio_proxy: dict[str, float]
    warnings: tuple[str, ...]


def check_overlap(d1: StudyDataset, d2: StudyDataset, spec: AnalysisSpec) -> OverlapDiagnostics:
    """Compare D1's support against D2's observed support per balanced column.

    For numeric columns the worst-case density-ratio proxy is the max over a
    shared equal-width grid of (D1 bin mass / D2 bin mass); infinite when D1
    puts mass where D2 has none.
    """
    warnings: list[str] = []
    ratios: dict[str, float] = {}
    for m in spec.balanced_columns():
        name = m.column
        if name in d1.categorical:
            codes1, codes2 = d1.categorical[name], d2.categorical[name]
            levels = d1.levels[name]
            c1 = np.bincount(codes1, minlength=len(levels)).astype(float)
            c2 = np.bincount(codes2, minlength=len(levels)).astype(float)
            missing = [levels[i] for i in range(len(levels)) if c1[i] > 0 and c2[i] == 0]
            if missing:
                warnings.append(
                    f"column {name!r}: levels {missing} appear in the original "
                    "study but not the replication"
                )
            p1, p2 = c1 / c1.sum(), c2 / c2.sum()
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(p1 > 0, p1 / p2, 0.0)
            ratios[name] = float(np.nanmax(r)) if np.isfinite(r).any() else math.inf
            if np.isinf(r).any():
                ratios[name] = math.inf
        else:
            x1, x2 = d1.numeric[name], d2.numeric[name]
            lo, hi = min(x1.min(), x2.min()), max(x1.max(), x2.max())
            if x1.min() < x2.min() or x1.max() > x2.max():
                warnings.append(
                    f"column {name!r}: original-study range [{x1.min():g}, {x1.max():g}] "
                    f"is not contained in replication range [{x2.min():g}, {x2.max():g}]"
                )
            if hi == lo:
                ratios[name] = 1.0
                continue
            edges = np.linspace(lo, hi, OVERLAP_BINS + 1)
            h1, _ = np.histogram(x1, bins=edges)
            h2, _ = np.histogram(x2, bins=edges)
            p1 = h1 / h1.sum()
            p2 = h2 / h2.sum()
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(p1 > 0, p1 / p2, 0.0)
            ratios[name] = math.inf if np.isinf(r).any() else float(r.max())
    return OverlapDiagnostics(ratio_proxy=ratios, warnings=tuple(warnings))


def validate_pair(d1: StudyDataset, d2: StudyDataset, spec: AnalysisSpec) -> None:
    """Cross-dataset checks before decomposition."""
    if d1.p != d2.p:
        raise ValidationError(
            f"outcome dimension differs: original has {d1.p}, replication has {d2.p}"
        )
    for name, levs in d1.levels.items():
        if d2.levels.get(name) != levs:
            raise ValidationError("categorical level sets differ between studies", column=name)
