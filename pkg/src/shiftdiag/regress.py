"""Weighted stacked least squares defining the effect estimate.

Every template expands a dataset into one design matrix whose first column is
the bare treatment indicator; the effect of interest is always that column's
coefficient. Multi-outcome templates contribute one stacked row per unit and
outcome slot, and a unit's weight is shared by all of its rows. The solver is
an SVD of the square-root-weighted design; explicit normal equations are left
to the brute-force test oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import AnalysisSpec, StudyDataset
from .errors import SingularDesignError, ValidationError

# Scale-aware rank cutoff: singular values below RCOND * s_max are treated as
# zero. NULL_TOL flags which columns participate in a null vector.
RCOND = 1e-10
NULL_TOL = 1e-8


@dataclass(frozen=True)
class StackedDesign:
    matrix: np.ndarray
    response: np.ndarray
    unit_index: np.ndarray
    columns: tuple[str, ...]
    n_units: int
    n_slots: int
    template: str

    def __post_init__(self):
        self.matrix.setflags(write=False)
        self.response.setflags(write=False)
        self.unit_index.setflags(write=False)


@dataclass(frozen=True)
class FitResult:
    """Solved regression: ``theta`` is the coefficient on bare treatment."""

    theta: float
    se_theta: float
    coefficients: np.ndarray
    columns: tuple[str, ...]
    rank: int
    gram_condition: float
    n_rows: int
    weighted: bool


def expand_columns(ds: StudyDataset, cols, spec: AnalysisSpec):
    """Numeric columns pass through; categorical columns expand to one-hot
    indicators for every level after the first declared (reference) level."""
    names: list[str] = []
    blocks: list[np.ndarray] = []
    for c in cols:
        if c in spec.categorical:
            levels = spec.categorical[c]
            codes = ds.categorical[c]
            for j, lev in enumerate(levels[1:], start=1):
                names.append(f"{c}={lev}")
                blocks.append((codes == j).astype(float))
        else:
            names.append(c)
            blocks.append(np.asarray(ds.numeric[c], dtype=float))
    if not blocks:
        return (), np.empty((ds.n, 0))
    return tuple(names), np.column_stack(blocks)


def build_design(ds: StudyDataset, spec: AnalysisSpec) -> StackedDesign:
    kind = spec.template.kind
    n, p = ds.n, ds.p
    T = ds.treatment.astype(float)

    if kind == "adjusted":
        x_names, x = expand_columns(ds, spec.regression_covariates(), spec)
        x = x - x.mean(axis=0)
        f_names, f = x_names, x
        g_names, g = x_names, x
    elif kind == "ancova":
        f_names, f = (), np.empty((n, 0))
        g_names, g = expand_columns(ds, spec.regression_covariates(), spec)
    elif kind == "custom":
        f_names, f = expand_columns(ds, spec.template.f_columns, spec)
        extra_names, extra = expand_columns(ds, spec.template.g_extra_columns, spec)
        g_names, g = f_names + extra_names, np.hstack([f, extra])
    else:  # ttest, anova2: f and g are bare intercepts
        f_names, f = (), np.empty((n, 0))
        g_names, g = (), np.empty((n, 0))

    names = ["treatment"]
    names += [f"treatment:{nm}" for nm in f_names]
    names.append("intercept")
    if kind == "anova2":
        names += [f"slot:{out}" for out in spec.outcomes]
    names += list(g_names)

    rows = n * p
    X = np.empty((rows, len(names)))
    X[:, 0] = np.repeat(T, p)
    c0 = 1
    if f_names:
        X[:, c0 : c0 + len(f_names)] = np.repeat(T[:, None] * f, p, axis=0)
        c0 += len(f_names)
    X[:, c0] = 1.0
    c0 += 1
    if kind == "anova2":
        slot_of_row = np.tile(np.arange(p), n)
        for s in range(p):
            X[:, c0 + s] = slot_of_row == s
        c0 += p
    if g_names:
        X[:, c0:] = np.repeat(g, p, axis=0)

    return StackedDesign(
        matrix=X,
        response=ds.outcomes.reshape(-1).copy(),
        unit_index=np.repeat(np.arange(n), p),
        columns=tuple(names),
        n_units=n,
        n_slots=p,
        template=kind,
    )


def _unit_weights(n: int, weights) -> tuple[np.ndarray, bool]:
    if weights is None:
        return np.full(n, 1.0 / n), False
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ValidationError(f"expected {n} unit weights, got shape {w.shape}")
    if not np.isfinite(w).all():
        raise ValidationError("weights must be finite")
    if (w < 0).any():
        raise ValidationError("negative weight")
    if w.sum() <= 0:
        raise ValidationError("weights sum to zero")
    return w, True


def _structural_null(design: StackedDesign, null_vecs: np.ndarray) -> bool:
    """The one rank deficiency built into the anova2 template: the intercept
    equals the sum of the outcome-slot indicators. Anything else is a real
    collinearity problem."""
    if design.template != "anova2" or null_vecs.shape[0] != 1:
        return False
    v = np.zeros(len(design.columns))
    for j, name in enumerate(design.columns):
        if name == "intercept":
            v[j] = 1.0
        elif name.startswith("slot:"):
            v[j] = -1.0
    v /= np.linalg.norm(v)
    return abs(float(null_vecs[0] @ v)) > 1.0 - 1e-8


def fit_wls(design: StackedDesign, weights=None) -> FitResult:
    w, weighted = _unit_weights(design.n_units, weights)
    sw = np.sqrt(w)[design.unit_index]
    Xw = design.matrix * sw[:, None]
    yw = design.response * sw

    k = design.matrix.shape[1]
    if Xw.shape[0] < k:
        raise SingularDesignError(
            f"design has {k} columns but only {Xw.shape[0]} stacked rows",
            columns=design.columns,
        )
    U, s, Vt = np.linalg.svd(Xw, full_matrices=False)
    if s[0] == 0.0:
        raise SingularDesignError("design matrix is zero", columns=design.columns)
    keep = s > RCOND * s[0]
    rank = int(keep.sum())
    if rank < k:
        null_vecs = Vt[~keep]
        if not _structural_null(design, null_vecs):
            involved = np.abs(null_vecs).max(axis=0) > NULL_TOL
            raise SingularDesignError(
                "design matrix is rank-deficient",
                columns=tuple(np.asarray(design.columns)[involved]),
            )

    coef = Vt[keep].T @ ((U[:, keep].T @ yw) / s[keep])
    resid = yw - Xw @ coef
    rss = float(resid @ resid)
    df = Xw.shape[0] - rank
    gram_pinv00 = float(((Vt[keep, 0] / s[keep]) ** 2).sum())
    se = math.sqrt(rss / df * gram_pinv00) if df > 0 else float("nan")
    return FitResult(
        theta=float(coef[0]),
        se_theta=se,
        coefficients=coef,
        columns=design.columns,
        rank=rank,
        gram_condition=float((s[0] / s[keep][-1]) ** 2),
        n_rows=Xw.shape[0],
        weighted=weighted,
    )


def _fit_ttest(ds: StudyDataset, w: np.ndarray, weighted: bool) -> FitResult:
    """Closed form for the single-outcome difference of weighted means."""
    y = ds.outcomes[:, 0]
    t = ds.treatment.astype(bool)
    wt, wc = float(w[t].sum()), float(w[~t].sum())
    if wt <= 0.0 or wc <= 0.0:
        raise SingularDesignError(
            "a treatment arm carries zero total weight", columns=("treatment",)
        )
    mt = float(np.average(y[t], weights=w[t]))
    mc = float(np.average(y[~t], weights=w[~t]))
    theta = mt - mc
    rss = float(w[t] @ (y[t] - mt) ** 2 + w[~t] @ (y[~t] - mc) ** 2)
    df = ds.n - 2
    wtot = wt + wc
    se = math.sqrt(rss / df * wtot / (wt * wc)) if df > 0 else float("nan")
    gram = np.array([[wt, wt], [wt, wtot]])
    return FitResult(
        theta=theta,
        se_theta=se,
        coefficients=np.array([theta, mc]),
        columns=("treatment", "intercept"),
        rank=2,
        gram_condition=float(np.linalg.cond(gram)),
        n_rows=ds.n,
        weighted=weighted,
    )


def fit_dataset(ds: StudyDataset, spec: AnalysisSpec, weights=None) -> FitResult:
    if spec.template.kind == "ttest":
        w, weighted = _unit_weights(ds.n, weights)
        return _fit_ttest(ds, w, weighted)
    return fit_wls(build_design(ds, spec), weights)
