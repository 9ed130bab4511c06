"""Minimum-entropy weighting of the replication sample.

Weights over the replication tilt its empirical distribution until the
declared covariate (and optionally mediator) moments, per treatment arm,
match the original study. Among all feasible simplex weight vectors the
solver picks the one minimizing sum(w log w), found through its smooth
convex dual: the weights are a softmax of a linear score in the features,
and the dual score vector is fitted by damped Newton iterations.

Features are standardized with replication statistics inside the solver so
the stated tolerances are unit-free; the returned dual is mapped back to the
raw feature scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .datamodel import AnalysisSpec, MomentSpec, StudyDataset
from .errors import DegenerateFeaturesError, InfeasibleBalanceError

MAX_ITER = 200
MAX_HALVINGS = 30
GRAD_TOL = 1e-10
CERT_TOL = 1e-8
RIDGE = 1e-12
DUAL_BOUND = 1e8


@dataclass(frozen=True)
class MomentConstraintSet:
    """Per-unit feature rows over the replication and their target means
    computed on the original study."""

    features: np.ndarray
    targets: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float)
        b = np.asarray(self.targets, dtype=float)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise ValueError("feature matrix must be (n_units, d) with d >= 1")
        if b.shape != (f.shape[1],) or len(self.labels) != f.shape[1]:
            raise ValueError("targets and labels must match the feature dimension")
        if not np.isfinite(f).all() or not np.isfinite(b).all():
            raise ValueError("features and targets must be finite")
        # a constant feature column is only satisfiable when its target
        # already equals the constant (any normalized weights then match it)
        const = f.max(axis=0) == f.min(axis=0)
        for j in np.nonzero(const)[0]:
            v = f[0, j]
            if abs(b[j] - v) > 1e-10 * max(1.0, abs(v)):
                raise InfeasibleBalanceError(
                    f"feature {self.labels[j]!r} is constant at {v!r} in the "
                    f"replication but its target is {b[j]!r}",
                    constraint=self.labels[j],
                    residual=float(b[j] - v),
                )
        f.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "targets", b)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class WeightSolution:
    weights: np.ndarray
    dual: np.ndarray
    entropy: float
    balance_residuals: float
    effective_sample_size: float
    iterations: int
    objective_path: tuple[float, ...]


def _entry_columns(ds: StudyDataset, m: MomentSpec, spec: AnalysisSpec):
    """Raw moment columns for one roster entry, before T-interactions."""
    if m.moments == "one_hot":
        levels = spec.categorical[m.column]
        codes = ds.categorical[m.column]
        return [
            (f"{m.column}={lev}", (codes == j).astype(float))
            for j, lev in enumerate(levels[1:], start=1)
        ]
    x = ds.numeric[m.column]
    if m.moments == "mean":
        return [(m.column, x)]
    return [(m.column, x), (f"{m.column}^2", x * x)]


def _check_levels(d1: StudyDataset, d2: StudyDataset, column: str) -> None:
    levels = d1.levels[column]
    c1 = np.bincount(d1.categorical[column], minlength=len(levels))
    c2 = np.bincount(d2.categorical[column], minlength=len(levels))
    for j, lev in enumerate(levels):
        if c1[j] > 0 and c2[j] == 0:
            raise InfeasibleBalanceError(
                f"level {lev!r} of column {column!r} appears in the original "
                "study but not in the replication, so its share cannot be "
                "matched by reweighting",
                constraint=f"{column}={lev}",
            )


def _build(d1: StudyDataset, d2: StudyDataset, spec: AnalysisSpec, roster):
    t1 = d1.treatment.astype(float)
    t2 = d2.treatment.astype(float)
    labels = ["T"]
    cols2 = [t2]
    cols1 = [t1]
    for m in roster:
        if m.moments == "one_hot":
            _check_levels(d1, d2, m.column)
        e1 = _entry_columns(d1, m, spec)
        e2 = _entry_columns(d2, m, spec)
        for (lab, c2), (_, c1) in zip(e2, e1):
            labels.append(lab)
            cols2.append(c2)
            cols1.append(c1)
        for (lab, c2), (_, c1) in zip(e2, e1):
            labels.append(f"T*{lab}")
            cols2.append(t2 * c2)
            cols1.append(t1 * c1)
    features = np.column_stack(cols2)
    source = np.column_stack(cols1)
    targets = source.mean(axis=0)
    cs = MomentConstraintSet(features=features, targets=targets, labels=tuple(labels))
    return cs, source


def build_covariate_constraints(d1, d2, spec: AnalysisSpec) -> MomentConstraintSet:
    return _build(d1, d2, spec, spec.covariates)[0]


def build_mediator_constraints(d1, d2, spec: AnalysisSpec) -> MomentConstraintSet:
    return _build(d1, d2, spec, spec.covariates + spec.mediators)[0]


def constraint_pair(d1, d2, spec: AnalysisSpec, *, mediators: bool):
    """Constraint set plus the per-unit original-study moment rows it was
    averaged from; leave-one-out resampling needs the rows, not just means."""
    roster = spec.covariates + spec.mediators if mediators else spec.covariates
    return _build(d1, d2, spec, roster)


def standardize(cs: MomentConstraintSet):
    """Center/scale features by replication statistics; vacuous (constant,
    attainable) columns become exact zeros so they cannot stall the stop
    criterion. Returns (features_std, targets_std, scale, center, vacuous)."""
    C = cs.features
    mu = C.mean(axis=0)
    sd = C.std(axis=0)
    if not (sd > 0).any():
        raise DegenerateFeaturesError(
            "every balancing feature is constant across the replication sample"
        )
    scale = np.where(sd > 0, sd, 1.0)
    Cs = (C - mu) / scale
    bs = (cs.targets - mu) / scale
    vacuous = sd == 0
    bs[vacuous] = 0.0
    return Cs, bs, scale, mu, vacuous


def dual_state(Cs: np.ndarray, bs: np.ndarray, gamma: np.ndarray):
    """Objective, gradient and softmax weights of the dual at ``gamma``.

    The gradient is exactly the standardized balance residual vector of the
    implied weights.
    """
    z = Cs @ gamma
    zmax = z.max()
    e = np.exp(z - zmax)
    tot = e.sum()
    w = e / tot
    value = math.log(tot) + zmax - float(gamma @ bs)
    grad = Cs.T @ w - bs
    return value, grad, w


def dual_hessian(Cs: np.ndarray, w: np.ndarray) -> np.ndarray:
    m = Cs.T @ w
    H = Cs.T @ (Cs * w[:, None]) - np.outer(m, m)
    H[np.diag_indices_from(H)] += RIDGE
    return H


def newton_dual(Cs: np.ndarray, bs: np.ndarray, gamma0=None):
    """Damped Newton descent on the standardized dual.

    Returns (gamma, grad, weights, objective_path, diverged). Feasibility is
    the caller's problem: the gradient IS the standardized balance residual,
    so callers certify by checking its max magnitude.
    """
    gamma = np.zeros(Cs.shape[1]) if gamma0 is None else np.array(gamma0, dtype=float)
    value, grad, w = dual_state(Cs, bs, gamma)
    path = [value]
    diverged = False
    for _ in range(MAX_ITER):
        if np.abs(grad).max() <= GRAD_TOL:
            break
        H = dual_hessian(Cs, w)
        try:
            step = -np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = -grad
        t = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = gamma + t * step
            v2, g2, w2 = dual_state(Cs, bs, cand)
            # near the optimum the true decrease falls below the rounding of
            # the objective; a step that shrinks the gradient without a
            # measurable objective increase is still progress
            ties = v2 <= value + 4.0 * np.finfo(float).eps * max(1.0, abs(value))
            if v2 < value or (ties and np.abs(g2).max() < np.abs(grad).max()):
                gamma, value, grad, w = cand, v2, g2, w2
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        path.append(value)
        if np.abs(gamma).max() > DUAL_BOUND:
            diverged = True
            break
    return gamma, grad, w, path, diverged


def solve_entropy_weights(cs: MomentConstraintSet, start_dual=None) -> WeightSolution:
    Cs, bs, scale, _, _ = standardize(cs)
    if start_dual is not None:
        gamma0 = np.asarray(start_dual, dtype=float) * scale
    else:
        gamma0 = None

    gamma, grad, w, path, diverged = newton_dual(Cs, bs, gamma0)
    iterations = len(path) - 1
    if diverged:
        j = int(np.abs(grad).argmax())
        raise InfeasibleBalanceError(
            "entropy-balancing dual diverged; the moment targets are not "
            f"attainable (worst constraint {cs.labels[j]!r})",
            constraint=cs.labels[j],
            residual=float(grad[j]),
        )

    resid = float(np.abs(grad).max())
    if resid > CERT_TOL:
        j = int(np.abs(grad).argmax())
        raise InfeasibleBalanceError(
            "moment constraints could not be balanced to tolerance "
            f"({resid:.3e} standardized residual after {iterations} iterations)",
            constraint=cs.labels[j],
            residual=float(grad[j]),
        )
    return WeightSolution(
        weights=w,
        dual=gamma / scale,
        entropy=float(xlogy(w, w).sum()),
        balance_residuals=resid,
        effective_sample_size=float(1.0 / (w @ w)),
        iterations=iterations,
        objective_path=tuple(path),
    )
