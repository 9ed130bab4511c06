"""Split an observed effect discrepancy into interpretable components.

The observed discrepancy theta(D1) - theta(D2) telescopes through two
reweighted replication fits: weights matching covariate moments give the
covariate-shift share, weights additionally matching mediator moments give
the mediation share, and whatever remains after full reweighting is the
residual. Unadjusted, the sampling-variability component is identically
zero; the selection-adjusted variant lives in selectadj.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .balance import (
    WeightSolution,
    build_covariate_constraints,
    build_mediator_constraints,
    solve_entropy_weights,
)
from .datamodel import AnalysisSpec, StudyDataset, validate_pair
from .errors import InfeasibleBalanceError
from .regress import FitResult, fit_dataset

COMPONENT_ORDER = ("sampling_variability", "covariate_shift", "mediation_shift", "residual")


@dataclass(frozen=True)
class Decomposition:
    observed: float
    components: dict[str, float]
    theta_original: float
    theta_replication: float
    theta_covariate_balanced: float
    theta_fully_balanced: float
    covariate_weights: WeightSolution | None
    mediator_weights: WeightSolution | None
    fit_original: FitResult
    fit_replication: FitResult
    warnings: tuple[str, ...] = ()
    adjusted: bool = False

    def component_labels(self) -> tuple[str, ...]:
        return tuple(self.components)


def reweighted_effect(d2: StudyDataset, spec: AnalysisSpec, w: WeightSolution) -> float:
    """Effect coefficient refitted on the replication under given weights."""
    return fit_dataset(d2, spec, weights=w.weights).theta


def padded_dual(base: WeightSolution | None, dim: int):
    """Full-dimension warm start from the covariate-only dual (the mediator
    feature block starts untilted)."""
    if base is None:
        return None
    out = np.zeros(dim)
    out[: base.dual.size] = base.dual
    return out


def estimate_components(d1: StudyDataset, d2: StudyDataset, spec: AnalysisSpec) -> Decomposition:
    validate_pair(d1, d2, spec)
    fit1 = fit_dataset(d1, spec)
    fit2 = fit_dataset(d2, spec)
    observed = fit1.theta - fit2.theta
    warnings: list[str] = []

    cov_sol = None
    theta_w = fit2.theta
    if spec.covariates:
        cov_sol = solve_entropy_weights(build_covariate_constraints(d1, d2, spec))
        theta_w = reweighted_effect(d2, spec, cov_sol)

    med_sol = cov_sol
    theta_om = theta_w
    mediation_ok = False
    if spec.mediators:
        # building can already fail (a mediator level with no replication
        # support), not just solving; both degrade the same way
        try:
            constraints = build_mediator_constraints(d1, d2, spec)
            med_sol = solve_entropy_weights(
                constraints, start_dual=padded_dual(cov_sol, constraints.dim)
            )
            theta_om = reweighted_effect(d2, spec, med_sol)
            mediation_ok = True
        except InfeasibleBalanceError as err:
            med_sol = cov_sol
            theta_om = theta_w
            warnings.append(
                "mediator balancing is infeasible, so the mediation component "
                f"is folded into the residual: {err}"
            )

    components: dict[str, float] = {"sampling_variability": 0.0}
    if spec.covariates:
        components["covariate_shift"] = theta_w - fit2.theta
    if mediation_ok:
        components["mediation_shift"] = theta_om - theta_w
    components["residual"] = fit1.theta - theta_om

    return Decomposition(
        observed=observed,
        components=components,
        theta_original=fit1.theta,
        theta_replication=fit2.theta,
        theta_covariate_balanced=theta_w,
        theta_fully_balanced=theta_om,
        covariate_weights=cov_sol,
        mediator_weights=med_sol,
        fit_original=fit1,
        fit_replication=fit2,
        warnings=tuple(warnings),
    )
