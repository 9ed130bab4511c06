"""Adjustment for originals that were published because they were significant.

Conditioning on |z| clearing the two-sided threshold turns the joint
Gaussian of the estimators into a truncated one. This module evaluates the
induced conditional tail probabilities, inverts them into confidence
intervals, and maximizes the profiled truncated likelihood to re-estimate
the decomposition components.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp
from scipy.stats import norm

from .datamodel import AnalysisSpec
from .errors import (
    AdjustmentError,
    MleConvergenceError,
    SelectionEventError,
    TruncationMassError,
    ValidationError,
)
from .inference import EstimatorVector, JackknifeCovariance

MAX_EVALUATIONS = 5000
SIMPLEX_XATOL = 1e-7
SIMPLEX_FATOL = 1e-10
LOG_MASS_FLOOR = math.log(1e-300)
COMPONENT_ENTRIES = ("observed", "covariate_shift", "mediation_shift")


@dataclass(frozen=True)
class SelectionModel:
    """Publication filter: the original was significant at level alpha0."""

    alpha0: float
    observed_z: float
    statistic_label: str = "selection_z"
    z_threshold: float = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.alpha0 < 1.0:
            raise ValidationError(
                f"selection alpha0 must be in (0, 1), got {self.alpha0!r}"
            )
        threshold = float(norm.ppf(1.0 - self.alpha0 / 2.0))
        object.__setattr__(self, "z_threshold", threshold)
        if not abs(self.observed_z) > threshold:
            raise SelectionEventError(
                f"selection event did not occur: |z| = {abs(self.observed_z):.4f} "
                f"is not above the threshold {threshold:.4f} for alpha0 = {self.alpha0}"
            )


@dataclass(frozen=True)
class AdjustedDecomposition:
    """Selection-corrected components; additivity to the observed gap is
    enforced by construction (the residual is defined as the remainder)."""

    components: dict[str, float]
    population_discrepancy: float
    cis: dict[str, tuple[float, float]]
    log_likelihood: float
    iterations: int
    n_evaluations: int
    converged: bool


def _check_sigma(sigma) -> np.ndarray:
    sig = np.asarray(sigma, dtype=float)
    if sig.shape != (2, 2) or not np.isfinite(sig).all():
        raise ValidationError("sigma must be a finite 2x2 covariance block")
    if not sig[0, 0] > 0.0:
        raise ValidationError("sigma[0,0] must be positive")
    return sig


def truncated_prob(t: float, c: float, theta1: float, tau: float, sigma) -> float:
    """P{Z <= c | selection} for Z ~ N(t, sigma_11).

    The selection event is tau < |a(Z - c) + theta1| with a = sigma_12/sigma_11,
    a union of at most two half-lines in Z. Probabilities are assembled from
    log-scale normal CDFs so deep-tail candidates stay finite.
    """
    sig = _check_sigma(sigma)
    if tau < 0.0:
        raise ValidationError(f"truncation threshold must be nonnegative, got {tau!r}")
    s11 = sig[0, 0]
    s = math.sqrt(s11)
    a = sig[0, 1] / s11

    if a == 0.0:
        if abs(theta1) > tau:
            return float(norm.cdf((c - t) / s))
        raise TruncationMassError(
            "selection event incompatible: the statistic does not depend on the "
            f"estimator and |theta1| = {abs(theta1):.4f} never clears tau = {tau:.4f}"
        )

    cuts = (c + (tau - theta1) / a, c - (tau + theta1) / a)
    z_lo = (min(cuts) - t) / s
    z_hi = (max(cuts) - t) / s
    z_c = (c - t) / s

    log_left = norm.logcdf(z_lo)
    log_right = norm.logsf(z_hi)
    log_mass = logsumexp([log_left, log_right])
    if log_mass < LOG_MASS_FLOOR:
        raise TruncationMassError(
            "selection event incompatible: truncation set has numerically zero mass"
        )

    pieces = [norm.logcdf(min(z_c, z_lo))]
    if z_c > z_hi:
        # P(z_hi < Z <= z_c) as a survival-function difference, stable when
        # both points sit in the right tail
        log_sf_c = norm.logsf(z_c)
        with np.errstate(divide="ignore"):
            pieces.append(log_right + np.log1p(-np.exp(log_sf_c - log_right)))
    log_num = logsumexp(pieces)
    return float(min(1.0, max(0.0, math.exp(log_num - log_mass))))


def invert_ci(c: float, theta1: float, tau: float, sigma, alpha: float):
    """Candidate means whose conditional tail probability stays within
    [alpha/2, 1 - alpha/2]; returns the interval endpoints.

    The tail probability is monotone non-increasing in the candidate mean
    (checked on a coarse grid first), so each endpoint is a bisection root.
    """
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha must be in (0, 1), got {alpha!r}")
    sig = _check_sigma(sigma)
    s = math.sqrt(sig[0, 0])

    def prob(t):
        return truncated_prob(t, c, theta1, tau, sig)

    grid = c + s * np.linspace(-8.0, 8.0, 33)
    values = np.array([prob(t) for t in grid])
    if (np.diff(values) > 1e-9).any():
        raise AdjustmentError(
            "conditional tail probability is not monotone in the candidate "
            "mean; the covariance block is pathological"
        )

    lo = _bisect(prob, 1.0 - alpha / 2.0, c, s)
    hi = _bisect(prob, alpha / 2.0, c, s)
    return lo, hi


def _bisect(prob, target: float, center: float, s: float) -> float:
    left, right = center - s, center + s
    for _ in range(200):
        if prob(left) >= target:
            break
        left -= (center - left)
    else:
        raise AdjustmentError("failed to bracket the lower inversion endpoint")
    for _ in range(200):
        if prob(right) <= target:
            break
        right += (right - center)
    else:
        raise AdjustmentError("failed to bracket the upper inversion endpoint")
    while right - left > 1e-8 * s:
        mid = 0.5 * (left + right)
        if prob(mid) >= target:
            left = mid
        else:
            right = mid
    return 0.5 * (left + right)


def _log_two_sided_tail(mean: float, sd: float, tau: float):
    return logsumexp(
        [norm.logsf((tau - mean) / sd), norm.logcdf((-tau - mean) / sd)]
    )


def selective_mle(
    vec: EstimatorVector,
    cov: JackknifeCovariance,
    model: SelectionModel,
    *,
    level: float = 0.90,
) -> AdjustedDecomposition:
    """Profiled truncated-Gaussian MLE of the decomposition components.

    The selection statistic is profiled out: given candidate components
    Delta, it is Gaussian with mean shifted by b'(Delta - Delta_hat) where b
    regresses the statistic on the components, and only its two-sided tail
    above the threshold enters the likelihood.
    """
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must be in (0, 1), got {level!r}")
    labels = vec.labels
    if model.statistic_label not in labels:
        raise AdjustmentError(
            f"estimator vector lacks the selection statistic {model.statistic_label!r}"
        )
    z_idx = labels.index(model.statistic_label)
    comp_labels = [lab for lab in labels if lab in COMPONENT_ENTRIES]
    if "observed" not in comp_labels:
        raise AdjustmentError("estimator vector lacks the observed discrepancy")
    comp_idx = [labels.index(lab) for lab in comp_labels]
    hat = vec.values[comp_idx]
    scc = cov.sigma[np.ix_(comp_idx, comp_idx)]
    sc1 = cov.sigma[comp_idx, z_idx]
    try:
        prec = np.linalg.inv(scc)
    except np.linalg.LinAlgError:
        raise AdjustmentError("component covariance block is singular") from None

    b = prec @ sc1
    var_w = float(b @ scc @ b)
    tau = model.z_threshold
    z_hat = model.observed_z

    def nll(delta):
        diff = delta - hat
        value = 0.5 * float(diff @ prec @ diff)
        if var_w > 0.0:
            value += _log_two_sided_tail(z_hat + float(b @ diff), math.sqrt(var_w), tau)
        return value

    if tau == 0.0 or var_w <= 1e-24:
        # the likelihood separates; the truncated factor is flat in Delta
        delta = hat.copy()
        iterations = evaluations = 0
        converged = True
    else:
        edge = np.maximum(0.1 * np.sqrt(np.diag(scc)), 1e-3)
        simplex = np.vstack([hat, hat + np.diag(edge)])
        result = minimize(
            nll,
            hat,
            method="Nelder-Mead",
            options={
                "xatol": SIMPLEX_XATOL,
                "fatol": SIMPLEX_FATOL,
                "maxfev": MAX_EVALUATIONS,
                "initial_simplex": simplex,
            },
        )
        if not result.success:
            raise MleConvergenceError(
                f"selective likelihood did not converge after {result.nfev} "
                "evaluations",
                best=dict(zip(comp_labels, result.x)),
            )
        delta = result.x
        iterations = int(result.nit)
        evaluations = int(result.nfev)
        converged = True

    estimates = {lab: float(val) for lab, val in zip(comp_labels, delta)}
    observed = float(vec["observed"])
    disc = estimates["observed"]
    components = {"sampling_variability": observed - disc}
    remainder = disc
    for lab in ("covariate_shift", "mediation_shift"):
        if lab in estimates:
            components[lab] = estimates[lab]
            remainder -= estimates[lab]
    components["residual"] = remainder

    alpha = 1.0 - level
    var_z = cov.sigma[z_idx, z_idx]

    def component_ci(value, variance, cov_z):
        if variance <= 0.0:
            return (value, value)
        block = np.array([[variance, cov_z], [cov_z, var_z]])
        return invert_ci(value, z_hat, tau, block, alpha)

    obs_pos = comp_labels.index("observed")
    disc_ci = component_ci(observed, scc[obs_pos, obs_pos], sc1[obs_pos])
    cis = {
        "population_discrepancy": disc_ci,
        "sampling_variability": (observed - disc_ci[1], observed - disc_ci[0]),
    }
    combo = np.zeros(len(comp_labels))
    combo[obs_pos] = 1.0
    for lab in ("covariate_shift", "mediation_shift"):
        if lab in comp_labels:
            pos = comp_labels.index(lab)
            combo[pos] = -1.0
            cis[lab] = component_ci(float(vec[lab]), scc[pos, pos], sc1[pos])
    cis["residual"] = component_ci(
        float(combo @ hat), float(combo @ scc @ combo), float(combo @ sc1)
    )

    return AdjustedDecomposition(
        components=components,
        population_discrepancy=disc,
        cis=cis,
        log_likelihood=-nll(delta),
        iterations=iterations,
        n_evaluations=evaluations,
        converged=converged,
    )


def adjust_components(
    vec: EstimatorVector, cov: JackknifeCovariance, spec: AnalysisSpec
):
    """Build the selection model declared by the spec and run the MLE."""
    if spec.selection is None:
        raise ValidationError("analysis spec declares no selection filter")
    model = SelectionModel(
        alpha0=spec.selection.alpha0, observed_z=vec["selection_z"]
    )
    return model, selective_mle(vec, cov, model, level=spec.ci_level)
