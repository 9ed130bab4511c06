"""Leave-one-out covariance for the joint vector of study estimators.

Every unit of each study is deleted in turn and the whole pipeline
(balancing included) is recomputed, giving two independent clouds of
replicates that are combined into one covariance matrix. The default
implementation warm-starts each replicate's balancing dual at the
full-sample solution and reuses one factored Hessian across replicates;
``fast=False`` rebuilds everything from scratch per replicate and exists
as the correctness oracle for that machinery.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .balance import (
    CERT_TOL,
    DUAL_BOUND,
    GRAD_TOL,
    constraint_pair,
    dual_hessian,
    newton_dual,
    standardize,
)
from .datamodel import AnalysisSpec, StudyDataset, from_columns
from .decomp import Decomposition, estimate_components
from .errors import EstimationError, JackknifeError, ShiftDiagError, ValidationError
from .regress import build_design

MAX_CHORD_ITER = 80
MAX_FAILURE_SHARE = 0.01
ATTAIN_TOL = 1e-10  # replicate targets on a constant column, same as the builder


@dataclass(frozen=True)
class EstimatorVector:
    """Jointly jackknifed estimators, in fixed label order."""

    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (len(self.labels),):
            raise ValidationError("estimator values and labels disagree in length")
        if not np.isfinite(v).all():
            bad = self.labels[int(np.argmin(np.isfinite(v)))]
            raise EstimationError(f"estimator entry {bad!r} is not finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __getitem__(self, label: str) -> float:
        return float(self.values[self.labels.index(label)])


@dataclass(frozen=True)
class JackknifeCovariance:
    sigma: np.ndarray
    d1_part: np.ndarray
    d2_part: np.ndarray
    n_failed: int
    n_replicates: int


def estimator_vector(dec: Decomposition, spec: AnalysisSpec) -> EstimatorVector:
    labels = []
    values = []
    if spec.selection is not None:
        labels.append("selection_z")
        values.append(dec.fit_original.theta / dec.fit_original.se_theta)
    labels.append("observed")
    values.append(dec.observed)
    for comp in ("covariate_shift", "mediation_shift"):
        if comp in dec.components:
            labels.append(comp)
            values.append(dec.components[comp])
    labels.append("theta_original")
    values.append(dec.theta_original)
    return EstimatorVector(values=np.array(values), labels=tuple(labels))


def normal_cis(vec: EstimatorVector, cov: JackknifeCovariance, level: float):
    """Per-entry normal-approximation intervals at the given coverage level.

    A zero-variance entry collapses to the degenerate point interval.
    """
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must be in (0, 1), got {level!r}")
    z = norm.ppf(0.5 * (1.0 + level))
    out = {}
    for i, label in enumerate(vec.labels):
        half = z * np.sqrt(max(cov.sigma[i, i], 0.0))
        est = float(vec.values[i])
        out[label] = (est - half, est + half)
    return out


def component_summaries(vec: EstimatorVector, cov: JackknifeCovariance, level: float):
    """Estimate, standard error, and normal interval per decomposition read-out.

    Every entry is a linear contrast of the jointly jackknifed vector: the
    shifts are coordinates, the residual subtracts whichever shifts exist
    from the observed gap.  Sampling variability has a zero point estimate
    whose uncertainty is the observed gap's, so its interval is the observed
    interval reflected around zero.
    """
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must be in (0, 1), got {level!r}")
    z = norm.ppf(0.5 * (1.0 + level))
    idx = {label: i for i, label in enumerate(vec.labels)}
    combos = {"observed": {"observed": 1.0}}
    residual = {"observed": 1.0}
    for comp in ("covariate_shift", "mediation_shift"):
        if comp in idx:
            combos[comp] = {comp: 1.0}
            residual[comp] = -1.0
    combos["residual"] = residual
    out = {}
    for name, combo in combos.items():
        ell = np.zeros(len(vec.labels))
        for label, weight in combo.items():
            ell[idx[label]] = weight
        est = float(ell @ vec.values)
        se = math.sqrt(max(float(ell @ cov.sigma @ ell), 0.0))
        out[name] = {"estimate": est, "se": se, "ci_lo": est - z * se, "ci_hi": est + z * se}
    se_obs = out["observed"]["se"]
    out["sampling_variability"] = {
        "estimate": 0.0,
        "se": se_obs,
        "ci_lo": -z * se_obs,
        "ci_hi": z * se_obs,
    }
    return out


def jackknife_covariance(
    d1: StudyDataset, d2: StudyDataset, spec: AnalysisSpec, *, fast: bool = True
):
    dec = estimate_components(d1, d2, spec)
    vec = estimator_vector(dec, spec)
    if fast:
        try:
            rep1, rep2, failed = _fast_replicates(d1, d2, spec, dec, vec.labels)
        except np.linalg.LinAlgError:
            # full-sample Gram too ill-conditioned for downdating; the
            # from-scratch path only needs the design solvable per replicate
            rep1, rep2, failed = _cold_replicates(d1, d2, spec, vec.labels)
    else:
        rep1, rep2, failed = _cold_replicates(d1, d2, spec, vec.labels)

    total = d1.n + d2.n
    if failed > MAX_FAILURE_SHARE * total:
        raise JackknifeError(
            f"{failed} of {total} leave-one-out replicates failed, above the "
            f"{MAX_FAILURE_SHARE:.0%} limit"
        )
    sigma, part1, part2 = _combine(rep1, rep2)
    return vec, JackknifeCovariance(
        sigma=sigma,
        d1_part=part1,
        d2_part=part2,
        n_failed=failed,
        n_replicates=total,
    )


def _combine(rep1: np.ndarray, rep2: np.ndarray):
    parts = []
    for reps in (rep1, rep2):
        m = reps.shape[0]
        dev = reps - reps.mean(axis=0)
        parts.append(((m - 1) / m) * (dev.T @ dev))
    sigma = parts[0] + parts[1]
    sigma = 0.5 * (sigma + sigma.T)
    return sigma, parts[0], parts[1]


# ---------------------------------------------------------------------------
# from-scratch replicates


def _delete_unit(ds: StudyDataset, spec: AnalysisSpec, i: int) -> StudyDataset:
    keep = np.ones(ds.n, dtype=bool)
    keep[i] = False
    cols = {name: arr[keep] for name, arr in ds.numeric.items()}
    for name, codes in ds.categorical.items():
        cols[name] = codes[keep]
    cols[spec.treatment] = ds.treatment[keep].astype(float)
    for j, name in enumerate(spec.outcomes):
        cols[name] = ds.outcomes[keep, j]
    return from_columns(spec, cols)


def _replicate_row(dec: Decomposition, spec: AnalysisSpec, labels) -> np.ndarray:
    pool = {
        "observed": dec.observed,
        "theta_original": dec.theta_original,
        **dec.components,
    }
    if "selection_z" in labels:
        pool["selection_z"] = dec.fit_original.theta / dec.fit_original.se_theta
    try:
        row = np.array([pool[lab] for lab in labels])
    except KeyError as missing:
        raise JackknifeError(f"replicate lost component {missing}") from None
    if not np.isfinite(row).all():
        raise JackknifeError("replicate produced a non-finite estimate")
    return row


def _cold_replicates(d1, d2, spec, labels):
    rows1, rows2, failed = [], [], 0
    for i in range(d1.n):
        try:
            part = estimate_components(_delete_unit(d1, spec, i), d2, spec)
            rows1.append(_replicate_row(part, spec, labels))
        except ShiftDiagError:
            failed += 1
    for j in range(d2.n):
        try:
            part = estimate_components(d1, _delete_unit(d2, spec, j), spec)
            rows2.append(_replicate_row(part, spec, labels))
        except ShiftDiagError:
            failed += 1
    k = len(labels)
    return (
        np.array(rows1).reshape(len(rows1), k),
        np.array(rows2).reshape(len(rows2), k),
        failed,
    )


# ---------------------------------------------------------------------------
# warm-started replicates


def _fast_replicates(d1, d2, spec, dec, labels):
    need_z = "selection_z" in labels
    need_cov = "covariate_shift" in labels
    need_med = "mediation_shift" in labels
    fail1 = np.zeros(d1.n, dtype=bool)
    fail2 = np.zeros(d2.n, dtype=bool)

    if spec.template.kind == "ttest":
        th1, se1 = _ttest_loo(d1, need_se=need_z)
        th2, _ = _ttest_loo(d2, need_se=False)
    else:
        th1, se1 = _design_loo(d1, spec, need_se=need_z, fail=fail1)
        th2, _ = _design_loo(d2, spec, need_se=False, fail=fail2)
    fail1 |= ~np.isfinite(th1)
    fail2 |= ~np.isfinite(th2)
    if need_z:
        fail1 |= ~np.isfinite(se1) | (se1 <= 0.0)

    thw1 = np.full(d1.n, dec.theta_replication)
    thw2 = th2
    if spec.covariates and (need_cov or need_med):
        rep = _BalanceReplicator(d1, d2, spec, mediators=False, start=dec.covariate_weights)
        thw1 = rep.d1_thetas(fail1)
        thw2 = rep.d2_thetas(fail2)
    if need_med:
        rep = _BalanceReplicator(d1, d2, spec, mediators=True, start=dec.mediator_weights)
        thm1 = rep.d1_thetas(fail1)
        thm2 = rep.d2_thetas(fail2)

    def assemble(n, fail, column):
        rows = np.empty((n, len(labels)))
        for idx, lab in enumerate(labels):
            rows[:, idx] = column(lab)
        fail |= ~np.isfinite(rows).all(axis=1)
        return rows[~fail]

    d1_cols = {
        "observed": lambda: th1 - dec.theta_replication,
        "theta_original": lambda: th1,
        "covariate_shift": lambda: thw1 - dec.theta_replication,
        "mediation_shift": lambda: thm1 - thw1,
        "selection_z": lambda: th1 / se1 if need_z else None,
    }
    d2_cols = {
        "observed": lambda: dec.theta_original - th2,
        "theta_original": lambda: np.full(d2.n, dec.theta_original),
        "covariate_shift": lambda: thw2 - th2,
        "mediation_shift": lambda: thm2 - thw2,
        "selection_z": lambda: np.full(
            d2.n, dec.fit_original.theta / dec.fit_original.se_theta
        ),
    }
    with np.errstate(all="ignore"):
        rep1 = assemble(d1.n, fail1, lambda lab: d1_cols[lab]())
        rep2 = assemble(d2.n, fail2, lambda lab: d2_cols[lab]())
    return rep1, rep2, int(fail1.sum() + fail2.sum())


def _ttest_loo(ds: StudyDataset, *, need_se: bool):
    """Closed-form leave-one-out difference of means (and its model SE)."""
    y = ds.outcomes[:, 0]
    t = ds.treatment.astype(bool)
    nt, nc = int(t.sum()), int((~t).sum())
    st, sc = y[t].sum(), y[~t].sum()
    qt, qc = (y[t] ** 2).sum(), (y[~t] ** 2).sum()

    cnt_t = np.where(t, nt - 1, nt).astype(float)
    cnt_c = np.where(t, nc, nc - 1).astype(float)
    sum_t = np.where(t, st - y, st)
    sum_c = np.where(t, sc, sc - y)
    sq_t = np.where(t, qt - y * y, qt)
    sq_c = np.where(t, qc, qc - y * y)
    with np.errstate(all="ignore"):
        mt = sum_t / cnt_t
        mc = sum_c / cnt_c
        theta = mt - mc
        if not need_se:
            return theta, None
        rss = (sq_t - cnt_t * mt * mt) + (sq_c - cnt_c * mc * mc)
        df = (ds.n - 1) - 2
        se = np.sqrt(rss / df * (1.0 / cnt_t + 1.0 / cnt_c)) if df > 0 else np.full(ds.n, np.nan)
    return theta, se


def _reduced_design(ds: StudyDataset, spec: AnalysisSpec):
    """Design matrix with full-column-rank and unit-norm columns.

    The two-way layout is deliberately overparameterized; dropping its
    intercept yields the same effect estimate, residuals and df, which is
    all the leave-one-out downdates need.
    """
    design = build_design(ds, spec)
    X = design.matrix
    cols = list(design.columns)
    if spec.template.kind == "anova2":
        j = cols.index("intercept")
        X = np.delete(X, j, axis=1)
    norms = np.sqrt((X * X).sum(axis=0))
    norms = np.where(norms > 0, norms, 1.0)
    return X / norms, design.response, design.unit_index, norms


def _design_loo(ds: StudyDataset, spec: AnalysisSpec, *, need_se: bool, fail: np.ndarray):
    """Leave-one-out effect estimates via Gram downdating.

    A unit owns one design row per outcome; all of its rows leave together.
    Units whose removal makes the design rank-deficient are flagged in
    ``fail`` rather than raised.
    """
    X, yv, unit_index, norms = _reduced_design(ds, spec)
    nrows, k = X.shape
    p = nrows // ds.n
    gram = cho_factor(X.T @ X)
    beta = cho_solve(gram, X.T @ yv)
    U = cho_solve(gram, X.T)  # k x nrows, G^{-1} X'
    resid = yv - X @ beta
    rss_full = float(resid @ resid)
    df = (ds.n - 1) * p - k
    ginv00 = float(cho_solve(gram, np.eye(k)[0])[0])

    theta = np.full(ds.n, np.nan)
    se = np.full(ds.n, np.nan) if need_se else None
    if p == 1:
        h = np.einsum("kn,nk->n", U, X)
        denom = 1.0 - h
        ok = denom > 1e-10
        fail |= ~ok
        safe = np.where(ok, denom, 1.0)
        theta = (beta[0] - U[0] * resid / safe) / norms[0]
        if need_se:
            rss = rss_full - resid * resid / safe
            g00 = ginv00 + U[0] * U[0] / safe
            with np.errstate(all="ignore"):
                se = np.sqrt(rss / df * g00) / norms[0] if df > 0 else se
        return theta, se

    eye = np.eye(p)
    for i in range(ds.n):
        rows = slice(i * p, (i + 1) * p)
        V = U[:, rows]  # G^{-1} X_b'
        M = eye - X[rows] @ V
        try:
            piv = cho_factor(M)
        except np.linalg.LinAlgError:
            fail[i] = True
            continue
        eb = resid[rows]
        meb = cho_solve(piv, eb)
        theta[i] = (beta[0] - V[0] @ meb) / norms[0]
        if need_se:
            rss = rss_full - eb @ meb
            g00 = ginv00 + V[0] @ cho_solve(piv, V[0])
            se[i] = np.sqrt(rss / df * g00) / norms[0] if df > 0 else np.nan
    return theta, se


def _softmax_columns(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=0)
    E = np.exp(Z)
    return E / E.sum(axis=0)


class _BalanceReplicator:
    """Per-deletion balancing weights sharing one factored dual Hessian.

    Deleting from the original study only moves the moment targets;
    deleting from the replication masks one softmax row. Either way the
    perturbation is O(1/n), so chord iterations with the full-sample
    Hessian converge in a handful of steps; stragglers fall back to exact
    damped Newton solves.
    """

    def __init__(self, d1, d2, spec, *, mediators: bool, start):
        cs, phi = constraint_pair(d1, d2, spec, mediators=mediators)
        self.d2 = d2
        self.spec = spec
        self.Cs, self.bs, self.scale, self.mu, self.vacuous = standardize(cs)
        self.gamma0 = start.dual * self.scale
        self.chol = cho_factor(dual_hessian(self.Cs, start.weights))
        self.phi = phi
        self.raw_targets = cs.targets

    def _chord(self, targets: np.ndarray, mask_diag: bool):
        """Frozen-Hessian Newton sweeps over all replicates at once.

        ``targets`` is (d, R). Returns weights (n2, R) and a boolean mask of
        replicates that still violate the gradient tolerance (routed to the
        exact solver by the caller). NaN residuals count as unconverged.
        """
        R = targets.shape[1]
        gamma = np.tile(self.gamma0[:, None], (1, R))
        rng_cols = np.arange(R)
        for it in range(MAX_CHORD_ITER + 1):
            Z = self.Cs @ gamma
            if mask_diag:
                Z[rng_cols, rng_cols] = -np.inf
            W = _softmax_columns(Z)
            G = self.Cs.T @ W - targets
            with np.errstate(invalid="ignore"):
                res = np.abs(G).max(axis=0)
            todo = ~(res <= GRAD_TOL)
            todo &= np.abs(gamma).max(axis=0) <= DUAL_BOUND
            if it == MAX_CHORD_ITER or not todo.any():
                break
            gamma[:, todo] -= cho_solve(self.chol, G[:, todo])
        return W, ~(res <= GRAD_TOL)

    def _exact(self, W, pending, targets, mask_diag: bool, fail: np.ndarray):
        for j in np.where(pending)[0]:
            Cs = np.delete(self.Cs, j, axis=0) if mask_diag else self.Cs
            gamma, grad, w, _, diverged = newton_dual(Cs, targets[:, j], self.gamma0)
            if diverged or np.abs(grad).max() > CERT_TOL:
                fail[j] = True
                continue
            W[:, j] = np.insert(w, j, 0.0) if mask_diag else w

    def _weighted_thetas(self, W: np.ndarray, fail: np.ndarray) -> np.ndarray:
        d2, spec = self.d2, self.spec
        R = W.shape[1]
        if spec.template.kind == "ttest":
            y = d2.outcomes[:, 0]
            t = d2.treatment.astype(float)
            wt = t @ W
            wc = 1.0 - wt
            with np.errstate(all="ignore"):
                theta = (y * t) @ W / wt - (y * (1.0 - t)) @ W / wc
            fail |= ~np.isfinite(theta)
            return theta

        X, yv, unit_index, norms = _reduced_design(d2, spec)
        Wrow = W[unit_index]
        G = np.einsum("nk,nr,nl->rkl", X, Wrow, X, optimize=True)
        c = np.einsum("nk,nr,n->rk", X, Wrow, yv, optimize=True)
        theta = np.full(R, np.nan)
        try:
            beta = np.linalg.solve(G, c[:, :, None])[:, :, 0]
            theta = beta[:, 0] / norms[0]
        except np.linalg.LinAlgError:
            for r in range(R):
                try:
                    theta[r] = np.linalg.solve(G[r], c[r])[0] / norms[0]
                except np.linalg.LinAlgError:
                    fail[r] = True
        fail |= ~np.isfinite(theta)
        return theta

    def d1_thetas(self, fail: np.ndarray) -> np.ndarray:
        n1 = self.phi.shape[0]
        B = (n1 * self.raw_targets[:, None] - self.phi.T) / (n1 - 1)
        Bs = (B - self.mu[:, None]) / self.scale[:, None]
        if self.vacuous.any():
            # a constant replication column can only ever meet a matching
            # constant target; a deletion that moves the target off it is
            # infeasible, exactly as rebuilding the constraints would find
            off = np.abs(Bs[self.vacuous]) > ATTAIN_TOL * np.maximum(
                1.0, np.abs(self.mu[self.vacuous])
            )[:, None]
            fail |= off.any(axis=0)
            Bs[self.vacuous] = 0.0
        W, pending = self._chord(Bs, mask_diag=False)
        self._exact(W, pending & ~fail, Bs, False, fail)
        return self._weighted_thetas(W, fail)

    def d2_thetas(self, fail: np.ndarray) -> np.ndarray:
        Bs = np.tile(self.bs[:, None], (1, self.d2.n))
        W, pending = self._chord(Bs, mask_diag=True)
        self._exact(W, pending & ~fail, Bs, True, fail)
        return self._weighted_thetas(W, fail)
