"""Synthetic benchmark studies for the decomposition pipeline.

Three families of original/replication pairs with known component truths:

* ``s1*``  - one covariate and one mediator, shifted means under the
  original population;
* ``s2*``  - four covariates and three mediators, with mediators that
  react to covariates (and in one variant to treatment);
* ``s3*``  - the ``s2`` populations but with a different treatment-effect
  surface in the original study, so the residual component is nonzero;
* ``sel_*`` - the ``s2`` populations with a weak signal ``nu``, where the
  original study is redrawn until its effect is significant.

Ground-truth component values come from a large pinned-seed Monte Carlo
oracle (``oracle_truths``) and are cached in ``data/truths.json`` so that
routine runs never pay the oracle cost. ``run_coverage`` repeats the whole
estimation pipeline over independent replicates and reports how often each
component's confidence interval covers its truth.
"""

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources

import numpy as np
from scipy.stats import norm

from .datamodel import AnalysisSpec, from_columns
from .decomp import estimate_components
from .errors import EstimationError, ShiftDiagError, ValidationError
from .inference import component_summaries, jackknife_covariance
from .regress import fit_dataset
from .selectadj import adjust_components

#: settings accepted by DgpConfig; the sel_* entries reuse the s2 populations.
SETTINGS = (
    "s1i", "s1ii", "s1iii",
    "s2i", "s2ii", "s2iii",
    "s3i", "s3ii", "s3iii",
    "sel_i", "sel_ii", "sel_iii",
)
#: settings with their own oracle entry (sel_* truths are nu-scaled s2 truths).
ORACLE_SETTINGS = SETTINGS[:9]

ORACLE_N = 1_000_000
ORACLE_SEED = 20260815

METHODS = ("standard", "power_calculated", "selected_unadjusted", "selected_adjusted")
COMPONENT_ORDER = ("observed", "covariate_shift", "mediation_shift", "residual")

#: two-sided significance level of the original-study filter.
SELECTION_ALPHA = 0.05
MAX_SELECTION_ATTEMPTS = 100_000
#: share of replicates allowed to fail before a coverage run aborts.
FAILURE_BUDGET = 0.02

_FAMILIES = ("s1", "s2", "s3", "sel")
_SUBS = ("i", "ii", "iii")


def _parse_setting(code):
    low = str(code).strip().lower()
    if low.startswith("sel"):
        family, sub = "sel", low[3:].lstrip("_")
    else:
        family, sub = low[:2], low[2:].lstrip("_")
    if family not in _FAMILIES or sub not in _SUBS:
        raise ValidationError(f"unknown simulation setting {code!r}; expected one of {', '.join(SETTINGS)}")
    return family, sub


def _canonical(family: str, sub: str) -> str:
    return f"sel_{sub}" if family == "sel" else f"{family}{sub}"


@dataclass(frozen=True)
class FixedN2:
    """Replication size fixed up front."""

    n2: int = 500

    def __post_init__(self):
        if int(self.n2) < 2:
            raise ValidationError(f"replication size must be at least 2, got {self.n2!r}")
        object.__setattr__(self, "n2", int(self.n2))


@dataclass(frozen=True)
class PowerCalculated:
    """Replication sized to detect a shrunken version of the pilot effect."""

    shrink: float = 0.9
    power: float = 0.9
    alpha: float = 0.05

    def __post_init__(self):
        if not (math.isfinite(self.shrink) and self.shrink > 0.0):
            raise ValidationError(f"shrink factor must be positive, got {self.shrink!r}")
        if not 0.0 < self.power < 1.0:
            raise ValidationError(f"target power must be in (0, 1), got {self.power!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"test level must be in (0, 1), got {self.alpha!r}")


@dataclass(frozen=True)
class DgpConfig:
    """One synthetic study pair: which populations, how noisy, how sampled."""

    setting: str
    sigma: float = 1.0
    nu: float = 0.0
    n1: int = 500
    sampling: "FixedN2 | PowerCalculated" = field(default_factory=FixedN2)
    seed: int = 0

    def __post_init__(self):
        family, sub = _parse_setting(self.setting)
        object.__setattr__(self, "setting", _canonical(family, sub))
        if not (math.isfinite(self.sigma) and self.sigma > 0.0):
            raise ValidationError(f"noise scale must be positive, got {self.sigma!r}")
        if not (math.isfinite(self.nu) and self.nu >= 0.0):
            raise ValidationError(f"signal strength must be nonnegative, got {self.nu!r}")
        if int(self.n1) < 2:
            raise ValidationError(f"original size must be at least 2, got {self.n1!r}")
        object.__setattr__(self, "n1", int(self.n1))
        if not isinstance(self.sampling, (FixedN2, PowerCalculated)):
            raise ValidationError("sampling must be FixedN2 or PowerCalculated")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def family(self) -> str:
        return _parse_setting(self.setting)[0]


@dataclass(frozen=True)
class ComponentCoverage:
    coverage: float
    sd: float
    count: int


@dataclass(frozen=True)
class CoverageReport:
    """Empirical CI coverage per component over independent replicates."""

    setting: str
    method: str
    sigma: float
    nu: float
    level: float
    seed: int
    requested: int
    failures: int
    mean_n2: float
    components: dict[str, ComponentCoverage]

    def to_dict(self) -> dict:
        return {
            "setting": self.setting,
            "method": self.method,
            "sigma": self.sigma,
            "nu": self.nu,
            "level": self.level,
            "seed": self.seed,
            "requested": self.requested,
            "failures": self.failures,
            "mean_n2": self.mean_n2,
            "components": {
                name: {"coverage": c.coverage, "sd": c.sd, "count": c.count}
                for name, c in self.components.items()
            },
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["setting", "sigma", "nu", "method", "component", "coverage", "sd", "mean_n2"])
        for name in COMPONENT_ORDER:
            comp = self.components[name]
            writer.writerow(
                [self.setting, repr(self.sigma), repr(self.nu), self.method,
                 name, repr(comp.coverage), repr(comp.sd), repr(self.mean_n2)]
            )
        return buf.getvalue()


# --------------------------------------------------------------------------
# population draws


def _draw_s1(sub, dist, rng, n):
    """(x, m) columns for the univariate family; m never reacts to treatment."""
    if dist == "Q":
        return rng.standard_normal(n), rng.standard_normal(n)
    if sub == "ii":
        x = rng.standard_normal(n) + rng.integers(0, 2, n)  # even mixture of N(0,1) and N(1,1)
    else:
        x = rng.normal(0.5, 1.0, n)
    return x, rng.normal(0.5, 1.0, n)


def _draw_s2(sub, dist, rng, n, t):
    """(x, m) blocks for the four-covariate families.

    Under the original population the first two covariates are shifted
    (continuously or via a latent group) and the first two mediators track
    the first covariate; in sub-setting ``ii`` the first mediator also
    moves one unit under treatment.
    """
    x = rng.standard_normal((n, 4))
    if dist == "Q":
        return x, rng.standard_normal((n, 3))
    m = np.empty((n, 3))
    if sub == "ii":
        group = rng.integers(0, 2, n)
        x[:, 0] += 0.5 * group
        x[:, 1] -= 0.5 * group
        base = rng.standard_normal((n, 3))
        m[:, 0] = base[:, 0] + t
        m[:, 1] = base[:, 1] + 0.5 * x[:, 0] - 0.5
        m[:, 2] = base[:, 2]
    else:
        x[:, 0] += 0.5
        x[:, 1] -= 0.5
        lift = 0.5 if sub == "i" else 0.0
        m[:, 0] = rng.normal(0.0, 0.5, n) + 0.5 * x[:, 0] + lift
        m[:, 1] = rng.normal(0.0, 0.5, n) + 0.5 * x[:, 0] - 0.5
        m[:, 2] = rng.standard_normal(n)
    return x, m


def _delta_s1(sub, x, m):
    if sub == "iii":
        return 1.1 * (x + m + 0.5 * x**2 + 0.5 * m**2)
    return x + m


def _delta_s2(sub, x, m):
    if sub == "iii":
        return x[:, 0] + 0.25 * x[:, 2] ** 2 + m[:, 0] ** 2
    return x[:, 0] + x[:, 2] + m[:, 0]


def _delta_s3_original(sub, x, m):
    if sub == "i":
        return x[:, 0] + x[:, 2] + 0.5 * x[:, 0] ** 2
    if sub == "ii":
        return x[:, 0] + x[:, 2] + 0.7
    return 2.0 * x[:, 0]


def _effect(family, sub, dist, x, m):
    """Per-unit treatment effect; the s3 original population has its own surface."""
    if family == "s1":
        return _delta_s1(sub, x, m)
    if family == "s3" and dist == "P":
        return _delta_s3_original(sub, x, m)
    return _delta_s2(sub, x, m)


def _draw_columns(config: DgpConfig, dist: str, rng, n: int) -> dict:
    """Raw named columns for one study; includes the never-balanced coordinates."""
    family, sub = _parse_setting(config.setting)
    t = rng.integers(0, 2, n).astype(float)
    if family == "s1":
        x, m = _draw_s1(sub, dist, rng, n)
        cols = {"x": x, "m": m}
    else:
        x, m = _draw_s2(sub, dist, rng, n, t)
        cols = {f"x{j + 1}": x[:, j] for j in range(4)}
        cols.update({f"m{j + 1}": m[:, j] for j in range(3)})
    signal = config.nu if family == "sel" else 1.0
    y = signal * t * _effect(family, sub, dist, x, m) + config.sigma * rng.standard_normal(n)
    cols["t"] = t
    cols["y"] = y
    return cols


def setting_spec(setting, *, selection_alpha0=None, ci_level: float = 0.90) -> AnalysisSpec:
    """Analysis spec with the balancing roster each setting prescribes.

    The univariate family balances both coordinates on their means. The
    multivariate families balance the first three covariates and first two
    mediators on means, except sub-setting ``iii`` which drops the second
    covariate and adds mediator second moments; the remaining coordinates
    are deliberately left out of the roster.
    """
    family, sub = _parse_setting(setting)
    if family == "s1":
        covariates = [{"column": "x", "moments": "mean"}]
        mediators = [{"column": "m", "moments": "mean"}]
    elif sub == "iii":
        covariates = [{"column": c, "moments": "mean"} for c in ("x1", "x3")]
        mediators = [{"column": c, "moments": "mean_and_second_moment"} for c in ("m1", "m2")]
    else:
        covariates = [{"column": c, "moments": "mean"} for c in ("x1", "x2", "x3")]
        mediators = [{"column": c, "moments": "mean"} for c in ("m1", "m2")]
    body = {
        "outcomes": ["y"],
        "treatment": "t",
        "template": "ttest",
        "covariates": covariates,
        "mediators": mediators,
        "ci_level": ci_level,
    }
    if selection_alpha0 is not None:
        body["selection"] = {"alpha0": selection_alpha0}
    return AnalysisSpec.from_dict(body)


# --------------------------------------------------------------------------
# ground truths


def oracle_truths(setting, n: int = ORACLE_N, seed: int = ORACLE_SEED) -> dict:
    """Monte Carlo component truths for one setting.

    Works on the treated arm only: the baseline surface is zero and the
    noise is additive with mean zero, so every population's effect equals
    the mean per-unit effect among its treated units and both drop out of
    the contrast. The three coupled populations reuse the original-study
    draws of whatever they condition on, so each component is the mean of
    an explicit per-draw difference and carries its own standard error.
    """
    family, sub = _parse_setting(setting)
    if family == "sel":
        raise ValidationError("selection settings reuse the s2 truths scaled by nu")
    rng = np.random.default_rng(np.random.SeedSequence((seed, ORACLE_SETTINGS.index(_canonical(family, sub)))))
    if family == "s1":
        x_orig, m_orig = _draw_s1(sub, "P", rng, n)
        _, m_swap = _draw_s1(sub, "Q", rng, n)
        x_rep, m_rep = _draw_s1(sub, "Q", rng, n)
    else:
        ones = np.ones(n)
        x_orig, m_orig = _draw_s2(sub, "P", rng, n, ones)
        _, m_swap = _draw_s2(sub, "Q", rng, n, ones)
        x_rep, m_rep = _draw_s2(sub, "Q", rng, n, ones)

    effect_orig = _effect(family, sub, "P", x_orig, m_orig)
    effect_coupled = _effect(family, sub, "Q", x_orig, m_orig)
    effect_cov = _effect(family, sub, "Q", x_orig, m_swap)
    effect_rep = _effect(family, sub, "Q", x_rep, m_rep)

    samples = {
        "observed": effect_orig - effect_rep,
        "covariate_shift": effect_cov - effect_rep,
        "mediation_shift": effect_coupled - effect_cov,
        "residual": effect_orig - effect_coupled,
    }
    out = {name: float(np.mean(vals)) for name, vals in samples.items()}
    out["se"] = {
        name: float(np.std(vals, ddof=1) / math.sqrt(n)) for name, vals in samples.items()
    }
    return out


@lru_cache(maxsize=1)
def _truth_table() -> dict:
    path = resources.files("shiftdiag").joinpath("data/truths.json")
    with path.open(encoding="utf-8") as fh:
        return json.load(fh)


def setting_truth(setting, nu: float = 1.0) -> dict[str, float]:
    """Cached ground-truth components; sel_* truths scale linearly with nu."""
    family, sub = _parse_setting(setting)
    if family == "sel":
        base = _truth_table()["settings"][_canonical("s2", sub)]
        scale = float(nu)
    else:
        base = _truth_table()["settings"][_canonical(family, sub)]
        scale = 1.0
    return {name: scale * base[name] for name in COMPONENT_ORDER}


# --------------------------------------------------------------------------
# study generation


def power_n2(theta_hat, se_hat, n1, shrink: float = 0.9, power: float = 0.9, alpha: float = 0.05) -> int:
    """Smallest replication size that detects ``shrink * theta_hat``.

    Uses the pilot study's per-unit dispersion ``se_hat * sqrt(n1)`` and the
    two-sided normal test at ``alpha``; never below 2.
    """
    theta_hat = float(theta_hat)
    se_hat = float(se_hat)
    if not math.isfinite(theta_hat) or theta_hat == 0.0:
        raise ValidationError("pilot effect estimate is zero; every replication size has trivial power")
    if not (math.isfinite(se_hat) and se_hat > 0.0):
        raise ValidationError(f"pilot standard error must be positive, got {se_hat!r}")
    if int(n1) < 2:
        raise ValidationError(f"pilot size must be at least 2, got {n1!r}")
    if not (math.isfinite(shrink) and shrink > 0.0):
        raise ValidationError(f"shrink factor must be positive, got {shrink!r}")
    if not 0.0 < power < 1.0:
        raise ValidationError(f"target power must be in (0, 1), got {power!r}")
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"test level must be in (0, 1), got {alpha!r}")
    kappa = se_hat * math.sqrt(int(n1))
    quantiles = norm.ppf(1.0 - alpha / 2.0) + norm.ppf(power)
    return max(2, math.ceil((kappa * quantiles / (shrink * abs(theta_hat))) ** 2))


def generate_pair(config: DgpConfig, rng=None):
    """Draw one original/replication pair plus its ground-truth components.

    With ``PowerCalculated`` sampling the replication size comes from the
    original study's own fit, mirroring how a replication would actually
    be sized.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    spec = setting_spec(config.setting)
    cols1 = _draw_columns(config, "P", rng, config.n1)
    d1 = from_columns(spec, cols1, source=f"{config.setting}:original")
    if isinstance(config.sampling, FixedN2):
        n2 = config.sampling.n2
    else:
        fit = fit_dataset(d1, spec)
        n2 = power_n2(
            fit.theta, fit.se_theta, config.n1,
            shrink=config.sampling.shrink, power=config.sampling.power, alpha=config.sampling.alpha,
        )
    cols2 = _draw_columns(config, "Q", rng, n2)
    d2 = from_columns(spec, cols2, source=f"{config.setting}:replication")
    nu = config.nu if config.family == "sel" else 1.0
    return d1, d2, setting_truth(config.setting, nu=nu)


def _ttest_stats(t, y):
    """Effect, standard error and z for the plain treated/control contrast.

    Same closed form as the ttest template so the filter below agrees with
    the z statistic the pipeline later reports. Returns None for a
    single-arm draw.
    """
    treated = t == 1.0
    n_t = int(treated.sum())
    if n_t == 0 or n_t == t.size:
        return None
    y_t = y[treated]
    y_c = y[~treated]
    theta = float(y_t.mean() - y_c.mean())
    rss = float(((y_t - y_t.mean()) ** 2).sum() + ((y_c - y_c.mean()) ** 2).sum())
    se = math.sqrt(rss / (t.size - 2) * (1.0 / n_t + 1.0 / (t.size - n_t)))
    if se == 0.0 or not math.isfinite(se):
        return None
    return theta, se, theta / se


def generate_selected_original(config: DgpConfig, rng=None):
    """Redraw the original study until its effect clears the two-sided filter.

    Returns the accepted study, the power-0.8 replication size computed
    from it, and how many draws were needed. Sampling parameters other
    than power come from ``config.sampling`` when it is power-based.
    """
    family, _ = _parse_setting(config.setting)
    if family != "sel":
        raise ValidationError("significance filtering is defined for the sel_* settings only")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    if isinstance(config.sampling, PowerCalculated):
        shrink, power, alpha = config.sampling.shrink, config.sampling.power, config.sampling.alpha
    else:
        shrink, power, alpha = 0.9, 0.8, 0.05
    threshold = norm.ppf(1.0 - SELECTION_ALPHA / 2.0)
    spec = setting_spec(config.setting)
    for attempt in range(1, MAX_SELECTION_ATTEMPTS + 1):
        cols = _draw_columns(config, "P", rng, config.n1)
        stats = _ttest_stats(cols["t"], cols["y"])
        if stats is None:
            continue
        theta, se, z = stats
        if abs(z) > threshold:
            d1 = from_columns(spec, cols, source=f"{config.setting}:original#selected")
            n2 = power_n2(theta, se, config.n1, shrink=shrink, power=power, alpha=alpha)
            return d1, n2, attempt
    raise EstimationError(
        f"no original study cleared the significance filter in {MAX_SELECTION_ATTEMPTS} attempts"
    )


# --------------------------------------------------------------------------
# coverage experiments


def _thread_budget() -> int:
    raw = os.environ.get("SHIFTDIAG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _normal_component_cis(vec, cov, level: float) -> dict:
    """Per-component normal intervals; the residual is the leftover contrast."""
    rows = component_summaries(vec, cov, level)
    return {
        name: (rows[name]["ci_lo"], rows[name]["ci_hi"])
        for name in COMPONENT_ORDER
        if name in rows
    }


def run_coverage(config: DgpConfig, method: str, reps: int, level: float = 0.90) -> CoverageReport:
    """Empirical coverage of the component CIs over independent replicates.

    Each replicate draws its data per ``method``, runs estimation, leave-
    one-out inference and (for ``selected_adjusted``) the selection
    adjustment, then scores each component CI against the cached truth.
    A replicate that degrades to a covariate-only decomposition scores just
    the components it produced, so per-component counts can differ; a
    replicate that raises counts against the failure budget. Replicate RNG
    streams are split from ``(seed, replicate_index)``, so results do not
    depend on the worker count.
    """
    if method not in METHODS:
        raise ValidationError(f"unknown coverage method {method!r}; expected one of {', '.join(METHODS)}")
    reps = int(reps)
    if reps < 1:
        raise ValidationError(f"replicate count must be at least 1, got {reps!r}")
    if not 0.0 < level < 1.0:
        raise ValidationError(f"confidence level must be in (0, 1), got {level!r}")
    family, _ = _parse_setting(config.setting)
    selected = method in ("selected_unadjusted", "selected_adjusted")
    if selected and family != "sel":
        raise ValidationError(f"method {method!r} needs a sel_* setting, got {config.setting!r}")

    if method == "standard":
        sampling = config.sampling if isinstance(config.sampling, FixedN2) else FixedN2()
    elif method == "power_calculated":
        sampling = config.sampling if isinstance(config.sampling, PowerCalculated) else PowerCalculated()
    else:
        sampling = config.sampling
    base = replace(config, sampling=sampling)
    spec = setting_spec(
        config.setting,
        selection_alpha0=SELECTION_ALPHA if method == "selected_adjusted" else None,
        ci_level=level,
    )
    truth = setting_truth(config.setting, nu=config.nu if family == "sel" else 1.0)

    def one(rep: int):
        rng = np.random.default_rng(np.random.SeedSequence((base.seed, rep)))
        try:
            if selected:
                d1, n2, _ = generate_selected_original(base, rng=rng)
                cols2 = _draw_columns(base, "Q", rng, n2)
                d2 = from_columns(spec, cols2, source=f"{base.setting}:replication")
            else:
                d1, d2, _ = generate_pair(base, rng=rng)
            estimate_components(d1, d2, spec)
            vec, cov = jackknife_covariance(d1, d2, spec)
            if method == "selected_adjusted":
                _, adjusted = adjust_components(vec, cov, spec)
                keys = {"observed": "population_discrepancy"}
                keys.update((n, n) for n in ("covariate_shift", "mediation_shift", "residual"))
                cis = {n: adjusted.cis[k] for n, k in keys.items() if k in adjusted.cis}
            else:
                cis = _normal_component_cis(vec, cov, level)
            if "mediation_shift" not in cis:
                # mediator balancing was infeasible for this draw; the
                # leftover then absorbs the skipped stage and estimates a
                # different quantity, so only the surviving stages score
                cis.pop("residual", None)
            hits = {name: bool(lo <= truth[name] <= hi) for name, (lo, hi) in cis.items()}
            return hits, d2.n
        except ShiftDiagError:
            return None, 0

    workers = _thread_budget()
    outcomes: list = [None] * reps
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for rep, out in enumerate(pool.map(one, range(reps))):
                outcomes[rep] = out
    else:
        for rep in range(reps):
            outcomes[rep] = one(rep)

    failures = sum(1 for hits, _ in outcomes if hits is None)
    if failures > FAILURE_BUDGET * reps:
        raise EstimationError(
            f"{failures} of {reps} replicates failed, above the {FAILURE_BUDGET:.0%} budget"
        )
    kept = [(hits, n2) for hits, n2 in outcomes if hits is not None]
    components = {}
    for name in COMPONENT_ORDER:
        scored = [hits[name] for hits, _ in kept if name in hits]
        if not scored:
            raise EstimationError(
                f"no replicate produced the {name!r} component in {len(kept)} kept draws"
            )
        p = sum(scored) / len(scored)
        components[name] = ComponentCoverage(
            coverage=p, sd=math.sqrt(p * (1.0 - p) / len(scored)), count=len(scored)
        )
    return CoverageReport(
        setting=config.setting,
        method=method,
        sigma=config.sigma,
        nu=config.nu,
        level=level,
        seed=config.seed,
        requested=reps,
        failures=failures,
        mean_n2=float(np.mean([n2 for _, n2 in kept])),
        components=components,
    )
