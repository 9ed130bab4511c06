"""Benchmark-study checks: generators, truths, sizing and coverage runs.

The component truths asserted here were derived by hand from each
setting's moments before the cached oracle table was generated; the table
must agree with them to within a few oracle standard errors. Derivations
are spelled out next to the constants so they can be re-audited.
"""

import json
import math
from importlib import resources

import numpy as np
import pytest
from scipy.stats import kstest, norm

from shiftdiag.errors import EstimationError, JackknifeError, ValidationError
from shiftdiag.regress import fit_dataset
from shiftdiag.simulate import (
    COMPONENT_ORDER,
    ORACLE_SETTINGS,
    DgpConfig,
    FixedN2,
    PowerCalculated,
    _draw_columns,
    generate_pair,
    generate_selected_original,
    oracle_truths,
    power_n2,
    run_coverage,
    setting_spec,
    setting_truth,
)

# Hand-derived component truths. The replication population always has
# standard-normal coordinates, so theta(Q) needs only the effect surface's
# constant terms. Worked example for s2iii (surface x1 + x3^2/4 + m1^2):
#   theta(Q)            = 0 + 1/4 + 1           = 1.25
#   + original x        = 1/2 + 1/4 + 1         = 1.75   (x1 gains mean 1/2)
#   + original m        = 1/2 + 1/4 + 9/16      = 1.3125 (m1 = N(0,1/4) + x1/2,
#                                                so E[m1^2] = 1/4 + 1/4 + 1/16)
#   covariate = 1.75 - 1.25 = 0.5; mediation = 1.3125 - 1.75 = -0.4375;
#   residual = 0 for every family that keeps the same surface, and for the
#   s3 variants it is theta_P(P) - theta_Q(P) with theta_P from the s3
#   surface (e.g. s3iii: 2 * E[x1] = 1, so residual = 1 - 1.3125 = -0.3125).
ANALYTIC_TRUTHS = {
    "s1i": {"covariate_shift": 0.5, "mediation_shift": 0.5, "residual": 0.0},
    "s1ii": {"covariate_shift": 0.5, "mediation_shift": 0.5, "residual": 0.0},
    "s1iii": {"covariate_shift": 0.6875, "mediation_shift": 0.6875, "residual": 0.0},
    "s2i": {"covariate_shift": 0.5, "mediation_shift": 0.75, "residual": 0.0},
    "s2ii": {"covariate_shift": 0.25, "mediation_shift": 1.0, "residual": 0.0},
    "s2iii": {"covariate_shift": 0.5, "mediation_shift": -0.4375, "residual": 0.0},
    "s3i": {"covariate_shift": 0.5, "mediation_shift": 0.75, "residual": -0.125},
    "s3ii": {"covariate_shift": 0.25, "mediation_shift": 1.0, "residual": -0.3},
    "s3iii": {"covariate_shift": 0.5, "mediation_shift": -0.4375, "residual": -0.3125},
}

# First moments of every drawn coordinate. Sub-setting ii mixes a fair
# latent group into x1/x2 (so the shifts halve) and bumps m1 by the fair
# treatment indicator (mean 1/2); its m2 tracks x1/2 - 1/2.
P_MEANS = {
    "s1i": {"x": 0.5, "m": 0.5},
    "s1ii": {"x": 0.5, "m": 0.5},
    "s1iii": {"x": 0.5, "m": 0.5},
    "s2i": {"x1": 0.5, "x2": -0.5, "x3": 0.0, "x4": 0.0, "m1": 0.75, "m2": -0.25, "m3": 0.0},
    "s2ii": {"x1": 0.25, "x2": -0.25, "x3": 0.0, "x4": 0.0, "m1": 0.5, "m2": -0.375, "m3": 0.0},
    "s2iii": {"x1": 0.5, "x2": -0.5, "x3": 0.0, "x4": 0.0, "m1": 0.25, "m2": -0.25, "m3": 0.0},
}


def cached_table():
    path = resources.files("shiftdiag").joinpath("data/truths.json")
    return json.loads(path.read_text(encoding="utf-8"))


class TestConfig:
    def test_setting_codes_normalize(self):
        assert DgpConfig(setting="S1_I").setting == "s1i"
        assert DgpConfig(setting="SEL_II").setting == "sel_ii"
        assert DgpConfig(setting="selii").setting == "sel_ii"
        assert DgpConfig(setting="sel_ii").family == "sel"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"setting": "s4i"},
            {"setting": "s1iv"},
            {"setting": "s1i", "sigma": 0.0},
            {"setting": "s1i", "sigma": float("nan")},
            {"setting": "sel_i", "nu": -0.1},
            {"setting": "s1i", "n1": 1},
            {"setting": "s1i", "seed": -1},
            {"setting": "s1i", "sampling": 500},
        ],
    )
    def test_rejects_bad_fields(self, kwargs):
        with pytest.raises(ValidationError):
            DgpConfig(**kwargs)

    def test_sampling_validation(self):
        with pytest.raises(ValidationError):
            FixedN2(1)
        with pytest.raises(ValidationError):
            PowerCalculated(power=1.0)
        with pytest.raises(ValidationError):
            PowerCalculated(shrink=0.0)
        with pytest.raises(ValidationError):
            PowerCalculated(alpha=0.0)


class TestSettingSpec:
    def test_univariate_roster(self):
        spec = setting_spec("s1ii")
        assert [(c.column, c.moments) for c in spec.covariates] == [("x", "mean")]
        assert [(m.column, m.moments) for m in spec.mediators] == [("m", "mean")]
        assert spec.template.kind == "ttest"

    def test_multivariate_roster_drops_unlisted_coordinates(self):
        spec = setting_spec("s2ii")
        assert [c.column for c in spec.covariates] == ["x1", "x2", "x3"]
        assert [m.column for m in spec.mediators] == ["m1", "m2"]
        assert all(c.moments == "mean" for c in spec.covariates)

    def test_third_variant_uses_second_moments(self):
        spec = setting_spec("s3iii")
        assert [c.column for c in spec.covariates] == ["x1", "x3"]
        assert [(m.column, m.moments) for m in spec.mediators] == [
            ("m1", "mean_and_second_moment"),
            ("m2", "mean_and_second_moment"),
        ]

    def test_selection_and_level_wiring(self):
        spec = setting_spec("sel_i", selection_alpha0=0.05, ci_level=0.8)
        assert spec.selection is not None and spec.selection.alpha0 == 0.05
        assert spec.ci_level == 0.8
        assert setting_spec("sel_i").selection is None


class TestPowerN2:
    def test_worked_examples(self):
        # kappa = 1 via se = 0.1 at n1 = 100; (1.95996 + 1.28155) / 0.9
        # squared is 12.97, so 13; with power 0.8 the sum drops to 2.80158
        # and the ratio squared is 9.69, so 10.
        assert power_n2(1.0, 0.1, 100) == 13
        assert power_n2(1.0, 0.1, 100, power=0.8) == 10

    def test_floor_is_two(self):
        assert power_n2(50.0, 0.1, 100) == 2

    def test_scale_invariance(self):
        # doubling both the effect and the dispersion leaves n2 unchanged
        assert power_n2(0.4, 0.05, 200) == power_n2(0.8, 0.1, 200)

    @pytest.mark.parametrize(
        "args, kwargs",
        [
            ((0.0, 0.1, 100), {}),
            ((1.0, 0.0, 100), {}),
            ((1.0, -0.1, 100), {}),
            ((1.0, 0.1, 1), {}),
            ((1.0, 0.1, 100), {"shrink": 0.0}),
            ((1.0, 0.1, 100), {"power": 1.0}),
            ((1.0, 0.1, 100), {"alpha": 0.0}),
        ],
    )
    def test_rejects_degenerate_inputs(self, args, kwargs):
        with pytest.raises(ValidationError):
            power_n2(*args, **kwargs)


class TestTruths:
    @pytest.mark.parametrize("setting", ORACLE_SETTINGS)
    def test_cached_truths_match_hand_derivation(self, setting):
        row = cached_table()["settings"][setting]
        expect = ANALYTIC_TRUTHS[setting]
        for name, value in expect.items():
            se = row["se"][name]
            if se == 0.0:
                assert row[name] == value
            else:
                assert abs(row[name] - value) <= 4.0 * se
        observed = sum(expect.values())
        assert abs(row["observed"] - observed) <= 4.0 * max(row["se"]["observed"], 1e-12)

    def test_shared_surface_families_have_exactly_zero_residual(self):
        table = cached_table()["settings"]
        for setting in ("s1i", "s1ii", "s1iii", "s2i", "s2ii", "s2iii"):
            assert table[setting]["residual"] == 0.0
            assert table[setting]["se"]["residual"] == 0.0

    def test_selection_truths_scale_with_signal(self):
        base = setting_truth("s2ii")
        scaled = setting_truth("sel_ii", nu=0.1)
        for name in COMPONENT_ORDER:
            assert scaled[name] == pytest.approx(0.1 * base[name], abs=1e-15)

    def test_truth_ignores_noise_scale(self):
        quiet = generate_pair(DgpConfig(setting="s3i", sigma=1.0, n1=60, sampling=FixedN2(60), seed=4))[2]
        loud = generate_pair(DgpConfig(setting="s3i", sigma=3.0, n1=60, sampling=FixedN2(60), seed=4))[2]
        assert quiet == loud

    def test_oracle_rejects_selection_settings(self):
        with pytest.raises(ValidationError, match="scaled by nu"):
            oracle_truths("sel_i")

    @pytest.mark.slow
    def test_cached_table_regenerates_bit_identically(self):
        table = cached_table()
        assert table["oracle"] == {"n": 1_000_000, "seed": 20260815}
        for setting in ORACLE_SETTINGS:
            assert oracle_truths(setting) == table["settings"][setting]


class TestDraws:
    @pytest.mark.parametrize("setting", ["s1i", "s1ii", "s1iii", "s2i", "s2ii", "s2iii"])
    @pytest.mark.parametrize("dist", ["P", "Q"])
    def test_first_moments(self, setting, dist):
        n = 100_000
        config = DgpConfig(setting=setting, seed=2)
        rng = np.random.default_rng(
            np.random.SeedSequence((13, ORACLE_SETTINGS.index(setting), dist == "P"))
        )
        cols = _draw_columns(config, dist, rng, n)
        expected = P_MEANS[setting] if dist == "P" else {k: 0.0 for k in P_MEANS[setting]}
        bound = 4.0 / math.sqrt(n)
        for name, mean in expected.items():
            assert abs(cols[name].mean() - mean) < bound, name
        assert abs(cols["t"].mean() - 0.5) < bound

    def test_selection_family_scales_outcome(self):
        # with nu = 0 the outcome is pure noise regardless of the effect surface
        config = DgpConfig(setting="sel_i", nu=0.0, seed=8)
        rng = np.random.default_rng(0)
        cols = _draw_columns(config, "P", rng, 50_000)
        treated = cols["t"] == 1.0
        assert abs(cols["y"][treated].mean() - cols["y"][~treated].mean()) < 0.05


class TestGeneratePair:
    def test_fixed_sampling_shapes_and_determinism(self):
        config = DgpConfig(setting="s2i", n1=80, sampling=FixedN2(50), seed=14)
        d1, d2, truth = generate_pair(config)
        assert (d1.n, d2.n) == (80, 50)
        assert sorted(d1.numeric) == ["m1", "m2", "x1", "x2", "x3"]
        assert truth == setting_truth("s2i")
        d1b, d2b, _ = generate_pair(config)
        assert np.array_equal(d1.outcomes, d1b.outcomes)
        assert np.array_equal(d2.outcomes, d2b.outcomes)

    def test_power_sampling_sizes_from_the_original_fit(self):
        sampling = PowerCalculated(shrink=0.8, power=0.85, alpha=0.1)
        config = DgpConfig(setting="s2i", sigma=1.5, n1=300, sampling=sampling, seed=21)
        d1, d2, _ = generate_pair(config)
        fit = fit_dataset(d1, setting_spec("s2i"))
        assert d2.n == power_n2(fit.theta, fit.se_theta, 300, shrink=0.8, power=0.85, alpha=0.1)

    def test_mean_replication_size_regression(self):
        # pinned targets for the power-sized replication at sigma = 1: the
        # run mean over 500 replicates must sit within 10% of 119.6 (s1i)
        # and 99.62 (s2i)
        for setting, target in (("s1i", 119.6), ("s2i", 99.62)):
            config = DgpConfig(setting=setting, n1=500, sampling=PowerCalculated(), seed=0)
            sizes = []
            for rep in range(500):
                rng = np.random.default_rng(np.random.SeedSequence((config.seed, rep)))
                sizes.append(generate_pair(config, rng=rng)[1].n)
            assert 0.9 * target <= float(np.mean(sizes)) <= 1.1 * target, setting


class TestSelectedOriginal:
    def test_accepted_study_clears_the_filter(self):
        config = DgpConfig(setting="sel_ii", nu=0.2, seed=3)
        d1, n2, attempts = generate_selected_original(config)
        fit = fit_dataset(d1, setting_spec("sel_ii"))
        assert abs(fit.theta / fit.se_theta) > 1.95996
        assert n2 >= 2 and attempts >= 1
        d1b, n2b, attemptsb = generate_selected_original(config)
        assert np.array_equal(d1.outcomes, d1b.outcomes)
        assert (n2, attempts) == (n2b, attemptsb)

    def test_non_selection_setting_rejected(self):
        with pytest.raises(ValidationError, match="sel_"):
            generate_selected_original(DgpConfig(setting="s2i"))

    def test_null_acceptance_rate_tracks_the_filter_level(self):
        config = DgpConfig(setting="sel_ii", nu=0.0, seed=9)
        runs = 0
        total = 0
        while total < 10_000:
            rng = np.random.default_rng(np.random.SeedSequence((config.seed, runs)))
            total += generate_selected_original(config, rng=rng)[2]
            runs += 1
        assert 0.04 <= runs / total <= 0.06

    def test_accepted_statistics_follow_the_truncated_normal_law(self):
        # sel_i at nu = 0.2: the mean effect is nu * 1.25 and the pooled
        # outcome variance is (1 + 1 + nu^2 * 3.5) / 2, where 3.5 is the
        # variance of the per-unit effect (1.5 x1 + x3 + N(0, 1/4) + 1/2).
        # The accepted z statistic should then follow a unit-variance
        # normal centred there, cut to |z| above the 5% threshold.
        nu = 0.2
        n1 = 500
        mu = nu * 1.25 / math.sqrt((2.0 + nu**2 * 3.5) / 2.0 * 4.0 / n1)
        tau = norm.ppf(0.975)

        def law(z):
            z = np.asarray(z, dtype=float)
            left = norm.cdf(-tau - mu)
            mass = left + norm.sf(tau - mu)
            above = left + norm.cdf(z - mu) - norm.cdf(tau - mu)
            return np.where(z <= -tau, norm.cdf(z - mu), np.where(z <= tau, left, above)) / mass

        config = DgpConfig(setting="sel_i", nu=nu, n1=n1, seed=11)
        spec = setting_spec("sel_i")
        stats = []
        for rep in range(2000):
            rng = np.random.default_rng(np.random.SeedSequence((config.seed, rep)))
            d1, _, _ = generate_selected_original(config, rng=rng)
            fit = fit_dataset(d1, spec)
            stats.append(fit.theta / fit.se_theta)
        assert kstest(np.array(stats), law).statistic < 0.05


class TestRunCoverage:
    def test_standard_smoke(self):
        config = DgpConfig(setting="s1i", n1=150, sampling=FixedN2(150), seed=7)
        report = run_coverage(config, "standard", reps=20)
        assert report.failures == 0
        assert report.mean_n2 == 150.0
        for name in COMPONENT_ORDER:
            comp = report.components[name]
            assert comp.count == 20
            assert 0.6 <= comp.coverage <= 1.0
            assert comp.sd == pytest.approx(
                math.sqrt(comp.coverage * (1 - comp.coverage) / comp.count)
            )

    def test_single_replicate_coverage_is_binary(self):
        config = DgpConfig(setting="s1ii", n1=90, sampling=FixedN2(90), seed=1)
        report = run_coverage(config, "standard", reps=1)
        assert all(report.components[n].coverage in (0.0, 1.0) for n in COMPONENT_ORDER)
        assert all(report.components[n].count == 1 for n in COMPONENT_ORDER)

    def test_selected_adjusted_smoke(self):
        config = DgpConfig(setting="sel_ii", nu=0.2, seed=3)
        report = run_coverage(config, "selected_adjusted", reps=3)
        assert report.failures == 0
        assert report.mean_n2 >= 2.0
        assert set(report.components) == set(COMPONENT_ORDER)

    def test_covariate_only_replicate_scores_partial_components(self):
        # two replicates of this stream draw small replications whose
        # mediator targets sit outside the sample hull; those decompositions
        # degrade to covariate-only, so mediation and the leftover score on
        # the remaining replicate while observed keeps all three
        config = DgpConfig(setting="s2i", sigma=1.0, n1=500, sampling=PowerCalculated(), seed=0)
        report = run_coverage(config, "power_calculated", reps=3)
        assert report.failures == 0
        assert report.components["observed"].count == 3
        assert report.components["covariate_shift"].count == 3
        assert report.components["mediation_shift"].count == 1
        assert report.components["residual"].count == 1

    def test_worker_count_does_not_change_results(self, monkeypatch):
        config = DgpConfig(setting="s2iii", sigma=2.0, n1=120, sampling=FixedN2(120), seed=5)
        monkeypatch.setenv("SHIFTDIAG_THREADS", "1")
        serial = run_coverage(config, "standard", reps=6)
        monkeypatch.setenv("SHIFTDIAG_THREADS", "4")
        pooled = run_coverage(config, "standard", reps=6)
        assert serial.to_dict() == pooled.to_dict()

    def test_failure_budget_enforced(self, monkeypatch):
        def explode(*args, **kwargs):
            raise JackknifeError("forced replicate failure")

        monkeypatch.setattr("shiftdiag.simulate.jackknife_covariance", explode)
        config = DgpConfig(setting="s1i", n1=60, sampling=FixedN2(60), seed=2)
        with pytest.raises(EstimationError, match="budget"):
            run_coverage(config, "standard", reps=5)

    def test_validation(self):
        config = DgpConfig(setting="s1i")
        with pytest.raises(ValidationError, match="method"):
            run_coverage(config, "bootstrap", reps=2)
        with pytest.raises(ValidationError, match="sel_"):
            run_coverage(config, "selected_adjusted", reps=2)
        with pytest.raises(ValidationError):
            run_coverage(config, "standard", reps=0)
        with pytest.raises(ValidationError):
            run_coverage(config, "standard", reps=2, level=1.0)

    def test_report_serialization_round_trip(self):
        config = DgpConfig(setting="s1i", n1=70, sampling=FixedN2(70), seed=6)
        report = run_coverage(config, "standard", reps=2)
        doc = report.to_dict()
        assert json.loads(json.dumps(doc)) == doc
        assert doc["requested"] - doc["failures"] == doc["components"]["observed"]["count"]
        lines = report.to_csv().strip().splitlines()
        assert lines[0] == "setting,sigma,nu,method,component,coverage,sd,mean_n2"
        assert len(lines) == 1 + len(COMPONENT_ORDER)
        assert lines[1].startswith("s1i,1.0,0.0,standard,observed,")
