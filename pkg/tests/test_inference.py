"""Jackknife covariance and normal-interval checks.

The warm-started implementation is held to the from-scratch recomputation
(`fast=False`), and the two-sample combination formula to the textbook
jackknife-of-the-mean identity.
"""

import numpy as np
import pytest

from shiftdiag.datamodel import AnalysisSpec, from_columns
from shiftdiag.decomp import estimate_components
from shiftdiag.errors import EstimationError, JackknifeError, ValidationError
from shiftdiag.inference import (
    EstimatorVector,
    JackknifeCovariance,
    _combine,
    estimator_vector,
    jackknife_covariance,
    normal_cis,
)


def loo_means(sample):
    total = sample.sum()
    return (total - sample) / (sample.size - 1)


def make_spec(**extra):
    body = {"outcomes": ["y"], "treatment": "t", "template": "ttest"}
    body.update(extra)
    return AnalysisSpec.from_dict(body)


def draw_study(spec, rng, n, mu):
    t = (rng.random(n) < 0.5).astype(float)
    t[:2] = [0.0, 1.0]
    x = rng.normal(mu, 1.0, n)
    m = rng.normal(0.3 * x, 1.0) + 0.5 * t
    y = rng.normal(1.0 + 0.8 * t + 0.5 * x + 0.7 * m, 1.0)
    cols = {"t": t, "x": x, "m": m, "y": y}
    if "y" not in spec.outcomes:
        cols = {k: v for k, v in cols.items()}
    return from_columns(spec, cols)


class TestCombineFormula:
    def test_mean_of_three_points_gives_one_third(self):
        rep1 = loo_means(np.array([1.0, 2.0, 3.0]))[:, None]
        rep2 = np.full((2, 1), 7.0)  # constant source contributes nothing
        sigma, part1, part2 = _combine(rep1, rep2)
        assert sigma[0, 0] == pytest.approx(1.0 / 3.0, abs=1e-15)
        assert part2[0, 0] == 0.0

    def test_difference_of_means_matches_sample_variances(self):
        rng = np.random.default_rng(0)
        y1 = rng.normal(2.0, 1.3, 23)
        y2 = rng.normal(1.0, 0.7, 17)
        sigma, _, _ = _combine(loo_means(y1)[:, None], loo_means(y2)[:, None])
        expect = y1.var(ddof=1) / 23 + y2.var(ddof=1) / 17
        assert sigma[0, 0] == pytest.approx(expect, rel=1e-12)


class TestWarmVsCold:
    def assert_equivalent(self, d1, d2, spec):
        vec_f, cov_f = jackknife_covariance(d1, d2, spec)
        vec_c, cov_c = jackknife_covariance(d1, d2, spec, fast=False)
        assert vec_f.labels == vec_c.labels
        assert np.array_equal(vec_f.values, vec_c.values)
        assert np.allclose(cov_f.sigma, cov_c.sigma, atol=1e-8, rtol=0)
        assert np.allclose(cov_f.d1_part, cov_c.d1_part, atol=1e-8, rtol=0)
        assert np.allclose(cov_f.d2_part, cov_c.d2_part, atol=1e-8, rtol=0)
        assert cov_f.n_failed == cov_c.n_failed
        return vec_f, cov_f

    def test_ttest_full_vector(self):
        spec = make_spec(
            covariates=[{"column": "x", "moments": "mean_and_second_moment"}],
            mediators=[{"column": "m", "moments": "mean"}],
            selection={"alpha0": 0.05},
        )
        rng = np.random.default_rng(3)
        vec, cov = self.assert_equivalent(
            draw_study(spec, rng, 40, 0.3), draw_study(spec, rng, 36, 0.0), spec
        )
        assert vec.labels == (
            "selection_z",
            "observed",
            "covariate_shift",
            "mediation_shift",
            "theta_original",
        )
        assert cov.n_failed == 0
        assert cov.n_replicates == 76

    def test_ancova_with_categorical_covariate(self):
        spec = AnalysisSpec.from_dict(
            {
                "outcomes": ["y"],
                "treatment": "t",
                "template": "ancova",
                "covariates": [
                    {"column": "x", "moments": "mean"},
                    {"column": "site", "moments": "one_hot"},
                ],
                "categorical": {"site": ["a", "b", "c"]},
            }
        )
        rng = np.random.default_rng(5)

        def study(n, mu, probs):
            t = (rng.random(n) < 0.5).astype(float)
            t[:2] = [0.0, 1.0]
            x = rng.normal(mu, 1.0, n)
            site = rng.choice(3, size=n, p=probs)
            site[:3] = [0, 1, 2]  # keep every level inhabited
            y = rng.normal(0.9 * t + 0.4 * x + 0.2 * site, 1.0)
            return from_columns(spec, {"t": t, "x": x, "site": site, "y": y})

        self.assert_equivalent(
            study(42, 0.4, [0.5, 0.3, 0.2]), study(38, 0.0, [0.3, 0.4, 0.3]), spec
        )

    def test_two_way_layout_with_selection(self):
        # two outcome rows per unit exercises the block downdates, and the
        # selection statistic exercises their standard-error updates
        spec = AnalysisSpec.from_dict(
            {
                "outcomes": ["y1", "y2"],
                "treatment": "t",
                "template": "anova2",
                "selection": {"alpha0": 0.05},
            }
        )
        rng = np.random.default_rng(9)

        def study(n):
            t = (rng.random(n) < 0.5).astype(float)
            t[:2] = [0.0, 1.0]
            y1 = rng.normal(0.9 * t, 1.0, n)
            y2 = rng.normal(1.4 * t + 0.3, 1.0, n)
            return from_columns(spec, {"t": t, "y1": y1, "y2": y2})

        vec, _ = self.assert_equivalent(study(30), study(26), spec)
        assert vec.labels == ("selection_z", "observed", "theta_original")

    def test_degraded_mediation_jackknifes_covariate_only(self):
        spec = make_spec(
            covariates=[{"column": "x", "moments": "mean"}],
            mediators=[{"column": "m", "moments": "mean"}],
        )
        rng = np.random.default_rng(17)
        d1 = draw_study(spec, rng, 35, 0.2)
        cols = {
            "t": d1.treatment.astype(float),
            "x": d1.numeric["x"],
            "m": rng.normal(8.0, 0.05, 35),  # unreachable by reweighting d2
            "y": d1.outcomes[:, 0],
        }
        d1 = from_columns(spec, cols)
        d2 = draw_study(spec, rng, 30, 0.0)
        vec, _ = self.assert_equivalent(d1, d2, spec)
        assert "mediation_shift" not in vec.labels
        assert "covariate_shift" in vec.labels


class TestMatrixShape:
    def test_symmetry_psd_and_parts(self):
        spec = make_spec(covariates=[{"column": "x", "moments": "mean"}])
        rng = np.random.default_rng(21)
        _, cov = jackknife_covariance(
            draw_study(spec, rng, 50, 0.4), draw_study(spec, rng, 45, 0.0), spec
        )
        assert np.array_equal(cov.sigma, cov.sigma.T)
        assert np.linalg.eigvalsh(cov.sigma).min() >= -1e-10
        assert np.allclose(cov.sigma, cov.d1_part + cov.d2_part, atol=1e-12)
        assert (np.diag(cov.sigma) > 0).all()

    def test_constant_outcomes_give_zero_matrix(self):
        spec = make_spec()
        rng = np.random.default_rng(2)

        def flat(n):
            t = (rng.random(n) < 0.5).astype(float)
            t[:2] = [0.0, 1.0]
            return from_columns(spec, {"t": t, "y": np.full(n, 3.0)})

        vec, cov = jackknife_covariance(flat(20), flat(18), spec)
        assert np.all(cov.sigma == 0.0)
        est = vec["observed"]
        assert normal_cis(vec, cov, 0.90)["observed"] == (est, est)

    def test_constant_replication_contributes_nothing(self):
        spec = make_spec()
        rng = np.random.default_rng(4)
        d1 = draw_study(spec, rng, 30, 0.0)
        t2 = (rng.random(25) < 0.5).astype(float)
        t2[:2] = [0.0, 1.0]
        d2 = from_columns(spec, {"t": t2, "y": np.full(25, 1.0)})
        _, cov = jackknife_covariance(d1, d2, spec)
        assert np.all(cov.d2_part == 0.0)
        assert np.array_equal(cov.sigma, cov.d1_part)


class TestFailures:
    def singular_pair(self, spec, rng, n1, n2):
        # unit 0 carries the only distinct covariate value in the original
        # study; deleting it makes the regressor constant and the fit singular
        t1 = np.tile([0.0, 1.0], n1 // 2)
        x1 = np.full(n1, 3.0)
        x1[0] = 5.0
        y1 = rng.normal(0.5 * t1, 1.0, n1)
        d1 = from_columns(spec, {"t": t1, "x": x1, "y": y1})
        t2 = np.tile([0.0, 1.0], n2 // 2)
        x2 = rng.normal(3.0, 1.0, n2)
        y2 = rng.normal(0.5 * t2 + 0.2 * x2, 1.0, n2)
        d2 = from_columns(spec, {"t": t2, "x": x2, "y": y2})
        return d1, d2

    def spec(self):
        return AnalysisSpec.from_dict(
            {
                "outcomes": ["y"],
                "treatment": "t",
                "template": "ancova",
                "covariates": [{"column": "x", "moments": "mean"}],
            }
        )

    @pytest.mark.parametrize("fast", [True, False])
    def test_rare_singular_replicate_is_dropped(self, fast):
        d1, d2 = self.singular_pair(self.spec(), np.random.default_rng(31), 140, 120)
        _, cov = jackknife_covariance(d1, d2, self.spec(), fast=fast)
        assert cov.n_failed == 1
        assert cov.n_replicates == 260

    @pytest.mark.parametrize("fast", [True, False])
    def test_too_many_failures_error(self, fast):
        d1, d2 = self.singular_pair(self.spec(), np.random.default_rng(33), 30, 30)
        with pytest.raises(JackknifeError, match="1 of 60"):
            jackknife_covariance(d1, d2, self.spec(), fast=fast)

    def test_dropped_replicate_matches_cold_sigma(self):
        d1, d2 = self.singular_pair(self.spec(), np.random.default_rng(35), 140, 120)
        _, cf = jackknife_covariance(d1, d2, self.spec())
        _, cc = jackknife_covariance(d1, d2, self.spec(), fast=False)
        assert np.allclose(cf.sigma, cc.sigma, atol=1e-8, rtol=0)


class TestEstimatorVector:
    def test_minimal_vector_has_two_entries(self):
        spec = make_spec()
        rng = np.random.default_rng(41)
        dec = estimate_components(
            draw_study(spec, rng, 24, 0.0), draw_study(spec, rng, 22, 0.0), spec
        )
        vec = estimator_vector(dec, spec)
        assert vec.labels == ("observed", "theta_original")
        assert vec["observed"] == pytest.approx(dec.observed)

    def test_selection_entry_is_model_z(self):
        spec = make_spec(selection={"alpha0": 0.1})
        rng = np.random.default_rng(43)
        d1 = draw_study(spec, rng, 28, 0.0)
        d2 = draw_study(spec, rng, 26, 0.0)
        dec = estimate_components(d1, d2, spec)
        vec = estimator_vector(dec, spec)
        assert vec.labels[0] == "selection_z"
        assert vec["selection_z"] == pytest.approx(
            dec.fit_original.theta / dec.fit_original.se_theta
        )

    def test_non_finite_entry_rejected(self):
        with pytest.raises(EstimationError, match="observed"):
            EstimatorVector(
                values=np.array([np.nan, 1.0]), labels=("observed", "theta_original")
            )

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            EstimatorVector(values=np.zeros(3), labels=("observed", "theta_original"))


class TestNormalCis:
    def one_entry(self, est, var):
        vec = EstimatorVector(values=np.array([est]), labels=("observed",))
        eye = np.array([[var]])
        cov = JackknifeCovariance(
            sigma=eye, d1_part=eye, d2_part=0 * eye, n_failed=0, n_replicates=10
        )
        return vec, cov

    def test_standard_normal_quantile(self):
        lo, hi = normal_cis(*self.one_entry(0.0, 1.0), 0.90)["observed"]
        assert lo == pytest.approx(-1.6449, abs=1e-4)
        assert hi == pytest.approx(1.6449, abs=1e-4)

    def test_shifted_and_scaled(self):
        lo, hi = normal_cis(*self.one_entry(2.48, 0.25), 0.90)["observed"]
        assert lo == pytest.approx(1.6576, abs=1e-4)
        assert hi == pytest.approx(3.3024, abs=1e-4)

    def test_zero_variance_degenerates(self):
        assert normal_cis(*self.one_entry(2.0, 0.0), 0.95)["observed"] == (2.0, 2.0)

    @pytest.mark.parametrize("level", [0.0, 1.0, -0.2, 1.7])
    def test_level_out_of_range(self, level):
        vec, cov = self.one_entry(0.0, 1.0)
        with pytest.raises(ValidationError):
            normal_cis(vec, cov, level)


class TestDeterminism:
    def test_thread_env_does_not_change_bits(self, monkeypatch):
        spec = make_spec(covariates=[{"column": "x", "moments": "mean"}])
        rng = np.random.default_rng(51)
        d1 = draw_study(spec, rng, 30, 0.3)
        d2 = draw_study(spec, rng, 28, 0.0)
        results = []
        for threads in ("1", "8"):
            monkeypatch.setenv("SHIFTDIAG_THREADS", threads)
            _, cov = jackknife_covariance(d1, d2, spec)
            results.append(cov.sigma.copy())
        assert np.array_equal(results[0], results[1])
