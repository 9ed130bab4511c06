"""Regenerate the worked-example fixtures under tests/fixtures/.

One pair of studies is drawn from the two stylized populations and shared by
both worked examples: the first example reads outcome ``y1`` (same outcome
law in both populations, so the residual is zero at the population level),
the second reads ``y2`` (an unobserved moderator differs across populations,
so a large residual remains and the covariate shift is negative). A third
file holds a null study with no treatment effect, used to exercise the
"selection event did not occur" failure path.

The script asserts the qualitative facts the tests pin before writing
anything, then regenerates golden result documents through the CLI entry
point so byte-level drift in serialization is caught by the test suite.

Usage: python3 tools/make_fixtures.py
"""

import csv
import json
import pathlib
import sys

import numpy as np
from scipy.special import expit

from shiftdiag.cli import main as cli_main
from shiftdiag.datamodel import AnalysisSpec, load_dataset
from shiftdiag.inference import component_summaries, jackknife_covariance
from shiftdiag.regress import fit_dataset

SEED = 0
N = 500
FIXTURES = pathlib.Path(__file__).resolve().parent.parent / "tests" / "fixtures"

EXAMPLE1_SPEC = {
    "outcomes": ["y1"],
    "treatment": "t",
    "template": {"kind": "ancova"},
    "covariates": [{"column": "age", "moments": "mean_and_second_moment"}],
    "mediators": [{"column": "m", "moments": "one_hot"}],
    "categorical": {"m": ["0", "1"]},
    "ci_level": 0.9,
}


def draw_original(rng):
    """First population: younger cohort, strong mediator response."""
    age = rng.normal(19.0, 0.5, N)
    t = rng.integers(0, 2, N).astype(float)
    m = (rng.random(N) < 0.1 + 0.5 * t).astype(int)
    y1 = age + 2.0 * m * (22.0 - age) + rng.standard_normal(N)
    # moderator u is 1 for everyone here
    y2 = 10.0 + m * 6.0 + rng.standard_normal(N)
    return dict(age=age, t=t, m=m, y1=y1, y2=y2)


def draw_replication(rng):
    """Second population: older cohort, weaker mediator response, and a
    latent moderator whose prevalence rises with age."""
    age = rng.normal(21.0, 1.5, N)
    t = rng.integers(0, 2, N).astype(float)
    m = (rng.random(N) < 0.1 + 0.25 * t).astype(int)
    u = (rng.random(N) < expit(age - 21.0)).astype(float)
    y1 = age + 2.0 * m * (22.0 - age) + rng.standard_normal(N)
    y2 = 10.0 + m * (1.0 + 5.0 * u) + rng.standard_normal(N)
    return dict(age=age, t=t, m=m, y1=y1, y2=y2)


def draw_null(rng):
    """Same columns as the original study but no treatment effect at all."""
    age = rng.normal(19.0, 0.5, N)
    t = rng.integers(0, 2, N).astype(float)
    m = (rng.random(N) < 0.1 + 0.5 * t).astype(int)
    y1 = age + rng.standard_normal(N)
    y2 = 10.0 + rng.standard_normal(N)
    return dict(age=age, t=t, m=m, y1=y1, y2=y2)


def write_csv(path, cols):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["age", "t", "m", "y1", "y2"])
        for i in range(N):
            writer.writerow(
                [
                    repr(float(cols["age"][i])),
                    int(cols["t"][i]),
                    int(cols["m"][i]),
                    repr(float(cols["y1"][i])),
                    repr(float(cols["y2"][i])),
                ]
            )


def check_semantics():
    """Refuse to write goldens whose qualitative story is off."""
    for outcome, spec_path in (("y1", "example1_spec.json"), ("y2", "example2_spec.json")):
        spec = AnalysisSpec.from_dict(json.loads((FIXTURES / spec_path).read_text()))
        d1 = load_dataset(str(FIXTURES / "example_original.csv"), spec)
        d2 = load_dataset(str(FIXTURES / "example_replication.csv"), spec)
        vec, cov = jackknife_covariance(d1, d2, spec)
        rows = component_summaries(vec, cov, spec.ci_level)
        res, covs, med = rows["residual"], rows["covariate_shift"], rows["mediation_shift"]
        if outcome == "y1":
            assert res["ci_lo"] <= 0.0 <= res["ci_hi"], "first example: residual not consistent with zero"
            assert covs["ci_lo"] > 0.0, "first example: covariate shift not significantly positive"
            assert med["ci_lo"] > 0.0, "first example: mediation shift not significantly positive"
            fit = fit_dataset(d1, spec)
            assert fit.theta / fit.se_theta > 1.96, "first example: original study not significant"
        else:
            assert res["ci_lo"] > 0.0, "second example: residual not significantly positive"
            assert covs["estimate"] < 0.0, "second example: covariate shift not negative"

    spec1 = AnalysisSpec.from_dict(EXAMPLE1_SPEC)
    null = load_dataset(str(FIXTURES / "null_original.csv"), spec1)
    fit = fit_dataset(null, spec1)
    assert abs(fit.theta / fit.se_theta) < 1.96, "null study unexpectedly significant"


def regenerate_goldens():
    pairs = [
        ("example1_spec.json", "example1_result.json", []),
        ("example2_spec.json", "example2_result.json", []),
        ("example1_spec.json", "example1_adjusted_result.json", ["--selection-alpha0", "0.05"]),
    ]
    for spec_name, out_name, extra in pairs:
        code = cli_main(
            [
                "decompose",
                "--original", str(FIXTURES / "example_original.csv"),
                "--replication", str(FIXTURES / "example_replication.csv"),
                "--spec", str(FIXTURES / spec_name),
                "--out", str(FIXTURES / out_name),
                *extra,
            ]
        )
        assert code == 0, f"golden regeneration failed for {out_name} (exit {code})"


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    write_csv(FIXTURES / "example_original.csv", draw_original(np.random.default_rng(np.random.SeedSequence((SEED, 0)))))
    write_csv(FIXTURES / "example_replication.csv", draw_replication(np.random.default_rng(np.random.SeedSequence((SEED, 1)))))
    write_csv(FIXTURES / "null_original.csv", draw_null(np.random.default_rng(np.random.SeedSequence((SEED, 2)))))

    spec2 = dict(EXAMPLE1_SPEC, outcomes=["y2"])
    (FIXTURES / "example1_spec.json").write_text(json.dumps(EXAMPLE1_SPEC, indent=2) + "\n")
    (FIXTURES / "example2_spec.json").write_text(json.dumps(spec2, indent=2) + "\n")

    check_semantics()
    regenerate_goldens()
    print(f"fixtures written to {FIXTURES}")


if __name__ == "__main__":
    sys.exit(main())
