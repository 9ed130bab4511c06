"""End-to-end tests of the command-line interface.

The worked-example fixtures under tests/fixtures/ were generated by
tools/make_fixtures.py at a pinned seed; the golden documents there pin the
byte-level serialization, and the semantic assertions here restate what the
fixtures were chosen to show.
"""

import csv
import io
import json
import shutil
import subprocess
from pathlib import Path

import pytest

from shiftdiag.cli import dumps_document, main, plot_rows

FIXTURES = Path(__file__).parent / "fixtures"
ORIGINAL = FIXTURES / "example_original.csv"
REPLICATION = FIXTURES / "example_replication.csv"
NULL_ORIGINAL = FIXTURES / "null_original.csv"
SPEC1 = FIXTURES / "example1_spec.json"
SPEC2 = FIXTURES / "example2_spec.json"


def decompose(tmp_path, *extra, original=ORIGINAL, replication=REPLICATION, spec=SPEC1):
    out = tmp_path / "doc.json"
    code = main(
        [
            "decompose",
            "--original", str(original),
            "--replication", str(replication),
            "--spec", str(spec),
            "--out", str(out),
            *[str(a) for a in extra],
        ]
    )
    return code, out


def by_name(doc_components):
    return {c["name"]: c for c in doc_components}


class TestDecompose:
    def test_identical_studies_give_zero_components(self, tmp_path):
        code, out = decompose(tmp_path, replication=ORIGINAL)
        assert code == 0
        doc = json.loads(out.read_text())
        for comp in doc["components"]:
            assert comp["estimate"] == 0
            assert comp["ci_lo"] <= 0 <= comp["ci_hi"]

    def test_first_example_matches_golden(self, tmp_path):
        code, out = decompose(tmp_path)
        assert code == 0
        assert out.read_bytes() == (FIXTURES / "example1_result.json").read_bytes()
        comps = by_name(json.loads(out.read_text())["components"])
        # shared outcome law: shifts explain the gap, residual consistent with 0
        assert comps["residual"]["ci_lo"] <= 0 <= comps["residual"]["ci_hi"]
        assert comps["covariate_shift"]["ci_lo"] > 0
        assert comps["mediation_shift"]["ci_lo"] > 0

    def test_second_example_matches_golden(self, tmp_path):
        code, out = decompose(tmp_path, spec=SPEC2)
        assert code == 0
        assert out.read_bytes() == (FIXTURES / "example2_result.json").read_bytes()
        doc = json.loads(out.read_text())
        comps = by_name(doc["components"])
        # a latent moderator differs across studies: the leftover term
        # dominates and the covariate shift has the opposite sign
        assert comps["residual"]["ci_lo"] > 0
        assert comps["covariate_shift"]["estimate"] < 0

    def test_adjusted_document_matches_golden(self, tmp_path):
        code, out = decompose(tmp_path, "--selection-alpha0", "0.05")
        assert code == 0
        assert out.read_bytes() == (FIXTURES / "example1_adjusted_result.json").read_bytes()
        doc = json.loads(out.read_text())
        adj = doc["adjusted"]
        assert adj["converged"] is True
        assert adj["selection"]["observed_z"] > adj["selection"]["z_threshold"]
        total = sum(c["estimate"] for c in adj["components"])
        assert total == pytest.approx(doc["observed"]["estimate"], abs=1e-10)

    def test_document_serialization_round_trips(self, tmp_path):
        _, out = decompose(tmp_path, "--selection-alpha0", "0.05")
        text = out.read_text()
        assert dumps_document(json.loads(text)) == text

    def test_level_flag_overrides_spec(self, tmp_path):
        _, wide = decompose(tmp_path, "--level", "0.99")
        doc99 = json.loads(wide.read_text())
        _, narrow = decompose(tmp_path, "--level", "0.5")
        doc50 = json.loads(narrow.read_text())
        assert doc99["metadata"]["level"] == 0.99
        assert doc50["metadata"]["level"] == 0.5
        width99 = doc99["observed"]["ci_hi"] - doc99["observed"]["ci_lo"]
        width50 = doc50["observed"]["ci_hi"] - doc50["observed"]["ci_lo"]
        assert width50 < width99
        assert doc50["observed"]["estimate"] == doc99["observed"]["estimate"]

    def test_spec_hash_matches_inputs(self, tmp_path):
        _, out = decompose(tmp_path)
        doc = json.loads(out.read_text())
        from shiftdiag.datamodel import AnalysisSpec

        spec = AnalysisSpec.from_dict(json.loads(SPEC1.read_text()))
        assert doc["metadata"]["spec_sha256"] == spec.spec_hash()
        assert doc["metadata"]["seed"] is None

    def test_weights_csv(self, tmp_path):
        weights_path = tmp_path / "w.csv"
        code, _ = decompose(tmp_path, "--weights-out", weights_path)
        assert code == 0
        with open(weights_path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["unit", "covariate_weight", "mediator_weight"]
        assert len(rows) == 1 + 500
        for _, wc, wm in rows[1:]:
            assert float(wc) > 0 and float(wm) > 0
        total = sum(float(r[1]) for r in rows[1:])
        assert total == pytest.approx(1.0, abs=1e-8)

    def test_stdout_when_no_out_flag(self, capsys):
        code = main(
            [
                "decompose",
                "--original", str(ORIGINAL),
                "--replication", str(ORIGINAL),
                "--spec", str(SPEC1),
            ]
        )
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["metadata"]["engine"] == "shiftdiag"

    def test_covariates_only_spec_reports_no_mediator_stage(self, tmp_path):
        raw = json.loads(SPEC1.read_text())
        del raw["mediators"]
        del raw["categorical"]
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps(raw))
        weights_path = tmp_path / "w.csv"
        code, out = decompose(tmp_path, "--weights-out", weights_path, spec=spec)
        assert code == 0
        doc = json.loads(out.read_text())
        assert [c["name"] for c in doc["components"]] == [
            "sampling_variability",
            "covariate_shift",
            "residual",
        ]
        assert doc["balance"]["mediator"] is None
        assert doc["balance"]["covariate"] is not None
        with open(weights_path, newline="") as fh:
            header = next(csv.reader(fh))
        assert header == ["unit", "covariate_weight"]


class TestDecomposeErrors:
    def test_missing_csv_is_a_validation_error(self, tmp_path, capsys):
        code, _ = decompose(tmp_path, original=tmp_path / "nope.csv")
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_unparseable_spec_json(self, tmp_path, capsys):
        bad = tmp_path / "spec.json"
        bad.write_text("{not json")
        code, _ = decompose(tmp_path, spec=bad)
        assert code == 2
        assert "JSON" in capsys.readouterr().err

    def test_invalid_spec_contents(self, tmp_path):
        bad = tmp_path / "spec.json"
        bad.write_text(json.dumps({"outcomes": ["y1"], "treatment": "y1"}))
        code, _ = decompose(tmp_path, spec=bad)
        assert code == 2

    def test_invalid_alpha0(self, tmp_path):
        code, _ = decompose(tmp_path, "--selection-alpha0", "1.5")
        assert code == 2

    def test_selection_event_absent(self, tmp_path, capsys):
        code, _ = decompose(tmp_path, "--selection-alpha0", "0.05", original=NULL_ORIGINAL)
        assert code == 4
        assert "selection event did not occur" in capsys.readouterr().err

    def test_infeasible_balance_exits_3(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(
            json.dumps(
                {
                    "outcomes": ["y"],
                    "treatment": "t",
                    "template": "ttest",
                    "covariates": [{"column": "x", "moments": "mean"}],
                }
            )
        )

        def write(path, xs):
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["x", "t", "y"])
                for i, x in enumerate(xs):
                    writer.writerow([x, i % 2, x + 0.1 * i])

        # replication support lies entirely below the original mean, so no
        # reweighting of its rows can reach the target first moment
        write(tmp_path / "orig.csv", [10.0, 11.0, 12.0, 13.0] * 3)
        write(tmp_path / "rep.csv", [1.0, 1.1, 1.2, 1.3] * 3)
        code, _ = decompose(
            tmp_path, original=tmp_path / "orig.csv", replication=tmp_path / "rep.csv", spec=spec
        )
        assert code == 3
        assert "error:" in capsys.readouterr().err


class TestPlotdata:
    def run(self, tmp_path, doc_path):
        out = tmp_path / "plot.csv"
        code = main(["plotdata", "--in", str(doc_path), "--out", str(out)])
        return code, out

    def test_unadjusted_document_gives_four_rows(self, tmp_path):
        code, out = self.run(tmp_path, FIXTURES / "example1_result.json")
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["component", "estimate", "ci_lo", "ci_hi", "adjusted"]
        assert [r[0] for r in rows[1:]] == [
            "sampling_variability",
            "covariate_shift",
            "mediation_shift",
            "residual",
        ]
        assert {r[4] for r in rows[1:]} == {"false"}

    def test_adjusted_document_gives_eight_rows(self, tmp_path):
        code, out = self.run(tmp_path, FIXTURES / "example1_adjusted_result.json")
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 9
        assert [r[4] for r in rows[1:]] == ["false"] * 4 + ["true"] * 4

    def test_values_round_trip_exactly(self, tmp_path):
        doc = json.loads((FIXTURES / "example1_result.json").read_text())
        code, out = self.run(tmp_path, FIXTURES / "example1_result.json")
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        comps = by_name(doc["components"])
        for name, est, lo, hi, _ in rows:
            assert float(est) == float(comps[name]["estimate"])
            assert float(lo) == float(comps[name]["ci_lo"])
            assert float(hi) == float(comps[name]["ci_hi"])

    def test_rows_helper_rejects_junk(self):
        with pytest.raises(Exception):
            plot_rows({"metadata": {}})

    @pytest.mark.parametrize(
        "payload",
        [
            "{not json",
            json.dumps({"components": 3}),
            json.dumps({"components": [{"estimate": 1.0}]}),
            json.dumps({"components": [{"name": "residual", "estimate": "x", "ci_lo": 0, "ci_hi": 0}]}),
            json.dumps({"components": [], "adjusted": {"components": []}}),
        ],
    )
    def test_malformed_inputs_exit_2(self, tmp_path, payload, capsys):
        bad = tmp_path / "doc.json"
        bad.write_text(payload)
        code = main(["plotdata", "--in", str(bad), "--out", str(tmp_path / "o.csv")])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_input_exits_2(self, tmp_path):
        code = main(["plotdata", "--in", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o.csv")])
        assert code == 2

    def test_stdout_when_no_out_flag(self, capsys):
        code = main(["plotdata", "--in", str(FIXTURES / "example1_result.json")])
        assert code == 0
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert len(rows) == 5


class TestSimulate:
    def run(self, tmp_path, *extra):
        out = tmp_path / "report.json"
        args = [
            "simulate",
            "--setting", "s1i",
            "--reps", "3",
            "--n1", "60",
            "--n2", "60",
            "--seed", "1",
            "--out", str(out),
            *[str(a) for a in extra],
        ]
        return main(args), out

    def test_smoke_report(self, tmp_path, capsys):
        code, out = self.run(tmp_path, "--csv-out", tmp_path / "report.csv")
        assert code == 0
        report = json.loads(out.read_text())
        assert report["setting"] == "s1i"
        assert report["requested"] == 3
        assert set(report["components"]) == {
            "observed",
            "covariate_shift",
            "mediation_shift",
            "residual",
        }
        csv_text = (tmp_path / "report.csv").read_text()
        assert csv_text.startswith("setting,sigma,nu,method,component,coverage,sd,mean_n2")
        assert "mean replication size" in capsys.readouterr().err

    def test_runs_are_bit_reproducible(self, tmp_path):
        _, first = self.run(tmp_path)
        first_bytes = first.read_bytes()
        _, second = self.run(tmp_path)
        assert second.read_bytes() == first_bytes

    def test_power_is_an_alias(self, tmp_path):
        code, out = self.run(tmp_path, "--method", "power", "--reps", "2")
        assert code == 0
        assert json.loads(out.read_text())["method"] == "power_calculated"

    def test_invalid_setting_exits_2(self, tmp_path, capsys):
        code = main(["simulate", "--setting", "s9i", "--reps", "2", "--out", str(tmp_path / "r.json")])
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_method_is_an_argparse_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            main(["simulate", "--setting", "s1i", "--method", "bogus"])
        assert err.value.code == 2

    def test_nonpositive_reps_exit_2(self, tmp_path):
        code, _ = self.run(tmp_path, "--reps", "0")
        assert code == 2


class TestEntryPoint:
    def test_console_script_is_installed(self):
        exe = shutil.which("shiftdiag")
        assert exe, "console script not on PATH"
        proc = subprocess.run([exe, "--version"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert proc.stdout.strip() == "shiftdiag 0.1.0"

    def test_missing_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main([])
        assert err.value.code == 2
