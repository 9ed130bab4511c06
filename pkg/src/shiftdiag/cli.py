"""Command-line front end.

Three subcommands cover the whole surface: ``decompose`` runs the full
pipeline on two CSV files and writes a result document, ``simulate`` runs
the synthetic coverage benchmark, and ``plotdata`` flattens a result
document into the CSV consumed by plotting front ends.

Exit codes partition the error space: 0 success, 2 input validation,
3 estimation infeasibility (balancing, singular designs, jackknife),
4 selection-adjustment failure. Diagnostics go to stderr; documents go to
``--out`` or stdout. Documents are deterministic byte-for-byte: floats are
written with 17 significant digits (lossless for doubles) and carry no
timestamps.
"""

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .datamodel import AnalysisSpec, load_dataset, validate_pair
from .decomp import Decomposition, estimate_components
from .errors import AdjustmentError, ShiftDiagError, ValidationError
from .inference import component_summaries, jackknife_covariance
from .selectadj import adjust_components
from .simulate import METHODS, DgpConfig, FixedN2, run_coverage

ENGINE = "shiftdiag"

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_ADJUSTMENT = 4

# bar order consumed by plotting front ends; observed is a reference line
PLOT_COMPONENTS = (
    "sampling_variability",
    "covariate_shift",
    "mediation_shift",
    "residual",
)


# -- canonical serialization ------------------------------------------------


def _format_float(x: float) -> str:
    if not math.isfinite(x):
        raise ValueError(f"result documents require finite numbers, got {x!r}")
    return format(x, ".17g")


def _json_canonical(obj, pad: str) -> str:
    if isinstance(obj, (np.floating, np.integer)):
        obj = obj.item()
    if obj is None or isinstance(obj, (bool, int, str)):
        return json.dumps(obj)
    if isinstance(obj, float):
        return _format_float(obj)
    inner = pad + "  "
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = (
            f"{inner}{json.dumps(str(k))}: {_json_canonical(v, inner)}"
            for k, v in obj.items()
        )
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(f"{inner}{_json_canonical(v, inner)}" for v in obj) + "\n" + pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__} in a result document")


def dumps_document(doc: dict) -> str:
    """Serialize a document with floats at 17 significant digits.

    ``float(str)`` of every emitted number reproduces the original double
    exactly, so documents round-trip losslessly through JSON.
    """
    return _json_canonical(doc, "") + "\n"


def _emit(text: str, out_path: str | None) -> None:
    if out_path is None:
        sys.stdout.write(text)
    else:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


# -- result document --------------------------------------------------------


def _weight_block(w) -> dict | None:
    if w is None:
        return None
    return {
        "balance_residual": float(w.balance_residuals),
        "effective_sample_size": float(w.effective_sample_size),
        "entropy": float(w.entropy),
        "iterations": int(w.iterations),
    }


def _interval_row(name: str, row: dict) -> dict:
    return {
        "name": name,
        "estimate": row["estimate"],
        "se": row["se"],
        "ci_lo": row["ci_lo"],
        "ci_hi": row["ci_hi"],
    }


def decomposition_document(
    spec: AnalysisSpec,
    dec: Decomposition,
    rows: dict,
    adjusted: dict | None,
    *,
    seed: int | None = None,
) -> dict:
    """Assemble the canonical result document from the pipeline outputs.

    ``rows`` is the ``component_summaries`` output; the adjusted block, when
    present, was prepared by ``adjusted_block``. The document is a plain
    dict of JSON-ready values with a fixed key order.
    """
    components = [_interval_row("sampling_variability", rows["sampling_variability"])]
    for name in ("covariate_shift", "mediation_shift"):
        if name in dec.components:
            components.append(_interval_row(name, rows[name]))
    components.append(_interval_row("residual", rows["residual"]))
    return {
        "metadata": {
            "engine": ENGINE,
            "version": __version__,
            "spec_sha256": spec.spec_hash(),
            "level": spec.ci_level,
            "seed": seed,
        },
        "observed": {k: rows["observed"][k] for k in ("estimate", "se", "ci_lo", "ci_hi")},
        "effects": {
            "original": dec.theta_original,
            "replication": dec.theta_replication,
            "covariate_balanced": dec.theta_covariate_balanced,
            "fully_balanced": dec.theta_fully_balanced,
        },
        "components": components,
        "adjusted": adjusted,
        "balance": {
            "covariate": _weight_block(dec.covariate_weights),
            # decomp reuses the covariate solution as the "fully balanced"
            # weights when the mediator stage is absent or infeasible; only a
            # stage that actually ran belongs in the diagnostics
            "mediator": _weight_block(dec.mediator_weights)
            if "mediation_shift" in dec.components
            else None,
        },
        "warnings": list(dec.warnings),
    }


def adjusted_block(model, adj, rows: dict) -> dict:
    """Selection-corrected counterpart of the components list.

    The intervals come from inverting the truncated-Gaussian pivot, not from
    a normal approximation, so the ``se`` fields carry the jackknife scale
    of the matching unadjusted estimator for reference.
    """
    comps = []
    for name in PLOT_COMPONENTS:
        if name not in adj.components:
            continue
        lo, hi = adj.cis[name]
        comps.append(
            {
                "name": name,
                "estimate": adj.components[name],
                "se": rows[name]["se"],
                "ci_lo": lo,
                "ci_hi": hi,
            }
        )
    disc_lo, disc_hi = adj.cis["population_discrepancy"]
    return {
        "selection": {
            "alpha0": model.alpha0,
            "observed_z": model.observed_z,
            "z_threshold": model.z_threshold,
        },
        "population_discrepancy": {
            "estimate": adj.population_discrepancy,
            "se": rows["observed"]["se"],
            "ci_lo": disc_lo,
            "ci_hi": disc_hi,
        },
        "components": comps,
        "log_likelihood": adj.log_likelihood,
        "iterations": adj.iterations,
        "n_evaluations": adj.n_evaluations,
        "converged": adj.converged,
    }


# -- decompose ---------------------------------------------------------------


def _load_spec(path: str) -> AnalysisSpec:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"spec file is not valid JSON: {exc}") from None
    return AnalysisSpec.from_dict(raw)


def _write_weights(path: str, dec: Decomposition) -> None:
    named = [
        ("covariate_weight", dec.covariate_weights),
        # same guard as the balance block: the fallback alias is not a stage
        ("mediator_weight", dec.mediator_weights if "mediation_shift" in dec.components else None),
    ]
    named = [(label, w.weights) for label, w in named if w is not None]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["unit"] + [label for label, _ in named])
        n = len(named[0][1]) if named else 0
        for i in range(n):
            writer.writerow([i] + [_format_float(float(w[i])) for _, w in named])


def cmd_decompose(args) -> int:
    spec = _load_spec(args.spec)
    if args.selection_alpha0 is not None:
        spec = spec.with_selection(args.selection_alpha0)
    if args.level is not None:
        spec = replace(spec, ci_level=args.level)
    d1 = load_dataset(args.original, spec)
    d2 = load_dataset(args.replication, spec)
    validate_pair(d1, d2, spec)

    dec = estimate_components(d1, d2, spec)
    vec, cov = jackknife_covariance(d1, d2, spec)
    rows = component_summaries(vec, cov, spec.ci_level)

    adjusted = None
    if spec.selection is not None:
        model, adj = adjust_components(vec, cov, spec)
        adjusted = adjusted_block(model, adj, rows)

    doc = decomposition_document(spec, dec, rows, adjusted)
    _emit(dumps_document(doc), args.out)
    if args.weights_out is not None:
        _write_weights(args.weights_out, dec)
    for line in dec.warnings:
        print(f"warning: {line}", file=sys.stderr)
    return EXIT_OK


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    method = "power_calculated" if args.method == "power" else args.method
    config = DgpConfig(
        args.setting,
        sigma=args.sigma,
        nu=args.nu,
        n1=args.n1,
        sampling=FixedN2(args.n2),
        seed=args.seed,
    )
    report = run_coverage(config, method, reps=args.reps, level=args.level)
    _emit(dumps_document(report.to_dict()), args.out)
    if args.csv_out is not None:
        with open(args.csv_out, "w", encoding="utf-8", newline="") as fh:
            fh.write(report.to_csv())
    print(
        f"{report.setting} {report.method}: {report.requested} replicates, "
        f"{report.failures} failed, mean replication size {report.mean_n2:.2f}",
        file=sys.stderr,
    )
    return EXIT_OK


# -- serve -------------------------------------------------------------------


def cmd_serve(args) -> int:
    # imported lazily so the plain CLI works without the web stack
    import uvicorn

    from .service import create_app

    app = create_app(static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# -- plotdata ----------------------------------------------------------------


def plot_rows(doc) -> list[tuple[str, float, float, float, bool]]:
    """Flatten a result document into plot rows in fixed component order."""
    if not isinstance(doc, dict) or not isinstance(doc.get("components"), list):
        raise ValidationError("not a result document: 'components' list is missing")

    def block(entries, adjusted):
        by_name = {}
        for entry in entries:
            if not isinstance(entry, dict) or "name" not in entry:
                raise ValidationError("component entries need a 'name' field")
            by_name[entry["name"]] = entry
        out = []
        for name in PLOT_COMPONENTS:
            if name not in by_name:
                continue
            entry = by_name[name]
            try:
                out.append(
                    (
                        name,
                        float(entry["estimate"]),
                        float(entry["ci_lo"]),
                        float(entry["ci_hi"]),
                        adjusted,
                    )
                )
            except (KeyError, TypeError, ValueError):
                raise ValidationError(f"component {name!r} is malformed") from None
        return out

    rows = block(doc["components"], False)
    adj = doc.get("adjusted")
    if adj is not None:
        if not isinstance(adj, dict) or not isinstance(adj.get("components"), list):
            raise ValidationError("'adjusted' must hold a components list")
        rows += block(adj["components"], True)
    if not rows:
        raise ValidationError("document has no plottable components")
    return rows


def cmd_plotdata(args) -> int:
    with open(args.infile, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"input is not valid JSON: {exc}") from None
    rows = plot_rows(doc)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["component", "estimate", "ci_lo", "ci_hi", "adjusted"])
    for name, est, lo, hi, adjusted in rows:
        writer.writerow(
            [
                name,
                _format_float(est),
                _format_float(lo),
                _format_float(hi),
                "true" if adjusted else "false",
            ]
        )
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


# -- parser and entry point ---------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftdiag",
        description="Decompose effect differences between two studies.",
    )
    parser.add_argument("--version", action="version", version=f"{ENGINE} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    dec = sub.add_parser("decompose", help="decompose the gap between two CSV studies")
    dec.add_argument("--original", required=True, help="CSV of the first study")
    dec.add_argument("--replication", required=True, help="CSV of the second study")
    dec.add_argument("--spec", required=True, help="analysis spec JSON")
    dec.add_argument(
        "--selection-alpha0",
        type=float,
        default=None,
        help="two-sided significance-filter level; enables the adjusted block",
    )
    dec.add_argument(
        "--level",
        type=float,
        default=None,
        help="confidence level (default: the spec's ci_level, 0.90 unless set)",
    )
    dec.add_argument("--out", default=None, help="result document path (default stdout)")
    dec.add_argument("--weights-out", default=None, help="per-unit balancing weights CSV")
    dec.set_defaults(func=cmd_decompose)

    sim = sub.add_parser("simulate", help="coverage benchmark on synthetic settings")
    sim.add_argument("--setting", required=True, help="benchmark setting code, e.g. s1i")
    sim.add_argument("--sigma", type=float, default=1.0, help="outcome noise scale")
    sim.add_argument("--nu", type=float, default=0.0, help="signal scale for sel settings")
    sim.add_argument(
        "--method",
        default="standard",
        choices=sorted(set(METHODS) | {"power"}),
        help="sampling and inference variant (power is short for power_calculated)",
    )
    sim.add_argument("--reps", type=int, default=500, help="number of replicates")
    sim.add_argument("--seed", type=int, default=0, help="root seed; runs are reproducible")
    sim.add_argument("--n1", type=int, default=500, help="first-study sample size")
    sim.add_argument("--n2", type=int, default=500, help="second-study size (standard method)")
    sim.add_argument("--level", type=float, default=0.90, help="confidence level to score")
    sim.add_argument("--out", default=None, help="report JSON path (default stdout)")
    sim.add_argument("--csv-out", default=None, help="also write the flat CSV report here")
    sim.set_defaults(func=cmd_simulate)

    plot = sub.add_parser("plotdata", help="flatten a result document to plotting CSV")
    plot.add_argument("--in", dest="infile", required=True, help="result document JSON")
    plot.add_argument("--out", default=None, help="CSV path (default stdout)")
    plot.set_defaults(func=cmd_plotdata)

    srv = sub.add_parser("serve", help="run the HTTP API and web console")
    srv.add_argument("--host", default="127.0.0.1", help="bind address")
    srv.add_argument("--port", type=int, default=8000, help="bind port")
    srv.add_argument("--static", default=None, help="console bundle directory override")
    srv.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except AdjustmentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ADJUSTMENT
    except ShiftDiagError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
