#!/usr/bin/env python3
"""Regenerate the cached ground-truth component table.

Runs the pinned-seed Monte Carlo oracle for every benchmark setting and
rewrites src/shiftdiag/data/truths.json. The output is committed; rerun
only when a setting definition changes.
"""

import json
import pathlib

from shiftdiag.simulate import ORACLE_N, ORACLE_SEED, ORACLE_SETTINGS, oracle_truths


def main():
    table = {
        "oracle": {"n": ORACLE_N, "seed": ORACLE_SEED},
        "settings": {code: oracle_truths(code) for code in ORACLE_SETTINGS},
    }
    out = pathlib.Path(__file__).resolve().parents[1] / "src" / "shiftdiag" / "data" / "truths.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
