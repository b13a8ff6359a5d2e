#!/usr/bin/env python3
"""Regenerate the committed default fixture.

Sweeps plant-strength candidates, keeps the smallest one at which every
planted expert's gating score dominates every non-planted expert's on the
default 25-sample streams, and writes the fixture (with the sweep record)
to src/moelab/fixtures/default.json.
"""

import pathlib
import sys

from moelab.synthlab import build_default_fixture, calibrate_plant_strength, write_fixture

CANDIDATES = [0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0]


def main() -> int:
    selected, tried = calibrate_plant_strength(CANDIDATES)
    print(f"tried {tried}, selected plant strength {selected}")
    fixture = build_default_fixture(selected)
    out = pathlib.Path(__file__).resolve().parent.parent / "src/moelab/fixtures/default.json"
    write_fixture(
        fixture, out, extra={"plant_strength_candidates": CANDIDATES, "selected": selected}
    )
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
