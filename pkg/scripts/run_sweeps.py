"""Targeted (full page and patch) and denial-of-answer sweeps over B = 1..5.

usage: python3 scripts/run_sweeps.py [params file] [out dir]
"""

import sys
from pathlib import Path

from docforge import harness

ROOT = Path(__file__).resolve().parents[1]

SCENARIOS = (
    {"kind": "targeted", "region": "full"},
    {"kind": "targeted", "region": "patch"},
    {"kind": "doa", "region": "full", "K": 1},
)


def main():
    params = sys.argv[1] if len(sys.argv) > 1 else str(ROOT / "artifacts" / "victim_headered.bin")
    out = sys.argv[2] if len(sys.argv) > 2 else str(ROOT / "runs" / "sweeps")
    for overrides in SCENARIOS:
        cfg = harness.build_config(overrides={"params": params, "out": out, **overrides})
        report, _ = harness.sweep(cfg, log=lambda s: print(s, flush=True))
        print(harness.render_text(report))


if __name__ == "__main__":
    main()
