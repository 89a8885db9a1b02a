"""Train the toy victim and cache its parameters for the test suite.

usage: python3 scripts/train_victim.py [headered|prompted] [out_dir]
"""

import sys
from pathlib import Path

from docforge import harness

ROOT = Path(__file__).resolve().parents[1]


def main():
    style = sys.argv[1] if len(sys.argv) > 1 else "headered"
    out = sys.argv[2] if len(sys.argv) > 2 else str(ROOT / "artifacts")
    cfg = harness.build_config(overrides={"style": style, "out": out})
    _, summary = harness.train_victim(cfg, log=lambda s: print(s, flush=True))
    print(summary)


if __name__ == "__main__":
    main()
