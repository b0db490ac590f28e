"""Run the reference matrix and write report.csv, report.json and tables.md.

    python3 scripts/run_reference.py [--config configs/reference.json] [--out runs/reference]
"""
import argparse
import sys
from pathlib import Path

from copycat import cli

ROOT = Path(__file__).resolve().parents[1]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default=str(ROOT / "configs" / "reference.json"))
    parser.add_argument("--out", default=str(ROOT / "runs" / "reference"))
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()
    code = cli.main(["run-matrix", "--config", args.config, "--out", args.out, "--jobs", str(args.jobs)])
    if code == 0:
        print((Path(args.out) / "tables.md").read_text())
    return code


if __name__ == "__main__":
    sys.exit(main())
