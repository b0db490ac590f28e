"""Median NPD-SL / target ratio and target accuracies over extra seeds.

The acceptance thresholds in tests/test_acceptance.py were chosen from this
output on the reference config and then frozen; rerun it after changing the
synthetic problem or the training recipe.

    python3 scripts/calibrate_reference.py --seeds 10 11 12 13 14
"""
import argparse
import dataclasses
import statistics
from pathlib import Path

from copycat import attack
from copycat.eval import Network

ROOT = Path(__file__).resolve().parents[1]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--config", default=str(ROOT / "configs" / "reference.json"))
    parser.add_argument("--seeds", type=int, nargs="+", default=[10, 11, 12, 13, 14])
    args = parser.parse_args()
    config = attack.ExperimentConfig.from_json(args.config)
    config = dataclasses.replace(config, seeds=list(args.seeds))
    report = attack.run_matrix(config)
    for net in Network:
        values = report.metric(net, "macro_acc")
        if values:
            print(f"{net.value:10s} macro  median {statistics.median(values):.3f}  min {min(values):.3f}")
    ratios = report.metric(Network.NPD_SL, "perf_over_target")
    if ratios:
        print(f"NPD-SL / target  median {statistics.median(ratios):.3f}  min {min(ratios):.3f}")
    for seed, err in report.errors.items():
        print(f"seed {seed} failed: {err}")


if __name__ == "__main__":
    main()
