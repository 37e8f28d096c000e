"""Run the three selector sweeps on trained checkpoints and print a markdown table.

    python scripts/ablation_table.py --config configs/default.cfg
"""

import argparse
import csv

from zsc.cli import AXES, latest_run, main, run_root


def sweep(config: str, axis: str, extra: list[str]) -> list[dict]:
    if main(["ablate", "--config", config, "--axis", axis, *extra]) != 0:
        raise SystemExit(f"ablation over {axis} failed")
    with open(latest_run(run_root(), "ablate") / "ablation.csv") as fh:
        return list(csv.DictReader(fh))


def main_(argv=None):
    p = argparse.ArgumentParser()
    p.add_argument("--config", default="configs/default.cfg")
    p.add_argument("--axes", default=",".join(AXES))
    args, extra = p.parse_known_args(argv)
    for axis in args.axes.split(","):
        rows = sweep(args.config, axis, extra)
        maes = [float(r["mae"]) for r in rows]
        print(f"\n### {axis} ({AXES[axis][0]})\n")
        print("| value | MAE | RMSE | seed std |")
        print("|---|---|---|---|")
        for r in rows:
            print(f"| {r['value']} | {float(r['mae']):.3f} | {float(r['rmse']):.3f} | "
                  f"{float(r['mae_seed_std']):.3f} |")
        mean = sum(maes) / len(maes)
        print(f"\nspread {max(maes) - min(maes):.3f} = {(max(maes) - min(maes)) / mean:.1%} of mean")


if __name__ == "__main__":
    main_()
