"""Loss ablation on the synthetic data set, or a side-by-side of finished runs.

Train the five standard methods on one dataset, then compare:

    python demos/ablation.py --train runs/ds --out runs/ablation --epochs 50

Compare run directories that already exist (any mix of methods or seeds):

    python demos/ablation.py runs/an-none-seed0 runs/en-scl-seed0

The table lists the best validation mAP, its epoch and the median
second-highest score at that epoch. Config keys that differ between the
runs are listed under the table.
"""

import argparse
import csv
import subprocess
import sys
from pathlib import Path

METHODS = {
    "EP+CL": ["--loss.primary", "ep", "--loss.consistency", "cl", "--loss.gamma_max", "0.2"],
    "AN": ["--loss.primary", "an", "--loss.consistency", "none"],
    "AN+CL": ["--loss.primary", "an", "--loss.consistency", "cl", "--loss.gamma_max", "0.2"],
    "EN+CL": ["--loss.primary", "en", "--loss.consistency", "cl", "--loss.gamma_max", "0.2"],
    "EN+SCL": ["--loss.primary", "en", "--loss.consistency", "scl", "--loss.gamma_max", "1.0"],
}


def read_echo(run: Path) -> dict[str, str]:
    lines = (run / "config.echo").read_text().splitlines()
    return dict(line.split(" = ", 1) for line in lines if " = " in line)


def summarize(run: Path) -> dict[str, float]:
    val: dict[int, dict[str, float]] = {}
    with open(run / "metrics.csv") as fh:
        for row in csv.DictReader(fh):
            if row["split"] == "val":
                val.setdefault(int(row["epoch"]), {})[row["metric"]] = float(row["value"])
    if not val:
        raise SystemExit(f"{run}: no validation rows in metrics.csv")
    epoch = max(val, key=lambda e: (val[e]["mAP"], -e))
    return {"epoch": epoch, "mAP": val[epoch]["mAP"],
            "second": val[epoch].get("median_score_rank2", float("nan"))}


def compare(runs: list[Path]) -> None:
    echoes = {r: read_echo(r) for r in runs}
    width = max(len(r.name) for r in runs)
    print(f"{'run':<{width}}  {'mAP':>6}  {'epoch':>5}  {'2nd score':>9}")
    for r in runs:
        s = summarize(r)
        print(f"{r.name:<{width}}  {100 * s['mAP']:6.2f}  {s['epoch']:5d}  {s['second']:9.3f}")
    keys = sorted(set().union(*echoes.values()))
    differing = [k for k in keys if len({echoes[r].get(k) for r in runs}) > 1 and k != "data.path"]
    if differing:
        print("\nconfig keys that differ:")
        for k in differing:
            values = ", ".join(f"{r.name}={echoes[r].get(k, '-')}" for r in runs)
            print(f"  {k}: {values}")


def train_all(data: str, out: Path, seeds: list[int], epochs: int) -> list[Path]:
    runs = []
    for seed in seeds:
        for name, flags in METHODS.items():
            run = out / f"{name.lower().replace('+', '-')}-seed{seed}"
            cmd = [sys.executable, "-m", "singlepos.cli", "train", "--data", data, "--run-dir", str(run),
                   "--train.seed", str(seed), "--train.epochs", str(epochs), *flags]
            print("$", " ".join(cmd[2:]), flush=True)
            subprocess.run(cmd, check=True)
            runs.append(run)
    return runs


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("runs", nargs="*", type=Path, help="run directories to compare")
    p.add_argument("--train", metavar="DATA", help="dataset directory; trains every method first")
    p.add_argument("--out", type=Path, default=Path("runs/ablation"))
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--epochs", type=int, default=50)
    args = p.parse_args()
    runs = list(args.runs)
    if args.train:
        runs += train_all(args.train, args.out, [int(s) for s in args.seeds.split(",")], args.epochs)
    if not runs:
        p.error("give run directories or --train DATA")
    compare(runs)


if __name__ == "__main__":
    main()
