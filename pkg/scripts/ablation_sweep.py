"""Generate data and run the five-way ablation for several seeds, then print per-variant means.

    python scripts/ablation_sweep.py --config configs/desk.json --out runs/ablation --seeds 0 1 2
"""
import argparse
import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from csident.cli import main as cli

COLUMNS = ("r2_c_from_chat", "r2_s_from_shat", "leak_s_from_chat", "baseline_leak_s_from_c", "support_f1")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()

    out = Path(args.out)
    table = defaultdict(lambda: defaultdict(list))
    order = []
    for seed in args.seeds:
        base = ["--quiet"] + (["--config", args.config] if args.config else [])
        data, abl = out / f"seed{seed}" / "data", out / f"seed{seed}" / "ablate"
        if cli(["gen", "--out", str(data), "--seed", str(seed), *base]) != 0:
            raise SystemExit(f"gen failed for seed {seed}")
        if cli(["ablate", "--data", str(data), "--out", str(abl), "--seed", str(seed), *base]) != 0:
            raise SystemExit(f"ablate failed for seed {seed}")
        with open(abl / "ablation.csv") as fh:
            for row in csv.DictReader(fh):
                if row["config"] not in order:
                    order.append(row["config"])
                for c in COLUMNS:
                    if row[c]:
                        table[row["config"]][c].append(float(row[c]))

    print(f"{'config':<11}" + "".join(f"{c:>24}" for c in COLUMNS))
    for name in order:
        cells = []
        for c in COLUMNS:
            v = table[name][c]
            cells.append(f"{np.mean(v):>17.3f} ±{np.std(v):.3f}" if v else f"{'-':>24}")
        print(f"{name:<11}" + "".join(cells))


if __name__ == "__main__":
    main()
