"""Train one model and compare how far naive and exogenous style flips move the model NLL.

    python scripts/nll_shift.py --config configs/desk.json --out runs/nll --seed 0
"""
import argparse
import json
from pathlib import Path

from csident.cli import main as cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out", default="runs/nll")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    common = ["--seed", str(args.seed)] + (["--config", args.config] if args.config else [])
    steps = [
        ["gen", "--out", str(out / "data"), *common],
        ["train", "--data", str(out / "data"), "--out", str(out / "ckpt"), *common],
        ["intervene", "--data", str(out / "data"), "--checkpoint", str(out / "ckpt"),
         "--out", str(out / "flip"), "--quiet"],
    ]
    for argv in steps:
        code = cli(argv)
        if code != 0:
            raise SystemExit(f"{argv[0]} exited with {code}")
    summary = json.loads((out / "flip" / "summary.json").read_text())
    print(json.dumps(summary, indent=1))
    verdict = "smaller" if summary["mean_abs_delta_stilde"] < summary["mean_abs_delta_s"] else "not smaller"
    print(f"exogenous flip shift is {verdict} than the naive one")


if __name__ == "__main__":
    main()
