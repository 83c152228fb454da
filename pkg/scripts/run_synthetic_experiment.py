"""End-to-end demo on the synthetic blob task.

Generates the dataset, trains a full 5x5 experiment, re-evaluates it from the
saved checkpoints and writes heatmap overlays for one test image.

    python3 scripts/run_synthetic_experiment.py --out runs/demo --epochs 20 --jobs 4
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from xray_ensemble.cli import main
from xray_ensemble.data import PartitionPlan, load_manifest


def run(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--arch", default="Arch4")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--patience", type=int, default=5)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    out = Path(args.out)
    data, run_dir = out / "data", out / "experiment"
    steps = [
        ["synthgen", "--out", str(data), "--n", str(args.n), "--seed", str(args.seed)],
        ["experiment", "--manifest", str(data / "manifest.csv"), "--arch", args.arch,
         "--epochs", str(args.epochs), "--patience", str(args.patience), "--jobs", str(args.jobs),
         "--seed", str(args.seed), "--no-flip", "--out", str(run_dir)],
        ["evaluate", "--run", str(run_dir)],
    ]
    for step in steps:
        print("$ xray-ensemble", " ".join(step), flush=True)
        code = main(step)
        if code:
            return code

    # explain the first test image of division 0
    manifest = load_manifest(data / "manifest.csv")
    idx = PartitionPlan.load(run_dir / "plan.json").divisions[0].test[0]
    image = manifest.paths[idx]
    step = ["explain", "--run", str(run_dir), "--division", "0", "--image", image, "--upscale", "2",
            "--out", str(out / "explanation")]
    print("$ xray-ensemble", " ".join(step), flush=True)
    return main(step)


if __name__ == "__main__":
    sys.exit(run())
