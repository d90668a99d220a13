#!/usr/bin/env python3
"""End-to-end desk-scale demo on the synthetic dataset.

Writes the dataset, trains the synthetic preset, samples every training clip
with two style conditions, and prints the evaluation table. Everything lands
under --out (default runs/overfit_demo).
"""

import argparse
import sys
from pathlib import Path

from speechanim import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/overfit_demo"))
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--epochs", type=int, default=200)
    args = parser.parse_args()

    data_dir = args.out / "data"
    run_dir = args.out / "train"
    code = cli.main(["synth-data", "--out", str(data_dir), "--seed", str(args.seed)])
    if code:
        return code
    code = cli.main([
        "train", "--preset", "synthetic", "--seed", str(args.seed),
        "--epochs", str(args.epochs), "--out", str(run_dir),
        "--manifest", str(data_dir / "manifest.csv"),
    ])
    if code:
        return code

    pred_dir = args.out / "pred"
    for style in (0, 1):
        for wav in sorted((data_dir / "audio").glob("*.wav")):
            code = cli.main([
                "sample", "--checkpoint", str(run_dir / "best.ckpt"),
                "--audio", str(wav), "--style", str(style), "--seed", str(args.seed),
                "--out", str(pred_dir / f"style{style}" / f"{wav.stem}.anim"),
            ])
            if code:
                return code

    return cli.main([
        "evaluate", "--pred", str(pred_dir), "--gt", str(data_dir / "motion"),
        "--mask", str(data_dir / "mask.json"), "--out", str(args.out / "report"),
        "--motion-stats", "--graph-controls", "0,15",
    ])


if __name__ == "__main__":
    sys.exit(main())
