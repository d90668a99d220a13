#!/usr/bin/env python3
"""Sweep the diffusion-step grid on the synthetic preset.

Produces runs/ablate_steps/ablation.csv with one row per step count
(100, 250, 500, 750, 1000 by default) holding the MVE/LVE/FDD/Diversity
analogues measured on the training set.
"""

import argparse
import sys
from pathlib import Path

from speechanim import cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("runs/ablate_steps"))
    parser.add_argument("--seed", type=int, default=2)
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--steps-list", default="100,250,500,750,1000")
    args = parser.parse_args()
    return cli.main([
        "ablate", "--grid", "steps", "--preset", "synthetic",
        "--steps-list", args.steps_list, "--seed", str(args.seed),
        "--epochs", str(args.epochs), "--out", str(args.out),
    ])


if __name__ == "__main__":
    sys.exit(main())
