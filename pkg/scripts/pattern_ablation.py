"""Held-out max-F of the connectivity head with N4, N8 and N12 neighbourhoods.

    python3 scripts/pattern_ablation.py --seed 0 --steps 300
"""

import argparse
import json
from pathlib import Path

from connseg.experiments import pattern_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--out", type=Path)
    args = p.parse_args()
    rows = pattern_ablation(seed=args.seed, steps=args.steps, log=print)
    for r in rows:
        print(f"{r['pattern']:>4}: maxF {r['maxF']:.4f}  ({r['cpu_seconds']:.0f} CPU-s)")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
