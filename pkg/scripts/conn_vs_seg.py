"""Connectivity head vs segmentation head on synthetic data, several seeds.

    python3 scripts/conn_vs_seg.py --seeds 0 1 2 --steps 300 --out results/conn_vs_seg.json
"""

import argparse
import json
from pathlib import Path

from connseg.experiments import conn_vs_seg


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--out", type=Path)
    args = p.parse_args()
    rows = conn_vs_seg(args.seeds, args.steps, args.train, args.test, log=print)
    diffs = [r["diff"] for r in rows]
    print(f"mean CONN - SEG: {sum(diffs) / len(diffs):+.4f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(rows, indent=2) + "\n")


if __name__ == "__main__":
    main()
