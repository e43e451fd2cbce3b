#!/usr/bin/env python3
"""Composition cost scaling: op counts, wall time, and log-log slopes vs n.

    python scripts/scaling_curves.py --n-list 4,8,16,32,64 --out costs.csv
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ssmcompose.bench import run_bench


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--n-list", default="4,8,16,32")
    parser.add_argument("--state-dim", type=int, default=16)
    parser.add_argument("--layers", type=int, default=1)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="CSV output path")
    args = parser.parse_args()

    n_list = [int(x) for x in args.n_list.split(",")]
    report = run_bench(
        n_list=n_list,
        state_dim=args.state_dim,
        num_layers=args.layers,
        repeats=args.repeats,
        seed=args.seed,
    )
    print(report.to_csv(), end="")
    print()
    print("log-log op-count slopes (cyclic weights should sit near 1, symmetric near 3):")
    for target, slope in sorted(report.slopes.items()):
        print(f"  {target:20s} {slope:.3f}")
    if args.out:
        Path(args.out).write_text(report.to_csv())
        print(f"\nwrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
