"""Hard vs random negatives and prompts vs common-prompt-only on the confusable world.

    python scripts/ablations.py [--which negatives prompts] [--seeds 0 1 2 3] [--append results/ablations.txt]
"""

import argparse
import logging
import os
import sys

from inpcc.harness.experiments import run_ablation

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=os.path.join(ROOT, "configs", "ablation.cfg"))
    ap.add_argument("--scene", default=os.path.join(ROOT, "configs", "ablation_scene.txt"))
    ap.add_argument("--which", nargs="+", default=["negatives", "prompts"], choices=["negatives", "prompts"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--append")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    lines = []
    for which in args.which:
        res = run_ablation(args.config, args.scene, which, args.seeds, args.set)
        (a, ra), (b, rb) = res.items()
        wins = sum(x > y for x, y in zip(ra, rb))
        lines.append(f"{which}: {a} wins {wins}/{len(ra)}" + (f" overrides={' '.join(args.set)}" if args.set else ""))
        for seed, x, y in zip(args.seeds, ra, rb):
            lines.append(f"  seed={seed} {a}={x:.4f} {b}={y:.4f} diff={x - y:+.4f}")
        print("\n".join(lines[-len(ra) - 1:]), flush=True)
    if args.append:
        with open(args.append, "a", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    sys.exit(main())
