"""Toy end-to-end pilot: train on the synthetic separable world and report split mAP.

    python scripts/pilot.py [--seeds 0 1 2] [--set train.lr=0.002 ...] [--append results/pilot.txt]
"""

import argparse
import logging
import os
import sys

from inpcc.harness.experiments import run_toy

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=os.path.join(ROOT, "configs", "toy.cfg"))
    ap.add_argument("--scene", default=os.path.join(ROOT, "configs", "toy_scene.txt"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--append", help="append result lines to this file")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    lines = []
    for seed in args.seeds:
        run = run_toy(args.config, args.scene, [*args.set, f"train.seed={seed}"])
        sm = run.split_map
        line = (f"seed={seed} base={sm['base']:.4f} novel={sm['novel']:.4f} full={sm['full']:.4f} "
                f"loss_first={run.first_loss:.4f} loss_last={run.last_loss:.4f} seconds={run.seconds:.1f}"
                + (f" overrides={' '.join(args.set)}" if args.set else ""))
        print(line, flush=True)
        lines.append(line)
    if args.append:
        with open(args.append, "a", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    sys.exit(main())
