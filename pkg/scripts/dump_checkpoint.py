"""Print one line per tensor (name, shape, mean, std) of a checkpoint file."""

import sys

from inpcc.harness.checkpoint import dump

if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: dump_checkpoint.py MODEL.ckpt")
    print(dump(sys.argv[1]))
