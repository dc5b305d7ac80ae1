"""Command-line entry point: ``inpcc {synth,cluster,train,eval,diag}``.

Exit codes: 0 success, 1 bad input (format, parameter or usage errors),
2 internal failure (invariant violation or diverged training).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from ..concepts import cluster, load_vocabulary
from ..errors import DivergenceError, InvariantError
from ..evaluation import evaluate_predictions, read_predictions
from ..net import HOIDetector
from ..train import train_loop
from .checkpoint import load_checkpoint
from .config import load_config
from .data import load_dataset, load_scene_spec, write_synthetic
from .pipeline import (
    evaluate_model,
    format_diagnostics,
    ground_truth,
    load_inputs,
    rare_ids,
    selection_diagnostics,
)

log = logging.getLogger("inpcc")

RESOLVED_CONFIG = "config.resolved.txt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="inpcc", description="Open-vocabulary HOI detection toolkit (desk scale).")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic vocabulary and dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)

    c = sub.add_parser("cluster", help="cluster description embeddings")
    c.add_argument("--vocab", required=True)
    c.add_argument("--j", type=int, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)

    def config_args(sp):
        sp.add_argument("--config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train a detector")
    config_args(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a prediction file")
    config_args(e)
    e.add_argument("--checkpoint")
    e.add_argument("--predictions")
    e.add_argument("--out")

    d = sub.add_parser("diag", help="prompt-selection entropy and similarity tables")
    config_args(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--dataset", required=True)
    d.add_argument("--out")
    return p


def _config(args, default_dir=None):
    path = args.config
    if path is None and default_dir and os.path.exists(os.path.join(default_dir, RESOLVED_CONFIG)):
        path = os.path.join(default_dir, RESOLVED_CONFIG)
    cfg = load_config(path, args.set, args.seed)
    log.info("resolved config (seed %d):\n%s", cfg.train.seed, cfg.dumps())
    return cfg


def cmd_synth(args):
    vpath, dpath = write_synthetic(load_scene_spec(args.spec), args.out)
    print(f"wrote {vpath}\nwrote {dpath}")


def cmd_cluster(args):
    vocab = load_vocabulary(args.vocab)
    model = cluster(vocab, args.j, args.seed)
    model.write_map(args.out)
    print(f"wrote {args.out} (J={args.j}, inertia={model.inertia:.6g}, iterations={model.iterations})")


def cmd_train(args):
    cfg = _config(args)
    vocab, dataset, clusters = load_inputs(cfg)
    out = cfg.paths.out_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, RESOLVED_CONFIG), "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps())
    try:
        result = train_loop(cfg, dataset, vocab, clusters, out_dir=out)
    except DivergenceError as exc:
        with open(os.path.join(out, "divergence.json"), "w", encoding="utf-8") as fh:
            json.dump({"error": str(exc), "batch_ids": exc.batch_ids}, fh)
        raise
    print(f"wrote {result.checkpoint_path}\nwrote {result.metrics_path}")


def _write_report(text, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)


def cmd_eval(args):
    cfg = _config(args, os.path.dirname(args.checkpoint) if args.checkpoint else None)
    out = args.out or os.path.join(cfg.paths.out_dir, "report.txt")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    if args.predictions:
        vocab = load_vocabulary(cfg.paths.vocab)
        dataset = load_dataset(cfg.paths.dataset, vocab)
        rare = rare_ids(dataset, vocab, cfg.eval.rare_threshold) if cfg.eval.rare_threshold > 0 else None
        report = evaluate_predictions(
            read_predictions(args.predictions), ground_truth(dataset), vocab, cfg.eval.iou_threshold, rare
        )
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        vocab, dataset, _ = load_inputs(cfg)
        model = load_checkpoint(HOIDetector(cfg, _rng()), args.checkpoint)
        report = evaluate_model(model, cfg, vocab, dataset)
    _write_report(report.format(), out)


def cmd_diag(args):
    cfg = _config(args, os.path.dirname(args.checkpoint))
    vocab = load_vocabulary(cfg.paths.vocab)
    dataset = load_dataset(args.dataset, vocab)
    model = load_checkpoint(HOIDetector(cfg, _rng()), args.checkpoint)
    text = format_diagnostics(selection_diagnostics(model, dataset, vocab), evaluate_model(model, cfg, vocab, dataset))
    out = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", "diagnostics.txt")
    _write_report(text, out)


def _rng():
    import numpy as np

    return np.random.default_rng(0)


COMMANDS = {"synth": cmd_synth, "cluster": cmd_cluster, "train": cmd_train, "eval": cmd_eval, "diag": cmd_diag}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.DEBUG if args.verbose else logging.INFO,
            format="%(asctime)s %(name)s %(levelname)s %(message)s",
            stream=sys.stderr,
        )
        COMMANDS[args.command](args)
    except (InvariantError, DivergenceError) as exc:
        print(f"inpcc: internal error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, OSError) as exc:
        print(f"inpcc: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
