"""Toy end-to-end run and the two ablation comparisons on synthetic worlds."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field

from ..concepts import cluster
from .config import load_config
from .data import generate_synthetic, load_scene_spec
from .pipeline import run_experiment

log = logging.getLogger(__name__)

# variant name -> config overrides applied on top of the ablation config
ABLATIONS = {
    "negatives": {"hard": {"concepts.strategy": "hard"}, "random": {"concepts.strategy": "random"}},
    "prompts": {"inp": {}, "common_only": {"prompt.M": 0}},
}


@dataclass
class ToyRun:
    split_map: dict
    seconds: float
    first_loss: float
    last_loss: float
    report_text: str = field(repr=False, default="")


def run_world(cfg, spec, out_dir=None):
    vocab, dataset = generate_synthetic(spec)
    clusters = cluster(vocab, min(cfg.concepts.J, len(vocab)), cfg.concepts.cluster_seed)
    start = time.perf_counter()
    res = run_experiment(cfg, vocab, dataset, clusters, out_dir=out_dir)
    elapsed = time.perf_counter() - start
    return ToyRun(res.report.split_map, elapsed, res.trace[0][4], res.trace[-1][4], res.report.format())


def run_toy(config_path, scene_path, overrides=(), out_dir=None):
    """Train and evaluate once; the timer covers training plus evaluation."""
    cfg = load_config(config_path, overrides)
    spec = load_scene_spec(scene_path)
    run = run_world(cfg, spec, out_dir)
    log.info("toy run: %s in %.1fs", run.split_map, run.seconds)
    return run


def run_ablation(config_path, scene_path, which, seeds, overrides=()):
    """Full mAP per variant and seed: ``{variant: [map_seed0, ...]}``.

    The seed drives the synthetic world, initialization and batch order
    together, so each seed is an independent replicate.
    """
    base = load_config(config_path, overrides)
    spec0 = load_scene_spec(scene_path)
    out = {name: [] for name in ABLATIONS[which]}
    for seed in seeds:
        spec = copy.deepcopy(spec0)
        spec.seed = spec0.seed + seed
        for name, changes in ABLATIONS[which].items():
            cfg = copy.deepcopy(base)
            cfg.train.seed = base.train.seed + seed
            for key, value in changes.items():
                cfg.set(key, value)
            cfg.validate()
            run = run_world(cfg, spec)
            out[name].append(run.split_map["full"])
            log.info("%s seed %d %s: full %.4f (%.1fs)", which, seed, name, run.split_map["full"], run.seconds)
    return out
