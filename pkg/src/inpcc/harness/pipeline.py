"""End-to-end helpers: load fixtures, train, predict, evaluate, diagnose."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .. import numeric as nm
from ..concepts import apply_cluster_map, cluster, load_vocabulary, read_cluster_map
from ..evaluation import (
    GroundTruthBox,
    detections_to_predictions,
    evaluate_predictions,
    selection_similarity_matrix,
)
from ..prompts import selection_entropy
from ..train import cxcywh_to_xyxy, train_loop
from .data import load_dataset

log = logging.getLogger(__name__)


def load_inputs(cfg):
    vocab = load_vocabulary(cfg.paths.vocab)
    dataset = load_dataset(cfg.paths.dataset, vocab)
    if cfg.paths.clusters:
        clusters = apply_cluster_map(vocab, read_cluster_map(cfg.paths.clusters))
    else:
        clusters = cluster(vocab, min(cfg.concepts.J, len(vocab)), cfg.concepts.cluster_seed)
    return vocab, dataset, clusters


def ground_truth(dataset, split="test"):
    out = []
    for im in dataset.split_images(split):
        for g in im.interactions:
            out.append(
                GroundTruthBox(
                    im.image_id,
                    g.category_id,
                    tuple(cxcywh_to_xyxy(g.human_box)),
                    tuple(cxcywh_to_xyxy(g.object_box)),
                )
            )
    return out


def predict(model, dataset, vocab, gamma, split="test", batch_size=32, max_per_image=None):
    """Scored predictions for every image of ``split`` plus the prompt selections."""
    images = dataset.split_images(split)
    ids = vocab.ids
    text = vocab.classifier_matrix(ids)
    preds, selections = [], {}
    with nm.no_grad():
        for s in range(0, len(images), batch_size):
            chunk = images[s : s + batch_size]
            tokens = np.stack([dataset.render(im, vocab) for im in chunk])
            det = model(tokens, dataset.grid, text, ids)
            preds.extend(detections_to_predictions(det, [im.image_id for im in chunk], gamma, max_per_image))
            for im, sel in zip(chunk, det.selections):
                selections[im.image_id] = sel
    return preds, selections


def rare_ids(dataset, vocab, threshold):
    counts = defaultdict(int)
    for im in dataset.split_images("train"):
        for g in im.interactions:
            counts[g.category_id] += 1
    return {cid for cid in vocab.ids_in_split("base") if counts[cid] < threshold}


def evaluate_model(model, cfg, vocab, dataset, split="test"):
    e = cfg.eval
    preds, _ = predict(model, dataset, vocab, e.gamma, split, max_per_image=e.max_per_image or None)
    rare = rare_ids(dataset, vocab, e.rare_threshold) if e.rare_threshold > 0 else None
    return evaluate_predictions(preds, ground_truth(dataset, split), vocab, e.iou_threshold, rare)


@dataclass
class ExperimentResult:
    report: object
    trace: list
    model: object


def run_experiment(cfg, vocab, dataset, clusters, out_dir=None):
    result = train_loop(cfg, dataset, vocab, clusters, out_dir=out_dir)
    report = evaluate_model(result.model, cfg, vocab, dataset)
    return ExperimentResult(report, result.trace, result.model)


def selection_diagnostics(model, dataset, vocab, split="test"):
    """Per-class selection entropy and inter-class usage similarity.

    A class's history is the selections made on images annotated with it.
    Returns a dict with ``entropy`` (class -> nats), ``classes``,
    ``similarity`` (matrix), ``semantic`` (classifier-embedding cosine
    matrix over the same classes) and ``excluded``.
    """
    if model.prompt.M == 0:
        return {"entropy": {}, "classes": [], "similarity": np.zeros((0, 0)), "semantic": np.zeros((0, 0)),
                "excluded": []}
    _, selections = predict(model, dataset, vocab, gamma=0.0, split=split)
    histories = {cid: [] for cid in vocab.ids}
    for im in dataset.split_images(split):
        for g in im.interactions:
            histories[g.category_id].append(selections[im.image_id])
    entropy = {c: selection_entropy(h) for c, h in histories.items() if h}
    classes, sim, excluded = selection_similarity_matrix(histories, model.prompt.M)
    emb = vocab.classifier_matrix(classes) if classes else np.zeros((0, 1))
    return {"entropy": entropy, "classes": classes, "similarity": sim, "semantic": emb @ emb.T,
            "excluded": excluded}


def format_diagnostics(diag, report=None):
    lines = ["# prompt selection diagnostics", "category\tentropy_nats" + ("\tAP" if report else "")]
    for c in sorted(diag["entropy"]):
        row = f"{c}\t{diag['entropy'][c]:.6f}"
        if report:
            ap = report.per_category_ap.get(c)
            row += "\t" + ("" if ap is None else f"{ap:.6f}")
        lines.append(row)
    classes = diag["classes"]
    lines += ["", "# selection similarity (cosine of prompt-usage frequencies)"]
    lines.append("\t".join(["category"] + [str(c) for c in classes]))
    for c, row in zip(classes, diag["similarity"]):
        lines.append("\t".join([str(c)] + [f"{x:.6f}" for x in row]))
    if diag["excluded"]:
        lines.append(f"# excluded (no selections): {' '.join(map(str, diag['excluded']))}")
    return "\n".join(lines) + "\n"
