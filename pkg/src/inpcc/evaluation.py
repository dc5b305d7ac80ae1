"""HOI detection mAP and prompt-selection diagnostics.

A prediction is a true positive when its category matches an unclaimed
ground truth in the same image and both the human and the object boxes
overlap that ground truth with IoU above the threshold. AP is the area under
the all-point interpolated precision envelope.
"""

from __future__ import annotations

import io
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError
from .net import inference_score
from .train import cxcywh_to_xyxy

log = logging.getLogger(__name__)


@dataclass
class Prediction:
    image_id: str
    category_id: int
    score: float
    human_box: tuple  # xyxy
    object_box: tuple  # xyxy


@dataclass
class GroundTruthBox:
    image_id: str
    category_id: int
    human_box: tuple  # xyxy
    object_box: tuple  # xyxy


def iou(box_a, box_b):
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ParameterError(f"invalid xyxy box: {tuple(box_a)} / {tuple(box_b)}")
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def rank_predictions(predictions):
    """Indices sorted by score descending, ties by lower original index."""
    return sorted(range(len(predictions)), key=lambda i: (-predictions[i].score, i))


def match_true_positives(predictions, gts, iou_threshold=0.5):
    """TP/FP flag per prediction (in the given order), greedy in score order.

    Each ground truth is claimed at most once. Among eligible unclaimed
    ground truths the one with the largest min(human IoU, object IoU) wins.
    """
    by_key = defaultdict(list)
    for gi, g in enumerate(gts):
        by_key[(g.image_id, g.category_id)].append(gi)
    claimed = set()
    labels = [False] * len(predictions)
    for pi in rank_predictions(predictions):
        p = predictions[pi]
        best, best_overlap = None, iou_threshold
        for gi in by_key.get((p.image_id, p.category_id), ()):
            if gi in claimed:
                continue
            overlap = min(iou(p.human_box, gts[gi].human_box), iou(p.object_box, gts[gi].object_box))
            if overlap > best_overlap:
                best, best_overlap = gi, overlap
        if best is not None:
            claimed.add(best)
            labels[pi] = True
    return labels


def average_precision(tp_fp, total_gt):
    """All-point interpolated AP for a ranked list of TP (True) / FP (False)."""
    if total_gt < 0:
        raise ParameterError("total_gt must be non-negative")
    if total_gt == 0 or not len(tp_fp):
        return 0.0
    tp = np.cumsum(np.asarray(tp_fp, dtype=float))
    fp = np.cumsum(1.0 - np.asarray(tp_fp, dtype=float))
    recall = np.concatenate([[0.0], tp / total_gt, [1.0]])
    precision = np.concatenate([[0.0], tp / (tp + fp), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(((recall[steps + 1] - recall[steps]) * precision[steps + 1]).sum())


@dataclass
class EvalReport:
    per_category_ap: dict
    split_map: dict
    counts: dict
    splits: dict = field(default_factory=dict)  # category id -> split tags
    diagnostics: dict = field(default_factory=dict)

    def format(self):
        buf = io.StringIO()
        buf.write("# hoi detection report\n")
        buf.write("split\tmAP\tcategories\n")
        for name, value in self.split_map.items():
            members = sum(1 for c in self.per_category_ap if name in self.splits.get(c, ()))
            buf.write(f"{name}\t{value:.6f}\t{members}\n")
        buf.write("\ncategory\tsplit\tnum_gt\tAP\n")
        for cid in sorted(self.per_category_ap):
            tag = self.splits.get(cid, ("full",))[0]
            buf.write(f"{cid}\t{tag}\t{self.counts[cid]}\t{self.per_category_ap[cid]:.6f}\n")
        return buf.getvalue()


def evaluate_predictions(predictions, gts, vocab, iou_threshold=0.5, rare_ids=None):
    """Per-category AP and split means over already-scored predictions.

    Categories without ground truth are left out of every mean. Split means
    cover each split tag in the vocabulary plus ``full``; passing
    ``rare_ids`` adds ``rare`` / ``non-rare`` over the base categories.
    """
    for p in predictions:
        if p.category_id not in vocab:
            raise FormatError(f"prediction references unknown category {p.category_id}")
    for g in gts:
        if g.category_id not in vocab:
            raise FormatError(f"ground truth references unknown category {g.category_id}")
    # sort once so input order cannot leak into tie-breaking
    predictions = sorted(
        predictions,
        key=lambda p: (-p.score, str(p.image_id), p.category_id, tuple(p.human_box), tuple(p.object_box)),
    )
    counts = defaultdict(int)
    for g in gts:
        counts[g.category_id] += 1
    pred_by_cat, gt_by_cat = defaultdict(list), defaultdict(list)
    for p in predictions:
        pred_by_cat[p.category_id].append(p)
    for g in gts:
        gt_by_cat[g.category_id].append(g)

    per_cat, tags = {}, {}
    for cid in sorted(counts):
        preds = pred_by_cat.get(cid, [])
        labels = match_true_positives(preds, gt_by_cat[cid], iou_threshold)
        ranked = [labels[i] for i in rank_predictions(preds)]
        per_cat[cid] = average_precision(ranked, counts[cid])
        split = vocab[cid].split
        t = [split, "full"]
        if rare_ids is not None and split == "base":
            t.insert(1, "rare" if cid in rare_ids else "non-rare")
        tags[cid] = tuple(t)

    order = [s for s in ("base", "novel", "non-rare", "rare") if any(s in t for t in tags.values())]
    order.append("full")
    split_map = {}
    for s in order:
        vals = [per_cat[c] for c in per_cat if s in tags[c]]
        split_map[s] = float(np.mean(vals)) if vals else 0.0
    return EvalReport(per_cat, split_map, dict(counts), tags)


def _has_area(boxes):
    return (boxes[..., 2] > boxes[..., 0]) & (boxes[..., 3] > boxes[..., 1])


def detections_to_predictions(det, image_ids, gamma, max_per_image=None):
    """Flatten a batched :class:`~inpcc.net.DetectionSet` into scored predictions."""
    hb = cxcywh_to_xyxy(det.human_boxes.data)
    ob = cxcywh_to_xyxy(det.object_boxes.data)
    conf = det.confidence.data
    scores = det.class_scores.data
    if hb.ndim == 2:
        hb, ob, conf, scores = hb[None], ob[None], conf[None], scores[None]
    # a saturated logistic can collapse a box to zero extent in float64; such
    # boxes cannot be scored by IoU, so their queries are dropped
    valid = _has_area(hb) & _has_area(ob)
    if not valid.all():
        log.warning("dropping %d queries with zero-extent boxes", int((~valid).sum()))
    out = []
    for b, image_id in enumerate(image_ids):
        final = inference_score(scores[b], conf[b][:, None], gamma)  # (N, V)
        final = np.where(valid[b][:, None], final, -np.inf)
        cells = [(q, v) for q in range(final.shape[0]) for v in range(final.shape[1])]
        if max_per_image is not None and len(cells) > max_per_image:
            flat = np.argsort(-final.reshape(-1), kind="stable")[:max_per_image]
            cells = [divmod(int(i), final.shape[1]) for i in flat]
        for q, v in cells:
            if not valid[b, q]:
                continue
            out.append(
                Prediction(
                    image_id=image_id,
                    category_id=det.category_ids[v],
                    score=float(final[q, v]),
                    human_box=tuple(float(x) for x in hb[b, q]),
                    object_box=tuple(float(x) for x in ob[b, q]),
                )
            )
    return out


# ---------------------------------------------------------------- prediction files


def read_predictions(path):
    """Parse ``image_id<TAB>category_id<TAB>score<TAB>h1,h2,h3,h4<TAB>o1,o2,o3,o4`` lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise FormatError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
            try:
                hb = tuple(float(x) for x in parts[3].split(","))
                ob = tuple(float(x) for x in parts[4].split(","))
                pred = Prediction(parts[0], int(parts[1]), float(parts[2]), hb, ob)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if len(hb) != 4 or len(ob) != 4:
                raise FormatError(f"{path}:{lineno}: boxes need 4 comma-separated values")
            out.append(pred)
    return out


def write_predictions(predictions, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in predictions:
            hb = ",".join(repr(float(x)) for x in p.human_box)
            ob = ",".join(repr(float(x)) for x in p.object_box)
            fh.write(f"{p.image_id}\t{p.category_id}\t{p.score!r}\t{hb}\t{ob}\n")


# ---------------------------------------------------------------- diagnostics


def usage_vector(history, num_prompts):
    counts = np.zeros(num_prompts)
    for sel in history:
        for i in getattr(sel, "chosen_indices", sel):
            counts[i] += 1
    return counts


def selection_similarity_matrix(histories, num_prompts):
    """Cosine similarity between classes' prompt-usage frequency vectors.

    ``histories`` maps class id -> list of selections. Classes with empty
    histories are dropped and reported. Returns ``(class_ids, matrix, excluded)``.
    """
    kept = [c for c in sorted(histories) if histories[c]]
    excluded = [c for c in sorted(histories) if not histories[c]]
    vecs = np.stack([usage_vector(histories[c], num_prompts) for c in kept]) if kept else np.zeros((0, num_prompts))
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    unit = vecs / norms
    return kept, unit @ unit.T, excluded
