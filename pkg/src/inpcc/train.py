"""Set-prediction training: matching, losses and the optimization loop."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import numeric as nm
from .concepts import sample_negatives
from .errors import DivergenceError, ParameterError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- boxes


def cxcywh_to_xyxy(box):
    b = np.asarray(box, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(box):
    b = np.asarray(box, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def giou(box_a, box_b):
    """Generalized IoU of two cxcywh boxes, in (-1, 1]."""
    a, b = np.asarray(box_a, float), np.asarray(box_b, float)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise ParameterError(f"degenerate box: {a.tolist()} / {b.tolist()}")
    ax1, ay1, ax2, ay2 = cxcywh_to_xyxy(a)
    bx1, by1, bx2, by2 = cxcywh_to_xyxy(b)
    inter = max(0.0, min(ax2, bx2) - max(ax1, bx1)) * max(0.0, min(ay2, by2) - max(ay1, by1))
    union = a[2] * a[3] + b[2] * b[3] - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return float(inter / union - (hull - union) / hull)


def _giou_matrix(pred, gt):
    """GIoU between every row of ``pred`` (N,4) and ``gt`` (G,4), cxcywh, numpy."""
    p = cxcywh_to_xyxy(pred)[:, None, :]
    g = cxcywh_to_xyxy(gt)[None, :, :]
    iw = np.clip(np.minimum(p[..., 2], g[..., 2]) - np.maximum(p[..., 0], g[..., 0]), 0, None)
    ih = np.clip(np.minimum(p[..., 3], g[..., 3]) - np.maximum(p[..., 1], g[..., 1]), 0, None)
    inter = iw * ih
    area_p = (p[..., 2] - p[..., 0]) * (p[..., 3] - p[..., 1])
    area_g = (g[..., 2] - g[..., 0]) * (g[..., 3] - g[..., 1])
    union = area_p + area_g - inter
    hull = (np.maximum(p[..., 2], g[..., 2]) - np.minimum(p[..., 0], g[..., 0])) * (
        np.maximum(p[..., 3], g[..., 3]) - np.minimum(p[..., 1], g[..., 1])
    )
    return inter / union - (hull - union) / hull


def giou_tensor(pred, gt):
    """Row-wise GIoU of tracked ``(P, 4)`` cxcywh boxes against constant targets."""
    gt = nm.as_tensor(gt)

    def corners(b):
        cx, cy, w, h = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
        hw, hh = nm.scale(w, 0.5), nm.scale(h, 0.5)
        return cx - hw, cy - hh, cx + hw, cy + hh, nm.mul(w, h)

    px1, py1, px2, py2, pa = corners(pred)
    gx1, gy1, gx2, gy2, ga = corners(gt)
    iw = nm.maximum(nm.minimum(px2, gx2) - nm.maximum(px1, gx1), 0.0)
    ih = nm.maximum(nm.minimum(py2, gy2) - nm.maximum(py1, gy1), 0.0)
    inter = nm.mul(iw, ih)
    union = pa + ga - inter
    hull = nm.mul(nm.maximum(px2, gx2) - nm.minimum(px1, gx1), nm.maximum(py2, gy2) - nm.minimum(py1, gy1))
    return inter / union - (hull - union) / hull


# ---------------------------------------------------------------- matching


@dataclass
class GroundTruthInteraction:
    human_box: tuple
    object_box: tuple
    category_id: int


@dataclass
class MatchResult:
    pairs: list
    unmatched: list


def _lsap_cost(cost):
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    r, c = linear_sum_assignment(cost)
    return float(cost[r, c].sum())


def hungarian_match(cost):
    """Minimum-cost one-to-one assignment with deterministic tie-breaking.

    Among all optimal assignments the one returned is lexicographically
    smallest when read along the shorter side: for each ground truth
    (column) in order, the lowest prediction index that still admits an
    optimal completion. Wide matrices are handled by transposition.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if not np.all(np.isfinite(cost)):
        raise ParameterError("hungarian_match needs a finite cost matrix")
    n, g = cost.shape
    if g > n:
        t = hungarian_match(cost.T)
        pairs = sorted((j, i) for i, j in t.pairs)
        matched = {i for i, _ in pairs}
        return MatchResult(pairs, [i for i in range(n) if i not in matched])

    best = _lsap_cost(cost)
    tol = 1e-9 * max(1.0, abs(best))
    rows, cols = list(range(n)), list(range(g))
    pairs, remaining = [], best
    while cols:
        j = cols[0]
        for i in rows:
            rest = cost[np.ix_([r for r in rows if r != i], cols[1:])]
            if cost[i, j] + _lsap_cost(rest) <= remaining + tol:
                pairs.append((i, j))
                remaining -= cost[i, j]
                rows.remove(i)
                cols.pop(0)
                break
        else:  # pragma: no cover - unreachable for finite costs
            raise RuntimeError("tie-breaking failed to extend an optimal assignment")
    pairs.sort()
    matched = {i for i, _ in pairs}
    return MatchResult(pairs, [i for i in range(n) if i not in matched])


def match_cost(pred_h, pred_o, scores, gts, column_of, weights):
    """Cost ``(N, G)`` for one image, mirroring the training loss.

    ``pred_h``/``pred_o`` are (N,4) cxcywh arrays, ``scores`` is (N, A) over
    the active categories and ``column_of`` maps a category id to its column.
    """
    lam_b, lam_iou, lam_cls = weights
    pred_h, pred_o, scores = np.asarray(pred_h), np.asarray(pred_o), np.asarray(scores)
    if not gts:
        return np.zeros((pred_h.shape[0], 0))
    gh = np.array([g.human_box for g in gts], dtype=float)
    go = np.array([g.object_box for g in gts], dtype=float)
    l1 = np.abs(pred_h[:, None, :] - gh[None]).sum(-1) + np.abs(pred_o[:, None, :] - go[None]).sum(-1)
    iou_term = (1 - _giou_matrix(pred_h, gh)) + (1 - _giou_matrix(pred_o, go))
    cls_term = 1 - scores[:, [column_of[g.category_id] for g in gts]]
    return lam_b * l1 + lam_iou * iou_term + lam_cls * cls_term


# ---------------------------------------------------------------- losses

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LOG_EPS = 1e-12


def focal_loss(probs, targets, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA):
    """Mean sigmoid focal loss of probabilities against 0/1 targets."""
    t = np.asarray(targets, dtype=np.float64)
    p = nm.as_tensor(probs)
    log_p = nm.log(nm.clip(p, LOG_EPS, 1.0))
    log_q = nm.log(nm.clip(1.0 - p, LOG_EPS, 1.0))
    q = 1.0 - p
    pos = nm.mul(nm.mul(q, q) if gamma == 2.0 else nm.exp(nm.scale(nm.log(q), gamma)), log_p)
    neg = nm.mul(nm.mul(p, p) if gamma == 2.0 else nm.exp(nm.scale(nm.log(p), gamma)), log_q)
    cell = nm.scale(nm.mul(pos, alpha * t), -1.0) - nm.mul(neg, (1 - alpha) * (1 - t))
    return nm.mean(cell)


def classification_targets(shape, matches, gts_per_image, column_of):
    """0/1 targets ``(B, N, A)``: matched queries get 1 at their GT's column."""
    tgt = np.zeros(shape)
    for b, (match, gts) in enumerate(zip(matches, gts_per_image)):
        for qi, gi in match.pairs:
            tgt[b, qi, column_of[gts[gi].category_id]] = 1.0
    return tgt


def classification_loss(scores, matches, gts_per_image, active_categories, column_of=None):
    """Focal loss over the active-category columns of ``scores``.

    ``scores`` has shape ``(B, N, A)`` (or ``(N, A)`` for one image) with
    columns already restricted to ``active_categories``.
    """
    if not active_categories:
        raise ParameterError("classification_loss needs a non-empty active category set")
    if column_of is None:
        column_of = {c: i for i, c in enumerate(active_categories)}
    if scores.ndim == 2:
        scores = nm.reshape(scores, (1,) + scores.shape)
        matches, gts_per_image = [matches], [gts_per_image]
    targets = classification_targets(scores.shape, matches, gts_per_image, column_of)
    return focal_loss(scores, targets)


@dataclass
class LossBreakdown:
    l_box: nm.Tensor
    l_iou: nm.Tensor
    l_cls: nm.Tensor
    total: nm.Tensor

    def values(self):
        return tuple(float(t.data) for t in (self.l_box, self.l_iou, self.l_cls, self.total))


def total_loss(det, matches, gts_per_image, active_categories, weights):
    """Weighted sum of box L1, GIoU and focal classification terms.

    Box and GIoU terms add the human and object contributions and average
    over all matched pairs in the batch; with no pairs they are zero.
    """
    lam_b, lam_iou, lam_cls = weights
    column_of = {c: i for i, c in enumerate(active_categories)}
    b_idx, q_idx, gh, go = [], [], [], []
    for b, (match, gts) in enumerate(zip(matches, gts_per_image)):
        for qi, gi in match.pairs:
            b_idx.append(b)
            q_idx.append(qi)
            gh.append(gts[gi].human_box)
            go.append(gts[gi].object_box)
    if b_idx:
        index = (np.array(b_idx), np.array(q_idx))
        ph, po = det.human_boxes[index], det.object_boxes[index]
        gh, go = np.array(gh, float), np.array(go, float)
        n = float(len(b_idx))
        l_box = nm.scale(nm.sum_(nm.abs_(ph - gh)) + nm.sum_(nm.abs_(po - go)), 1.0 / n)
        l_iou = nm.scale(
            nm.sum_(1.0 - giou_tensor(ph, gh)) + nm.sum_(1.0 - giou_tensor(po, go)), 1.0 / n
        )
    else:
        l_box, l_iou = nm.Tensor(0.0), nm.Tensor(0.0)
    l_cls = classification_loss(det.class_scores, matches, gts_per_image, active_categories, column_of)
    total = nm.scale(l_box, lam_b) + nm.scale(l_iou, lam_iou) + nm.scale(l_cls, lam_cls)
    return LossBreakdown(l_box, l_iou, l_cls, total)


def match_batch(det, gts_per_image, active_categories, weights):
    column_of = {c: i for i, c in enumerate(active_categories)}
    hb, ob, sc = det.human_boxes.data, det.object_boxes.data, det.class_scores.data
    if hb.ndim == 2:
        hb, ob, sc = hb[None], ob[None], sc[None]
    return [
        hungarian_match(match_cost(hb[b], ob[b], sc[b], gts, column_of, weights))
        for b, gts in enumerate(gts_per_image)
    ]


# ---------------------------------------------------------------- optimizer


class AdamW:
    """Adam moments with decoupled weight decay (biases and norms included)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            if lr == 0:
                continue
            p.data -= lr * self.wd * p.data
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm):
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        for p in params:
            p.grad *= max_norm / total
    return total


def cosine_lr(base, step, total, warmup=0):
    """Learning rate for 0-based ``step`` of ``total``: linear warmup, then cosine decay."""
    if step < warmup:
        return base * (step + 1) / warmup
    if total - warmup <= 1:
        return base
    return base * 0.5 * (1 + math.cos(math.pi * (step - warmup) / (total - warmup)))


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: object
    trace: list = field(default_factory=list)
    checkpoint_path: str | None = None
    metrics_path: str | None = None
    negatives_log: list = field(default_factory=list)


def _batches(n, batch_size, rng):
    while True:
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            yield order[s : s + batch_size]


def format_trace_line(step, values):
    return "\t".join([str(step)] + [repr(float(v)) for v in values])


def train_loop(cfg, dataset, vocab, clusters, seed=None, out_dir=None, model=None, steps=None):
    """Train a detector on the dataset's training images.

    Negatives are resampled every step from the base split according to
    ``cfg.concepts.strategy``. With ``out_dir`` set, a checkpoint and a
    tab-separated metrics trace are written there.
    """
    from .harness.checkpoint import save_checkpoint
    from .net import HOIDetector

    seed = cfg.train.seed if seed is None else seed
    t = cfg.train
    weights = (t.lambda_b, t.lambda_iou, t.lambda_cls)
    init_rng = np.random.default_rng([seed, 0])
    order_rng = np.random.default_rng([seed, 1])
    neg_rng = np.random.default_rng([seed, 2])
    if model is None:
        model = HOIDetector(cfg, init_rng)
    params = model.parameters()
    opt = AdamW(params, lr=t.lr, weight_decay=t.weight_decay)

    images = dataset.split_images("train")
    if not images:
        raise ParameterError("dataset has no training images")
    tokens = np.stack([dataset.render(img, vocab) for img in images])
    hw = dataset.grid
    base_ids = vocab.ids_in_split("base")
    total_steps = steps or t.steps or t.epochs * math.ceil(len(images) / t.batch_size)

    result = TrainResult(model=model)
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        result.metrics_path = os.path.join(out_dir, "metrics.tsv")
        metrics_fh = open(result.metrics_path, "w", encoding="utf-8")
    log.info("training %d steps on %d images, seed %d", total_steps, len(images), seed)
    try:
        batches = _batches(len(images), t.batch_size, order_rng)
        for step in range(total_steps):
            idx = next(batches)
            gts = [images[i].interactions for i in idx]
            positives = sorted({g.category_id for gl in gts for g in gl})
            negs = sample_negatives(
                vocab, clusters, positives, cfg.concepts.negatives, cfg.concepts.strategy, neg_rng,
                universe=base_ids,
            )
            active = positives + list(negs)
            result.negatives_log.append((positives, list(negs)))

            model.zero_grad()
            det = model(tokens[idx], hw, vocab.classifier_matrix(active), active)
            matches = match_batch(det, gts, active, weights)
            losses = total_loss(det, matches, gts, active, weights)
            values = losses.values()
            if not all(math.isfinite(v) for v in values):
                ids = [images[i].image_id for i in idx]
                raise DivergenceError(f"non-finite loss at step {step + 1}, batch {ids}", ids)
            nm.backward(losses.total)
            if t.clip_norm > 0:
                clip_grad_norm(params, t.clip_norm)
            opt.step(cosine_lr(t.lr, step, total_steps, min(t.warmup, total_steps)))
            result.trace.append((step + 1,) + values)
            if metrics_fh:
                metrics_fh.write(format_trace_line(step + 1, values) + "\n")
            if (step + 1) % max(1, total_steps // 10) == 0:
                log.info("step %d total %.4f (box %.4f iou %.4f cls %.4f)", step + 1, values[3], *values[:3])
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out_dir is not None:
        result.checkpoint_path = os.path.join(out_dir, "model.ckpt")
        save_checkpoint(model, result.checkpoint_path)
    return result
