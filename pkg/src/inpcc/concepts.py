"""Concept vocabulary, description-embedding clustering and negative sampling.

Vocabulary files are JSON Lines, one category per line::

    {"id": 3, "action": "ride", "object": "horse", "name_text": "ride horse",
     "description_text": "...", "classifier_embedding": [...],
     "description_embedding": [...], "split": "base", "cluster_id": 1}

``cluster_id`` is optional. Classifier embeddings are L2-normalized on load.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError

log = logging.getLogger(__name__)

SPLITS = ("base", "novel")
STRATEGIES = ("hard", "easy", "random")
REQUIRED_FIELDS = (
    "id",
    "action",
    "object",
    "name_text",
    "description_text",
    "classifier_embedding",
    "description_embedding",
    "split",
)


@dataclass
class ConceptEntry:
    id: int
    action: str
    object: str
    name_text: str
    description_text: str
    classifier_embedding: np.ndarray = field(repr=False)
    description_embedding: np.ndarray = field(repr=False)
    split: str = "base"
    cluster_id: int | None = None

    def to_record(self):
        rec = {
            "id": self.id,
            "action": self.action,
            "object": self.object,
            "name_text": self.name_text,
            "description_text": self.description_text,
            "classifier_embedding": [float(x) for x in self.classifier_embedding],
            "description_embedding": [float(x) for x in self.description_embedding],
            "split": self.split,
        }
        if self.cluster_id is not None:
            rec["cluster_id"] = int(self.cluster_id)
        return rec


class ConceptVocabulary:
    def __init__(self, entries):
        self.entries = list(entries)
        self._validate()
        self._index = {e.id: i for i, e in enumerate(self.entries)}

    def _validate(self):
        ids, pairs = set(), set()
        for e in self.entries:
            if e.id in ids:
                raise FormatError(f"duplicate category id {e.id}")
            ids.add(e.id)
            if (e.action, e.object) in pairs:
                raise FormatError(f"duplicate (action, object) pair {(e.action, e.object)} at id {e.id}")
            pairs.add((e.action, e.object))
            if e.split not in SPLITS:
                raise FormatError(f"entry {e.id}: split must be one of {SPLITS}, got {e.split!r}")
        if self.entries:
            ct = self.entries[0].classifier_embedding.shape
            cd = self.entries[0].description_embedding.shape
            for e in self.entries:
                if e.classifier_embedding.shape != ct:
                    raise FormatError(f"entry {e.id}: classifier_embedding length differs from {ct[0]}")
                if e.description_embedding.shape != cd:
                    raise FormatError(f"entry {e.id}: description_embedding length differs from {cd[0]}")
        with_cluster = [e.cluster_id is not None for e in self.entries]
        if any(with_cluster) and not all(with_cluster):
            raise FormatError("cluster_id must be present on all entries or none")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, cid):
        return cid in self._index

    def __getitem__(self, cid):
        try:
            return self.entries[self._index[cid]]
        except KeyError:
            raise FormatError(f"unknown category id {cid}") from None

    @property
    def ids(self):
        return [e.id for e in self.entries]

    def ids_in_split(self, split):
        return [e.id for e in self.entries if e.split == split]

    def classifier_matrix(self, ids=None):
        ids = self.ids if ids is None else ids
        return np.stack([self[i].classifier_embedding for i in ids])

    def description_matrix(self, ids=None):
        ids = self.ids if ids is None else ids
        return np.stack([self[i].description_embedding for i in ids])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_record()) + "\n")


def _entry_from_record(rec, lineno):
    missing = [k for k in REQUIRED_FIELDS if k not in rec]
    if missing:
        who = rec.get("id", f"line {lineno}")
        raise FormatError(f"vocabulary entry {who}: missing field(s) {', '.join(missing)}")
    cls = np.asarray(rec["classifier_embedding"], dtype=np.float64)
    desc = np.asarray(rec["description_embedding"], dtype=np.float64)
    if cls.ndim != 1 or desc.ndim != 1:
        raise FormatError(f"vocabulary entry {rec['id']}: embeddings must be flat arrays")
    norm = np.linalg.norm(cls)
    if norm == 0:
        raise FormatError(f"vocabulary entry {rec['id']}: zero classifier embedding")
    if abs(norm - 1.0) > 1e-12:
        cls = cls / norm
    cluster = rec.get("cluster_id")
    return ConceptEntry(
        id=int(rec["id"]),
        action=str(rec["action"]),
        object=str(rec["object"]),
        name_text=str(rec["name_text"]),
        description_text=str(rec["description_text"]),
        classifier_embedding=cls,
        description_embedding=desc,
        split=rec["split"],
        cluster_id=None if cluster is None else int(cluster),
    )


def load_vocabulary(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
            entries.append(_entry_from_record(rec, lineno))
    return ConceptVocabulary(entries)


# ---------------------------------------------------------------- clustering


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignments: dict
    inertia: float
    inertia_trace: list = field(default_factory=list)
    iterations: int = 0

    def members(self, cluster):
        return sorted(cid for cid, c in self.assignments.items() if c == cluster)

    def write_map(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for cid in sorted(self.assignments):
                fh.write(f"{cid}\t{self.assignments[cid]}\n")


def read_cluster_map(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}:{lineno}: expected 'id<TAB>cluster_id'")
            out[int(parts[0])] = int(parts[1])
    return out


def _sq_dists(points, centroids):
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans_pp_init(points, k, rng):
    n = points.shape[0]
    centers = [int(rng.integers(n))]
    closest = ((points - points[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            nxt = int(rng.choice(np.setdiff1d(np.arange(n), centers)))
        centers.append(nxt)
        closest = np.minimum(closest, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[centers].copy()


def kmeans(points, k, seed, max_iter=300):
    """Lloyd's algorithm from k-means++ seeds.

    Returns ``(centroids, labels, inertia_trace)``; the trace holds the
    within-cluster sum of squares after every assignment+update round.
    Empty clusters keep their previous centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(points, k, rng)
    labels = np.argmin(_sq_dists(points, centroids), axis=1)
    trace = []
    for _ in range(max_iter):
        for c in range(k):
            member = labels == c
            if member.any():
                centroids[c] = points[member].mean(axis=0)
        d = _sq_dists(points, centroids)
        trace.append(float(d[np.arange(len(points)), labels].sum()))
        new = np.argmin(d, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
    return centroids, labels, trace


def cluster(vocab, J, seed):
    """Cluster description embeddings into ``J`` groups; writes ``cluster_id`` back."""
    if not 1 <= J <= len(vocab):
        raise ParameterError(f"J={J} must lie in [1, vocabulary size {len(vocab)}]")
    centroids, labels, trace = kmeans(vocab.description_matrix(), J, seed)
    assignments = {}
    for e, lab in zip(vocab.entries, labels):
        e.cluster_id = int(lab)
        assignments[e.id] = int(lab)
    return ClusterModel(
        centroids=centroids,
        assignments=assignments,
        inertia=trace[-1],
        inertia_trace=trace,
        iterations=len(trace),
    )


def apply_cluster_map(vocab, mapping):
    missing = [e.id for e in vocab if e.id not in mapping]
    if missing:
        raise FormatError(f"cluster map lacks ids {missing[:5]}")
    for e in vocab:
        e.cluster_id = mapping[e.id]
    J = max(mapping.values()) + 1
    points = vocab.description_matrix()
    labels = np.array([mapping[i] for i in vocab.ids])
    centroids = np.stack(
        [points[labels == c].mean(axis=0) if (labels == c).any() else np.zeros(points.shape[1]) for c in range(J)]
    )
    inertia = float(((points - centroids[labels]) ** 2).sum())
    return ClusterModel(centroids, {e.id: e.cluster_id for e in vocab}, inertia, [inertia], 0)


# ---------------------------------------------------------------- negative sampling


class Negatives(list):
    """Sampled negative ids; ``pool_empty`` flags a strategy with nothing to offer."""

    pool_size = 0
    pool_empty = False


def candidate_pool(clusters, positives, strategy, universe):
    """Candidate negative ids for ``strategy``, restricted to ``universe``."""
    if strategy not in STRATEGIES:
        raise ParameterError(f"unknown negative strategy {strategy!r}")
    assign = clusters.assignments
    current = {assign[p] for p in positives}
    pool = []
    for cid in universe:
        if cid in positives:
            continue
        if strategy == "hard" and assign[cid] not in current:
            continue
        if strategy == "easy" and assign[cid] in current:
            continue
        pool.append(cid)
    return sorted(pool)


def sample_negatives(vocab, clusters, batch_positive_ids, count, strategy, seed, universe=None):
    """Draw up to ``count`` negatives uniformly without replacement.

    ``hard`` draws from clusters holding a batch positive, ``easy`` from the
    remaining clusters, ``random`` from every non-positive category. Pools
    are never back-filled from outside. ``universe`` optionally restricts
    the candidates (training passes the base split). ``seed`` may be an int
    or a ``numpy.random.Generator``.
    """
    positives = set(batch_positive_ids)
    if not positives:
        raise ParameterError("sample_negatives needs at least one positive id")
    for p in positives:
        if p not in vocab:
            raise ParameterError(f"positive id {p} not in vocabulary")
    if count < 1:
        raise ParameterError(f"negative count must be positive, got {count}")
    universe = vocab.ids if universe is None else list(universe)
    pool = candidate_pool(clusters, positives, strategy, universe)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = Negatives()
    out.pool_size = len(pool)
    if not pool:
        out.pool_empty = True
        log.debug("empty %s negative pool for positives %s", strategy, sorted(positives))
        return out
    if len(pool) <= count:
        out.extend(pool)
    else:
        picks = rng.choice(len(pool), size=count, replace=False)
        out.extend(sorted(pool[i] for i in picks))
    return out
