"""Dataset files and the procedural synthetic HOI world.

A dataset file is JSON Lines: a header record followed by one record per
image. Images are not stored as pixels. Each record carries a token seed and
its ground-truth interactions, and :meth:`Dataset.render` rebuilds the token
grid from those plus the vocabulary's classifier embeddings:

* background tokens are Gaussian noise plus a per-style offset;
* each cell receives ``R_s (A_h t_c + m_h)`` scaled by the fraction of it
  covered by a human box, and likewise ``R_s (A_o t_c + m_o)`` for objects,
  where ``t_c`` is the category's classifier embedding, ``A_h``/``A_o`` are
  fixed projections, ``m_h``/``m_o`` presence markers and ``R_s`` the
  image style's orthogonal mixing (identity for style 0).

Because appearance is linear in the text embedding, categories never seen in
training are still recognizable when their embedding is a combination of
seen ones, which is how the generator builds the novel split: unseen
(action, object) pairings of seen actions and objects.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from ..concepts import ConceptEntry, ConceptVocabulary
from ..errors import FormatError, ParameterError
from ..train import GroundTruthInteraction
from .config import parse_lines, parse_value

DATASET_FORMAT = "inpcc-dataset/1"


@dataclass
class ImageRecord:
    image_id: str
    split: str
    grid: tuple
    token_seed: int
    interactions: list
    style: int = 0

    def to_record(self):
        return {
            "image_id": self.image_id,
            "split": self.split,
            "grid": list(self.grid),
            "token_seed": self.token_seed,
            "style": self.style,
            "interactions": [
                {
                    "human_box": [float(x) for x in g.human_box],
                    "object_box": [float(x) for x in g.object_box],
                    "category_id": g.category_id,
                }
                for g in self.interactions
            ],
        }


@dataclass
class Dataset:
    header: dict
    images: list = field(default_factory=list)
    _world_cache: tuple = field(default=None, repr=False, compare=False)

    @property
    def grid(self):
        return tuple(self.header["grid"])

    def split_images(self, split):
        return [im for im in self.images if im.split == split]

    def category_ids(self, split=None):
        return {g.category_id for im in self.images if split in (None, im.split) for g in im.interactions}

    def validate(self, vocab):
        for im in self.images:
            for g in im.interactions:
                if g.category_id not in vocab:
                    raise FormatError(f"image {im.image_id} references unknown category {g.category_id}")

    def _world(self):
        h = self.header
        rng = np.random.default_rng([h["render_seed"], 7])
        td, cd, scale = h["token_dim"], h["text_dim"], h["pattern_scale"]
        a_h = rng.normal(0, 1.5 * scale / np.sqrt(td), (td, cd))
        a_o = rng.normal(0, 1.5 * scale / np.sqrt(td), (td, cd))
        m_h = rng.normal(0, scale / np.sqrt(td), td)
        m_o = rng.normal(0, scale / np.sqrt(td), td)
        mixes, offsets = [np.eye(td)], [np.zeros(td)]
        for _ in range(1, h.get("styles", 1)):
            q, _ = np.linalg.qr(rng.normal(size=(td, td)))
            mixes.append(q)
            offsets.append(rng.normal(0, scale / np.sqrt(td), td))
        return a_h, a_o, m_h, m_o, mixes, offsets

    def render(self, image, vocab):
        """Token grid ``(h*w, token_dim)`` for one image."""
        if self._world_cache is None:
            self._world_cache = self._world()
        a_h, a_o, m_h, m_o, mixes, offsets = self._world_cache
        gh, gw = image.grid
        rng = np.random.default_rng(image.token_seed)
        tokens = rng.normal(0, self.header["token_noise"], (gh * gw, self.header["token_dim"]))
        mix = mixes[image.style]
        tokens += offsets[image.style]
        for g in image.interactions:
            t = vocab[g.category_id].classifier_embedding
            for box, proj, marker in ((g.human_box, a_h, m_h), (g.object_box, a_o, m_o)):
                tokens += box_coverage(box, gh, gw)[:, None] * (mix @ (proj @ t + marker))[None, :]
        return tokens

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.header) + "\n")
            for im in self.images:
                fh.write(json.dumps(im.to_record()) + "\n")


def box_coverage(box, gh, gw):
    """Fraction of each grid cell covered by a cxcywh box, flattened row-major.

    Partial coverage keeps sub-cell box geometry recoverable from the tokens.
    """
    cx, cy, w, h = box

    def axis(center, size, n):
        lo = np.arange(n) / n
        overlap = np.minimum(lo + 1 / n, center + size / 2) - np.maximum(lo, center - size / 2)
        return np.clip(overlap * n, 0.0, 1.0)

    return (axis(cy, h, gh)[:, None] * axis(cx, w, gw)[None, :]).reshape(-1)


def _box(rec, key, where):
    box = rec.get(key)
    if not isinstance(box, list) or len(box) != 4:
        raise FormatError(f"{where}: {key} must be 4 numbers")
    box = tuple(float(x) for x in box)
    if box[2] <= 0 or box[3] <= 0:
        raise FormatError(f"{where}: {key} has non-positive size")
    return box


def load_dataset(path, vocab=None):
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty dataset file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:1: not valid JSON ({exc.msg})") from None
    if header.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: header must declare format {DATASET_FORMAT!r}")
    images = []
    for lineno, line in enumerate(lines[1:], 2):
        where = f"{path}:{lineno}"
        try:
            rec = json.loads(line)
            gts = [
                GroundTruthInteraction(
                    _box(g, "human_box", where), _box(g, "object_box", where), int(g["category_id"])
                )
                for g in rec["interactions"]
            ]
            images.append(
                ImageRecord(
                    image_id=str(rec["image_id"]),
                    split=rec["split"],
                    grid=tuple(rec["grid"]),
                    token_seed=int(rec["token_seed"]),
                    interactions=gts,
                    style=int(rec.get("style", 0)),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{where}: malformed image record ({exc})") from None
    ds = Dataset(header, images)
    if vocab is not None:
        ds.validate(vocab)
    return ds


# ---------------------------------------------------------------- synthetic world


@dataclass
class SyntheticSceneSpec:
    """Geometry and size of a synthetic HOI world.

    Categories are ``num_clusters`` objects times ``cluster_size`` actions.
    Description embeddings of categories sharing an object have pairwise
    cosine ``intra_cosine`` and are orthogonal across objects. Classifier
    embeddings are ``normalize(action_weight * e_action + e_object)``, so
    same-object categories are confusable with cosine ``1/(1+action_weight^2)``.
    """

    num_clusters: int = 2
    cluster_size: int = 5
    novel: int = 2
    images_per_category: int = 25
    test_images_per_category: int = 10
    box_noise: float = 0.2
    token_noise: float = 0.1
    pattern_scale: float = 1.0
    intra_cosine: float = 0.92
    action_weight: float = 1.0
    styles: int = 1
    grid: int = 8
    token_dim: int = 32
    text_dim: int = 16
    desc_dim: int = 32
    seed: int = 0

    @property
    def vocabulary_size(self):
        return self.num_clusters * self.cluster_size

    def validate(self):
        if self.num_clusters < 1 or self.cluster_size < 1:
            raise ParameterError("need at least one cluster of at least one category")
        if not 0 <= self.novel < self.vocabulary_size:
            raise ParameterError(f"novel={self.novel} must leave at least one base category")
        if self.novel and self.num_clusters < 2:
            raise ParameterError("novel pairings need at least two objects")
        _novel_pairs(self)
        if self.cluster_size + self.num_clusters > self.text_dim:
            raise ParameterError(
                f"text_dim={self.text_dim} cannot hold {self.cluster_size} actions + {self.num_clusters} objects"
            )
        if self.num_clusters + self.vocabulary_size > self.desc_dim:
            raise ParameterError(
                f"desc_dim={self.desc_dim} cannot realize {self.num_clusters} clusters of {self.cluster_size}"
            )
        if not 0 < self.intra_cosine < 1:
            raise ParameterError("intra_cosine must lie strictly between 0 and 1")
        if self.grid < 4 or self.styles < 1 or self.images_per_category < 0:
            raise ParameterError("grid must be >= 4, styles >= 1, image counts >= 0")
        return self


def load_scene_spec(path):
    spec = SyntheticSceneSpec()
    names = {f.name: f for f in dataclasses.fields(spec)}
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    for key, value in parse_lines(text, path):
        key = key.removeprefix("scene.")
        if key not in names:
            raise ParameterError(f"{path}: unknown scene key {key!r}")
        kind = type(getattr(spec, key))
        setattr(spec, key, kind(parse_value(value)))
    return spec.validate()


def _novel_pairs(spec):
    """Unseen (object, action) pairings whose action and object both stay seen."""
    k, s = spec.num_clusters, spec.cluster_size
    pairs = {(i % k, (s - 1 - i) % s) for i in range(spec.novel)}
    base = {(o, a) for o in range(k) for a in range(s)} - pairs
    if len(pairs) < spec.novel or {o for o, _ in base} != set(range(k)) or {a for _, a in base} != set(range(s)):
        raise ParameterError(
            f"cannot choose {spec.novel} novel pairings that keep every object and action in the base split"
        )
    return pairs


def _place_boxes(rng, noise):
    def one():
        w = 0.32 * (1 + noise * rng.uniform(-1, 1))
        h = 0.32 * (1 + noise * rng.uniform(-1, 1))
        return (rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h)

    while True:
        hb, ob = one(), one()
        if abs(hb[0] - ob[0]) * 2 >= hb[2] + ob[2] or abs(hb[1] - ob[1]) * 2 >= hb[3] + ob[3]:
            return hb, ob


def generate_synthetic(spec):
    """Build a (vocabulary, dataset) pair realizing ``spec``."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 11])
    k, s = spec.num_clusters, spec.cluster_size
    text_basis, _ = np.linalg.qr(rng.normal(size=(spec.text_dim, s + k)))
    desc_basis, _ = np.linalg.qr(rng.normal(size=(spec.desc_dim, k + spec.vocabulary_size)))
    novel = _novel_pairs(spec)

    entries = []
    c_in, c_out = np.sqrt(spec.intra_cosine), np.sqrt(1 - spec.intra_cosine)
    for o in range(k):
        for a in range(s):
            cid = o * s + a
            t = spec.action_weight * text_basis[:, a] + text_basis[:, s + o]
            d = c_in * desc_basis[:, o] + c_out * desc_basis[:, k + cid]
            entries.append(
                ConceptEntry(
                    id=cid,
                    action=f"act{a}",
                    object=f"obj{o}",
                    name_text=f"act{a} obj{o}",
                    description_text=f"a person performing act{a} with obj{o}; pose and contact typical of act{a}",
                    classifier_embedding=t / np.linalg.norm(t),
                    description_embedding=d,
                    split="novel" if (o, a) in novel else "base",
                )
            )
    vocab = ConceptVocabulary(entries)

    header = {
        "format": DATASET_FORMAT,
        "token_dim": spec.token_dim,
        "text_dim": spec.text_dim,
        "grid": [spec.grid, spec.grid],
        "render_seed": int(rng.integers(2**31)),
        "token_noise": spec.token_noise,
        "pattern_scale": spec.pattern_scale,
        "styles": spec.styles,
    }
    images = []
    for split, per_cat in (("train", spec.images_per_category), ("test", spec.test_images_per_category)):
        n = 0
        for e in entries:
            if split == "train" and e.split == "novel":
                continue
            for _ in range(per_cat):
                hb, ob = _place_boxes(rng, spec.box_noise)
                images.append(
                    ImageRecord(
                        image_id=f"{split}-{n:05d}",
                        split=split,
                        grid=(spec.grid, spec.grid),
                        token_seed=int(rng.integers(2**31)),
                        interactions=[GroundTruthInteraction(hb, ob, e.id)],
                        style=int(rng.integers(spec.styles)),
                    )
                )
                n += 1
    return vocab, Dataset(header, images)


def write_synthetic(spec, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    vocab, ds = generate_synthetic(spec)
    vpath, dpath = os.path.join(out_dir, "vocab.jsonl"), os.path.join(out_dir, "dataset.jsonl")
    vocab.save(vpath)
    ds.save(dpath)
    return vpath, dpath
