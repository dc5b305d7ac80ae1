"""Run configuration: nested dataclasses and a dotted ``key = value`` text format.

Example file::

    # desk-scale run
    prompt.M = 16
    train.lr = 0.001
    concepts.strategy = "hard"
    paths.out_dir = "runs/a"

Lines starting with ``#`` are comments. Values are parsed as JSON when
possible (numbers, booleans, quoted strings) and otherwise kept as bare
strings.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from ..errors import ConfigurationError

SEED_ENV = "INPCC_SEED"


@dataclass
class PromptConfig:
    L: int = 4  # prompt length
    D: int = 64  # prompt width, must equal net.C
    M: int = 8  # interaction prompts; 0 keeps only the common prompt
    k: int = 2  # prompts selected per image
    select: bool = True  # False composes all M prompts (k = M)


@dataclass
class NetConfig:
    C_in: int = 32
    C: int = 64
    C_t: int = 16
    heads: int = 4
    enc_blocks: int = 2
    dec_blocks: int = 2
    N: int = 8
    temperature: float = 0.1  # initial classifier temperature


@dataclass
class ConceptsConfig:
    J: int = 64
    negatives: int = 10
    strategy: str = "hard"
    cluster_seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 24
    steps: int = 0  # > 0 overrides epochs
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 0  # linear warmup steps before cosine decay
    weight_decay: float = 1e-4
    clip_norm: float = 0.0
    lambda_b: float = 2.5
    lambda_iou: float = 1.0
    lambda_cls: float = 1.5
    seed: int = 0


@dataclass
class EvalConfig:
    gamma: float = 0.5
    iou_threshold: float = 0.5
    max_per_image: int = 0  # 0 keeps every (query, category) cell
    rare_threshold: int = 0  # > 0 adds rare/non-rare splits


@dataclass
class PathsConfig:
    vocab: str = ""
    dataset: str = ""
    clusters: str = ""  # optional precomputed cluster map
    out_dir: str = "runs/default"


@dataclass
class Config:
    prompt: PromptConfig = field(default_factory=PromptConfig)
    net: NetConfig = field(default_factory=NetConfig)
    concepts: ConceptsConfig = field(default_factory=ConceptsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        p, n, c, t = self.prompt, self.net, self.concepts, self.train
        positive = {
            "prompt.L": p.L, "prompt.D": p.D, "net.C_in": n.C_in, "net.C": n.C, "net.C_t": n.C_t,
            "net.heads": n.heads, "net.N": n.N, "concepts.J": c.J, "concepts.negatives": c.negatives,
            "train.batch_size": t.batch_size, "net.temperature": n.temperature,
        }
        for key, value in positive.items():
            if not value > 0:
                raise ConfigurationError(f"{key} must be positive, got {value}")
        if p.M < 0:
            raise ConfigurationError("prompt.M must be >= 0")
        if not p.select and p.M:
            p.k = p.M
        if p.M and not 1 <= p.k <= p.M:
            raise ConfigurationError(f"prompt.k={p.k} must lie in [1, prompt.M={p.M}]")
        if p.D != n.C:
            raise ConfigurationError(f"prompt.D={p.D} must equal net.C={n.C}")
        if n.C % n.heads or n.C % 4:
            raise ConfigurationError(f"net.C={n.C} must be divisible by net.heads and by 4")
        if c.strategy not in ("hard", "easy", "random"):
            raise ConfigurationError(f"concepts.strategy must be hard|easy|random, got {c.strategy!r}")
        if t.lr < 0 or t.epochs < 0 or t.steps < 0 or t.warmup < 0:
            raise ConfigurationError("train.lr, train.epochs, train.steps and train.warmup must be non-negative")
        if not 0 < self.eval.iou_threshold < 1 or self.eval.gamma < 0:
            raise ConfigurationError("eval.iou_threshold must be in (0,1) and eval.gamma >= 0")
        return self

    def set(self, dotted, value):
        section, _, key = dotted.partition(".")
        sub = getattr(self, section, None)
        if sub is None or not dataclasses.is_dataclass(sub) or not key:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        fields = {f.name: f for f in dataclasses.fields(sub)}
        if key not in fields:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        setattr(sub, key, _coerce(dotted, value, type(getattr(sub, key))))

    def items(self):
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            for g in dataclasses.fields(sub):
                yield f"{f.name}.{g.name}", getattr(sub, g.name)

    def dumps(self):
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.items())


def _coerce(key, value, kind):
    if isinstance(value, str):
        value = parse_value(value)
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            raise TypeError
        if kind is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if kind is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{key}: cannot use {value!r} as {kind.__name__}") from None


def parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_lines(text, source="<config>"):
    """Yield ``(key, raw_value)`` pairs from dotted-key text."""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        yield key.strip(), value.strip()


def load_config(path=None, overrides=(), seed=None):
    """Defaults <- file <- ``overrides`` (``key=value`` strings) <- ``seed``.

    ``INPCC_SEED`` supplies the seed when neither the file nor the overrides
    set ``train.seed``.
    """
    cfg = Config()
    seen = set()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
        for key, value in parse_lines(text, path):
            cfg.set(key, value)
            seen.add(key)
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value)
        seen.add(key.strip())
    if seed is not None:
        cfg.train.seed = int(seed)
    elif "train.seed" not in seen and os.environ.get(SEED_ENV):
        cfg.set("train.seed", os.environ[SEED_ENV])
    return cfg.validate()


def large_scale_settings(dataset="hico"):
    """Full-size benchmark hyperparameters; the prompt count depends on the dataset."""
    cfg = Config()
    cfg.prompt.M = {"swig": 128, "hico": 8}[dataset]
    cfg.prompt.k = 2
    cfg.concepts.J = 64
    cfg.concepts.negatives = 10
    cfg.train.epochs = 80
    cfg.train.batch_size = 128
    return cfg
