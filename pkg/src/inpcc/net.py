"""Prompt-conditioned encoder, query decoder and the two prediction heads.

The encoder is a small trainable transformer standing in for a frozen
vision-language backbone: image tokens are projected to width ``C``, the
``L`` prompt rows are prepended, self-attention blocks run over the joint
sequence and the prompt rows are dropped again. Grid tokens get a 2D
sinusoidal encoding added right after projection, and again to attention
queries and keys in every block; prompt rows get none. An
identity-initialized encoder therefore returns ``proj(tokens) + pos``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import ConfigurationError, DegenerateInputError
from .layers import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .prompts import PromptBank, select_batch


def sine_position_encoding(h, w, dim):
    """2D sinusoidal encoding, ``(h*w, dim)``; first half rows (y), second half columns (x)."""
    if dim % 4:
        raise ConfigurationError(f"positional encoding width {dim} must be divisible by 4")
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / quarter))
    ys = (np.arange(h) + 0.5) / h * 2 * np.pi
    xs = (np.arange(w) + 0.5) / w * 2 * np.pi
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    yy, xx = yy.reshape(-1, 1) * freqs, xx.reshape(-1, 1) * freqs
    return np.concatenate([np.sin(yy), np.cos(yy), np.sin(xx), np.cos(xx)], axis=1)


@dataclass
class ImageFeatures:
    grid: nm.Tensor
    fingerprint: nm.Tensor
    hw: tuple
    pos: np.ndarray = field(repr=False)


class EncoderBlock(Module):
    def __init__(self, dim, heads, rng, identity=False):
        super().__init__()
        self.norm1 = self.child("norm1", LayerNorm(dim))
        self.attn = self.child("attn", MultiHeadAttention(dim, heads, rng, zero_out=identity))
        self.norm2 = self.child("norm2", LayerNorm(dim))
        self.ffn = self.child("ffn", FeedForward(dim, 2 * dim, rng, zero_out=identity))

    def __call__(self, x, pos):
        h = self.norm1(x)
        qk = nm.add(h, pos)
        x = nm.add(x, self.attn(qk, qk, h))
        return nm.add(x, self.ffn(self.norm2(x)))


class Encoder(Module):
    def __init__(self, in_dim, dim, heads, blocks, rng, identity=False):
        super().__init__()
        self.dim = dim
        self.proj = self.child("proj", Linear(in_dim, dim, rng))
        self.blocks = [
            self.child(f"block{i}", EncoderBlock(dim, heads, rng, identity)) for i in range(blocks)
        ]

    def __call__(self, tokens, prompt, hw):
        return encode(self, tokens, prompt, hw)


def encode(encoder, image_tokens, prompt=None, hw=None):
    """Encode ``(..., HW, C_in)`` tokens with an ``(..., L, D)`` prompt prepended."""
    tokens = nm.as_tensor(image_tokens)
    n_tok = tokens.shape[-2]
    if hw is None:
        side = int(round(np.sqrt(n_tok)))
        hw = (side, n_tok // side)
    if hw[0] * hw[1] != n_tok:
        raise ConfigurationError(f"grid {hw} does not match {n_tok} tokens")
    pos = sine_position_encoding(hw[0], hw[1], encoder.dim)
    # absolute position also enters the token values so that attended
    # features carry location for the box regressor
    x = nm.add(encoder.proj(tokens), nm.Tensor(pos))
    n_prompt = 0
    if prompt is not None and prompt.shape[-2] > 0:
        if prompt.shape[-1] != encoder.dim:
            raise ConfigurationError(
                f"prompt width {prompt.shape[-1]} differs from encoder width {encoder.dim}"
            )
        n_prompt = prompt.shape[-2]
        lead = x.shape[:-2]
        if prompt.shape[:-2] != lead:
            prompt = nm.add(nm.zeros(lead + prompt.shape[-2:]), prompt)
        x = nm.concat([prompt, x], axis=-2)
    pos_full = nm.Tensor(np.concatenate([np.zeros((n_prompt, encoder.dim)), pos], axis=0))
    for block in encoder.blocks:
        x = block(x, pos_full)
    grid = x[..., n_prompt:, :] if n_prompt else x
    fingerprint = nm.l2_normalize(nm.mean_rows(grid))
    return ImageFeatures(grid=grid, fingerprint=fingerprint, hw=tuple(hw), pos=pos)


class DecoderBlock(Module):
    def __init__(self, dim, heads, rng):
        super().__init__()
        self.norm1 = self.child("norm1", LayerNorm(dim))
        self.self_attn = self.child("self_attn", MultiHeadAttention(dim, heads, rng))
        self.norm2 = self.child("norm2", LayerNorm(dim))
        self.cross_attn = self.child("cross_attn", MultiHeadAttention(dim, heads, rng))
        self.norm3 = self.child("norm3", LayerNorm(dim))
        self.ffn = self.child("ffn", FeedForward(dim, 2 * dim, rng))

    def __call__(self, q, memory, pos):
        h = self.norm1(q)
        q = nm.add(q, self.self_attn(h, h, h))
        q = nm.add(q, self.cross_attn(self.norm2(q), nm.add(memory, pos), memory))
        return nm.add(q, self.ffn(self.norm3(q)))


class Decoder(Module):
    def __init__(self, dim, heads, blocks, rng):
        super().__init__()
        self.dim = dim
        self.blocks = [self.child(f"block{i}", DecoderBlock(dim, heads, rng)) for i in range(blocks)]

    def attention_maps(self):
        """Latest (self, cross) attention weights for each block."""
        return [(b.self_attn.last_attention, b.cross_attn.last_attention) for b in self.blocks]


def decode(decoder, queries, features):
    """Run the queries ``(N, C)`` against encoded features; returns ``(..., N, C)``."""
    q = nm.as_tensor(queries)
    grid = features.grid
    if q.shape[-1] != decoder.dim or grid.shape[-1] != decoder.dim:
        raise ConfigurationError(
            f"decoder width {decoder.dim} vs queries {q.shape[-1]} / features {grid.shape[-1]}"
        )
    lead = grid.shape[:-2]
    if q.shape[:-2] != lead:
        q = nm.add(nm.zeros(lead + q.shape[-2:]), q)
    pos = nm.Tensor(features.pos)
    for block in decoder.blocks:
        q = block(q, grid, pos)
    return q


class BoxHead(Module):
    """Two-layer MLP to 9 outputs: human box, object box (cxcywh) and confidence."""

    def __init__(self, dim, rng):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(dim, dim, rng))
        self.fc2 = self.child("fc2", Linear(dim, 9, rng))
        # the confidence output has no training signal of its own; start it
        # at exactly 0.5 so it is neutral at inference unless trained
        self.fc2.w.data[:, 8] = 0.0


def box_head(head, decoded):
    out = nm.sigmoid(head.fc2(nm.gelu(head.fc1(decoded))))
    return out[..., 0:4], out[..., 4:8], out[..., 8]


def classify(cls_proj, decoded, text_embeddings, temperature):
    """Per-category scores ``sigmoid(cos(P_cls h, t_v) / tau)``, shape ``(..., N, V)``."""
    projected = cls_proj(decoded)
    if np.any(np.linalg.norm(projected.data, axis=-1) <= nm.NORM_EPS):
        raise DegenerateInputError("projected query feature has zero norm")
    text = np.asarray(nm.as_tensor(text_embeddings).data, dtype=np.float64)
    norms = np.linalg.norm(text, axis=-1, keepdims=True)
    if np.any(norms <= nm.NORM_EPS):
        raise DegenerateInputError("text embedding has zero norm")
    text = nm.Tensor(text / norms)
    cos = nm.matmul(nm.l2_normalize(projected), nm.transpose(text))
    return nm.sigmoid(nm.div(cos, temperature))


def inference_score(class_score, confidence, gamma):
    """Final ranking score ``s * c**gamma``; works on floats and arrays."""
    return class_score * confidence**gamma


@dataclass
class DetectionSet:
    human_boxes: nm.Tensor
    object_boxes: nm.Tensor
    confidence: nm.Tensor
    class_scores: nm.Tensor
    decoded: nm.Tensor
    category_ids: list
    selections: list = field(default_factory=list)


class Net(Module):
    def __init__(self, in_dim, dim, heads, enc_blocks, dec_blocks, num_queries, text_dim, rng,
                 temperature=0.1):
        super().__init__()
        self.encoder = self.child("encoder", Encoder(in_dim, dim, heads, enc_blocks, rng))
        self.decoder = self.child("decoder", Decoder(dim, heads, dec_blocks, rng))
        self.query = self.param("query", rng.normal(0.0, 1.0, (num_queries, dim)))
        self.box_head = self.child("box_head", BoxHead(dim, rng))
        self.cls_proj = self.child("cls_proj", Linear(dim, text_dim, rng))
        self.log_temperature = self.param("log_temperature", np.log(temperature))


class HOIDetector(Module):
    """Prompt bank plus network; parameter names match the checkpoint layout."""

    def __init__(self, cfg, rng):
        super().__init__()
        p, n = cfg.prompt, cfg.net
        if p.D != n.C:
            raise ConfigurationError(f"prompt.D={p.D} must equal net.C={n.C}")
        self.prompt = self.child("prompt", PromptBank(p.L, p.D, p.M, p.k, rng))
        self.net = self.child(
            "net",
            Net(n.C_in, n.C, n.heads, n.enc_blocks, n.dec_blocks, n.N, n.C_t, rng, n.temperature),
        )

    def compose_prompts(self, tokens, hw):
        """Per-image prompt ``(B, L, D)`` and the selections that built it."""
        bank = self.prompt
        if bank.M == 0:
            return bank.common, []
        with nm.no_grad():
            fp = encode(self.net.encoder, tokens, None, hw).fingerprint
        selections, composed = select_batch(bank, fp)
        return composed, selections

    def __call__(self, tokens, hw, text_embeddings, category_ids):
        tokens = nm.as_tensor(tokens)
        prompt, selections = self.compose_prompts(tokens, hw)
        features = encode(self.net.encoder, tokens, prompt, hw)
        decoded = decode(self.net.decoder, self.net.query, features)
        hb, ob, conf = box_head(self.net.box_head, decoded)
        scores = classify(
            self.net.cls_proj, decoded, text_embeddings, nm.exp(self.net.log_temperature)
        )
        return DetectionSet(hb, ob, conf, scores, decoded, list(category_ids), selections)
