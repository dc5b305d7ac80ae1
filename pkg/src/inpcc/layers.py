"""Minimal parameter containers and layers on top of :mod:`inpcc.numeric`."""

from __future__ import annotations

import numpy as np

from . import numeric as nm


class Module:
    """Holds named parameters and child modules, in registration order."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def param(self, name, data):
        t = nm.parameter(np.asarray(data, dtype=np.float64), name=name)
        self._params[name] = t
        return t

    def child(self, name, module):
        self._children[name] = module
        return module

    def named_parameters(self, prefix=""):
        out = {}
        for name, t in self._params.items():
            out[prefix + name] = t
        for name, mod in self._children.items():
            out.update(mod.named_parameters(prefix + name + "."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng, bias=True, zero=False):
        super().__init__()
        w = np.zeros((fan_in, fan_out)) if zero else rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out))
        self.w = self.param("w", w)
        self.b = self.param("b", np.zeros(fan_out)) if bias else None

    def __call__(self, x):
        return nm.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim):
        super().__init__()
        self.gain = self.param("gain", np.ones(dim))
        self.bias = self.param("bias", np.zeros(dim))

    def __call__(self, x):
        return nm.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, dim, hidden, rng, zero_out=False):
        super().__init__()
        self.fc1 = self.child("fc1", Linear(dim, hidden, rng))
        self.fc2 = self.child("fc2", Linear(hidden, dim, rng, zero=zero_out))

    def __call__(self, x):
        return self.fc2(nm.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over the last two axes.

    Inputs are ``(..., T, C)``. The attention weights of the latest call are
    kept on ``last_attention`` for inspection (shape ``(..., heads, Tq, Tk)``).
    """

    def __init__(self, dim, heads, rng, zero_out=False):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = self.child("q", Linear(dim, dim, rng))
        self.k = self.child("k", Linear(dim, dim, rng))
        self.v = self.child("v", Linear(dim, dim, rng))
        self.out = self.child("out", Linear(dim, dim, rng, zero=zero_out))
        self.last_attention = None

    def _split(self, x):
        *lead, t, _ = x.shape
        dh = self.dim // self.heads
        x = nm.reshape(x, (*lead, t, self.heads, dh))
        n = x.ndim
        return nm.transpose(x, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))

    def __call__(self, query, key, value):
        q, k, v = self._split(self.q(query)), self._split(self.k(key)), self._split(self.v(value))
        dh = self.dim // self.heads
        scores = nm.scale(nm.matmul(q, nm.transpose(k)), 1.0 / np.sqrt(dh))
        attn = nm.softmax(scores, axis=-1)
        self.last_attention = attn.data
        ctx = nm.matmul(attn, v)
        n = ctx.ndim
        ctx = nm.transpose(ctx, tuple(range(n - 3)) + (n - 2, n - 3, n - 1))
        *lead, t, _, _ = ctx.shape
        return self.out(nm.reshape(ctx, (*lead, t, self.dim)))
