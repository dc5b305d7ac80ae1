"""Interaction-aware prompt generation.

A :class:`PromptBank` holds a common prompt ``P_C`` (L x D) and ``M``
rank-one interaction prompts, each stored as a pair ``(u_i, v_i)`` with
``u_i`` of length L and ``v_i`` of length D. The interaction prompt is

    P_IT^i = (u_i v_i^T) * P_C        (elementwise)

and its key is ``g(P_IT^i)`` where ``g`` is a two-layer MLP on the flattened
prompt. For an image fingerprint ``f`` the bank scores every key by cosine
similarity, keeps the ``k`` best and returns their similarity-weighted sum.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import numeric as nm
from .errors import DegenerateInputError, ParameterError
from .layers import Linear, Module


class KeyMLP(Module):
    """Flattened prompt (L*D) -> D -> D with a GELU in between."""

    def __init__(self, length, dim, rng):
        super().__init__()
        self.fc1 = Linear(length * dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)
        # flat names keep the checkpoint layout short: w1, b1, w2, b2
        self._params = {"w1": self.fc1.w, "b1": self.fc1.b, "w2": self.fc2.w, "b2": self.fc2.b}

    def __call__(self, flat):
        return self.fc2(nm.gelu(self.fc1(flat)))


class PromptBank(Module):
    def __init__(self, length, dim, num_prompts, k, rng, rank=1):
        super().__init__()
        if num_prompts < 0 or length < 1 or dim < 1:
            raise ParameterError("prompt bank needs L, D >= 1 and M >= 0")
        if num_prompts and not 1 <= k <= num_prompts:
            raise ParameterError(f"selection count k={k} must lie in [1, M={num_prompts}]")
        self.L, self.D, self.M, self.k = length, dim, num_prompts, k
        self.common = self.param("common", rng.normal(0.0, 0.02, (length, dim)))
        if num_prompts:
            std = 0.5 / math.sqrt(rank)
            self.u = self.param("u", rng.normal(0.0, std, (num_prompts, length)))
            self.v = self.param("v", rng.normal(0.0, std, (num_prompts, dim)))
            self.key_mlp = self.child("key_mlp", KeyMLP(length, dim, rng))
        else:
            self.u = self.v = self.key_mlp = None

    @property
    def interaction_parameter_count(self):
        """Scalars spent on the interaction-specific part: M * (L + D)."""
        return 0 if not self.M else self.u.size + self.v.size

    def _check_index(self, i):
        if not 0 <= i < self.M:
            raise ParameterError(f"prompt index {i} outside [0, {self.M})")


def interaction_prompt(bank, i):
    bank._check_index(i)
    return nm.hadamard(nm.outer(bank.u[i], bank.v[i]), bank.common)


def interaction_prompts(bank):
    """All M interaction prompts stacked as an (M, L, D) tensor."""
    m, L, D = bank.M, bank.L, bank.D
    low_rank = nm.mul(nm.reshape(bank.u, (m, L, 1)), nm.reshape(bank.v, (m, 1, D)))
    return nm.mul(low_rank, bank.common)


def prompt_key(bank, i):
    bank._check_index(i)
    flat = nm.reshape(interaction_prompt(bank, i), (1, bank.L * bank.D))
    return nm.reshape(bank.key_mlp(flat), (bank.D,))


def prompt_keys(bank, prompts=None):
    prompts = interaction_prompts(bank) if prompts is None else prompts
    return bank.key_mlp(nm.reshape(prompts, (bank.M, bank.L * bank.D)))


@dataclass
class PromptSelection:
    chosen_indices: list
    weights: list
    composed: nm.Tensor = field(repr=False)


def select_and_compose(bank, fingerprint):
    """Select the top-k prompts for one fingerprint and compose ``P_IA``."""
    f = nm.as_tensor(fingerprint)
    selections, _ = select_batch(bank, nm.reshape(f, (1, f.shape[0])))
    return selections[0]


def select_batch(bank, fingerprints):
    """Batched selection for ``(B, D)`` fingerprints.

    Returns the per-image :class:`PromptSelection` list and the stacked
    ``(B, L, D)`` prompt tensor. Fingerprints are treated as constants; the
    top-k choice is a hard decision, so gradients reach only the selected
    prompts (through both their weights and their content).
    """
    fp = fingerprints.data if isinstance(fingerprints, nm.Tensor) else np.asarray(fingerprints, float)
    norms = np.linalg.norm(fp, axis=-1, keepdims=True)
    if np.any(norms <= nm.NORM_EPS):
        raise DegenerateInputError("fingerprint norm below 1e-12")
    b = fp.shape[0]
    prompts = interaction_prompts(bank)
    keys = nm.l2_normalize(prompt_keys(bank, prompts))
    weights = nm.matmul(nm.Tensor(fp / norms), nm.transpose(keys))  # (B, M)

    chosen = np.array([[i for i, _ in nm.topk(weights.data[r], bank.k)] for r in range(b)])
    w_sel = nm.getitem(weights, (np.arange(b)[:, None], chosen))  # (B, k)
    p_sel = nm.getitem(prompts, chosen)  # (B, k, L, D)
    composed = nm.sum_(nm.mul(nm.reshape(w_sel, (b, bank.k, 1, 1)), p_sel), axis=1)

    selections = [
        PromptSelection(
            chosen_indices=[int(i) for i in chosen[r]],
            weights=[float(x) for x in w_sel.data[r]],
            composed=composed[r],
        )
        for r in range(b)
    ]
    return selections, composed


def selection_entropy(history):
    """Shannon entropy (nats) of how often each prompt index was chosen."""
    if not history:
        raise ParameterError("selection_entropy needs at least one selection")
    counts = Counter(i for sel in history for i in _indices(sel))
    p = np.array(list(counts.values()), dtype=float)
    p /= p.sum()
    return float(-(p * np.log(p)).sum())


def _indices(sel):
    return sel.chosen_indices if isinstance(sel, PromptSelection) else sel
