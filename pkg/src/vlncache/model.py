"""Deterministic single-head attention decoder used as the recompute oracle.

Vision tokens only act as keys/values, so each layer's K/V for a token is a
function of that token's feature and position alone. Language tokens are the
queries; their pooled final state drives a small action readout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cache as kv
from .errors import DimensionError
from .semantics import relevance_from_attention

# matrix ids for the counter-based generator
_WQ, _WK, _WV, _WO, _LANG, _READOUT = range(6)
_GLOBAL_LAYER = 0xFFFF


@dataclass(frozen=True)
class ModelSpec:
    layers: int = 4
    dim: int = 32
    d_kv: int = 16
    lang_tokens: int = 6
    seed: int = 0
    rope_base: float = 10000.0
    n_actions: int = 4

    def __post_init__(self):
        if self.layers < 1 or self.lang_tokens < 1 or self.d_kv < 1 or self.n_actions < 1:
            raise ValueError("layers, lang_tokens, d_kv and n_actions must be >= 1")
        if self.dim < self.d_kv:
            raise ValueError("dim must be >= d_kv")
        if self.d_kv % 2:
            raise DimensionError("d_kv must be even for rotary embeddings")


@dataclass(frozen=True, eq=False)
class WeightSet:
    spec: ModelSpec
    w_q: np.ndarray  # (L, D, d_kv)
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # (L, d_kv, D)
    lang: np.ndarray  # (L_q, D)
    readout: np.ndarray  # (D, A)


def _block(seed: int, layer: int, matrix: int, shape, scale: float) -> np.ndarray:
    key = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, layer, matrix]).generate_state(2, np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    out = rng.standard_normal(shape) * scale
    out.setflags(write=False)
    return out


def init_weights(spec: ModelSpec) -> WeightSet:
    D, d, L = spec.dim, spec.d_kv, spec.layers
    scale = 1.0 / math.sqrt(D)

    def stack(matrix, shape):
        out = np.stack([_block(spec.seed, layer, matrix, shape, scale) for layer in range(L)])
        out.setflags(write=False)
        return out

    return WeightSet(
        spec,
        stack(_WQ, (D, d)),
        stack(_WK, (D, d)),
        stack(_WV, (D, d)),
        stack(_WO, (d, D)),
        _block(spec.seed, _GLOBAL_LAYER, _LANG, (spec.lang_tokens, D), scale),
        _block(spec.seed, _GLOBAL_LAYER, _READOUT, (D, spec.n_actions), scale),
    )


def rope_angles(positions, d_kv: int, rope_base: float) -> np.ndarray:
    j = np.arange(d_kv // 2)
    inv_freq = 1.0 / np.power(float(rope_base), 2.0 * j / d_kv)
    return np.asarray(positions, dtype=np.float64)[..., None] * inv_freq


def apply_rope(x, positions, rope_base: float) -> np.ndarray:
    """Rotate coordinate pairs (2j, 2j+1) by ``position / base**(2j/d)``.

    ``x`` is a single vector or a ``(n, d)`` block with one position per row.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    if d % 2:
        raise DimensionError("rotary embedding needs an even dimension")
    ang = rope_angles(positions, d, rope_base)
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def project_vision(weights: WeightSet, tokens: np.ndarray):
    """Fresh post-rotary keys and values for every layer: two ``(L, M, d_kv)`` arrays."""
    spec = weights.spec
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != spec.dim:
        raise DimensionError(f"tokens must be (M, {spec.dim}), got {tokens.shape}")
    pos = np.arange(tokens.shape[0])
    keys = np.stack([apply_rope(tokens @ weights.w_k[l], pos, spec.rope_base) for l in range(spec.layers)])
    values = np.stack([tokens @ weights.w_v[l] for l in range(spec.layers)])
    return keys, values


@dataclass(frozen=True, eq=False)
class CachePlan:
    masks: np.ndarray  # (L, M) bool, per-layer trimmed reuse masks
    remap: np.ndarray  # (M,) aligned index or -1
    budgets: np.ndarray = field(default=None)  # (L,) rho per layer, informational


@dataclass(frozen=True, eq=False)
class StepOutput:
    action_scores: np.ndarray  # (A,)
    attn: np.ndarray  # (L, L_q, M + L_q)
    keys: np.ndarray  # (L, M, d_kv) spliced
    values: np.ndarray
    entropy: np.ndarray  # (L,)
    queries: np.ndarray  # (L, L_q, d_kv) post-rotary language queries


def forward_step(weights: WeightSet, tokens, lang=None, plan: CachePlan | None = None,
                 cache: kv.KvCacheState | None = None, epsilon: float = 1e-6) -> StepOutput:
    spec = weights.spec
    lang = weights.lang if lang is None else np.asarray(lang, dtype=np.float64)
    if lang.ndim != 2 or lang.shape[1] != spec.dim:
        raise DimensionError(f"language block must be (L_q, {spec.dim})")
    fresh_k, fresh_v = project_vision(weights, tokens)
    m = fresh_k.shape[1]
    if plan is not None:
        if cache is None:
            raise ValueError("a cache plan needs a cache")
        if plan.masks.shape != (spec.layers, m):
            raise DimensionError("plan masks must be (L, M)")
    lang_pos = m + np.arange(lang.shape[0])
    scale = 1.0 / math.sqrt(spec.d_kv)
    h = lang.copy()
    keys_out, values_out, attn_out, ent, queries = [], [], [], [], []
    for l in range(spec.layers):
        if plan is not None:
            k_vis, v_vis = kv.splice(plan.masks[l], plan.remap, cache, fresh_k[l], fresh_v[l], l)
        else:
            k_vis, v_vis = fresh_k[l], fresh_v[l]
        q = apply_rope(h @ weights.w_q[l], lang_pos, spec.rope_base)
        k_lang = apply_rope(h @ weights.w_k[l], lang_pos, spec.rope_base)
        v_lang = h @ weights.w_v[l]
        keys = np.concatenate([k_vis, k_lang])
        vals = np.concatenate([v_vis, v_lang])
        p = _softmax(q @ keys.T * scale)
        h = h + (p @ vals) @ weights.w_o[l]
        keys_out.append(k_vis)
        values_out.append(v_vis)
        attn_out.append(p)
        ent.append(kv.attention_entropy(p, epsilon))
        queries.append(q)
    action = h.mean(axis=0) @ weights.readout
    return StepOutput(action, np.stack(attn_out), np.stack(keys_out), np.stack(values_out),
                      np.array(ent), np.stack(queries))


def attention_relevance(weights: WeightSet, queries, vision_keys, epsilon: float = 1e-6) -> np.ndarray:
    """Relevance of each vision token to the instruction.

    Language queries (``(L, L_q, d_kv)``) attend over the vision keys alone
    (``(L, M, d_kv)``); the row-normalized blocks are averaged over layers.
    """
    scale = 1.0 / math.sqrt(weights.spec.d_kv)
    logits = np.einsum("lqd,lmd->lqm", queries, vision_keys) * scale
    block = _softmax(logits).mean(axis=0)
    return relevance_from_attention(block, epsilon)
