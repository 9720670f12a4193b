"""Instruction-conditioned relevance and focus-set turnover."""

from __future__ import annotations

import numpy as np

from .errors import AttentionNormalizationError

ROW_SUM_TOL = 1e-6


def check_rows(attn, tol: float = ROW_SUM_TOL) -> np.ndarray:
    attn = np.atleast_2d(np.asarray(attn, dtype=np.float64))
    sums = attn.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol) or np.any(attn < -tol):
        raise AttentionNormalizationError(
            f"attention rows must be distributions (max row-sum error {np.max(np.abs(sums - 1.0)):.3g})"
        )
    return attn


def relevance_from_attention(attn, epsilon: float = 1e-6) -> np.ndarray:
    """Per-token relevance from a ``(L_q, M)`` language-to-vision attention block.

    Mean attention mass each vision token receives, scaled by the largest mean
    so the most attended token sits at ~1.
    """
    attn = check_rows(attn)
    mean = attn.mean(axis=0)
    return np.clip(mean / (mean.max() + epsilon), 0.0, 1.0)


def top_k_set(scores, k: int) -> frozenset:
    """Indices of the ``k`` largest scores; equal scores favor the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    k = min(int(k), scores.shape[0])
    order = np.argsort(-scores, kind="stable")
    return frozenset(int(i) for i in order[:k])


def focus_shift(s_t, s_prev) -> float:
    """Jaccard distance between two focus sets (0 when both are empty)."""
    s_t, s_prev = set(s_t), set(s_prev)
    union = s_t | s_prev
    if not union:
        return 0.0
    return 1.0 - len(s_t & s_prev) / len(union)


def default_focus_k(num_tokens: int) -> int:
    return max(1, -(-num_tokens // 10))
