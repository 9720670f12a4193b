"""Per-token reuse decisions.

A token is reusable when its aligned counterpart is in view and still looks
the same (visual gate), unless its task relevance is high or moving fast
(semantic veto). A coarser frame-level check can skip the encoder outright.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ScoreRangeError
from .geometry import OUT_OF_VIEW


@dataclass(frozen=True)
class GateConfig:
    tau_vis: float = 0.85
    tau_abs: float = 0.70
    tau_delta: float = 0.30
    tau_frame: float = 0.95
    epsilon: float = 1e-6

    def __post_init__(self):
        vals = (self.tau_vis, self.tau_abs, self.tau_delta, self.tau_frame, self.epsilon)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("gate thresholds must be finite")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not (-1.0 <= self.tau_vis <= 1.0 and -1.0 <= self.tau_frame <= 1.0):
            raise ValueError("cosine thresholds must lie in [-1, 1]")
        if not (0.0 <= self.tau_abs <= 1.0 and 0.0 <= self.tau_delta <= 1.0):
            raise ValueError("relevance thresholds must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class ReuseMasks:
    m_vis: np.ndarray
    m_sem: np.ndarray
    m: np.ndarray
    remap: np.ndarray

    def __post_init__(self):
        if np.any(self.m & (self.remap < 0)):
            raise ValueError("reuse mask selects a token without an aligned index")

    @property
    def reuse_ratio(self) -> float:
        return float(self.m.mean()) if self.m.size else 0.0


def cosine(a, b, epsilon: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot compare vectors of shape {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < epsilon or nb < epsilon:
        return 0.0
    return float(np.dot(a, b) / (na * nb + epsilon))


def cosine_rows(a: np.ndarray, b: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """Row-wise cosine between two ``(M, D)`` arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"cannot compare arrays of shape {a.shape} and {b.shape}")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    out = np.einsum("...d,...d->...", a, b) / (na * nb + epsilon)
    return np.where((na < epsilon) | (nb < epsilon), 0.0, out)


def aligned_similarity(features_t, cached_features, remap, epsilon: float = 1e-6) -> np.ndarray:
    """cos(v_t[i], cached[remap[i]]); NaN where the remap is out of view."""
    remap = np.asarray(remap)
    valid = remap != OUT_OF_VIEW
    sims = cosine_rows(features_t, np.asarray(cached_features)[np.where(valid, remap, 0)], epsilon)
    return np.where(valid, sims, np.nan)


def visual_gate(features_t, cached_features, remap, tau_vis: float, epsilon: float = 1e-6) -> np.ndarray:
    features_t = np.asarray(features_t)
    cached_features = np.asarray(cached_features)
    if features_t.shape != cached_features.shape:
        raise DimensionError("feature grids must share token count and dimension")
    sims = aligned_similarity(features_t, cached_features, remap, epsilon)
    return np.nan_to_num(sims, nan=-np.inf) > tau_vis


def _check_scores(s, name):
    s = np.asarray(s, dtype=np.float64)
    if np.any(~np.isfinite(s)) or np.any(s < 0.0) or np.any(s > 1.0):
        raise ScoreRangeError(f"{name} must lie in [0, 1]")
    return s


def semantic_gate(s_t, s_prev, tau_abs: float, tau_delta: float) -> np.ndarray:
    """Refresh flag: relevance is high now, or changed fast since the last step."""
    s_t = _check_scores(s_t, "s_t")
    s_prev = _check_scores(s_prev, "s_prev")
    if s_t.shape != s_prev.shape:
        raise DimensionError("relevance vectors differ in length")
    return (s_t > tau_abs) | (np.abs(s_t - s_prev) > tau_delta)


def fuse(m_vis, m_sem) -> np.ndarray:
    m_vis = np.asarray(m_vis, dtype=bool)
    m_sem = np.asarray(m_sem, dtype=bool)
    if m_vis.shape != m_sem.shape:
        raise DimensionError("mask lengths differ")
    return m_vis & ~m_sem


def frame_gate(frame_feat_t, frame_feat_prev, tau_frame: float, epsilon: float = 1e-6) -> bool:
    """True when the pooled frame features are close enough to skip the encoder."""
    return cosine(frame_feat_t, frame_feat_prev, epsilon) > tau_frame


def pooled(features) -> np.ndarray:
    return np.asarray(features, dtype=np.float64).mean(axis=0)
