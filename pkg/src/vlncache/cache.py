"""Per-layer key/value store, cross-frame splice and entropy-driven reuse budgets."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DimensionError, MaskRemapInconsistency, StaleWriteError
from .semantics import check_rows

BUDGET_MODES = ("layer", "global")


@dataclass(frozen=True)
class BudgetConfig:
    rho_min: float = 0.0
    rho_max: float = 0.90
    alpha: float = 0.5
    mode: str = "layer"

    def __post_init__(self):
        if not (0.0 <= self.rho_min <= self.rho_max <= 1.0):
            raise ValueError("need 0 <= rho_min <= rho_max <= 1")
        if not (self.alpha >= 0.0 and math.isfinite(self.alpha)):
            raise ValueError("alpha must be finite and non-negative")
        if self.mode not in BUDGET_MODES:
            raise ValueError(f"budget mode must be one of {BUDGET_MODES}")


@dataclass(frozen=True, eq=False)
class KvCacheState:
    keys: np.ndarray  # (L, M, d_kv), post-rotary
    values: np.ndarray  # (L, M, d_kv)
    features: np.ndarray  # (M, D) encoder features of the last written step
    step: int

    def __post_init__(self):
        if self.keys.shape != self.values.shape or self.keys.ndim != 3:
            raise DimensionError("key and value blocks must share shape (L, M, d_kv)")
        if self.features.ndim != 2 or self.features.shape[0] != self.keys.shape[1]:
            raise DimensionError("feature cache must have one row per token")
        for arr in (self.keys, self.values, self.features):
            arr.setflags(write=False)

    @property
    def num_layers(self) -> int:
        return self.keys.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.keys.shape[1]

    def equals(self, other: "KvCacheState") -> bool:
        return (
            self.step == other.step
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
            and np.array_equal(self.features, other.features)
        )


def layer_budget(entropy: float, cfg: BudgetConfig) -> float:
    if cfg.mode == "global":
        return cfg.rho_max
    return float(np.clip(cfg.rho_max - cfg.alpha * entropy, cfg.rho_min, cfg.rho_max))


def attention_entropy(attn, epsilon: float = 1e-6) -> float:
    """Mean row entropy of an attention block, normalized by ln(number of keys)."""
    attn = check_rows(attn)
    n = attn.shape[-1]
    if n < 2:
        return 0.0
    h = -(attn * np.log(attn + epsilon)).sum(axis=-1).mean()
    return float(np.clip(h / math.log(n), 0.0, 1.0))


def budget_count(rho: float, num_tokens: int) -> int:
    """floor(rho * M), robust to products like 0.29 * 100 = 28.999..."""
    return int(math.floor(rho * num_tokens + 1e-9))


def enforce_budget(m, align_scores, rho: float) -> np.ndarray:
    """Trim the reuse mask to at most floor(rho * M) tokens, keeping the most similar ones."""
    m = np.asarray(m, dtype=bool)
    cap = budget_count(rho, m.shape[0])
    if int(m.sum()) <= cap:
        return m.copy()
    scores = np.where(m, np.nan_to_num(np.asarray(align_scores, dtype=np.float64), nan=-np.inf), -np.inf)
    keep = np.argsort(-scores, kind="stable")[:cap]
    out = np.zeros_like(m)
    out[keep] = True
    return out & m


def splice(m, remap, cache: KvCacheState, fresh_k, fresh_v, layer: int):
    """Per-position choice between the aligned cached entry and the fresh projection."""
    m = np.asarray(m, dtype=bool)
    remap = np.asarray(remap)
    if fresh_k.shape != cache.keys.shape[1:] or fresh_v.shape != cache.values.shape[1:]:
        raise DimensionError("fresh blocks do not match cache shape")
    bad = m & ((remap < 0) | (remap >= cache.num_tokens))
    if np.any(bad):
        raise MaskRemapInconsistency(f"tokens {np.flatnonzero(bad).tolist()} reuse without a valid index")
    src = np.where(m, remap, 0)
    k_hat = np.where(m[:, None], cache.keys[layer][src], fresh_k)
    v_hat = np.where(m[:, None], cache.values[layer][src], fresh_v)
    return k_hat, v_hat


def new_cache(keys, values, features, step: int = 0) -> KvCacheState:
    return KvCacheState(np.array(keys, dtype=np.float64), np.array(values, dtype=np.float64),
                        np.array(features, dtype=np.float64), int(step))


def update_cache(cache: KvCacheState, keys, values, features, step: int, *,
                 changed=None) -> KvCacheState:
    """Write the spliced blocks for ``step``.

    With ``changed`` (bool per token) only those positions are written and the
    rest are carried over from ``cache``. Callers must flag every position
    whose content moved, which includes reused tokens with a non-identity
    remap; under that rule both write policies give the same state.
    """
    if step <= cache.step:
        raise StaleWriteError(f"write for step {step} after step {cache.step}")
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.shape != cache.keys.shape or values.shape != cache.values.shape:
        raise DimensionError("spliced blocks do not match cache shape")
    if np.shape(features) != cache.features.shape:
        raise DimensionError("feature cache shape changed")
    if changed is None:
        return replace(cache, keys=keys.copy(), values=values.copy(),
                       features=np.array(features, dtype=np.float64), step=int(step))
    changed = np.asarray(changed, dtype=bool)
    new_k = np.array(cache.keys)
    new_v = np.array(cache.values)
    new_k[:, changed] = keys[:, changed]
    new_v[:, changed] = values[:, changed]
    return replace(cache, keys=new_k, values=new_v, features=np.array(features, dtype=np.float64),
                   step=int(step))


def changed_positions(masks_per_layer, remap) -> np.ndarray:
    """Positions whose cache entry differs from the stored one in at least one layer."""
    masks = np.atleast_2d(np.asarray(masks_per_layer, dtype=bool))
    remap = np.asarray(remap)
    identity = remap == np.arange(remap.shape[0])
    return np.any(~masks | ~identity[None, :], axis=0)


# ---------------------------------------------------------------------------
# snapshots: u32 little-endian header length, UTF-8 JSON header, then
# little-endian float32 blocks keys, values, features in C order.

_MAGIC = b"VLNC"


def save_snapshot(cache: KvCacheState, path) -> None:
    header = {
        "format": "vlncache-snapshot",
        "version": 1,
        "dtype": "<f4",
        "step": cache.step,
        "layers": cache.num_layers,
        "tokens": cache.num_tokens,
        "d_kv": int(cache.keys.shape[2]),
        "dim": int(cache.features.shape[1]),
        "blocks": ["keys", "values", "features"],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for arr in (cache.keys, cache.values, cache.features):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_snapshot(path) -> KvCacheState:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError("not a vlncache snapshot")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + n])
    off = 8 + n
    L, M, d, D = header["layers"], header["tokens"], header["d_kv"], header["dim"]
    blocks = []
    for shape in ((L, M, d), (L, M, d), (M, D)):
        count = int(np.prod(shape))
        blocks.append(np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float64))
        off += 4 * count
    return KvCacheState(blocks[0], blocks[1], blocks[2], int(header["step"]))
