"""Cross-frame KV cache reuse for navigation transformers.

Tokens from the previous frame are matched to the current one through depth
and relative pose, then reused only when they look the same and the
instruction's focus on them has not changed.
"""

from .accounting import flop_savings, memory_footprint, reuse_gap, selection_overhead
from .cache import BudgetConfig, KvCacheState, enforce_budget, layer_budget, splice
from .config import MODES, RunConfig, load_config
from .errors import *  # noqa: F401,F403
from .gating import GateConfig, frame_gate, fuse, semantic_gate, visual_gate
from .geometry import OUT_OF_VIEW, Intrinsics, PoseSE3, remap_token, remap_tokens
from .model import ModelSpec, forward_step, init_weights
from .pipeline import run_episode
from .simulator import PRESETS, preset, render

__version__ = "0.1.0"
