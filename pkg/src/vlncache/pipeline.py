"""Per-step caching loop over a simulated episode.

Each step: frame gate, remap, visual and semantic gates, fusion, per-layer
budget trim, splice inside the decoder, cache write, metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gating, semantics, simulator
from .accounting import StepMetrics, aggregate_episode, flop_savings, reuse_gap
from .cache import budget_count, enforce_budget, layer_budget, new_cache, update_cache
from .config import RunConfig
from .errors import InvariantViolation
from .geometry import relative_pose, remap_tokens
from .model import CachePlan, attention_relevance, forward_step, init_weights, project_vision


@dataclass
class EpisodeResult:
    seed: int
    config: RunConfig
    report: object  # EpisodeReport
    final_cache: object  # KvCacheState


def _check_budget(step, layer, count, rho, m, budget):
    if not (budget.rho_min - 1e-12 <= rho <= budget.rho_max + 1e-12):
        raise InvariantViolation("budget-range", f"step {step} layer {layer}: rho={rho}")
    if count > budget_count(rho, m):
        raise InvariantViolation("budget-cap", f"step {step} layer {layer}: {count} > floor({rho}*{m})")


def run_episode(config: RunConfig, seed: int, observations=None, trace: list | None = None) -> EpisodeResult:
    """Run one seeded episode under ``config.mode``.

    ``observations`` may be supplied to reuse a rendered episode across modes.
    When ``trace`` is a list, one dict per step with the per-token gate
    outputs is appended to it.
    """
    sw = config.switches
    gates, budget, spec, k = config.gates, config.budget, config.model, config.intrinsics
    eps = gates.epsilon
    if observations is None:
        scene, traj = config.build(seed)
        observations = simulator.run_episode(scene, traj, k, spec.dim, config.eta)
    weights = init_weights(spec)
    m_tokens = k.num_tokens
    focus_k = config.focus_k or semantics.default_focus_k(m_tokens)
    reuse_allowed = sw["cache"] and not config.force_refresh

    cache = None
    prev_obs = None
    s_prev = None
    prev_queries = None
    prev_entropy = np.zeros(spec.layers)
    metrics = []
    for t, obs in enumerate(observations):
        feats_true = obs.features
        bypass = False
        if reuse_allowed and config.frame_gate and cache is not None:
            bypass = gating.frame_gate(gating.pooled(feats_true), gating.pooled(cache.features),
                                       gates.tau_frame, eps)
        feats = cache.features if bypass else feats_true

        fresh_k, _ = project_vision(weights, feats)
        if config.relevance_source == "oracle":
            s_t = obs.oracle_relevance
        elif prev_queries is not None:
            s_t = attention_relevance(weights, prev_queries, fresh_k, eps)
        else:
            s_t = None

        plan = None
        m_vis = m_sem = fused = None
        masks = np.zeros((spec.layers, m_tokens), dtype=bool)
        budgets = [float("nan")] * spec.layers
        remap = None
        if reuse_allowed and cache is not None:
            t_rel = relative_pose(obs.pose, prev_obs.pose)
            if sw["remap"]:
                remap = remap_tokens(obs.depth, t_rel, k, feats, cache.features, config.k_window, eps)
            else:
                remap = np.arange(m_tokens)
            align = gating.aligned_similarity(feats, cache.features, remap, eps)
            if sw["visual_gate"]:
                m_vis = np.nan_to_num(align, nan=-np.inf) > gates.tau_vis
            else:
                m_vis = remap >= 0
            if sw["semantic_gate"] and s_t is not None and s_prev is not None:
                m_sem = gating.semantic_gate(s_t, s_prev, gates.tau_abs, gates.tau_delta)
            else:
                m_sem = np.zeros(m_tokens, dtype=bool)
            fused = gating.fuse(m_vis, m_sem)
            for layer in range(spec.layers):
                rho = layer_budget(float(prev_entropy[layer]), budget)
                masks[layer] = enforce_budget(fused, align, rho)
                _check_budget(t, layer, int(masks[layer].sum()), rho, m_tokens, budget)
                budgets[layer] = rho
            plan = CachePlan(masks, remap, np.array(budgets))

        out = forward_step(weights, feats, plan=plan, cache=cache, epsilon=eps)
        if config.relevance_source == "attention" and s_t is None:
            s_t = attention_relevance(weights, out.queries, fresh_k, eps)

        # metrics use the true observations regardless of what the cache did
        if prev_obs is None:
            r_pos = r_align = delta_r = d_sem = float("nan")
        else:
            geo = remap_tokens(obs.depth, relative_pose(obs.pose, prev_obs.pose), k, feats_true,
                               prev_obs.features, config.k_window, eps)
            r_pos, r_align, delta_r = reuse_gap(feats_true, prev_obs.features, geo, eps)
            d_sem = semantics.focus_shift(semantics.top_k_set(s_t, focus_k), semantics.top_k_set(s_prev, focus_k))
        reused_any = masks.any(axis=0)
        if reused_any.any():
            sims = gating.cosine_rows(feats_true[reused_any], cache.features[remap[reused_any]], eps)
            reuse_sim = float(sims.mean())
        else:
            reuse_sim = float("nan")
        if trace is not None:
            trace.append({"step": t, "bypass": bool(bypass), "remap": remap, "m_vis": m_vis, "m_sem": m_sem,
                          "m": fused, "masks": masks.copy(), "relevance": s_t, "budgets": list(budgets)})
        counts = masks.sum(axis=1)
        ratio = float(counts.mean() / m_tokens)

        metrics.append(StepMetrics(
            step=t, phase=obs.phase, r_pos=r_pos, r_align=r_align, delta_r=delta_r, d_sem=d_sem,
            reuse_ratio=ratio, flops_saved=flop_savings(ratio, spec.layers, m_tokens, spec.dim, spec.d_kv),
            bypass=bool(bypass), reuse_similarity=reuse_sim,
            layer_budgets=[None if math.isnan(b) else b for b in budgets],
            layer_reuse_counts=[int(c) for c in counts],
            entropy=[float(h) for h in out.entropy],
            action_scores=[float(a) for a in out.action_scores],
        ))

        if cache is None:
            cache = new_cache(out.keys, out.values, feats, step=t)
        else:
            cache = update_cache(cache, out.keys, out.values, feats, t)
        prev_obs, s_prev, prev_queries, prev_entropy = obs, s_t, out.queries, out.entropy

    return EpisodeResult(seed, config, aggregate_episode(metrics), cache)
