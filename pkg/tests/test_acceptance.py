"""Acceptance criteria 1-10.

Each criterion is a function returning ``(passed, detail)``; the pytest
wrappers print one PASS/FAIL line per criterion and then assert. Running this
file directly prints the same lines without pytest.
"""

import json
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from oracles import random_small_motion, raycast_correspondence  # noqa: E402

from vlncache import cli  # noqa: E402
from vlncache import simulator as sim  # noqa: E402
from vlncache.accounting import REFERENCE_DIMS, flop_savings, selection_overhead  # noqa: E402
from vlncache.cache import budget_count  # noqa: E402
from vlncache.config import RunConfig  # noqa: E402
from vlncache.gating import fuse  # noqa: E402
from vlncache.geometry import default_intrinsics, relative_pose, remap_token, remap_tokens  # noqa: E402
from vlncache.pipeline import run_episode  # noqa: E402

K = default_intrinsics()
SEEDS = range(5)


def criterion_1():
    table = {(1, 0): 1, (1, 1): 0, (0, 0): 0, (0, 1): 0}
    truth_ok = all(bool(fuse([a], [b])[0]) == bool(v) for (a, b), v in table.items())
    rng = np.random.default_rng(1)
    mv = rng.random((10_000, 196)) < 0.5
    ms = rng.random((10_000, 196)) < 0.5
    fused = np.stack([fuse(a, b) for a, b in zip(mv, ms)])
    oracle = np.array([[a and not b for a, b in zip(ra, rb)] for ra, rb in zip(mv[:200], ms[:200])])
    vectorized = mv.astype(int) * (1 - ms.astype(int)) == 1
    ok = truth_ok and np.array_equal(fused[:200], oracle) and np.array_equal(fused, vectorized)
    return ok, f"truth table {'exact' if truth_ok else 'WRONG'}, 10^4 random masks at M=196 match"


STATIC_TRAJ = {"phases": [{"kind": "Cruising", "steps": 20, "active_label": "plant"}], "start_xy": [2.0, 1.5]}


def criterion_2():
    cfg = RunConfig(scene="corridor", trajectory=STATIC_TRAJ, eta=0.0)
    full = run_episode(cfg, 0).report.steps
    oracle = run_episode(cfg.with_mode("no_cache"), 0).report.steps
    gaps = [float(np.max(np.abs(np.subtract(a.action_scores, b.action_scores)))) for a, b in zip(full, oracle)]
    reused = sum(s.reuse_ratio > 0 for s in full)
    ok = len(gaps) == 20 and max(gaps) <= 1e-6 and reused >= 19
    return ok, f"max |action gap| = {max(gaps):.3g} over 20 steps ({reused} steps with reuse)"


def criterion_3():
    steps = [s for seed in SEEDS for s in run_episode(RunConfig(scene="turn-heavy"), seed).report.steps[1:]]
    mean = float(np.mean([s.delta_r for s in steps]))
    by_phase = {p: float(np.mean([s.delta_r for s in steps if s.phase == p])) for p in ("Exploration", "Cruising")}
    ok = mean > 0 and by_phase["Exploration"] > by_phase["Cruising"]
    return ok, (f"mean delta_r = {mean:.4f}; Exploration {by_phase['Exploration']:.4f} > "
                f"Cruising {by_phase['Cruising']:.4f}")


def criterion_4():
    rng = np.random.default_rng(2024)
    grid = K.grid()
    total = agree = non_adjacent = 0
    for trial in range(100):
        scene, _ = sim.preset(["corridor", "two-room", "turn-heavy"][trial % 3], trial)
        prev, cur = random_small_motion(scene, rng)
        o_prev = sim.render(scene, prev, K, 32)
        o_cur = sim.render(scene, cur, K, 32)
        t_rel = relative_pose(cur, prev)
        truth = raycast_correspondence(scene, K, cur, prev)
        vec = remap_tokens(o_cur.depth, t_rel, K, o_cur.features, o_prev.features, 3)
        for i in np.flatnonzero(truth >= 0):
            got = remap_token(int(i), o_cur.depth, t_rel, K, grid, o_cur.features, o_prev.features, 3)
            assert (got if got is not None else -1) == vec[i]
            total += 1
            if got == truth[i]:
                agree += 1
                continue
            if got is None:
                non_adjacent += 1
                continue
            (r1, c1), (r2, c2) = grid.rowcol(got), grid.rowcol(truth[i])
            non_adjacent += max(abs(r1 - r2), abs(c1 - c2)) > 1
    rate = agree / total
    ok = rate >= 0.99 and non_adjacent == 0
    return ok, f"{agree}/{total} in-view tokens agree ({100 * rate:.2f}%), {non_adjacent} non-adjacent"


def criterion_5():
    v = flop_savings(0.31, **REFERENCE_DIMS)
    return 1.19e10 <= v <= 1.27e10, f"flop_savings(0.31, 28, 196, 3584, 512) = {v:.4e}"


def criterion_6():
    ratio = selection_overhead(196, 3584, 3, 20) / flop_savings(0.31, **REFERENCE_DIMS)
    return ratio < 0.005, f"overhead / savings = {100 * ratio:.3f}%"


def criterion_7():
    checked = 0
    for scene in sim.PRESETS:
        for seed in SEEDS:
            trace = []
            # the pipeline itself raises InvariantViolation on a breach
            run_episode(RunConfig(scene=scene), seed, trace=trace)
            for rec in trace:
                for layer, rho in enumerate(rec["budgets"]):
                    if math.isnan(rho):
                        continue
                    if not (0.0 <= rho <= 0.90) or rec["masks"][layer].sum() > budget_count(rho, K.num_tokens):
                        return False, f"{scene} seed {seed} step {rec['step']} layer {layer}: breach"
                    checked += 1
    return True, f"{checked} (step, layer) budgets within [0, 0.90] and respected, 3 presets x 5 seeds"


SEMANTIC_SCENE = {
    "room": {"x": [0, 10], "y": [0, 6], "height": 3},
    "boxes": [{"center": [5, 4.2], "size": [1, 1, 1.5], "label": "left_crate"},
              {"center": [5, 1.8], "size": [1, 1, 1.5], "label": "right_crate"}],
}
SEMANTIC_TRAJ = {"phases": [{"kind": "Cruising", "steps": 6, "active_label": "left_crate"},
                            {"kind": "Goal", "steps": 6, "active_label": "right_crate"}],
                 "start_xy": [1.0, 3.0]}


def criterion_8():
    cfg = RunConfig(scene=SEMANTIC_SCENE, trajectory=SEMANTIC_TRAJ)
    scene, traj = cfg.build(0)
    trace = []
    steps = run_episode(cfg, 0, trace=trace).report.steps
    boundary = traj.phases[0].steps
    obs = sim.run_episode(scene, traj, K, cfg.model.dim, cfg.eta)
    target = scene.labels.index("right_crate")
    tokens = np.flatnonzero(obs[boundary].labels == target)
    rec = trace[boundary]
    feats, prev = obs[boundary].features, obs[boundary - 1].features
    cos = np.einsum("ij,ij->i", feats[tokens], prev[tokens]) / (
        np.linalg.norm(feats[tokens], axis=1) * np.linalg.norm(prev[tokens], axis=1))
    crossed = (obs[boundary - 1].oracle_relevance[tokens] <= 0.70) & (obs[boundary].oracle_relevance[tokens] > 0.70)
    vetoed = bool(tokens.size) and crossed.all() and rec["m_vis"][tokens].all() and not rec["m"][tokens].any() \
        and not rec["masks"][:, tokens].any() and float(cos.min()) > 0.999
    d = [s.d_sem for s in steps]
    within = [d[t] for t in range(1, len(d)) if t != boundary]
    spike = d[boundary] > float(np.mean(within))
    ok = vetoed and spike
    return ok, (f"{tokens.size} tokens cross tau_abs with cos >= {cos.min():.4f}, all vetoed: {vetoed}; "
                f"D_sem at boundary {d[boundary]:.3f} vs within-phase mean {np.mean(within):.3f}")


def criterion_9():
    def run(mode):
        reps = [run_episode(RunConfig(scene="turn-heavy", mode=mode), s).report for s in SEEDS]
        return (float(np.mean([r.overall["reuse_similarity"] for r in reps])),
                float(np.mean([r.reuse_ratio for r in reps])))

    sim_full, ratio_full = run("full")
    sim_noremap, _ = run("no_remap")
    _, ratio_novis = run("no_visual_gate")
    ok = sim_noremap < sim_full and ratio_novis > ratio_full
    return ok, (f"similarity at reuse sites: no_remap {sim_noremap:.4f} < full {sim_full:.4f}; "
                f"reuse ratio: no_visual_gate {ratio_novis:.4f} > full {ratio_full:.4f}")


def criterion_10():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "cfg.json"
        cfg.write_text(json.dumps({"scene": "turn-heavy", "seeds": [0, 1, 2]}))
        outs = []
        for name in ("a", "b"):
            out = Path(tmp) / name
            code = cli.main(["run", "--config", str(cfg), "--out", str(out), "--format", "csv"])
            outs.append((code, [(out / f"seed{s}.csv").read_bytes() for s in (0, 1, 2)]))
    ok = outs[0][0] == outs[1][0] == 0 and outs[0][1] == outs[1][1]
    return ok, f"3 seeds, CSV outputs {'byte-identical' if ok else 'DIFFER'}"


CRITERIA = [
    (1, "fusion truth table", criterion_1, 1.0),
    (2, "splice exactness", criterion_2, 10.0),
    (3, "reuse-gap sign and phase order", criterion_3, 60.0),
    (4, "remap oracle agreement", criterion_4, 30.0),
    (5, "FLOP model", criterion_5, 1.0),
    (6, "overhead negligibility", criterion_6, 1.0),
    (7, "budget law", criterion_7, 60.0),
    (8, "semantic veto", criterion_8, 10.0),
    (9, "ablation directionality", criterion_9, 120.0),
    (10, "determinism", criterion_10, 20.0),
]


def evaluate(fn, limit):
    start = time.perf_counter()
    passed, detail = fn()
    elapsed = time.perf_counter() - start
    in_time = elapsed < limit
    return passed and in_time, f"{detail} [{elapsed:.2f}s, limit {limit:.0f}s]"


@pytest.mark.parametrize("number,title,fn,limit", CRITERIA, ids=[f"criterion_{c[0]}" for c in CRITERIA])
def test_criterion(number, title, fn, limit, capsys):
    passed, detail = evaluate(fn, limit)
    with capsys.disabled():
        print(f"\n{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
    assert passed, detail


if __name__ == "__main__":
    failures = 0
    for number, title, fn, limit in CRITERIA:
        passed, detail = evaluate(fn, limit)
        failures += not passed
        print(f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
    sys.exit(1 if failures else 0)
