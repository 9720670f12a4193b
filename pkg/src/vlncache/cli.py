"""Command line entry point: ``vlncache {run,sweep,compare,presets}``.

Exit codes: 0 success, 2 configuration or input error, 3 runtime invariant
violation.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .accounting import PUBLISHED_REFERENCE, REFERENCE_DIMS, cost_model
from .config import MODES, RunConfig, load_config, set_path
from .errors import (ComparisonError, ConfigError, InvariantViolation, RenderHole,
                     TrajectoryOutOfBounds)
from .pipeline import run_episode
from .simulator import PRESETS

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 2, 3
FORMATS = ("csv", "json", "both")
PROVENANCE_KEYS = ("scene", "trajectory", "model", "intrinsics", "eta")


def _jsonable(obj):
    """Recursively convert numpy scalars and replace non-finite floats with None."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def atomic_write(path, text: str) -> None:
    """Write via a temporary sibling and rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def provenance(config: RunConfig, seed: int) -> dict:
    d = config.to_dict()
    out = {k: d[k] for k in PROVENANCE_KEYS}
    out["seed"] = int(seed)
    return _jsonable(out)


def episode_document(config: RunConfig, seed: int, report) -> dict:
    spec, k = config.model, config.intrinsics
    desk = cost_model(spec.layers, k.num_tokens, spec.dim, spec.d_kv, spec.lang_tokens, config.k_window,
                      report.reuse_ratio if math.isfinite(report.reuse_ratio) else 0.0, bytes_per_scalar=4)
    dims = REFERENCE_DIMS
    full = cost_model(dims["L"], dims["M"], dims["D"], dims["d_kv"], 20, 3,
                      PUBLISHED_REFERENCE["token_reuse_ratio"], bytes_per_scalar=2)
    return {
        "seed": int(seed),
        "seeds": list(config.seeds),
        "mode": config.mode,
        "config": config.to_dict(),
        "provenance": provenance(config, seed),
        "steps": [s.to_dict() for s in report.steps],
        "summary": report.to_dict(),
        "cost_model": {"desk": desk, "reference_dims": full},
        "published_reference": PUBLISHED_REFERENCE,
    }


def run_seed(config: RunConfig, seed: int, out_dir, fmt: str) -> dict:
    """Run one seed and write its outputs; returns the per-seed summary."""
    result = run_episode(config, seed)
    out_dir = Path(out_dir)
    if fmt in ("csv", "both"):
        atomic_write(out_dir / f"seed{seed}.csv", result.report.csv_text())
    doc = episode_document(config, seed, result.report)
    if fmt in ("json", "both"):
        atomic_write(out_dir / f"seed{seed}.json", dumps(doc))
    return {"seed": int(seed), **doc["summary"]}


def _mean_of(dicts, key):
    vals = [d[key] for d in dicts if d.get(key) is not None and math.isfinite(d[key])]
    return float(np.mean(vals)) if vals else None


def aggregate_document(config: RunConfig, summaries: list) -> dict:
    summaries = sorted(summaries, key=lambda s: s["seed"])
    fields = ("r_pos", "r_align", "delta_r", "d_sem", "reuse_ratio", "flops_saved", "bypass", "reuse_similarity")
    overall = {f: _mean_of([s["overall"] for s in summaries], f) for f in fields}
    phases = sorted({p for s in summaries for p in s["phase_means"]})
    by_phase = {p: {f: _mean_of([s["phase_means"][p] for s in summaries if p in s["phase_means"]], f)
                    for f in fields} for p in phases}
    return {
        "mode": config.mode,
        "config": config.to_dict(),
        "seeds": [s["seed"] for s in summaries],
        "overall": overall,
        "phase_means": by_phase,
        "per_seed": summaries,
        "published_reference": PUBLISHED_REFERENCE,
    }


def run_config(config: RunConfig, out_dir, fmt: str = "both", workers: int = 1) -> dict:
    """Run every seed (optionally in worker processes) and write the aggregate."""
    seeds = list(config.seeds)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            futures = [pool.submit(run_seed, config, s, out_dir, fmt) for s in seeds]
            summaries = [f.result() for f in futures]
    else:
        summaries = [run_seed(config, s, out_dir, fmt) for s in seeds]
    agg = aggregate_document(config, summaries)
    atomic_write(Path(out_dir) / "aggregate.json", dumps(agg))
    return agg


def compare_reports(a: dict, b: dict) -> dict:
    """Per-step divergence between two per-seed JSON reports of the same episode."""
    if a.get("provenance") != b.get("provenance"):
        diff = sorted(k for k in set(a.get("provenance", {})) | set(b.get("provenance", {}))
                      if a.get("provenance", {}).get(k) != b.get("provenance", {}).get(k))
        raise ComparisonError(f"reports come from different episodes (differ in {diff})")
    if len(a["steps"]) != len(b["steps"]):
        raise ComparisonError("reports have different step counts")
    rows = []
    for sa, sb in zip(a["steps"], b["steps"]):
        gap = float(np.max(np.abs(np.subtract(sa["action_scores"], sb["action_scores"]))))
        rows.append({"step": sa["step"], "phase": sa["phase"], "action_gap": gap,
                     "reuse_delta": float(sa["reuse_ratio"]) - float(sb["reuse_ratio"])})
    return {
        "provenance": a["provenance"],
        "modes": [a.get("mode"), b.get("mode")],
        "steps": rows,
        "max_action_gap": max(r["action_gap"] for r in rows),
        "mean_reuse_delta": float(np.mean([r["reuse_delta"] for r in rows])),
    }


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_set(items, multi: bool):
    out = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        values = [_parse_value(v) for v in raw.split(",")] if multi else _parse_value(raw)
        out.append((key.strip(), values))
    return out


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for key, value in _parse_set(getattr(args, "set", None), multi=False):
        cfg = set_path(cfg, key, value)
    if args.mode:
        cfg = cfg.with_mode(args.mode)
    if args.seed is not None:
        cfg = set_path(cfg, "seeds", [args.seed])
    return cfg


def _print_summary(agg: dict, label: str = "") -> None:
    o = agg["overall"]

    def fmt(v):
        return "nan" if v is None else f"{v:.4f}"

    print(f"{label}mode={agg['mode']} seeds={agg['seeds']} reuse_ratio={fmt(o['reuse_ratio'])} "
          f"delta_r={fmt(o['delta_r'])} reuse_similarity={fmt(o['reuse_similarity'])} bypass={fmt(o['bypass'])}")


def cmd_run(args) -> int:
    cfg = _base_config(args)
    agg = run_config(cfg, args.out, args.format, args.workers)
    _print_summary(agg)
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _base_config(argparse.Namespace(**{**vars(args), "set": None}))
    axes = _parse_set(args.set, multi=True)
    if not axes:
        raise ConfigError("sweep needs at least one --set key=v1,v2,...")
    keys = [k for k, _ in axes]
    table = []
    for combo in itertools.product(*(v for _, v in axes)):
        cfg = base
        for key, value in zip(keys, combo):
            cfg = set_path(cfg, key, value)
        name = "_".join(f"{k}={v}" for k, v in zip(keys, combo))
        agg = run_config(cfg, Path(args.out) / name, args.format, args.workers)
        _print_summary(agg, label=f"{name} ")
        table.append({"point": dict(zip(keys, combo)), "overall": agg["overall"]})
    atomic_write(Path(args.out) / "sweep.json", dumps({"axes": dict(axes), "points": table}))
    return EXIT_OK


def cmd_compare(args) -> int:
    docs = []
    for p in (args.report_a, args.report_b):
        try:
            docs.append(json.loads(Path(p).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{p}: cannot read report: {exc}") from exc
    result = compare_reports(*docs)
    print("step,phase,action_gap,reuse_delta")
    for r in result["steps"]:
        print(f"{r['step']},{r['phase']},{r['action_gap']!r},{r['reuse_delta']!r}")
    print(f"# max_action_gap={result['max_action_gap']!r} mean_reuse_delta={result['mean_reuse_delta']!r}")
    if args.out:
        atomic_write(args.out, dumps(result))
    return EXIT_OK


def cmd_presets(args) -> int:
    for name, (_, description) in PRESETS.items():
        print(f"{name}\t{description}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlncache", description="View-aligned, semantics-aware KV cache reuse.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_set_help):
        p.add_argument("--config", metavar="PATH", help="JSON run configuration")
        p.add_argument("--mode", choices=sorted(MODES), help="ablation mode override")
        p.add_argument("--seed", type=int, metavar="N", help="run only this seed")
        p.add_argument("--out", metavar="DIR", default="runs", help="output directory (default: runs)")
        p.add_argument("--format", choices=FORMATS, default="both")
        p.add_argument("--workers", type=int, default=1, help="parallel seed workers")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help=with_set_help)

    p = sub.add_parser("run", help="run every configured seed")
    common(p, "override one config key, e.g. gates.tau_vis=0.9")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="cartesian sweep over config values")
    common(p, "sweep axis, e.g. gates.tau_vis=0.75,0.85,0.95 (repeatable)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="per-step divergence between two seed reports")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out", metavar="PATH", help="also write the comparison as JSON")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("presets", help="list scene presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConfigError, ComparisonError, TrajectoryOutOfBounds, RenderHole) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
