"""Run configuration: a single JSON document with every knob defaulted."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .cache import BudgetConfig
from .errors import ConfigError
from .gating import GateConfig
from .geometry import Intrinsics, default_intrinsics
from .model import ModelSpec
from .simulator import PRESETS, Phase, TrajectorySpec, build_scene, preset

SWITCHES = ("cache", "remap", "semantic_gate", "visual_gate")
MODES = {
    "full": {"cache": True, "remap": True, "semantic_gate": True, "visual_gate": True},
    "no_cache": {"cache": False, "remap": True, "semantic_gate": True, "visual_gate": True},
    "no_remap": {"cache": True, "remap": False, "semantic_gate": True, "visual_gate": True},
    "no_semantic_gate": {"cache": True, "remap": True, "semantic_gate": False, "visual_gate": True},
    "no_visual_gate": {"cache": True, "remap": True, "semantic_gate": True, "visual_gate": False},
}
RELEVANCE_SOURCES = ("oracle", "attention")


@dataclass(frozen=True)
class RunConfig:
    scene: object = "turn-heavy"  # preset name or inline dict
    trajectory: dict | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    intrinsics: Intrinsics = field(default_factory=default_intrinsics)
    gates: GateConfig = field(default_factory=GateConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    focus_k: int | None = None
    relevance_source: str = "oracle"
    k_window: int = 3
    eta: float = 0.02
    seeds: tuple = (0,)
    mode: str = "full"
    frame_gate: bool = True
    force_refresh: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {sorted(MODES)}", "mode")
        if self.relevance_source not in RELEVANCE_SOURCES:
            raise ConfigError(f"relevance_source must be one of {RELEVANCE_SOURCES}", "relevance_source")
        if isinstance(self.scene, str) and self.scene not in PRESETS:
            raise ConfigError(f"unknown scene preset {self.scene!r}; have {sorted(PRESETS)}", "scene")
        if not isinstance(self.scene, str) and self.trajectory is None:
            raise ConfigError("an inline scene needs an inline trajectory", "trajectory")
        if self.k_window < 0:
            raise ConfigError("k_window must be >= 0", "k_window")
        if not (self.eta >= 0):
            raise ConfigError("eta must be >= 0", "eta")
        if self.focus_k is not None and self.focus_k < 1:
            raise ConfigError("focus_k must be >= 1", "focus_k")
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list", "seeds")

    @property
    def switches(self) -> dict:
        return MODES[self.mode]

    def with_mode(self, mode: str) -> "RunConfig":
        return replace(self, mode=mode)

    def build(self, seed: int):
        """Scene and trajectory for one seed."""
        if isinstance(self.scene, str):
            scene, traj = preset(self.scene, seed)
        else:
            s = self.scene
            scene = build_scene(s["room"], s.get("boxes", ()), s.get("partitions", ()), seed=seed,
                                name=s.get("name", "inline"))
            traj = None
        if self.trajectory is not None:
            traj = trajectory_from_dict(self.trajectory)
        return scene, traj

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("model", "intrinsics", "gates", "budget"):
                v = asdict(v)
            elif f.name == "seeds":
                v = list(v)
            d[f.name] = v
        return d


def trajectory_from_dict(d: dict) -> TrajectorySpec:
    phases = tuple(
        Phase(p["kind"], int(p["steps"]), float(p.get("yaw_deg", 0.0)), float(p.get("translation_m", 0.0)),
              p.get("active_label"))
        for p in d["phases"]
    )
    return TrajectorySpec(phases, tuple(d.get("start_xy", (1.0, 1.0))), float(d.get("start_yaw_deg", 0.0)),
                          float(d.get("camera_height", 1.5)))


_SECTIONS = {"model": ModelSpec, "intrinsics": Intrinsics, "gates": GateConfig, "budget": BudgetConfig}


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", key)
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be an object", key)
            sub_known = {f.name for f in fields(cls)}
            for sub in value:
                if sub not in sub_known:
                    raise ConfigError(f"unknown key {key}.{sub}", sub)
            base = asdict(default_intrinsics()) if cls is Intrinsics else {}
            try:
                kwargs[key] = cls(**{**base, **value})
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}", next(iter(value), key)) from exc
        elif key == "seeds":
            if not isinstance(value, list) or not all(isinstance(s, int) for s in value):
                raise ConfigError("seeds must be a list of integers", key)
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    if "trajectory" in kwargs and kwargs["trajectory"] is not None:
        try:
            trajectory_from_dict(kwargs["trajectory"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"trajectory: {exc}", "trajectory") from exc
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _line_of(text: str, key: str | None) -> int | None:
    if not key:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def load_config(path) -> RunConfig:
    """Parse and validate a config file; errors carry ``path:line:`` prefixes."""
    path = Path(path)
    text = path.read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    try:
        return config_from_dict(raw)
    except ConfigError as exc:
        line = _line_of(text, exc.key)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: {exc}", exc.key) from exc


def set_path(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Override one key, e.g. ``gates.tau_vis``; used by the sweep and CLI flags."""
    d = cfg.to_dict()
    node = d
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"cannot set {dotted}", parts[0])
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown key {dotted}", parts[-1])
    node[parts[-1]] = value
    return config_from_dict(d)
